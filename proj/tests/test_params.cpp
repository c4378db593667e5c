#include "test_support.hpp"

#include "scanenc/config.hpp"
#include "scanenc/params.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

using namespace scanenc;

namespace {

std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/scanenc_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("param store rejects duplicates and unknown names") {
  ParamStore<double> ps;
  ps.add("a", Tensor<double>::zeros({2}));
  CHECK_THROWS_AS(ps.add("a", Tensor<double>::zeros({2})), ValueError);
  CHECK_THROWS_AS(ps.at("missing"), ValueError);
  CHECK(ps.total_params() == 2);
}

TEST_CASE("save then load then save is byte-identical") {
  Rng rng(1);
  ParamStore<double> ps;
  ps.add("enc.w", random_normal<double>(rng, {4, 3}));
  ps.add("dec.b", random_normal<double>(rng, {7}));
  ps.add("a0", random_normal<double>(rng, {2, 2, 2}));
  TempFile f1("ckpt1.ngrd"), f2("ckpt2.ngrd");
  save_params(f1.path, ps);

  ParamStore<double> loaded;
  loaded.add("enc.w", Tensor<double>::zeros({4, 3}));
  loaded.add("dec.b", Tensor<double>::zeros({7}));
  loaded.add("a0", Tensor<double>::zeros({2, 2, 2}));
  load_params(f1.path, loaded);
  save_params(f2.path, loaded);
  CHECK(read_file_bytes(f1.path) == read_file_bytes(f2.path));
  CHECK(testsup::max_abs_diff(ps.at("enc.w").value, loaded.at("enc.w").value) == 0.0);
}

TEST_CASE("checkpoint begins with the magic and validates it") {
  ParamStore<double> ps;
  ps.add("x", Tensor<double>::zeros({1}));
  TempFile f("magic.ngrd");
  save_params(f.path, ps);
  auto bytes = read_file_bytes(f.path);
  CHECK(bytes.substr(0, 5) == "NGRD1");

  std::ofstream bad(f.path, std::ios::binary);
  bad << "XXXXX junk";
  bad.close();
  ParamStore<double> target;
  target.add("x", Tensor<double>::zeros({1}));
  CHECK_THROWS_AS(load_params(f.path, target), ValueError);
}

TEST_CASE("dtype and shape mismatches are rejected") {
  TempFile f("dtype.ngrd");
  ParamStore<float> ps32;
  ps32.add("w", Tensor<float>::zeros({3}));
  save_params(f.path, ps32);
  ParamStore<double> ps64;
  ps64.add("w", Tensor<double>::zeros({3}));
  CHECK_THROWS_AS(load_params(f.path, ps64), ValueError);

  TempFile g("shape.ngrd");
  ParamStore<double> src;
  src.add("w", Tensor<double>::zeros({3}));
  save_params(g.path, src);
  ParamStore<double> dst;
  dst.add("w", Tensor<double>::zeros({4}));
  CHECK_THROWS_AS(load_params(g.path, dst), ShapeError);
}

TEST_CASE("records are written in sorted name order") {
  ParamStore<double> ps;
  ps.add("zz", Tensor<double>::full({1}, 1.0));
  ps.add("aa", Tensor<double>::full({1}, 2.0));
  TempFile f("order.ngrd");
  save_params(f.path, ps);
  auto recs = read_checkpoint<double>(f.path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].first == "aa");
  CHECK(recs[1].first == "zz");
}

TEST_CASE("config parses sections, comments, and types") {
  auto cfg = KvConfig::parse_string(
      "# experiment\n"
      "encoder.kind = scan\n"
      "encoder.cycles=4\n"
      "encoder.gamma=2.0  # discount\n"
      "train.resume = true\n"
      "\n");
  CHECK(cfg.get_str("encoder.kind", "") == "scan");
  CHECK(cfg.get_int("encoder.cycles", 0) == 4);
  CHECK(cfg.get_f64("encoder.gamma", 0) == 2.0);
  CHECK(cfg.get_bool("train.resume", false));
  CHECK(cfg.get_int("train.iters", 123) == 123);
  cfg.get_str("train.iters", "");
  cfg.require_all_read();
}

TEST_CASE("config flags unread keys") {
  auto cfg = KvConfig::parse_string("encoder.kind=scan\nencoder.cylces=4\n");
  cfg.get_str("encoder.kind", "");
  try {
    cfg.require_all_read();
    FAIL("expected error");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("encoder.cylces") != std::string::npos);
  }
}

TEST_CASE("config rejects malformed input") {
  CHECK_THROWS_AS(KvConfig::parse_string("novalue\n"), ValueError);
  CHECK_THROWS_AS(KvConfig::parse_string("a=1\na=2\n"), ValueError);
  auto cfg = KvConfig::parse_string("x=abc\nb=maybe\n");
  CHECK_THROWS_AS(cfg.get_f64("x", 0), ValueError);
  CHECK_THROWS_AS(cfg.get_bool("b", false), ValueError);
}

TEST_CASE("config serializes sorted key=value lines") {
  auto cfg = KvConfig::parse_string("b=2\na=1\n");
  CHECK(cfg.serialize() == "a=1\nb=2\n");
  auto round = KvConfig::parse_string(cfg.serialize());
  CHECK(round.serialize() == cfg.serialize());
}
