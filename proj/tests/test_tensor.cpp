#include "test_support.hpp"

#include "scanenc/tensor.hpp"

#include <cmath>
#include <set>

using namespace scanenc;

TEST_CASE("shape bookkeeping") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.size() == 24);
  CHECK(t.dim(-1) == 4);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(t.dim(3), ShapeError);
  CHECK(shape_str({2, 3}) == "[2,3]");
}

TEST_CASE("from checks data length") {
  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  CHECK(t[3] == 4.0);
}

TEST_CASE("reshape shares storage, clone does not") {
  auto t = Tensor<double>::from({4}, {1, 2, 3, 4});
  auto r = t.reshaped({2, 2});
  r[0] = 9.0;
  CHECK(t[0] == 9.0);
  auto c = t.clone();
  c[0] = 7.0;
  CHECK(t[0] == 9.0);
  CHECK_THROWS_AS(t.reshaped({3}), ShapeError);
}

TEST_CASE("allocation accounting tracks live and peak bytes") {
  std::int64_t base = alloc_stats::current_bytes();
  alloc_stats::reset_peak();
  {
    Tensor<double> a({1000});
    CHECK(alloc_stats::current_bytes() == base + 8000);
    Tensor<double> b({500});
    CHECK(alloc_stats::peak_bytes() >= base + 12000);
  }
  CHECK(alloc_stats::current_bytes() == base);
}

TEST_CASE("all_finite flags NaN and inf") {
  auto t = Tensor<double>::from({3}, {1.0, 2.0, 3.0});
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
  t[1] = INFINITY;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng uniform stays in range and fills it") {
  Rng rng(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("rng uniform_int covers every value") {
  Rng rng(11);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    auto v = rng.uniform_int(3, 7);
    CHECK(v >= 3);
    CHECK(v <= 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("rng normal has roughly standard moments") {
  Rng rng(13);
  double sum = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("trunc_normal respects the clip") {
  Rng rng(17);
  for (int i = 0; i < 20000; ++i) CHECK(std::abs(rng.trunc_normal(0.02)) <= 0.04 + 1e-12);
}

TEST_CASE("rng split streams are deterministic and independent") {
  Rng a(42), b(42);
  auto s1 = a.split(3), s2 = b.split(3), s3 = b.split(4);
  CHECK(s1.next_u64() == s2.next_u64());
  Rng c(42);
  CHECK(c.split(3).next_u64() != s3.next_u64());
}

TEST_CASE("mix_seed is deterministic and stream-sensitive") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(mix_seed(1, 2) != mix_seed(2, 2));
}
