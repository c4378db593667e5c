#pragma once

// Named trainable parameters and their binary serialization.
//
// Checkpoint layout (little-endian throughout):
//   magic "NGRD1" (5 bytes), u64 record count, then per record sorted by
//   name: u32 name length, UTF-8 name bytes, u8 dtype tag (0 = f64,
//   1 = f32), u32 rank, u64 extents, raw IEEE-754 values.
// Sorted iteration makes save byte-deterministic: save -> load -> save is
// byte-identical.

#include "scanenc/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace scanenc {

template <class S>
struct Parameter {
  Tensor<S> value;
  Tensor<S> grad;  // empty until a backward pass touches it

  void zero_grad() { grad = Tensor<S>(); }
};

template <class S>
class ParamStore {
 public:
  Parameter<S>& add(const std::string& name, Tensor<S> init) {
    auto [it, fresh] = items_.try_emplace(name);
    if (!fresh) throw ValueError("duplicate parameter name: " + name);
    it->second.value = std::move(init);
    return it->second;
  }

  Parameter<S>& at(const std::string& name) {
    auto it = items_.find(name);
    if (it == items_.end()) throw ValueError("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return items_.count(name) != 0; }
  size_t count() const { return items_.size(); }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : items_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : items_) p.zero_grad();
  }

  // Sorted by name (std::map order).
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::map<std::string, Parameter<S>> items_;
};

namespace detail {

inline void put_bytes(std::FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw ValueError("checkpoint write failed");
}
inline void get_bytes(std::FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n) throw ValueError("checkpoint truncated");
}
template <class T>
void put_pod(std::FILE* f, T v) {
  put_bytes(f, &v, sizeof(T));
}
template <class T>
T get_pod(std::FILE* f) {
  T v;
  get_bytes(f, &v, sizeof(T));
  return v;
}

}  // namespace detail

constexpr char kCheckpointMagic[5] = {'N', 'G', 'R', 'D', '1'};

template <class S>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, double> || std::is_same_v<S, float>,
                "checkpoints hold f64 or f32 tensors");
  return std::is_same_v<S, double> ? 0 : 1;
}

// Writes records in the order given; callers pass name-sorted lists.
template <class S>
void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, const Tensor<S>*>>& records) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw ValueError("cannot open for write: " + path);
  detail::put_bytes(f, kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_pod<std::uint64_t>(f, records.size());
  for (const auto& [name, t] : records) {
    detail::put_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    detail::put_bytes(f, name.data(), name.size());
    detail::put_pod<std::uint8_t>(f, dtype_tag<S>());
    detail::put_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t->rank()));
    for (int d : t->shape()) detail::put_pod<std::uint64_t>(f, static_cast<std::uint64_t>(d));
    detail::put_bytes(f, t->data(), static_cast<size_t>(t->size()) * sizeof(S));
  }
  std::fclose(f);
}

template <class S>
std::vector<std::pair<std::string, Tensor<S>>> read_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw ValueError("cannot open for read: " + path);
  char magic[5];
  detail::get_bytes(f, magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    std::fclose(f);
    throw ValueError("bad checkpoint magic in " + path);
  }
  auto count = detail::get_pod<std::uint64_t>(f);
  std::vector<std::pair<std::string, Tensor<S>>> out;
  out.reserve(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    auto name_len = detail::get_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    detail::get_bytes(f, name.data(), name_len);
    auto tag = detail::get_pod<std::uint8_t>(f);
    if (tag != dtype_tag<S>()) {
      std::fclose(f);
      throw ValueError("dtype mismatch for record " + name + " in " + path);
    }
    auto rank = detail::get_pod<std::uint32_t>(f);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::get_pod<std::uint64_t>(f));
    Tensor<S> t(shape);
    detail::get_bytes(f, t.data(), static_cast<size_t>(t.size()) * sizeof(S));
    out.emplace_back(std::move(name), std::move(t));
  }
  std::fclose(f);
  return out;
}

template <class S>
void save_params(const std::string& path, const ParamStore<S>& store) {
  std::vector<std::pair<std::string, const Tensor<S>*>> recs;
  for (const auto& [name, p] : store) recs.emplace_back(name, &p.value);
  write_checkpoint<S>(path, recs);
}

// Loads values into an existing store; names and shapes must match exactly.
template <class S>
void load_params(const std::string& path, ParamStore<S>& store) {
  auto recs = read_checkpoint<S>(path);
  if (recs.size() != store.count())
    throw ValueError("checkpoint has " + std::to_string(recs.size()) + " records, store has " +
                     std::to_string(store.count()));
  for (auto& [name, t] : recs) {
    Parameter<S>& p = store.at(name);
    if (!p.value.same_shape(t))
      throw ShapeError("shape mismatch for " + name + ": checkpoint " + shape_str(t.shape()) +
                       " vs store " + shape_str(p.value.shape()));
    p.value = std::move(t);
  }
}

}  // namespace scanenc
