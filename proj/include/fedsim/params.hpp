#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fedsim {

// Dense row-major real tensor of arbitrary rank.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  static Tensor zeros(std::vector<std::size_t> shape);
  std::size_t size() const { return values.size(); }

  bool operator==(const Tensor&) const = default;
};

// Ordered named tensors: the model weights that are broadcast, updated
// locally and averaged. Two sets are congruent when names, shapes and order
// all agree; every arithmetic helper below requires congruence.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor tensor);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t num_values() const;

  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  bool congruent_with(const ParamSet& other) const;
  ParamSet zeros_like() const;

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<Entry> entries_;
};

// Throws std::invalid_argument naming `context` on mismatch.
void require_congruent(const ParamSet& a, const ParamSet& b, const char* context);

// ||a - b||^2 over every tensor.
double squared_distance(const ParamSet& a, const ParamSet& b);

// params - eta * grads; inputs are untouched.
ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double eta);

// Binary layout, one record per tensor, little-endian:
//   u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values[prod(dims)]
std::vector<std::uint8_t> serialize(const ParamSet& params);
ParamSet deserialize(std::span<const std::uint8_t> bytes);
void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

}  // namespace fedsim
