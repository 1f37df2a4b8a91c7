#include "fedsim/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <stdexcept>

namespace fedsim {

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  const std::size_t n =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  return Tensor{std::move(shape), std::vector<double>(n, 0.0)};
}

void ParamSet::add(std::string name, Tensor tensor) {
  for (const auto& [existing, _] : entries_)
    if (existing == name) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  const std::size_t n = std::accumulate(tensor.shape.begin(), tensor.shape.end(), std::size_t{1},
                                        std::multiplies<>());
  if (n != tensor.values.size())
    throw std::invalid_argument("parameter '" + name + "': shape does not match value count");
  entries_.emplace_back(std::move(name), std::move(tensor));
}

std::size_t ParamSet::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("no parameter named '" + name + "'");
}

Tensor& ParamSet::at(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

bool ParamSet::congruent_with(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape != other.entries_[i].second.shape) return false;
  }
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : entries_) out.add(name, Tensor::zeros(t.shape));
  return out;
}

void require_congruent(const ParamSet& a, const ParamSet& b, const char* context) {
  if (!a.congruent_with(b))
    throw std::invalid_argument(std::string(context) + ": parameter sets are not congruent");
}

double squared_distance(const ParamSet& a, const ParamSet& b) {
  require_congruent(a, b, "squared_distance");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a[i].second.values;
    const auto& y = b[i].second.values;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = x[k] - y[k];
      sum += d * d;
    }
  }
  return sum;
}

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double eta) {
  require_congruent(params, grads, "sgd_step");
  ParamSet out = params;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& w = out[i].second.values;
    const auto& g = grads[i].second.values;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= eta * g[k];
  }
  return out;
}

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint64_t bits = 0;
  if constexpr (sizeof(T) == 8) {
    bits = std::bit_cast<std::uint64_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint64_t uint(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < width; ++b) v |= std::uint64_t{bytes_[pos_ + b]} << (8 * b);
    pos_ += width;
    return v;
  }

  double real() { return std::bit_cast<double>(uint(8)); }

  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("parameter file truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const ParamSet& params) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, t] : params) {
    put_le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_le(out, static_cast<std::uint64_t>(d));
    for (double v : t.values) put_le(out, v);
  }
  return out;
}

ParamSet deserialize(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  ParamSet params;
  while (!in.done()) {
    const auto name_len = in.uint(4);
    std::string name = in.text(name_len);
    const auto rank = in.uint(4);
    std::vector<std::size_t> shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(in.uint(8));
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values) v = in.real();
    params.add(std::move(name), std::move(t));
  }
  return params;
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  const auto bytes = serialize(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ParamSet load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return deserialize(bytes);
}

}  // namespace fedsim
