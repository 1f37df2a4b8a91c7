#include "fedsim/apportion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedsim {

std::vector<std::uint64_t> apportion(std::span<const std::uint64_t> weights,
                                     std::uint64_t total) {
  const unsigned __int128 sum =
      std::accumulate(weights.begin(), weights.end(), static_cast<unsigned __int128>(0));
  if (sum == 0) throw std::invalid_argument("apportion: weights sum to zero");

  std::vector<std::uint64_t> shares(weights.size());
  std::vector<unsigned __int128> remainders(weights.size());
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const unsigned __int128 scaled = static_cast<unsigned __int128>(total) * weights[i];
    shares[i] = static_cast<std::uint64_t>(scaled / sum);
    remainders[i] = scaled % sum;
    assigned += shares[i];
  }

  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainders[a] > remainders[b];
  });
  for (std::uint64_t k = 0; assigned < total; ++k, ++assigned) ++shares[order[k]];
  return shares;
}

std::vector<std::uint64_t> fraction_weights(std::span<const double> fractions) {
  std::vector<std::uint64_t> weights;
  weights.reserve(fractions.size());
  for (double f : fractions) {
    if (!(f >= 0.0) || !std::isfinite(f))
      throw std::invalid_argument("fractions must be finite and nonnegative");
    weights.push_back(static_cast<std::uint64_t>(std::llround(f * 1e6)));
  }
  if (std::all_of(weights.begin(), weights.end(), [](auto w) { return w == 0; }))
    throw std::invalid_argument("fractions are all zero");
  return weights;
}

}  // namespace fedsim
