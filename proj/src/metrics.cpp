#include "fedsim/metrics.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace fedsim {

namespace {

// Strictly-greater update keeps the earliest round on ties.
template <typename F>
BestRound best_over_rounds(std::span<const RoundRecord> records, F&& score) {
  if (records.empty()) throw std::invalid_argument("metrics: no round records");
  BestRound best{score(records.front()), records.front().round};
  for (const auto& r : records.subspan(1)) {
    const double v = score(r);
    if (v > best.value) best = {v, r.round};
  }
  return best;
}

}  // namespace

BestRound bmcta(std::span<const RoundRecord> records, bool weight_by_test_size) {
  return best_over_rounds(records, [&](const RoundRecord& r) {
    if (r.accuracies.empty()) throw std::invalid_argument("bmcta: round without accuracies");
    if (!weight_by_test_size) return r.mean_accuracy();
    return r.combined_accuracy();
  });
}

BestRound bta(std::span<const RoundRecord> records, std::span<const std::size_t> test_sizes) {
  if (test_sizes.empty()) throw std::invalid_argument("bta: test shard sizes missing");
  std::size_t total = 0;
  for (auto m : test_sizes) {
    if (m == 0) throw std::invalid_argument("bta: zero test shard size");
    total += m;
  }
  return best_over_rounds(records, [&](const RoundRecord& r) {
    if (r.accuracies.size() != test_sizes.size())
      throw std::invalid_argument("bta: accuracy vector length != number of test shards");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test_sizes.size(); ++i)
      hits += static_cast<std::size_t>(
          std::llround(r.accuracies[i] * static_cast<double>(test_sizes[i])));
    return static_cast<double>(hits) / static_cast<double>(total);
  });
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

DensityEstimate kde_fairness(std::span<const double> accuracies, std::size_t grid_points) {
  if (accuracies.size() < 2) throw std::invalid_argument("kde: need at least 2 accuracies");
  if (grid_points < 2) throw std::invalid_argument("kde: need at least 2 grid points");
  const auto n = static_cast<double>(accuracies.size());
  const double mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));

  DensityEstimate kde;
  kde.bandwidth = std::max(sd * std::pow(n, -0.2), kMinBandwidth);
  const double h = kde.bandwidth;
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));

  kde.grid.resize(grid_points);
  kde.density.resize(grid_points);
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = static_cast<double>(g) / static_cast<double>(grid_points - 1);
    double sum = 0.0;
    for (double a : accuracies) {
      const double z = (x - a) / h;
      sum += std::exp(-0.5 * z * z);
    }
    kde.grid[g] = x;
    kde.density[g] = norm * sum;
  }
  // Mass that falls outside [0, 1], or between grid points when h is below
  // the grid step, is restored by rescaling.
  const double area = trapezoid(kde.grid, kde.density);
  if (area > 0.0)
    for (auto& d : kde.density) d /= area;
  return kde;
}

MetricsSummary summarize(std::span<const RoundRecord> records, bool weight_by_test_size) {
  if (records.empty()) throw std::invalid_argument("summarize: no round records");
  MetricsSummary s;
  const auto best_mean = bmcta(records, weight_by_test_size);
  const auto best_combined = bta(records, records.back().test_sizes);
  s.bmcta = best_mean.value;
  s.bmcta_round = best_mean.round;
  s.bta = best_combined.value;
  s.bta_round = best_combined.round;
  s.final_accuracies = records.back().accuracies;
  return s;
}

nlohmann::json to_json(const MetricsSummary& summary) {
  return {{"bmcta", summary.bmcta},
          {"bmcta_round", summary.bmcta_round},
          {"bta", summary.bta},
          {"bta_round", summary.bta_round},
          {"final_accuracies", summary.final_accuracies}};
}

void write_kde_csv(std::ostream& out, const DensityEstimate& kde) {
  out << "grid,density\n";
  for (std::size_t i = 0; i < kde.grid.size(); ++i)
    out << format_real(kde.grid[i]) << ',' << format_real(kde.density[i]) << '\n';
}

}  // namespace fedsim
