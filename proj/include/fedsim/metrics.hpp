#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

#include "fedsim/fed.hpp"

namespace fedsim {

struct BestRound {
  double value = 0.0;
  int round = 0;
};

// Best (over rounds) mean of per-client accuracies; the mean is unweighted
// unless `weight_by_test_size`. Earliest round wins ties.
BestRound bmcta(std::span<const RoundRecord> records, bool weight_by_test_size = false);

// Best (over rounds) accuracy on the union of client test sets. Correct
// counts are recovered as round(acc_i * m_i), so the ratio is exact.
BestRound bta(std::span<const RoundRecord> records, std::span<const std::size_t> test_sizes);

struct DensityEstimate {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
};

inline constexpr double kMinBandwidth = 1e-3;
inline constexpr std::size_t kDefaultGridPoints = 512;

// Gaussian KDE of client accuracies on a uniform grid over [0, 1].
// Bandwidth is Scott's rule, sd * N^(-1/5) with the sample standard
// deviation, floored at 1e-3. The grid values are rescaled so their
// trapezoid integral is exactly one.
DensityEstimate kde_fairness(std::span<const double> accuracies,
                             std::size_t grid_points = kDefaultGridPoints);

double trapezoid(std::span<const double> x, std::span<const double> y);

struct MetricsSummary {
  double bmcta = 0.0;
  int bmcta_round = 0;
  double bta = 0.0;
  int bta_round = 0;
  std::vector<double> final_accuracies;
};

MetricsSummary summarize(std::span<const RoundRecord> records, bool weight_by_test_size = false);

nlohmann::json to_json(const MetricsSummary& summary);

// grid,density
void write_kde_csv(std::ostream& out, const DensityEstimate& kde);

}  // namespace fedsim
