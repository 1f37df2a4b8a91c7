#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedsim/nn.hpp"

namespace fedsim {

namespace {

void check_batch(const Matrix& probs, std::span<const Label> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw std::invalid_argument("loss: " + std::to_string(probs.rows()) + " prediction rows but " +
                                std::to_string(labels.size()) + " labels");
  for (Label y : labels)
    if (y < 0 || y >= probs.cols())
      throw std::invalid_argument("loss: label " + std::to_string(y) + " out of range");
}

double neg_log(double p) { return -std::log(std::max(p, kLogClamp)); }

}  // namespace

BatchLabelDist batch_label_dist(std::span<const Label> labels, int num_classes) {
  if (labels.empty()) throw std::invalid_argument("batch_label_dist: empty batch");
  BatchLabelDist dist;
  dist.probs.assign(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (Label y : labels) {
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("batch_label_dist: label " + std::to_string(y) + " out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  const auto B = static_cast<double>(labels.size());
  for (std::size_t c = 0; c < counts.size(); ++c) dist.probs[c] = static_cast<double>(counts[c]) / B;
  return dist;
}

double loss_ce(const Matrix& probs, std::span<const Label> labels) {
  check_batch(probs, labels);
  double loss = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k)
    loss += neg_log(probs(static_cast<Eigen::Index>(k), labels[k]));
  return loss;
}

std::vector<double> fedsld_weights(std::span<const Label> labels, const PriorDistribution& prior) {
  const auto dist = batch_label_dist(labels, static_cast<int>(prior.size()));
  std::vector<double> weights;
  weights.reserve(labels.size());
  for (Label y : labels) {
    const double p = prior[static_cast<std::size_t>(y)];
    if (!(p > 0.0))
      throw std::invalid_argument("zero-prior class encountered: label " + std::to_string(y) +
                                  " has no mass in the shared prior");
    weights.push_back(dist.probs[static_cast<std::size_t>(y)] / p);
  }
  return weights;
}

double loss_fedsld(const Matrix& probs, std::span<const Label> labels,
                   const PriorDistribution& prior) {
  check_batch(probs, labels);
  if (prior.size() != static_cast<std::size_t>(probs.cols()))
    throw std::invalid_argument("loss_fedsld: prior has " + std::to_string(prior.size()) +
                                " classes, predictions have " + std::to_string(probs.cols()));
  const auto weights = fedsld_weights(labels, prior);
  double loss = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k)
    loss += weights[k] * neg_log(probs(static_cast<Eigen::Index>(k), labels[k]));
  return loss;
}

double loss_fedprox(const Matrix& probs, std::span<const Label> labels, const ParamSet& params,
                    const ParamSet& anchor, double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("loss_fedprox: mu must be >= 0");
  require_congruent(params, anchor, "loss_fedprox");
  return loss_ce(probs, labels) + 0.5 * mu * squared_distance(params, anchor);
}

Objective Objective::fedprox(const ParamSet& anchor, double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("fedprox: mu must be >= 0");
  return Objective(Kind::fedprox, nullptr, &anchor, mu);
}

}  // namespace fedsim
