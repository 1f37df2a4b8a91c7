#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedsim/apportion.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

Dataset::Dataset(Matrix features, std::vector<Label> labels, int num_classes)
    : features_(std::move(features)), labels_(std::move(labels)), num_classes_(num_classes) {
  if (num_classes_ < 1) throw std::invalid_argument("dataset: num_classes must be positive");
  if (labels_.empty()) throw std::invalid_argument("dataset: at least one sample required");
  if (static_cast<std::size_t>(features_.rows()) != labels_.size())
    throw std::invalid_argument("dataset: feature rows (" + std::to_string(features_.rows()) +
                                ") != labels (" + std::to_string(labels_.size()) + ")");
  for (std::size_t k = 0; k < labels_.size(); ++k) {
    if (labels_[k] < 0 || labels_[k] >= num_classes_)
      throw std::invalid_argument("dataset: label " + std::to_string(labels_[k]) +
                                  " at index " + std::to_string(k) + " out of range");
  }
}

Matrix Dataset::gather_features(std::span<const std::size_t> indices) const {
  Matrix out(static_cast<Eigen::Index>(indices.size()), features_.cols());
  for (std::size_t r = 0; r < indices.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = features_.row(static_cast<Eigen::Index>(indices[r]));
  return out;
}

std::vector<Label> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<Label> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return Dataset(gather_features(indices), gather_labels(indices), num_classes_);
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> hist(static_cast<std::size_t>(num_classes_), 0);
  for (auto y : labels_) ++hist[static_cast<std::size_t>(y)];
  return hist;
}

ClientLabelCounts::ClientLabelCounts(std::size_t num_clients, int num_classes)
    : rows_(num_clients, std::vector<std::size_t>(static_cast<std::size_t>(num_classes), 0)),
      num_classes_(num_classes) {
  if (num_classes < 1) throw std::invalid_argument("label counts: num_classes must be positive");
}

ClientLabelCounts::ClientLabelCounts(std::vector<std::vector<std::size_t>> rows, int num_classes)
    : rows_(std::move(rows)), num_classes_(num_classes) {
  if (num_classes < 1) throw std::invalid_argument("label counts: num_classes must be positive");
  for (const auto& r : rows_) {
    if (r.size() != static_cast<std::size_t>(num_classes))
      throw std::invalid_argument("label counts: row length != num_classes");
  }
}

std::size_t ClientLabelCounts::client_total(std::size_t client) const {
  const auto& r = rows_.at(client);
  return std::accumulate(r.begin(), r.end(), std::size_t{0});
}

std::size_t ClientLabelCounts::total() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < rows_.size(); ++i) n += client_total(i);
  return n;
}

std::vector<std::size_t> ClientLabelCounts::class_totals() const {
  std::vector<std::size_t> totals(static_cast<std::size_t>(num_classes_), 0);
  for (const auto& r : rows_)
    for (std::size_t c = 0; c < r.size(); ++c) totals[c] += r[c];
  return totals;
}

PriorDistribution compute_prior(const ClientLabelCounts& counts) {
  const std::size_t n = counts.total();
  if (n == 0) throw std::invalid_argument("empty federation");
  PriorDistribution prior;
  prior.probs.reserve(static_cast<std::size_t>(counts.num_classes()));
  for (auto column_sum : counts.class_totals())
    prior.probs.push_back(static_cast<double>(column_sum) / static_cast<double>(n));
  return prior;
}

ClientLabelCounts count_labels(std::span<const std::vector<Label>> shards, int num_classes) {
  ClientLabelCounts counts(shards.size(), num_classes);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    for (Label y : shards[i]) {
      if (y < 0 || y >= num_classes)
        throw std::invalid_argument("client " + std::to_string(i) + ": label " +
                                    std::to_string(y) + " out of range [0, " +
                                    std::to_string(num_classes) + ")");
      ++counts.at(i, y);
    }
  }
  return counts;
}

std::vector<std::vector<double>> blob_means(const BlobSpec& spec) {
  const auto C = static_cast<std::size_t>(spec.num_classes);
  const auto d = static_cast<std::size_t>(spec.num_features);
  if (!spec.means.empty()) {
    if (spec.means.size() != C) throw std::invalid_argument("blob spec: means count != num_classes");
    for (const auto& m : spec.means)
      if (m.size() != d) throw std::invalid_argument("blob spec: mean length != num_features");
    return spec.means;
  }
  std::vector<std::vector<double>> means(C, std::vector<double>(d, 0.0));
  if (C <= d) {
    for (std::size_t c = 0; c < C; ++c) means[c][c] = spec.separation;
    return means;
  }
  Rng rng(stream_seed(spec.seed, Stream::synthetic, 0xfeedULL));
  for (auto& m : means) {
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (auto& v : m) {
        v = rng.normal();
        norm += v * v;
      }
    }
    norm = std::sqrt(norm);
    for (auto& v : m) v *= spec.separation / norm;
  }
  return means;
}

Dataset generate_synthetic(const BlobSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("blob spec: num_classes must be >= 2");
  if (spec.num_features < 1) throw std::invalid_argument("blob spec: num_features must be >= 1");
  if (spec.n_per_class.size() != static_cast<std::size_t>(spec.num_classes))
    throw std::invalid_argument("blob spec: n_per_class length != num_classes");
  if (std::any_of(spec.n_per_class.begin(), spec.n_per_class.end(), [](auto n) { return n == 0; }))
    throw std::invalid_argument("blob spec: every class needs at least one sample");
  if (!(spec.noise_std >= 0.0)) throw std::invalid_argument("blob spec: noise_std must be >= 0");

  const auto means = blob_means(spec);
  const std::size_t total =
      std::accumulate(spec.n_per_class.begin(), spec.n_per_class.end(), std::size_t{0});
  Matrix features(static_cast<Eigen::Index>(total), spec.num_features);
  std::vector<Label> labels;
  labels.reserve(total);

  Eigen::Index row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    Rng rng(stream_seed(spec.seed, Stream::synthetic, static_cast<std::uint64_t>(c)));
    for (std::size_t k = 0; k < spec.n_per_class[static_cast<std::size_t>(c)]; ++k, ++row) {
      for (int f = 0; f < spec.num_features; ++f)
        features(row, f) = means[static_cast<std::size_t>(c)][static_cast<std::size_t>(f)] +
                           spec.noise_std * rng.normal();
      labels.push_back(c);
    }
  }
  return Dataset(std::move(features), std::move(labels), spec.num_classes);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split_indices(
    std::span<const Label> labels, int num_classes, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("split: test_fraction must be in (0, 1)");

  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(num_classes));
  for (std::size_t k = 0; k < labels.size(); ++k) pools.at(static_cast<std::size_t>(labels[k])).push_back(k);

  std::vector<std::uint64_t> sizes;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    if (pools[c].size() == 1)
      throw std::invalid_argument("split: class " + std::to_string(c) +
                                  " has fewer than 2 samples; cannot stratify");
    sizes.push_back(pools[c].size());
  }
  const auto total_test =
      static_cast<std::uint64_t>(std::llround(static_cast<double>(labels.size()) * test_fraction));
  const auto test_counts = apportion(sizes, total_test);

  std::vector<std::size_t> train, test;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    auto& pool = pools[c];
    Rng rng(stream_seed(seed, Stream::split, c));
    rng.shuffle(std::span<std::size_t>(pool));
    test.insert(test.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(test_counts[c]));
    train.insert(train.end(), pool.begin() + static_cast<std::ptrdiff_t>(test_counts[c]), pool.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed) {
  auto [train, test] = stratified_split_indices(ds.labels(), ds.num_classes(), test_fraction, seed);
  return {ds.subset(train), ds.subset(test)};
}

}  // namespace fedsim
