#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace fedsim {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Label = std::int32_t;

// Feature matrix plus integer class labels. Immutable after construction.
class Dataset {
 public:
  Dataset(Matrix features, std::vector<Label> labels, int num_classes);

  const Matrix& features() const { return features_; }
  const std::vector<Label>& labels() const { return labels_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t num_features() const { return static_cast<std::size_t>(features_.cols()); }

  // Rows gathered in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;
  Matrix gather_features(std::span<const std::size_t> indices) const;
  std::vector<Label> gather_labels(std::span<const std::size_t> indices) const;

  std::vector<std::size_t> class_histogram() const;

 private:
  Matrix features_;
  std::vector<Label> labels_;
  int num_classes_;
};

// n_{i,c}: samples of class c held by client i.
class ClientLabelCounts {
 public:
  ClientLabelCounts(std::size_t num_clients, int num_classes);
  ClientLabelCounts(std::vector<std::vector<std::size_t>> rows, int num_classes);

  std::size_t num_clients() const { return rows_.size(); }
  int num_classes() const { return num_classes_; }

  std::size_t& at(std::size_t client, int label) { return rows_.at(client).at(label); }
  std::size_t at(std::size_t client, int label) const { return rows_.at(client).at(label); }
  const std::vector<std::size_t>& row(std::size_t client) const { return rows_.at(client); }

  std::size_t client_total(std::size_t client) const;  // n_i
  std::size_t total() const;                           // n
  std::vector<std::size_t> class_totals() const;

  bool operator==(const ClientLabelCounts&) const = default;

 private:
  std::vector<std::vector<std::size_t>> rows_;
  int num_classes_;
};

// Federation-wide class prior estimated from shared counts.
struct PriorDistribution {
  std::vector<double> probs;

  double operator[](std::size_t c) const { return probs[c]; }
  std::size_t size() const { return probs.size(); }
};

PriorDistribution compute_prior(const ClientLabelCounts& counts);

ClientLabelCounts count_labels(std::span<const std::vector<Label>> shards, int num_classes);

struct BlobSpec {
  int num_classes = 2;
  int num_features = 2;
  std::vector<std::size_t> n_per_class;
  // Class c is centered at separation * e_c when num_classes <= num_features,
  // otherwise at a seeded random direction scaled to length `separation`.
  // Explicit `means` override both.
  double separation = 1.0;
  double noise_std = 1.0;
  std::vector<std::vector<double>> means;
  std::uint64_t seed = 0;
};

std::vector<std::vector<double>> blob_means(const BlobSpec& spec);
Dataset generate_synthetic(const BlobSpec& spec);

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Reads an idx3 image file and an idx1 label file. Pixels are scaled to
// [0, 1] and each image is flattened row-major. num_classes = 0 infers
// max(label) + 1.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, int num_classes = 0);

// Stratified split; per-class test counts come from largest-remainder
// apportionment of round(n * test_fraction) over the class sizes.
std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed);

// Index form of the split, returned as (train indices, test indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split_indices(
    std::span<const Label> labels, int num_classes, double test_fraction, std::uint64_t seed);

}  // namespace fedsim
