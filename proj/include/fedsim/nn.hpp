#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/params.hpp"

namespace fedsim {

// Fully connected layer. `in` = 0 means "infer from the previous layer".
struct DenseLayer {
  std::size_t out = 0;
  std::size_t in = 0;
};

struct ReluLayer {};

// 5x5 valid convolution (stride 1) followed by 2x2 max-pooling when `pool`.
// Input and output are (channels, height, width).
struct Conv2dLayer {
  std::size_t out_channels = 0;
  std::size_t kernel = 5;
  bool pool = true;
};

struct FlattenLayer {};

using Layer = std::variant<DenseLayer, ReluLayer, Conv2dLayer, FlattenLayer>;

std::string layer_name(const Layer& layer);

// Layer stack with an implicit terminal softmax. Shapes are checked at
// construction; the last layer must produce num_classes outputs.
class ModelSpec {
 public:
  ModelSpec(std::vector<std::size_t> input_shape, std::vector<Layer> layers, int num_classes);

  // Single dense layer: multinomial logistic regression.
  static ModelSpec softmax_regression(std::size_t num_features, int num_classes);
  // Dense-ReLU-Dense.
  static ModelSpec mlp(std::size_t num_features, std::size_t hidden, int num_classes);
  // Two 5x5 conv blocks with 2x2 pooling, then two dense layers.
  static ModelSpec lenet(std::size_t channels, std::size_t height, std::size_t width,
                         std::size_t conv1, std::size_t conv2, std::size_t hidden,
                         int num_classes);

  const std::vector<std::size_t>& input_shape() const { return input_shape_; }
  std::size_t input_size() const;
  const std::vector<Layer>& layers() const { return layers_; }
  int num_classes() const { return num_classes_; }

  // Shape entering layer i; index layers().size() is the output shape.
  const std::vector<std::size_t>& shape_at(std::size_t i) const { return shapes_[i]; }

  // Parameter names and shapes in the fixed order used by every ParamSet.
  ParamSet zero_params() const;
  bool compatible(const ParamSet& params) const;

 private:
  std::vector<std::size_t> input_shape_;
  std::vector<Layer> layers_;
  int num_classes_;
  std::vector<std::vector<std::size_t>> shapes_;
};

// Weights ~ N(0, 2 / fan_in) from a seeded stream; biases zero.
ParamSet init_params(const ModelSpec& spec, std::uint64_t seed);

// Row-wise class probabilities (B x C).
Matrix forward(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs);

// Argmax of each row of forward(), ties to the lowest class index.
std::vector<Label> predict(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs);

// Label proportions of one minibatch, normalized by its actual length.
struct BatchLabelDist {
  std::vector<double> probs;
};

BatchLabelDist batch_label_dist(std::span<const Label> labels, int num_classes);

inline constexpr double kLogClamp = 1e-12;

// -sum_k log p[k, y_k], summed over the batch, with p clamped to >= 1e-12.
double loss_ce(const Matrix& probs, std::span<const Label> labels);

// Per-sample weight p_b(y_k) / prior(y_k). Throws on a zero-prior label.
std::vector<double> fedsld_weights(std::span<const Label> labels, const PriorDistribution& prior);

// Cross-entropy with each term scaled by its fedsld weight.
double loss_fedsld(const Matrix& probs, std::span<const Label> labels,
                   const PriorDistribution& prior);

// loss_ce + (mu / 2) * ||params - anchor||^2.
double loss_fedprox(const Matrix& probs, std::span<const Label> labels, const ParamSet& params,
                    const ParamSet& anchor, double mu);

// Selects the local batch objective. Holds references; the referents must
// outlive the Objective.
class Objective {
 public:
  enum class Kind { ce, fedsld, fedprox };

  static Objective ce() { return Objective(Kind::ce, nullptr, nullptr, 0.0); }
  static Objective fedsld(const PriorDistribution& prior) {
    return Objective(Kind::fedsld, &prior, nullptr, 0.0);
  }
  static Objective fedprox(const ParamSet& anchor, double mu);

  Kind kind() const { return kind_; }
  const PriorDistribution& prior() const { return *prior_; }
  const ParamSet& anchor() const { return *anchor_; }
  double mu() const { return mu_; }

 private:
  Objective(Kind kind, const PriorDistribution* prior, const ParamSet* anchor, double mu)
      : kind_(kind), prior_(prior), anchor_(anchor), mu_(mu) {}

  Kind kind_;
  const PriorDistribution* prior_;
  const ParamSet* anchor_;
  double mu_;
};

// Batch loss under the objective, evaluated through forward().
double objective_loss(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs,
                      std::span<const Label> labels, const Objective& objective);

struct LossAndGradient {
  double loss = 0.0;
  ParamSet gradient;
};

// One forward/backward pass: the batch loss and its exact gradient.
LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamSet& params,
                                  const Matrix& inputs, std::span<const Label> labels,
                                  const Objective& objective);

ParamSet backward(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs,
                  std::span<const Label> labels, const Objective& objective);

}  // namespace fedsim
