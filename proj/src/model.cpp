#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

using ConstRowMap = Eigen::Map<const Matrix>;
using RowMap = Eigen::Map<Matrix>;

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

struct ConvGeometry {
  std::size_t in_ch, height, width, out_ch, kernel, conv_h, conv_w, out_h, out_w;
  bool pool;

  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t conv_pixels() const { return conv_h * conv_w; }
};

ConvGeometry conv_geometry(const Conv2dLayer& layer, const std::vector<std::size_t>& in) {
  ConvGeometry g{};
  g.in_ch = in[0];
  g.height = in[1];
  g.width = in[2];
  g.out_ch = layer.out_channels;
  g.kernel = layer.kernel;
  g.conv_h = g.height - g.kernel + 1;
  g.conv_w = g.width - g.kernel + 1;
  g.pool = layer.pool;
  g.out_h = g.pool ? g.conv_h / 2 : g.conv_h;
  g.out_w = g.pool ? g.conv_w / 2 : g.conv_w;
  return g;
}

// Per-sample conv intermediates kept for the backward pass.
struct ConvCache {
  std::vector<Eigen::MatrixXd> cols;
  std::vector<std::vector<std::size_t>> argmax;
};

struct Trace {
  std::vector<Matrix> inputs;  // inputs[i] enters layer i
  std::vector<ConvCache> conv;
  Matrix probs;
};

Eigen::MatrixXd im2col(const double* x, const ConvGeometry& g) {
  Eigen::MatrixXd cols(static_cast<Eigen::Index>(g.patch()),
                       static_cast<Eigen::Index>(g.conv_pixels()));
  for (std::size_t ci = 0; ci < g.in_ch; ++ci)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto r = static_cast<Eigen::Index>((ci * g.kernel + ky) * g.kernel + kx);
        for (std::size_t oy = 0; oy < g.conv_h; ++oy)
          for (std::size_t ox = 0; ox < g.conv_w; ++ox)
            cols(r, static_cast<Eigen::Index>(oy * g.conv_w + ox)) =
                x[(ci * g.height + oy + ky) * g.width + ox + kx];
      }
  return cols;
}

void col2im_add(const Eigen::MatrixXd& cols, const ConvGeometry& g, double* dx) {
  for (std::size_t ci = 0; ci < g.in_ch; ++ci)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const auto r = static_cast<Eigen::Index>((ci * g.kernel + ky) * g.kernel + kx);
        for (std::size_t oy = 0; oy < g.conv_h; ++oy)
          for (std::size_t ox = 0; ox < g.conv_w; ++ox)
            dx[(ci * g.height + oy + ky) * g.width + ox + kx] +=
                cols(r, static_cast<Eigen::Index>(oy * g.conv_w + ox));
      }
}

Matrix conv_forward(const Matrix& in, const ConvGeometry& g, const Tensor& w, const Tensor& b,
                    ConvCache* cache) {
  const auto B = in.rows();
  const std::size_t out_size = g.out_ch * g.out_h * g.out_w;
  Matrix out(B, static_cast<Eigen::Index>(out_size));
  ConstRowMap wm(w.values.data(), static_cast<Eigen::Index>(g.out_ch),
                 static_cast<Eigen::Index>(g.patch()));
  Eigen::Map<const Eigen::VectorXd> bias(b.values.data(), static_cast<Eigen::Index>(g.out_ch));
  if (cache) {
    cache->cols.resize(static_cast<std::size_t>(B));
    cache->argmax.resize(static_cast<std::size_t>(B));
  }

  for (Eigen::Index s = 0; s < B; ++s) {
    Eigen::MatrixXd cols = im2col(in.row(s).data(), g);
    Matrix conv = wm * cols;
    conv.colwise() += bias;
    auto dst = out.row(s);
    if (!g.pool) {
      dst = RowMap(conv.data(), 1, static_cast<Eigen::Index>(out_size));
    } else {
      std::vector<std::size_t> argmax(out_size);
      for (std::size_t co = 0; co < g.out_ch; ++co)
        for (std::size_t py = 0; py < g.out_h; ++py)
          for (std::size_t px = 0; px < g.out_w; ++px) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_at = 0;
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t at = (2 * py + dy) * g.conv_w + 2 * px + dx;
                const double v = conv(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(at));
                if (v > best) {
                  best = v;
                  best_at = co * g.conv_pixels() + at;
                }
              }
            const std::size_t o = (co * g.out_h + py) * g.out_w + px;
            dst(static_cast<Eigen::Index>(o)) = best;
            argmax[o] = best_at;
          }
      if (cache) cache->argmax[static_cast<std::size_t>(s)] = std::move(argmax);
    }
    if (cache) cache->cols[static_cast<std::size_t>(s)] = std::move(cols);
  }
  return out;
}

void softmax_rows(Matrix& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

Trace run_forward(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs,
                  bool keep_cache) {
  if (!spec.compatible(params))
    throw std::invalid_argument("forward: parameters do not match the model");
  if (static_cast<std::size_t>(inputs.cols()) != spec.input_size())
    throw std::invalid_argument("forward: input width " + std::to_string(inputs.cols()) +
                                " does not match model input size " +
                                std::to_string(spec.input_size()) + " at layer 0 (" +
                                (spec.layers().empty() ? std::string("softmax")
                                                       : layer_name(spec.layers()[0])) +
                                ")");
  Trace trace;
  const auto& layers = spec.layers();
  trace.conv.resize(layers.size());
  Matrix act = inputs;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (keep_cache) trace.inputs.push_back(act);
    std::visit(overloaded{
                   [&](const DenseLayer& d) {
                     const auto& w = params.at(weight_name(i));
                     const auto& b = params.at(bias_name(i));
                     ConstRowMap wm(w.values.data(), static_cast<Eigen::Index>(w.shape[0]),
                                    static_cast<Eigen::Index>(d.out));
                     Eigen::Map<const Eigen::RowVectorXd> bias(b.values.data(),
                                                               static_cast<Eigen::Index>(d.out));
                     Matrix z = act * wm;
                     z.rowwise() += bias;
                     act = std::move(z);
                   },
                   [&](const ReluLayer&) { act = act.cwiseMax(0.0); },
                   [&](const Conv2dLayer& c) {
                     const auto g = conv_geometry(c, spec.shape_at(i));
                     act = conv_forward(act, g, params.at(weight_name(i)), params.at(bias_name(i)),
                                        keep_cache ? &trace.conv[i] : nullptr);
                   },
                   [&](const FlattenLayer&) {},
               },
               layers[i]);
  }
  softmax_rows(act);
  trace.probs = std::move(act);
  return trace;
}

}  // namespace

std::string layer_name(const Layer& layer) {
  return std::visit(overloaded{
                        [](const DenseLayer& d) { return "dense(" + std::to_string(d.out) + ")"; },
                        [](const ReluLayer&) { return std::string("relu"); },
                        [](const Conv2dLayer& c) {
                          return "conv2d(" + std::to_string(c.kernel) + "x" +
                                 std::to_string(c.kernel) + ", " +
                                 std::to_string(c.out_channels) + ")";
                        },
                        [](const FlattenLayer&) { return std::string("flatten"); },
                    },
                    layer);
}

ModelSpec::ModelSpec(std::vector<std::size_t> input_shape, std::vector<Layer> layers,
                     int num_classes)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), num_classes_(num_classes) {
  if (num_classes_ < 2) throw std::invalid_argument("model: num_classes must be >= 2");
  if (input_shape_.empty() || product(input_shape_) == 0)
    throw std::invalid_argument("model: input shape must be nonempty");
  shapes_.push_back(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& in = shapes_.back();
    const std::string where = "model layer " + std::to_string(i) + " (" + layer_name(layers_[i]) + ")";
    std::vector<std::size_t> out = std::visit(
        overloaded{
            [&](DenseLayer& d) -> std::vector<std::size_t> {
              if (d.out == 0) throw std::invalid_argument(where + ": zero outputs");
              if (d.in != 0 && d.in != product(in))
                throw std::invalid_argument(where + ": declared input " + std::to_string(d.in) +
                                            " but receives " + std::to_string(product(in)));
              d.in = product(in);
              return {d.out};
            },
            [&](ReluLayer&) -> std::vector<std::size_t> { return in; },
            [&](Conv2dLayer& c) -> std::vector<std::size_t> {
              if (in.size() != 3)
                throw std::invalid_argument(where + ": expects (channels, height, width) input");
              if (c.out_channels == 0 || c.kernel == 0)
                throw std::invalid_argument(where + ": zero channels or kernel");
              if (in[1] < c.kernel || in[2] < c.kernel)
                throw std::invalid_argument(where + ": input smaller than kernel");
              const auto g = conv_geometry(c, in);
              if (g.out_h == 0 || g.out_w == 0)
                throw std::invalid_argument(where + ": pooled output is empty");
              return {g.out_ch, g.out_h, g.out_w};
            },
            [&](FlattenLayer&) -> std::vector<std::size_t> { return {product(in)}; },
        },
        layers_[i]);
    shapes_.push_back(std::move(out));
  }
  const auto& out = shapes_.back();
  if (out.size() != 1 || out[0] != static_cast<std::size_t>(num_classes_))
    throw std::invalid_argument("model: output size " + std::to_string(product(out)) +
                                " != num_classes " + std::to_string(num_classes_));
}

ModelSpec ModelSpec::softmax_regression(std::size_t num_features, int num_classes) {
  return ModelSpec({num_features}, {DenseLayer{static_cast<std::size_t>(num_classes)}},
                   num_classes);
}

ModelSpec ModelSpec::mlp(std::size_t num_features, std::size_t hidden, int num_classes) {
  return ModelSpec({num_features},
                   {DenseLayer{hidden}, ReluLayer{}, DenseLayer{static_cast<std::size_t>(num_classes)}},
                   num_classes);
}

ModelSpec ModelSpec::lenet(std::size_t channels, std::size_t height, std::size_t width,
                           std::size_t conv1, std::size_t conv2, std::size_t hidden,
                           int num_classes) {
  return ModelSpec({channels, height, width},
                   {Conv2dLayer{conv1}, ReluLayer{}, Conv2dLayer{conv2}, ReluLayer{}, FlattenLayer{},
                    DenseLayer{hidden}, ReluLayer{}, DenseLayer{static_cast<std::size_t>(num_classes)}},
                   num_classes);
}

std::size_t ModelSpec::input_size() const { return product(input_shape_); }

ParamSet ModelSpec::zero_params() const {
  ParamSet params;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (const auto* d = std::get_if<DenseLayer>(&layers_[i])) {
      params.add(weight_name(i), Tensor::zeros({d->in, d->out}));
      params.add(bias_name(i), Tensor::zeros({d->out}));
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layers_[i])) {
      params.add(weight_name(i),
                 Tensor::zeros({c->out_channels, shapes_[i][0], c->kernel, c->kernel}));
      params.add(bias_name(i), Tensor::zeros({c->out_channels}));
    }
  }
  return params;
}

bool ModelSpec::compatible(const ParamSet& params) const {
  return zero_params().congruent_with(params);
}

ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamSet params = spec.zero_params();
  Rng rng(stream_seed(seed, Stream::init));
  for (auto& [name, t] : params) {
    if (t.shape.size() < 2) continue;  // biases stay zero
    // dense weights are (in, out); conv weights are (out, in, k, k)
    const std::size_t fan_in = t.shape.size() == 2 ? t.shape[0] : t.shape[1] * t.shape[2] * t.shape[3];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values) v = stddev * rng.normal();
  }
  return params;
}

Matrix forward(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs) {
  return run_forward(spec, params, inputs, false).probs;
}

std::vector<Label> predict(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs) {
  const Matrix probs = forward(spec, params, inputs);
  std::vector<Label> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(r, c) > probs(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<Label>(best);
  }
  return out;
}

double objective_loss(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs,
                      std::span<const Label> labels, const Objective& objective) {
  const Matrix probs = forward(spec, params, inputs);
  switch (objective.kind()) {
    case Objective::Kind::ce:
      return loss_ce(probs, labels);
    case Objective::Kind::fedsld:
      return loss_fedsld(probs, labels, objective.prior());
    case Objective::Kind::fedprox:
      return loss_fedprox(probs, labels, params, objective.anchor(), objective.mu());
  }
  throw std::logic_error("unknown objective");
}

LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamSet& params,
                                  const Matrix& inputs, std::span<const Label> labels,
                                  const Objective& objective) {
  if (static_cast<std::size_t>(inputs.rows()) != labels.size())
    throw std::invalid_argument("backward: " + std::to_string(inputs.rows()) + " inputs but " +
                                std::to_string(labels.size()) + " labels");
  if (objective.kind() == Objective::Kind::fedprox)
    require_congruent(params, objective.anchor(), "backward (fedprox anchor)");

  Trace trace = run_forward(spec, params, inputs, true);
  LossAndGradient result;
  std::vector<double> weights(labels.size(), 1.0);
  switch (objective.kind()) {
    case Objective::Kind::ce:
      result.loss = loss_ce(trace.probs, labels);
      break;
    case Objective::Kind::fedsld:
      weights = fedsld_weights(labels, objective.prior());
      result.loss = loss_fedsld(trace.probs, labels, objective.prior());
      break;
    case Objective::Kind::fedprox:
      result.loss = loss_fedprox(trace.probs, labels, params, objective.anchor(), objective.mu());
      break;
  }

  // d loss / d logits for softmax + weighted cross-entropy: w_k (p_k - onehot(y_k)).
  Matrix delta = trace.probs;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    delta(r, labels[k]) -= 1.0;
    delta.row(r) *= weights[k];
  }

  ParamSet grad = params.zeros_like();
  const auto& layers = spec.layers();
  for (std::size_t i = layers.size(); i-- > 0;) {
    const Matrix& in = trace.inputs[i];
    const bool need_input_grad = i > 0;
    std::visit(
        overloaded{
            [&](const DenseLayer& d) {
              const auto& w = params.at(weight_name(i));
              ConstRowMap wm(w.values.data(), static_cast<Eigen::Index>(d.in),
                             static_cast<Eigen::Index>(d.out));
              RowMap gw(grad.at(weight_name(i)).values.data(), static_cast<Eigen::Index>(d.in),
                        static_cast<Eigen::Index>(d.out));
              Eigen::Map<Eigen::RowVectorXd> gb(grad.at(bias_name(i)).values.data(),
                                                static_cast<Eigen::Index>(d.out));
              gw.noalias() = in.transpose() * delta;
              gb = delta.colwise().sum();
              if (need_input_grad) delta = delta * wm.transpose();
            },
            [&](const ReluLayer&) {
              delta = (in.array() > 0.0).select(delta.array(), 0.0).matrix();
            },
            [&](const Conv2dLayer& c) {
              const auto g = conv_geometry(c, spec.shape_at(i));
              const auto& cache = trace.conv[i];
              const auto& w = params.at(weight_name(i));
              ConstRowMap wm(w.values.data(), static_cast<Eigen::Index>(g.out_ch),
                             static_cast<Eigen::Index>(g.patch()));
              RowMap gw(grad.at(weight_name(i)).values.data(), static_cast<Eigen::Index>(g.out_ch),
                        static_cast<Eigen::Index>(g.patch()));
              Eigen::Map<Eigen::VectorXd> gb(grad.at(bias_name(i)).values.data(),
                                             static_cast<Eigen::Index>(g.out_ch));
              Matrix dx;
              if (need_input_grad) dx = Matrix::Zero(in.rows(), in.cols());
              for (Eigen::Index s = 0; s < in.rows(); ++s) {
                Matrix dconv = Matrix::Zero(static_cast<Eigen::Index>(g.out_ch),
                                            static_cast<Eigen::Index>(g.conv_pixels()));
                if (g.pool) {
                  const auto& argmax = cache.argmax[static_cast<std::size_t>(s)];
                  for (std::size_t o = 0; o < argmax.size(); ++o)
                    dconv.data()[argmax[o]] += delta(s, static_cast<Eigen::Index>(o));
                } else {
                  dconv = ConstRowMap(delta.row(s).data(), dconv.rows(), dconv.cols());
                }
                const auto& cols = cache.cols[static_cast<std::size_t>(s)];
                gw.noalias() += dconv * cols.transpose();
                gb += dconv.rowwise().sum();
                if (need_input_grad) {
                  const Eigen::MatrixXd dcols = wm.transpose() * dconv;
                  col2im_add(dcols, g, dx.row(s).data());
                }
              }
              if (need_input_grad) delta = std::move(dx);
            },
            [&](const FlattenLayer&) {},
        },
        layers[i]);
  }

  if (objective.kind() == Objective::Kind::fedprox) {
    const double mu = objective.mu();
    const ParamSet& anchor = objective.anchor();
    for (std::size_t t = 0; t < grad.size(); ++t) {
      auto& g = grad[t].second.values;
      const auto& w = params[t].second.values;
      const auto& a = anchor[t].second.values;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += mu * (w[k] - a[k]);
    }
  }
  result.gradient = std::move(grad);
  return result;
}

ParamSet backward(const ModelSpec& spec, const ParamSet& params, const Matrix& inputs,
                  std::span<const Label> labels, const Objective& objective) {
  return loss_and_gradient(spec, params, inputs, labels, objective).gradient;
}

}  // namespace fedsim
