#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "fedsim/nn.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

Matrix uniform_probs(std::size_t B, std::size_t C) {
  return Matrix::Constant(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(C),
                          1.0 / static_cast<double>(C));
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

ParamSet scalar_param(double v) {
  ParamSet p;
  p.add("w", Tensor{{1}, {v}});
  return p;
}

}  // namespace

TEST_CASE("forward of a zero model is uniform") {
  const auto spec = ModelSpec::mlp(4, 5, 3);
  Rng rng(1);
  const Matrix p = forward(spec, spec.zero_params(), random_matrix(rng, 7, 4));
  for (Eigen::Index i = 0; i < p.size(); ++i) CHECK(p.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("forward picks the hot index under identity weights") {
  const auto spec = ModelSpec::softmax_regression(4, 4);
  ParamSet params = spec.zero_params();
  auto& w = params.at("layer0.weight");
  for (std::size_t i = 0; i < 4; ++i) w.values[i * 4 + i] = 5.0;
  Matrix x = Matrix::Identity(4, 4);
  CHECK(predict(spec, params, x) == std::vector<Label>{0, 1, 2, 3});
}

TEST_CASE("forward rows are probability vectors") {
  Rng rng(2);
  for (auto net : {gradcheck::Net::dense, gradcheck::Net::relu, gradcheck::Net::conv2d}) {
    const auto spec = gradcheck::model(net);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Matrix x = random_matrix(rng, 3, static_cast<Eigen::Index>(spec.input_size())) * 10.0;
      const Matrix p = forward(spec, init_params(spec, seed), x);
      REQUIRE(p.rows() == 3);
      REQUIRE(p.cols() == 3);
      for (Eigen::Index i = 0; i < 3; ++i) {
        CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
        CHECK(p.row(i).minCoeff() >= 0.0);
      }
    }
  }
}

TEST_CASE("forward rejects shape mismatches") {
  const auto spec = ModelSpec::mlp(4, 5, 3);
  CHECK_THROWS(forward(spec, spec.zero_params(), Matrix::Zero(2, 5)));
  CHECK_THROWS(forward(spec, ModelSpec::softmax_regression(4, 3).zero_params(), Matrix::Zero(2, 4)));
}

TEST_CASE("model shapes chain") {
  const auto lenet = ModelSpec::lenet(1, 28, 28, 6, 16, 500, 10);
  CHECK(lenet.input_size() == 784);
  CHECK(lenet.shape_at(lenet.layers().size()) == std::vector<std::size_t>{10});
  CHECK_THROWS(ModelSpec({4}, {DenseLayer{5}}, 3));
  CHECK_THROWS(ModelSpec({4}, {DenseLayer{3, 5}}, 3));
  CHECK_THROWS(ModelSpec({4}, {Conv2dLayer{2}}, 3));
  const auto p = ModelSpec::mlp(4, 5, 3).zero_params();
  CHECK(p[0].first == "layer0.weight");
  CHECK(p[0].second.shape == std::vector<std::size_t>{4, 5});
  CHECK(p[1].first == "layer0.bias");
  CHECK(p[2].first == "layer2.weight");
}

TEST_CASE("init is seeded and scaled by fan-in") {
  const auto spec = ModelSpec::mlp(400, 300, 3);
  const auto a = init_params(spec, 3);
  CHECK(a == init_params(spec, 3));
  CHECK(!(a == init_params(spec, 4)));
  const auto& w = a.at("layer0.weight").values;
  double sq = 0;
  for (double v : w) sq += v * v;
  CHECK(sq / static_cast<double>(w.size()) == doctest::Approx(2.0 / 400.0).epsilon(0.02));
  for (double v : a.at("layer0.bias").values) CHECK(v == 0.0);
}

TEST_CASE("batch label distribution") {
  CHECK(batch_label_dist(std::vector<Label>{0, 0, 1, 2}, 4).probs ==
        std::vector<double>{0.5, 0.25, 0.25, 0.0});
  CHECK(batch_label_dist(std::vector<Label>{2, 2, 2}, 3).probs == std::vector<double>{0, 0, 1});
  CHECK_THROWS(batch_label_dist(std::vector<Label>{}, 3));
  CHECK_THROWS(batch_label_dist(std::vector<Label>{3}, 3));
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Label> y(1 + rng.below(50));
    for (auto& v : y) v = static_cast<Label>(rng.below(6));
    const auto d = batch_label_dist(y, 6);
    CHECK(d.probs == oracle::tally_batch(y, 6));
    double s = 0;
    for (double p : d.probs) s += p;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("cross-entropy") {
  Matrix onehot = Matrix::Zero(3, 3);
  onehot(0, 1) = onehot(1, 0) = onehot(2, 2) = 1.0;
  CHECK(loss_ce(onehot, std::vector<Label>{1, 0, 2}) <= 3 * 1.1e-12);
  CHECK(loss_ce(uniform_probs(2, 10), std::vector<Label>{3, 7}) ==
        doctest::Approx(2.0 * std::log(10.0)).epsilon(1e-14));
  const double clamped = loss_ce(onehot, std::vector<Label>{0, 0, 2});
  CHECK(std::isfinite(clamped));
  CHECK(clamped == doctest::Approx(-std::log(kLogClamp)));
}

TEST_CASE("fedsld hand evaluation") {
  const PriorDistribution prior{{0.8, 0.2}};
  const double loss = loss_fedsld(uniform_probs(2, 2), std::vector<Label>{0, 1}, prior);
  CHECK(std::abs(loss - (0.625 + 2.5) * std::numbers::ln2) < 1e-12);
  CHECK(fedsld_weights(std::vector<Label>{0, 1}, prior) == std::vector<double>{0.625, 2.5});
}

TEST_CASE("fedsld rejects zero-prior classes") {
  const PriorDistribution prior{{1.0, 0.0}};
  CHECK_THROWS_WITH(loss_fedsld(uniform_probs(2, 2), std::vector<Label>{0, 1}, prior),
                    doctest::Contains("zero-prior class encountered"));
}

TEST_CASE("fedsld properties") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int C = 2 + static_cast<int>(rng.below(5));
    const std::size_t B = 1 + rng.below(20);
    Matrix logits = random_matrix(rng, static_cast<Eigen::Index>(B), C);
    Matrix probs = logits.array().exp().matrix();
    for (Eigen::Index i = 0; i < probs.rows(); ++i) probs.row(i) /= probs.row(i).sum();
    std::vector<Label> y(B);
    for (auto& v : y) v = static_cast<Label>(rng.below(static_cast<std::uint64_t>(C)));
    PriorDistribution prior;
    for (int c = 0; c < C; ++c) prior.probs.push_back(0.1 + rng.uniform());
    double s = 0;
    for (double p : prior.probs) s += p;
    for (double& p : prior.probs) p /= s;

    const double loss = loss_fedsld(probs, y, prior);
    CHECK(loss >= 0.0);

    // Reversing the batch leaves the loss unchanged up to summation order.
    Matrix rev = probs.colwise().reverse();
    std::vector<Label> ry(y.rbegin(), y.rend());
    CHECK(loss_fedsld(rev, ry, prior) == doctest::Approx(loss).epsilon(1e-13));

    // Doubling the batch keeps p_b and doubles the loss.
    Matrix twice(2 * probs.rows(), probs.cols());
    twice << probs, probs;
    std::vector<Label> yy(y);
    yy.insert(yy.end(), y.begin(), y.end());
    CHECK(loss_fedsld(twice, yy, prior) == doctest::Approx(2.0 * loss).epsilon(1e-13));

    // Uniform prior: each CE term scaled by C * p_b(y_k).
    const PriorDistribution uniform{std::vector<double>(C, 1.0 / C)};
    const auto pb = oracle::tally_batch(y, C);
    double direct = 0;
    for (std::size_t k = 0; k < B; ++k)
      direct -= C * pb[y[k]] * std::log(std::max(probs(static_cast<Eigen::Index>(k), y[k]), kLogClamp));
    CHECK(loss_fedsld(probs, y, uniform) == doctest::Approx(direct).epsilon(1e-12));

    // Prior equal to the batch distribution: weights are one.
    PriorDistribution matched{pb};
    CHECK(std::abs(loss_fedsld(probs, y, matched) - loss_ce(probs, y)) < 1e-12);
  }
}

TEST_CASE("fedprox") {
  const Matrix p = uniform_probs(2, 2);
  const std::vector<Label> y{0, 1};
  const auto a = scalar_param(3.0), b = scalar_param(1.0);
  CHECK(loss_fedprox(p, y, a, b, 0.0) == loss_ce(p, y));
  CHECK(loss_fedprox(p, y, a, a, 5.0) == loss_ce(p, y));
  CHECK(loss_fedprox(p, y, a, b, 2.0) - loss_ce(p, y) == doctest::Approx(4.0));
  ParamSet other;
  other.add("v", Tensor{{1}, {1.0}});
  CHECK_THROWS(loss_fedprox(p, y, a, other, 1.0));
}

TEST_CASE("gradients match finite differences") {
  for (auto net : {gradcheck::Net::dense, gradcheck::Net::relu, gradcheck::Net::conv2d})
    for (auto loss : {gradcheck::Loss::ce, gradcheck::Loss::fedsld, gradcheck::Loss::fedprox})
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        CAPTURE(gradcheck::name(net));
        CAPTURE(gradcheck::name(loss));
        CAPTURE(seed);
        CHECK(gradcheck::max_error(net, loss, seed) < 1e-4);
      }
}

TEST_CASE("gradient reductions") {
  const auto spec = ModelSpec::mlp(4, 6, 2);
  Rng rng(5);
  const Matrix x = random_matrix(rng, 4, 4);
  const std::vector<Label> y{0, 1, 1, 0};
  const auto params = init_params(spec, 1);
  const auto ce = backward(spec, params, x, y, Objective::ce());

  const PriorDistribution balanced{{0.5, 0.5}};
  const auto sld = backward(spec, params, x, y, Objective::fedsld(balanced));
  CHECK(oracle::max_relative_error(ce, sld) < 1e-12);

  const auto prox = backward(spec, params, x, y, Objective::fedprox(params, 0.7));
  CHECK(oracle::max_relative_error(ce, prox) < 1e-12);

  const auto lg = loss_and_gradient(spec, params, x, y, Objective::ce());
  CHECK(lg.loss == objective_loss(spec, params, x, y, Objective::ce()));
  CHECK(lg.gradient == ce);
}

TEST_CASE("sgd step") {
  ParamSet p, g;
  p.add("w", Tensor{{2}, {1.0, 2.0}});
  g.add("w", Tensor{{2}, {0.5, -0.5}});
  const auto next = sgd_step(p, g, 0.1);
  CHECK(next.at("w").values[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(next.at("w").values[1] == doctest::Approx(2.05).epsilon(1e-15));
  CHECK(p.at("w").values == std::vector<double>{1.0, 2.0});
  CHECK(sgd_step(p, g, 0.0) == p);
  ParamSet h;
  h.add("w", Tensor{{3}, {0, 0, 0}});
  CHECK_THROWS(sgd_step(p, h, 0.1));
}

TEST_CASE("sgd steps depend on where the gradient is taken") {
  // f(w) = w^4: two steps differ from one step on the sum of the gradients
  // taken at the starting point.
  auto grad = [](const ParamSet& p) { return scalar_param(4.0 * std::pow(p.at("w").values[0], 3)); };
  const auto w0 = scalar_param(1.0);
  const auto w1 = sgd_step(w0, grad(w0), 0.1);
  const auto w2 = sgd_step(w1, grad(w1), 0.1);
  ParamSet doubled = grad(w0);
  doubled.at("w").values[0] *= 2.0;
  CHECK(!(w2 == sgd_step(w0, doubled, 0.1)));
}

TEST_CASE("param serialization round trip") {
  const auto spec = gradcheck::model(gradcheck::Net::conv2d);
  const auto params = init_params(spec, 9);
  const auto bytes = serialize(params);
  CHECK(deserialize(bytes) == params);
  // First record: u32 name length then the name.
  CHECK(bytes[0] == params[0].first.size());
  CHECK(std::string(bytes.begin() + 4, bytes.begin() + 4 + static_cast<long>(params[0].first.size())) ==
        params[0].first);

  const auto path = std::filesystem::temp_directory_path() / "fedsim_params.bin";
  save_params(params, path);
  CHECK(load_params(path) == params);
  std::filesystem::remove(path);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS(deserialize(truncated));
}

TEST_CASE("param sets reject duplicate names") {
  ParamSet p;
  p.add("w", Tensor{{1}, {1.0}});
  CHECK_THROWS(p.add("w", Tensor{{1}, {2.0}}));
  CHECK(squared_distance(scalar_param(3.0), scalar_param(1.0)) == 4.0);
}
