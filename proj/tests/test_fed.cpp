#include <doctest.h>

#include <numeric>
#include <sstream>

#include "fedsim/fed.hpp"
#include "fixture.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

ParamSet scalar(double v) {
  ParamSet p;
  p.add("w", Tensor{{1}, {v}});
  return p;
}

FederationConfig small_config(Algorithm a, std::uint64_t seed, int rounds = 3) {
  FederationConfig cfg;
  cfg.rounds = rounds;
  cfg.local_epochs = 2;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  cfg.algorithm = a;
  cfg.seed = seed;
  return cfg;
}

std::string csv(const std::vector<RoundRecord>& records, Algorithm a, std::uint64_t seed) {
  std::ostringstream out;
  write_rounds_csv(out, records, a, seed);
  return out.str();
}

}  // namespace

TEST_CASE("config validation names the field") {
  FederationConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto expect = [](FederationConfig c, const char* field) {
    CHECK_THROWS_WITH(c.validate(), doctest::Contains(field));
  };
  cfg.rounds = 0;
  expect(cfg, "federation.rounds");
  cfg = {};
  cfg.local_epochs = 0;
  expect(cfg, "federation.local_epochs");
  cfg = {};
  cfg.batch_size = 0;
  expect(cfg, "federation.batch_size");
  cfg = {};
  cfg.learning_rate = 0.0;
  expect(cfg, "federation.learning_rate");
  cfg = {};
  cfg.num_clients = 1;
  expect(cfg, "federation.num_clients");
  cfg = {};
  cfg.fedprox_mu = -1.0;
  expect(cfg, "federation.fedprox_mu");
}

TEST_CASE("algorithm and batching names") {
  for (auto a : {Algorithm::fedavg, Algorithm::fedprox, Algorithm::fedsld})
    CHECK(parse_algorithm(to_string(a)) == a);
  CHECK(parse_batching("stratified") == Batching::stratified);
  CHECK_THROWS(parse_algorithm("scaffold"));
}

TEST_CASE("shuffled batches cover the shard") {
  std::vector<std::size_t> idx(70);
  std::iota(idx.begin(), idx.end(), 100);
  std::vector<Label> labels(200, 0);
  Rng rng(1);
  const auto batches = epoch_batches(idx, labels, 1, 32, Batching::shuffle, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 32);
  CHECK(batches[2].size() == 6);
  std::vector<std::size_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  CHECK(all == idx);
}

TEST_CASE("stratified batches are balanced") {
  std::vector<std::size_t> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<Label> labels(64);
  for (int i = 0; i < 64; ++i) labels[i] = i % 4;
  Rng rng(2);
  const auto batches = epoch_batches(idx, labels, 4, 16, Batching::stratified, rng);
  REQUIRE(batches.size() == 4);
  for (const auto& b : batches) {
    std::vector<Label> y;
    for (auto k : b) y.push_back(labels[k]);
    CHECK(oracle::tally_batch(y, 4) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  }
}

TEST_CASE("local update") {
  const auto s = fixture::make({});
  const auto init = init_params(s.model, 0);
  const auto copy = init;
  auto cfg = small_config(Algorithm::fedavg, 0);
  const ClientState state{3, &s.train, s.shards[3].train_indices, 0, 1};
  const auto m = s.shards[3].train_indices.size();
  const auto r = local_update(state, s.model, init, cfg, nullptr);
  CHECK(r.steps == 2 * ((m + 31) / 32));
  CHECK(init == copy);
  CHECK(!(r.params == init));

  // Same key, same result: the client stream depends only on (seed, client, round).
  CHECK(local_update(state, s.model, init, cfg, nullptr).params == r.params);
  ClientState later = state;
  later.round = 2;
  CHECK(!(local_update(later, s.model, init, cfg, nullptr).params == r.params));

  cfg.algorithm = Algorithm::fedprox;
  cfg.fedprox_mu = 0.0;
  CHECK(local_update(state, s.model, init, cfg, nullptr).params == r.params);

  cfg.algorithm = Algorithm::fedsld;
  CHECK_THROWS(local_update(state, s.model, init, cfg, nullptr));
  const PriorDistribution missing{{0.0, 0.4, 0.3, 0.3}};
  CHECK_THROWS_WITH(local_update(state, s.model, init, cfg, &missing),
                    doctest::Contains("zero-prior class encountered"));

  const ClientState empty{0, &s.train, {}, 0, 1};
  CHECK_THROWS(local_update(empty, s.model, init, small_config(Algorithm::fedavg, 0), nullptr));
}

TEST_CASE("aggregation") {
  std::vector<ClientUpdate> same{{0, scalar(0.3), 5}, {1, scalar(0.3), 7}, {2, scalar(0.3), 1}};
  CHECK(aggregate(same).at("w").values[0] == 0.3);

  std::vector<ClientUpdate> two{{0, scalar(0.0), 1}, {1, scalar(4.0), 3}};
  CHECK(aggregate(two).at("w").values[0] == 3.0);

  CHECK_THROWS(aggregate(std::vector<ClientUpdate>{}));
  ParamSet other;
  other.add("v", Tensor{{1}, {1.0}});
  CHECK_THROWS(aggregate(std::vector<ClientUpdate>{{0, scalar(1), 1}, {1, other, 1}}));
  CHECK_THROWS(aggregate(std::vector<ClientUpdate>{{0, scalar(1), 0}, {1, scalar(2), 1}}));
}

TEST_CASE("aggregation properties") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(12);
    std::vector<std::size_t> sizes(n);
    for (auto& v : sizes) v = 1 + rng.below(1000);
    const auto w = aggregation_weights(sizes);
    CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) < 1e-15);

    std::vector<ClientUpdate> updates;
    for (std::size_t i = 0; i < n; ++i) {
      ParamSet p;
      p.add("a", Tensor{{3}, {rng.normal(), rng.normal(), rng.normal()}});
      updates.push_back({static_cast<int>(i), p, sizes[i]});
    }
    const auto avg = aggregate(updates);
    auto shuffled = updates;
    rng.shuffle(std::span<ClientUpdate>(shuffled));
    CHECK(aggregate(shuffled) == avg);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e300, hi = -1e300, exact = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = updates[i].params[0].second.values[j];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        exact += w[i] * v;
      }
      CHECK(avg[0].second.values[j] >= lo);
      CHECK(avg[0].second.values[j] <= hi);
      CHECK(avg[0].second.values[j] == doctest::Approx(exact).epsilon(1e-12));
    }
  }
}

TEST_CASE("evaluation") {
  const auto s = fixture::make({});
  const auto zero = s.model.zero_params();
  const auto acc = evaluate(s.model, zero, s.test, s.shards);
  for (std::size_t i = 0; i < s.shards.size(); ++i) {
    std::size_t zeros = 0;
    for (auto k : s.shards[i].test_indices) zeros += s.test.labels()[k] == 0;
    CHECK(acc[i] == static_cast<double>(zeros) / static_cast<double>(s.shards[i].test_indices.size()));
  }
  // Reordering a client's test indices does not change its accuracy.
  auto reversed = s.shards;
  const auto params = init_params(s.model, 5);
  for (auto& sh : reversed) std::reverse(sh.test_indices.begin(), sh.test_indices.end());
  CHECK(evaluate(s.model, params, s.test, reversed) == evaluate(s.model, params, s.test, s.shards));
}

TEST_CASE("run_federation checks its inputs before training") {
  const auto s = fixture::make({});
  auto cfg = small_config(Algorithm::fedsld, 0);
  auto bad = s.counts;
  bad.at(0, 0) += 1;
  CHECK_THROWS_WITH(run_federation(s.model, init_params(s.model, 0), s.federation(), bad, cfg),
                    doctest::Contains("client 0"));
  cfg.rounds = 0;
  CHECK_THROWS(run_federation(s.model, init_params(s.model, 0), s.federation(), s.counts, cfg));
}

TEST_CASE("round records") {
  const auto s = fixture::make({});
  std::vector<int> seen;
  const auto result = run_federation(s.model, init_params(s.model, 1), s.federation(), s.counts,
                                     small_config(Algorithm::fedsld, 1),
                                     [&](const RoundRecord& r) { seen.push_back(r.round); });
  CHECK(seen == std::vector<int>{1, 2, 3});
  REQUIRE(result.records.size() == 3);
  for (const auto& r : result.records) {
    CHECK(r.accuracies.size() == 12);
    for (double a : r.accuracies) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      hits += r.correct[i];
      total += r.test_sizes[i];
    }
    CHECK(r.combined_accuracy() == static_cast<double>(hits) / static_cast<double>(total));
    CHECK(r.train_loss > 0.0);
  }
}

TEST_CASE("fedprox with mu zero reproduces fedavg") {
  const auto s = fixture::make({});
  auto avg = small_config(Algorithm::fedavg, 4);
  auto prox = small_config(Algorithm::fedprox, 4);
  prox.fedprox_mu = 0.0;
  const auto init = init_params(s.model, 4);
  const auto a = run_federation(s.model, init, s.federation(), s.counts, avg);
  const auto b = run_federation(s.model, init, s.federation(), s.counts, prox);
  CHECK(a.final_params == b.final_params);
  for (std::size_t r = 0; r < a.records.size(); ++r) CHECK(a.records[r].same_outcome(b.records[r]));
}

TEST_CASE("worker count does not change results") {
  const auto s = fixture::make({.hidden = 6});
  auto cfg = small_config(Algorithm::fedsld, 2);
  const auto init = init_params(s.model, 2);
  const auto one = run_federation(s.model, init, s.federation(), s.counts, cfg);
  cfg.workers = 5;
  const auto many = run_federation(s.model, init, s.federation(), s.counts, cfg);
  CHECK(one.final_params == many.final_params);
  CHECK(csv(one.records, cfg.algorithm, 2) == csv(many.records, cfg.algorithm, 2));
}

TEST_CASE("fedsld follows fedavg when every batch matches the prior") {
  const auto s = fixture::identical_clients(4, 3, 16, 0);
  auto cfg = small_config(Algorithm::fedavg, 0, 10);
  cfg.num_clients = 3;
  cfg.batch_size = 16;
  cfg.batching = Batching::stratified;
  const auto init = init_params(s.model, 0);
  const auto avg = run_federation(s.model, init, s.federation(), s.counts, cfg);
  cfg.algorithm = Algorithm::fedsld;
  const auto sld = run_federation(s.model, init, s.federation(), s.counts, cfg);
  CHECK(oracle::max_relative_error(avg.final_params, sld.final_params) < 1e-10);
}

TEST_CASE("fedavg learns separable iid data") {
  BlobSpec spec;
  spec.num_classes = 2;
  spec.num_features = 4;
  spec.n_per_class = {600, 600};
  spec.separation = 3.0;
  spec.noise_std = 1.0;
  const auto all = generate_synthetic(spec);
  // The problem itself must support the target accuracy.
  REQUIRE(oracle::nearest_centroid_accuracy(all) >= 0.97);

  auto [train, test] = split_train_test(all, 0.2, 0);
  PartitionPlan plan;
  plan.num_clients = 12;
  plan.shard_fractions.assign(12, 1.0 / 12.0);
  const auto shards = make_partition(plan, train.labels(), test.labels(), 2);
  const auto counts = train_label_counts(shards, train.labels(), 2);
  const auto model = ModelSpec::softmax_regression(4, 2);
  auto cfg = small_config(Algorithm::fedavg, 0, 20);
  cfg.local_epochs = 1;
  cfg.learning_rate = 0.01;
  const auto result = run_federation(model, init_params(model, 0), {train, test, shards}, counts, cfg);
  double best = 0;
  for (const auto& r : result.records) best = std::max(best, r.mean_accuracy());
  CHECK(best >= 0.95);
}

TEST_CASE("rounds csv") {
  RoundRecord r;
  r.round = 1;
  r.train_loss = 0.1;
  r.accuracies = {0.5, 1.0};
  r.correct = {1, 4};
  r.test_sizes = {2, 4};
  std::ostringstream out;
  write_rounds_csv(out, std::vector<RoundRecord>{r}, Algorithm::fedsld, 7);
  CHECK(out.str() ==
        "round,algorithm,seed,train_loss,acc_client_0,acc_client_1,mean_acc,combined_acc\n"
        "1,fedsld,7,0.1,0.5,1,0.75,0.8333333333333334\n");
  CHECK(format_real(1e-20) == "1e-20");
}
