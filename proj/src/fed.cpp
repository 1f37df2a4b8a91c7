#include "fedsim/fed.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "fedsim/apportion.hpp"

namespace fedsim {

namespace {

constexpr std::size_t kEvalChunk = 2048;

void sgd_in_place(ParamSet& params, const ParamSet& grads, double eta) {
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& w = params[t].second.values;
    const auto& g = grads[t].second.values;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= eta * g[k];
  }
}

std::vector<std::size_t> shard_histogram(const ClientShard& shard, const Dataset& ds) {
  std::vector<std::size_t> hist(static_cast<std::size_t>(ds.num_classes()), 0);
  for (auto k : shard.train_indices) ++hist[static_cast<std::size_t>(ds.labels()[k])];
  return hist;
}

}  // namespace

std::string_view to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::fedprox: return "fedprox";
    case Algorithm::fedsld: return "fedsld";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  if (name == "fedavg") return Algorithm::fedavg;
  if (name == "fedprox") return Algorithm::fedprox;
  if (name == "fedsld") return Algorithm::fedsld;
  throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

std::string_view to_string(Batching batching) {
  return batching == Batching::shuffle ? "shuffle" : "stratified";
}

Batching parse_batching(std::string_view name) {
  if (name == "shuffle") return Batching::shuffle;
  if (name == "stratified") return Batching::stratified;
  throw std::invalid_argument("unknown batching mode '" + std::string(name) + "'");
}

void FederationConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("federation." + field + ": " + why);
  };
  if (rounds < 1) fail("rounds", "must be >= 1");
  if (local_epochs < 1) fail("local_epochs", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be > 0");
  if (num_clients < 2) fail("num_clients", "must be >= 2");
  if (!(fedprox_mu >= 0.0)) fail("fedprox_mu", "must be >= 0");
  if (workers < 1) fail("workers", "must be >= 1");
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices,
                                                    std::span<const Label> labels,
                                                    int num_classes, std::size_t batch_size,
                                                    Batching batching, Rng& rng) {
  std::vector<std::vector<std::size_t>> batches;
  if (indices.empty()) return batches;
  const std::size_t num_batches = (indices.size() + batch_size - 1) / batch_size;

  if (batching == Batching::shuffle) {
    std::vector<std::size_t> order(indices.begin(), indices.end());
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t stop = std::min(order.size(), start + batch_size);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
  }

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (auto k : indices) by_class[static_cast<std::size_t>(labels[k])].push_back(k);
  batches.assign(num_batches, {});
  const std::vector<std::uint64_t> equal(num_batches, 1);
  std::size_t rotation = 0;
  for (auto& pool : by_class) {
    if (pool.empty()) continue;
    rng.shuffle(std::span<std::size_t>(pool));
    const auto pieces = apportion(equal, pool.size());
    std::size_t offset = 0;
    for (std::size_t j = 0; j < num_batches; ++j) {
      auto& dst = batches[(j + rotation) % num_batches];
      dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(offset),
                 pool.begin() + static_cast<std::ptrdiff_t>(offset + pieces[j]));
      offset += pieces[j];
    }
    rotation += pool.size() % num_batches;
  }
  std::erase_if(batches, [](const auto& b) { return b.empty(); });
  return batches;
}

LocalResult local_update(const ClientState& state, const ModelSpec& spec,
                         const ParamSet& global_params, const FederationConfig& cfg,
                         const PriorDistribution* prior) {
  if (state.indices.empty())
    throw std::invalid_argument("client " + std::to_string(state.client_id) + ": empty shard");
  const Dataset& data = *state.train;

  std::optional<Objective> objective;
  switch (cfg.algorithm) {
    case Algorithm::fedavg:
      objective = Objective::ce();
      break;
    case Algorithm::fedprox:
      objective = Objective::fedprox(global_params, cfg.fedprox_mu);
      break;
    case Algorithm::fedsld:
      if (prior == nullptr) throw std::invalid_argument("fedsld local update requires a prior");
      for (auto k : state.indices) {
        const Label y = data.labels()[k];
        if (!((*prior)[static_cast<std::size_t>(y)] > 0.0))
          throw std::invalid_argument("zero-prior class encountered: client " +
                                      std::to_string(state.client_id) + " holds label " +
                                      std::to_string(y));
      }
      objective = Objective::fedsld(*prior);
      break;
  }

  Rng rng = state.rng();
  LocalResult result{global_params, 0.0, 0};
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const auto batches = epoch_batches(state.indices, data.labels(), data.num_classes(),
                                       cfg.batch_size, cfg.batching, rng);
    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      const Matrix x = data.gather_features(batch);
      const auto y = data.gather_labels(batch);
      const auto lg = loss_and_gradient(spec, result.params, x, y, *objective);
      sgd_in_place(result.params, lg.gradient, cfg.learning_rate);
      epoch_loss += lg.loss;
      ++result.steps;
    }
    result.mean_loss = epoch_loss / static_cast<double>(batches.size());
  }
  return result;
}

std::vector<double> aggregation_weights(std::span<const std::size_t> num_samples) {
  const std::size_t n = std::accumulate(num_samples.begin(), num_samples.end(), std::size_t{0});
  if (n == 0) throw std::invalid_argument("aggregate: total sample count is zero");
  std::vector<double> w;
  w.reserve(num_samples.size());
  for (auto ni : num_samples) w.push_back(static_cast<double>(ni) / static_cast<double>(n));
  return w;
}

ParamSet aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) {
    if (u.num_samples == 0)
      throw std::invalid_argument("aggregate: client " + std::to_string(u.client_id) +
                                  " reports zero samples");
    require_congruent(updates.front().params, u.params, "aggregate");
    ordered.push_back(&u);
  }
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->client_id < b->client_id; });

  std::vector<std::size_t> sizes;
  for (const auto* u : ordered) sizes.push_back(u->num_samples);
  const auto weights = aggregation_weights(sizes);

  const ParamSet& base = ordered.front()->params;
  ParamSet out = base;
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto& dst = out[t].second.values;
    const auto& ref = base[t].second.values;
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double delta = 0.0;
      for (std::size_t i = 1; i < ordered.size(); ++i)
        delta += weights[i] * (ordered[i]->params[t].second.values[k] - ref[k]);
      dst[k] = ref[k] + delta;
    }
  }
  return out;
}

double RoundRecord::mean_accuracy() const {
  if (accuracies.empty()) return 0.0;
  return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) /
         static_cast<double>(accuracies.size());
}

double RoundRecord::combined_accuracy() const {
  const auto hits = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  const auto total = std::accumulate(test_sizes.begin(), test_sizes.end(), std::size_t{0});
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

bool RoundRecord::same_outcome(const RoundRecord& other) const {
  return round == other.round && train_loss == other.train_loss &&
         accuracies == other.accuracies && correct == other.correct &&
         test_sizes == other.test_sizes;
}

std::vector<std::size_t> evaluate_correct(const ModelSpec& spec, const ParamSet& params,
                                          const Dataset& test,
                                          std::span<const ClientShard> shards) {
  std::vector<std::size_t> correct;
  correct.reserve(shards.size());
  for (const auto& shard : shards) {
    std::size_t hits = 0;
    const auto& idx = shard.test_indices;
    for (std::size_t start = 0; start < idx.size(); start += kEvalChunk) {
      const std::span<const std::size_t> chunk(idx.data() + start,
                                               std::min(kEvalChunk, idx.size() - start));
      const auto predictions = predict(spec, params, test.gather_features(chunk));
      for (std::size_t k = 0; k < chunk.size(); ++k)
        if (predictions[k] == test.labels()[chunk[k]]) ++hits;
    }
    correct.push_back(hits);
  }
  return correct;
}

std::vector<double> evaluate(const ModelSpec& spec, const ParamSet& params, const Dataset& test,
                             std::span<const ClientShard> shards) {
  const auto correct = evaluate_correct(spec, params, test, shards);
  std::vector<double> acc;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (shards[i].test_indices.empty())
      throw std::invalid_argument("evaluate: client " + std::to_string(shards[i].client_id) +
                                  " has an empty test shard");
    acc.push_back(static_cast<double>(correct[i]) /
                  static_cast<double>(shards[i].test_indices.size()));
  }
  return acc;
}

FederationResult run_federation(const ModelSpec& spec, const ParamSet& initial,
                                const Federation& federation, const ClientLabelCounts& counts,
                                const FederationConfig& cfg, const RoundObserver& observer) {
  cfg.validate();
  const auto N = static_cast<std::size_t>(cfg.num_clients);
  if (federation.shards.size() != N)
    throw std::invalid_argument("federation: " + std::to_string(federation.shards.size()) +
                                " shards for " + std::to_string(N) + " clients");
  if (counts.num_clients() != N)
    throw std::invalid_argument("federation: label counts cover " +
                                std::to_string(counts.num_clients()) + " clients, expected " +
                                std::to_string(N));
  for (std::size_t i = 0; i < N; ++i) {
    const auto& shard = federation.shards[i];
    if (shard.train_indices.empty())
      throw std::invalid_argument("federation: client " + std::to_string(i) + " has no training data");
    if (shard.test_indices.empty())
      throw std::invalid_argument("federation: client " + std::to_string(i) + " has no test data");
    if (shard_histogram(shard, federation.train) != counts.row(i))
      throw std::invalid_argument("federation: shared label counts for client " +
                                  std::to_string(i) + " do not match its shard");
  }
  if (!spec.compatible(initial))
    throw std::invalid_argument("federation: initial parameters do not match the model");

  std::optional<PriorDistribution> prior;
  if (cfg.algorithm == Algorithm::fedsld) prior = compute_prior(counts);

  std::vector<std::size_t> test_sizes;
  std::vector<std::size_t> train_sizes;
  for (const auto& s : federation.shards) {
    test_sizes.push_back(s.test_indices.size());
    train_sizes.push_back(s.train_indices.size());
  }
  const auto loss_weights = aggregation_weights(train_sizes);

  FederationResult result{initial, {}};
  for (int round = 1; round <= cfg.rounds; ++round) {
    const auto started = std::chrono::steady_clock::now();
    const ParamSet& broadcast = result.final_params;

    std::vector<std::optional<LocalResult>> local(N);
    std::vector<std::exception_ptr> errors(N);
    auto work = [&](std::size_t i) {
      try {
        const ClientState state{static_cast<int>(i), &federation.train,
                                federation.shards[i].train_indices, cfg.seed, round};
        local[i] = local_update(state, spec, broadcast, cfg,
                                prior ? &*prior : nullptr);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), N);
    if (workers <= 1) {
      for (std::size_t i = 0; i < N; ++i) work(i);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < workers; ++t)
        pool.emplace_back([&] {
          for (std::size_t i = next++; i < N; i = next++) work(i);
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    std::vector<ClientUpdate> updates;
    double train_loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      train_loss += loss_weights[i] * local[i]->mean_loss;
      updates.push_back({static_cast<int>(i), std::move(local[i]->params), train_sizes[i]});
    }
    result.final_params = aggregate(updates);

    RoundRecord record;
    record.round = round;
    record.train_loss = train_loss;
    record.correct = evaluate_correct(spec, result.final_params, federation.test, federation.shards);
    record.test_sizes = test_sizes;
    for (std::size_t i = 0; i < N; ++i)
      record.accuracies.push_back(static_cast<double>(record.correct[i]) /
                                  static_cast<double>(test_sizes[i]));
    record.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (observer) observer(record);
    result.records.push_back(std::move(record));
  }
  return result;
}

std::string format_real(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

void write_rounds_header(std::ostream& out, int num_clients) {
  out << "round,algorithm,seed,train_loss";
  for (int i = 0; i < num_clients; ++i) out << ",acc_client_" << i;
  out << ",mean_acc,combined_acc\n";
}

void write_round_row(std::ostream& out, const RoundRecord& record, Algorithm algorithm,
                     std::uint64_t seed) {
  out << record.round << ',' << to_string(algorithm) << ',' << seed << ','
      << format_real(record.train_loss);
  for (double a : record.accuracies) out << ',' << format_real(a);
  out << ',' << format_real(record.mean_accuracy()) << ','
      << format_real(record.combined_accuracy()) << '\n';
}

void write_rounds_csv(std::ostream& out, std::span<const RoundRecord> records,
                      Algorithm algorithm, std::uint64_t seed) {
  const int n = records.empty() ? 0 : static_cast<int>(records.front().accuracies.size());
  write_rounds_header(out, n);
  for (const auto& r : records) write_round_row(out, r, algorithm, seed);
}

}  // namespace fedsim
