#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/params.hpp"
#include "fedsim/partition.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

enum class Algorithm { fedavg, fedprox, fedsld };

std::string_view to_string(Algorithm algorithm);
Algorithm parse_algorithm(std::string_view name);

// How a client cuts its shard into minibatches each epoch.
//   shuffle:    uniform permutation, consecutive chunks of batch_size.
//   stratified: each batch gets an equal cut of every class (test mode for
//               checking that weight-1 fedsld batches reproduce fedavg).
enum class Batching { shuffle, stratified };

std::string_view to_string(Batching batching);
Batching parse_batching(std::string_view name);

struct FederationConfig {
  int rounds = 80;
  int local_epochs = 5;
  std::size_t batch_size = 256;
  double learning_rate = 0.01;
  int num_clients = 12;
  Algorithm algorithm = Algorithm::fedavg;
  double fedprox_mu = 0.01;
  std::uint64_t seed = 0;
  Batching batching = Batching::shuffle;
  int workers = 1;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Client i's view of its training shard for one round.
struct ClientState {
  int client_id = 0;
  const Dataset* train = nullptr;
  std::span<const std::size_t> indices;
  std::uint64_t base_seed = 0;
  int round = 1;

  // Keyed only by (base_seed, client_id, round): independent of scheduling.
  Rng rng() const {
    return Rng(stream_seed(base_seed, Stream::client, static_cast<std::uint64_t>(client_id),
                           static_cast<std::uint64_t>(round)));
  }
};

struct LocalResult {
  ParamSet params;
  double mean_loss = 0.0;  // mean batch loss over the final epoch
  std::size_t steps = 0;
};

// Minibatch index lists for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices,
                                                    std::span<const Label> labels,
                                                    int num_classes, std::size_t batch_size,
                                                    Batching batching, Rng& rng);

// E epochs of minibatch SGD on the client's shard under cfg.algorithm.
// `prior` is required for fedsld. global_params is not modified.
LocalResult local_update(const ClientState& state, const ModelSpec& spec,
                         const ParamSet& global_params, const FederationConfig& cfg,
                         const PriorDistribution* prior);

struct ClientUpdate {
  int client_id = 0;
  ParamSet params;
  std::size_t num_samples = 0;  // n_i
};

// n_i / n for each entry.
std::vector<double> aggregation_weights(std::span<const std::size_t> num_samples);

// sum_i (n_i / n) w_i. Accumulation runs in client-id order whatever the
// order of `updates`, so the result is bitwise stable under permutation. It is
// evaluated as w_first + sum_i (n_i / n)(w_i - w_first), which returns w
// exactly when every client sends the same w.
ParamSet aggregate(std::span<const ClientUpdate> updates);

struct RoundRecord {
  int round = 0;
  double train_loss = 0.0;
  std::vector<double> accuracies;
  std::vector<std::size_t> correct;
  std::vector<std::size_t> test_sizes;
  double seconds = 0.0;

  double mean_accuracy() const;
  double combined_accuracy() const;

  // Everything except wall-clock time.
  bool same_outcome(const RoundRecord& other) const;
};

// Per-client correct counts on the clients' test indices.
std::vector<std::size_t> evaluate_correct(const ModelSpec& spec, const ParamSet& params,
                                          const Dataset& test,
                                          std::span<const ClientShard> shards);

// Per-client accuracy; prediction is argmax with ties to the lowest class.
std::vector<double> evaluate(const ModelSpec& spec, const ParamSet& params, const Dataset& test,
                             std::span<const ClientShard> shards);

struct Federation {
  const Dataset& train;
  const Dataset& test;
  std::span<const ClientShard> shards;
};

struct FederationResult {
  ParamSet final_params;
  std::vector<RoundRecord> records;
};

using RoundObserver = std::function<void(const RoundRecord&)>;

// The full round loop: prior once (fedsld), then per round broadcast, local
// updates on every client (in parallel across cfg.workers threads), weighted
// aggregation and per-client evaluation. Output is independent of workers.
FederationResult run_federation(const ModelSpec& spec, const ParamSet& initial,
                                const Federation& federation, const ClientLabelCounts& counts,
                                const FederationConfig& cfg, const RoundObserver& observer = {});

std::string format_real(double value);

void write_rounds_header(std::ostream& out, int num_clients);
void write_round_row(std::ostream& out, const RoundRecord& record, Algorithm algorithm,
                     std::uint64_t seed);
void write_rounds_csv(std::ostream& out, std::span<const RoundRecord> records,
                      Algorithm algorithm, std::uint64_t seed);

}  // namespace fedsim
