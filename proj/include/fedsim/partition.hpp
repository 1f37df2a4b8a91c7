#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "fedsim/data.hpp"

namespace fedsim {

// One client's local data: indices into the shared train and test datasets.
struct ClientShard {
  int client_id = 0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;

  bool operator==(const ClientShard&) const = default;
};

enum class Scheme { pathological, practical };

std::string_view to_string(Scheme scheme);
Scheme parse_scheme(std::string_view name);

// 1% x 10, 10%, 80%.
std::vector<double> default_shard_fractions();

struct PartitionPlan {
  Scheme scheme = Scheme::practical;
  int num_clients = 12;
  std::uint64_t seed = 0;
  int classes_per_client = 2;
  std::vector<double> shard_fractions = default_shard_fractions();
};

// Each client gets `classes_per_client` distinct random classes. Every class's
// pool is cut, in index order, into a uniform random composition (1-sample
// floor) among the clients holding it. Whole draws are retried when a class
// is left without clients, a pool is smaller than its client count, or a
// client would end up with no test samples.
std::vector<ClientShard> partition_pathological(std::span<const Label> train_labels,
                                                std::span<const Label> test_labels,
                                                int num_classes, int num_clients,
                                                std::uint64_t seed, int classes_per_client = 2);

// Every class is shuffled and cut into one shard per client with sizes given
// by `shard_fractions` (largest remainder, 1-sample floor). Shards are dealt
// to clients by a per-class random permutation.
std::vector<ClientShard> partition_practical(std::span<const Label> train_labels,
                                             std::span<const Label> test_labels,
                                             int num_classes, int num_clients,
                                             std::uint64_t seed,
                                             std::span<const double> shard_fractions = {});

std::vector<ClientShard> make_partition(const PartitionPlan& plan,
                                        std::span<const Label> train_labels,
                                        std::span<const Label> test_labels, int num_classes);

// Shard sizes for a class of `class_size` samples. Largest-remainder targets;
// any empty shard then takes one sample from the currently largest shard.
std::vector<std::uint64_t> practical_shard_sizes(std::uint64_t class_size,
                                                 std::span<const double> fractions);

// Splits each class's test pool among clients in proportion to their train
// counts of that class.
void mirror_test_sets(std::vector<ClientShard>& shards, std::span<const Label> train_labels,
                      std::span<const Label> test_labels, int num_classes);

ClientLabelCounts train_label_counts(std::span<const ClientShard> shards,
                                     std::span<const Label> train_labels, int num_classes);
ClientLabelCounts test_label_counts(std::span<const ClientShard> shards,
                                    std::span<const Label> test_labels, int num_classes);

// client,class,train_count,test_count for every (client, class) pair.
void write_partition_csv(std::ostream& out, std::span<const ClientShard> shards,
                         std::span<const Label> train_labels, std::span<const Label> test_labels,
                         int num_classes);

}  // namespace fedsim
