#include "fedsim/partition.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include "fedsim/apportion.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr int kMaxPathologicalAttempts = 1000;

std::vector<std::vector<std::size_t>> class_pools(std::span<const Label> labels, int num_classes) {
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(num_classes));
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] < 0 || labels[k] >= num_classes)
      throw std::invalid_argument("partition: label " + std::to_string(labels[k]) +
                                  " out of range");
    pools[static_cast<std::size_t>(labels[k])].push_back(k);
  }
  return pools;
}

// Uniform random composition of m into k positive parts.
std::vector<std::size_t> random_composition(std::size_t m, std::size_t k, Rng& rng) {
  // Floyd's algorithm: k-1 distinct cut points from {1, ..., m-1}.
  std::set<std::size_t> cuts;
  const std::size_t want = k - 1;
  for (std::size_t j = m - 1 - want; j < m - 1; ++j) {
    const std::size_t t = 1 + rng.below(j + 1);
    if (!cuts.insert(t).second) cuts.insert(j + 1);
  }
  std::vector<std::size_t> parts;
  std::size_t prev = 0;
  for (auto c : cuts) {
    parts.push_back(c - prev);
    prev = c;
  }
  parts.push_back(m - prev);
  return parts;
}

bool any_empty_test(const std::vector<ClientShard>& shards) {
  return std::any_of(shards.begin(), shards.end(),
                     [](const ClientShard& s) { return s.test_indices.empty(); });
}

void sort_indices(std::vector<ClientShard>& shards) {
  for (auto& s : shards) {
    std::sort(s.train_indices.begin(), s.train_indices.end());
    std::sort(s.test_indices.begin(), s.test_indices.end());
  }
}

std::vector<ClientShard> empty_shards(int num_clients) {
  std::vector<ClientShard> shards(static_cast<std::size_t>(num_clients));
  for (int i = 0; i < num_clients; ++i) shards[static_cast<std::size_t>(i)].client_id = i;
  return shards;
}

}  // namespace

std::string_view to_string(Scheme scheme) {
  return scheme == Scheme::pathological ? "pathological" : "practical";
}

Scheme parse_scheme(std::string_view name) {
  if (name == "pathological") return Scheme::pathological;
  if (name == "practical") return Scheme::practical;
  throw std::invalid_argument("unknown partition scheme '" + std::string(name) + "'");
}

std::vector<double> default_shard_fractions() {
  std::vector<double> f(10, 0.01);
  f.push_back(0.10);
  f.push_back(0.80);
  return f;
}

std::vector<std::uint64_t> practical_shard_sizes(std::uint64_t class_size,
                                                 std::span<const double> fractions) {
  if (class_size < fractions.size())
    throw std::invalid_argument("class of " + std::to_string(class_size) +
                                " samples cannot fill " + std::to_string(fractions.size()) +
                                " shards");
  auto sizes = apportion(fraction_weights(fractions), class_size);
  for (auto& s : sizes) {
    if (s != 0) continue;
    auto largest = std::max_element(sizes.begin(), sizes.end());
    --*largest;
    s = 1;
  }
  return sizes;
}

void mirror_test_sets(std::vector<ClientShard>& shards, std::span<const Label> train_labels,
                      std::span<const Label> test_labels, int num_classes) {
  const auto train_counts = train_label_counts(shards, train_labels, num_classes);
  const auto test_pools = class_pools(test_labels, num_classes);
  for (auto& s : shards) s.test_indices.clear();

  for (int c = 0; c < num_classes; ++c) {
    const auto& pool = test_pools[static_cast<std::size_t>(c)];
    std::vector<std::uint64_t> weights;
    for (std::size_t i = 0; i < shards.size(); ++i) weights.push_back(train_counts.at(i, c));
    if (std::all_of(weights.begin(), weights.end(), [](auto w) { return w == 0; })) continue;
    const auto shares = apportion(weights, pool.size());
    std::size_t offset = 0;
    for (std::size_t i = 0; i < shards.size(); ++i) {
      auto first = pool.begin() + static_cast<std::ptrdiff_t>(offset);
      shards[i].test_indices.insert(shards[i].test_indices.end(), first,
                                    first + static_cast<std::ptrdiff_t>(shares[i]));
      offset += shares[i];
    }
  }
  for (auto& s : shards) std::sort(s.test_indices.begin(), s.test_indices.end());
}

std::vector<ClientShard> partition_pathological(std::span<const Label> train_labels,
                                                std::span<const Label> test_labels,
                                                int num_classes, int num_clients,
                                                std::uint64_t seed, int classes_per_client) {
  if (num_classes < 2) throw std::invalid_argument("pathological: need at least 2 classes");
  if (num_clients < 2) throw std::invalid_argument("pathological: need at least 2 clients");
  if (classes_per_client < 1 || classes_per_client > num_classes)
    throw std::invalid_argument("pathological: classes_per_client must be in [1, num_classes]");
  if (num_clients * classes_per_client < num_classes)
    throw std::invalid_argument("pathological: " + std::to_string(num_clients) + " clients x " +
                                std::to_string(classes_per_client) +
                                " classes cannot cover " + std::to_string(num_classes) +
                                " classes");

  const auto pools = class_pools(train_labels, num_classes);
  const auto C = static_cast<std::size_t>(num_classes);

  for (int attempt = 0; attempt < kMaxPathologicalAttempts; ++attempt) {
    Rng rng(stream_seed(seed, Stream::partition, static_cast<std::uint64_t>(attempt)));

    std::vector<std::vector<int>> holders(C);
    for (int i = 0; i < num_clients; ++i) {
      std::vector<int> classes(C);
      std::iota(classes.begin(), classes.end(), 0);
      for (int j = 0; j < classes_per_client; ++j) {
        const auto pick = static_cast<std::size_t>(j) + rng.below(C - static_cast<std::size_t>(j));
        std::swap(classes[static_cast<std::size_t>(j)], classes[pick]);
        holders[static_cast<std::size_t>(classes[static_cast<std::size_t>(j)])].push_back(i);
      }
    }

    bool placeable = true;
    for (std::size_t c = 0; c < C; ++c) {
      if (pools[c].empty()) continue;
      if (holders[c].empty() || pools[c].size() < holders[c].size()) placeable = false;
    }
    if (!placeable) continue;

    auto shards = empty_shards(num_clients);
    for (std::size_t c = 0; c < C; ++c) {
      if (pools[c].empty()) continue;
      std::sort(holders[c].begin(), holders[c].end());
      const auto parts = random_composition(pools[c].size(), holders[c].size(), rng);
      std::size_t offset = 0;
      for (std::size_t j = 0; j < holders[c].size(); ++j) {
        auto& dst = shards[static_cast<std::size_t>(holders[c][j])].train_indices;
        auto first = pools[c].begin() + static_cast<std::ptrdiff_t>(offset);
        dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(parts[j]));
        offset += parts[j];
      }
    }
    mirror_test_sets(shards, train_labels, test_labels, num_classes);
    if (any_empty_test(shards)) continue;
    sort_indices(shards);
    return shards;
  }
  throw std::runtime_error("pathological: no valid class assignment after " +
                           std::to_string(kMaxPathologicalAttempts) + " attempts");
}

std::vector<ClientShard> partition_practical(std::span<const Label> train_labels,
                                             std::span<const Label> test_labels,
                                             int num_classes, int num_clients,
                                             std::uint64_t seed,
                                             std::span<const double> shard_fractions) {
  const auto defaults = default_shard_fractions();
  if (shard_fractions.empty()) shard_fractions = defaults;
  if (num_clients < 2) throw std::invalid_argument("practical: need at least 2 clients");
  if (shard_fractions.size() != static_cast<std::size_t>(num_clients))
    throw std::invalid_argument("practical: " + std::to_string(shard_fractions.size()) +
                                " shard fractions for " + std::to_string(num_clients) +
                                " clients");

  auto pools = class_pools(train_labels, num_classes);
  for (std::size_t c = 0; c < pools.size(); ++c) {
    if (pools[c].size() < static_cast<std::size_t>(num_clients))
      throw std::invalid_argument("practical: class " + std::to_string(c) + " has " +
                                  std::to_string(pools[c].size()) +
                                  " training samples, fewer than " +
                                  std::to_string(num_clients) + " clients");
  }

  Rng rng(stream_seed(seed, Stream::partition));
  auto shards = empty_shards(num_clients);
  for (auto& pool : pools) {
    rng.shuffle(std::span<std::size_t>(pool));
    const auto sizes = practical_shard_sizes(pool.size(), shard_fractions);
    std::vector<int> owner(static_cast<std::size_t>(num_clients));
    std::iota(owner.begin(), owner.end(), 0);
    rng.shuffle(std::span<int>(owner));
    std::size_t offset = 0;
    for (std::size_t j = 0; j < sizes.size(); ++j) {
      auto& dst = shards[static_cast<std::size_t>(owner[j])].train_indices;
      auto first = pool.begin() + static_cast<std::ptrdiff_t>(offset);
      dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(sizes[j]));
      offset += sizes[j];
    }
  }
  mirror_test_sets(shards, train_labels, test_labels, num_classes);
  for (const auto& s : shards) {
    if (s.test_indices.empty())
      throw std::runtime_error("practical: client " + std::to_string(s.client_id) +
                               " received no test samples");
  }
  sort_indices(shards);
  return shards;
}

std::vector<ClientShard> make_partition(const PartitionPlan& plan,
                                        std::span<const Label> train_labels,
                                        std::span<const Label> test_labels, int num_classes) {
  if (plan.scheme == Scheme::pathological)
    return partition_pathological(train_labels, test_labels, num_classes, plan.num_clients,
                                  plan.seed, plan.classes_per_client);
  return partition_practical(train_labels, test_labels, num_classes, plan.num_clients, plan.seed,
                             plan.shard_fractions);
}

ClientLabelCounts train_label_counts(std::span<const ClientShard> shards,
                                     std::span<const Label> train_labels, int num_classes) {
  ClientLabelCounts counts(shards.size(), num_classes);
  for (std::size_t i = 0; i < shards.size(); ++i)
    for (auto k : shards[i].train_indices) ++counts.at(i, train_labels[k]);
  return counts;
}

ClientLabelCounts test_label_counts(std::span<const ClientShard> shards,
                                    std::span<const Label> test_labels, int num_classes) {
  ClientLabelCounts counts(shards.size(), num_classes);
  for (std::size_t i = 0; i < shards.size(); ++i)
    for (auto k : shards[i].test_indices) ++counts.at(i, test_labels[k]);
  return counts;
}

void write_partition_csv(std::ostream& out, std::span<const ClientShard> shards,
                         std::span<const Label> train_labels, std::span<const Label> test_labels,
                         int num_classes) {
  const auto train = train_label_counts(shards, train_labels, num_classes);
  const auto test = test_label_counts(shards, test_labels, num_classes);
  out << "client,class,train_count,test_count\n";
  for (std::size_t i = 0; i < shards.size(); ++i)
    for (int c = 0; c < num_classes; ++c)
      out << shards[i].client_id << ',' << c << ',' << train.at(i, c) << ',' << test.at(i, c)
          << '\n';
}

}  // namespace fedsim
