#pragma once

#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/fed.hpp"
#include "fedsim/partition.hpp"

namespace fixture {

// Blob data split into train/test and partitioned across clients.
struct Setup {
  fedsim::Dataset train;
  fedsim::Dataset test;
  std::vector<fedsim::ClientShard> shards;
  fedsim::ClientLabelCounts counts;
  fedsim::ModelSpec model;

  fedsim::Federation federation() const { return {train, test, shards}; }
};

struct Options {
  int classes = 4;
  int features = 8;
  std::size_t per_class = 600;
  double separation = 1.5;
  double noise = 0.8;
  int clients = 12;
  fedsim::Scheme scheme = fedsim::Scheme::practical;
  std::uint64_t seed = 0;
  std::size_t hidden = 0;  // 0: softmax regression
};

inline Setup make(const Options& o) {
  using namespace fedsim;
  BlobSpec spec;
  spec.num_classes = o.classes;
  spec.num_features = o.features;
  spec.n_per_class.assign(static_cast<std::size_t>(o.classes), o.per_class);
  spec.separation = o.separation;
  spec.noise_std = o.noise;
  spec.seed = o.seed;
  auto [train, test] = split_train_test(generate_synthetic(spec), 0.2, o.seed);
  PartitionPlan plan;
  plan.scheme = o.scheme;
  plan.num_clients = o.clients;
  plan.seed = o.seed;
  if (o.scheme == Scheme::practical && o.clients != 12) {
    plan.shard_fractions.assign(static_cast<std::size_t>(o.clients), 1.0 / o.clients);
  }
  auto shards = make_partition(plan, train.labels(), test.labels(), o.classes);
  auto counts = train_label_counts(shards, train.labels(), o.classes);
  auto model = o.hidden == 0 ? ModelSpec::softmax_regression(static_cast<std::size_t>(o.features), o.classes)
                             : ModelSpec::mlp(static_cast<std::size_t>(o.features), o.hidden, o.classes);
  return Setup{std::move(train), std::move(test), std::move(shards), std::move(counts),
               std::move(model)};
}

// Every client holds the same number of samples of every class, so each
// client's label distribution equals the prior. Classes are sized so that a
// batch of `batch` samples holds batch / C of each.
inline Setup identical_clients(int classes, int clients, std::size_t per_client_per_class,
                               std::uint64_t seed) {
  using namespace fedsim;
  BlobSpec spec;
  spec.num_classes = classes;
  spec.num_features = 5;
  spec.n_per_class.assign(static_cast<std::size_t>(classes),
                          per_client_per_class * static_cast<std::size_t>(clients) * 2);
  spec.separation = 2.0;
  spec.noise_std = 1.0;
  spec.seed = seed;
  const Dataset all = generate_synthetic(spec);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < all.size(); ++i) by_class[all.labels()[i]].push_back(i);

  std::vector<std::size_t> train_idx, test_idx;
  std::vector<ClientShard> shards(static_cast<std::size_t>(clients));
  for (int i = 0; i < clients; ++i) shards[i].client_id = i;
  for (int c = 0; c < classes; ++c) {
    const auto& pool = by_class[c];
    for (int i = 0; i < clients; ++i)
      for (std::size_t k = 0; k < per_client_per_class; ++k) {
        shards[i].train_indices.push_back(train_idx.size());
        train_idx.push_back(pool[i * per_client_per_class + k]);
        shards[i].test_indices.push_back(test_idx.size());
        test_idx.push_back(pool[(clients + i) * per_client_per_class + k]);
      }
  }
  Dataset train = all.subset(train_idx), test = all.subset(test_idx);
  auto counts = train_label_counts(shards, train.labels(), classes);
  return Setup{std::move(train), std::move(test), std::move(shards), std::move(counts),
               ModelSpec::mlp(5, 6, classes)};
}

}  // namespace fixture
