#include "fedsim/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "fedsim/metrics.hpp"

#ifndef FEDSIM_VERSION
#define FEDSIM_VERSION "0.0.0"
#endif

namespace fedsim {

using nlohmann::json;
namespace fs = std::filesystem;

std::string version() { return FEDSIM_VERSION; }

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key), "required field missing");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key) {
    const json& v = raw(key);
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key), "has the wrong type");
    }
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    return has(key) ? get<T>(key) : fallback;
  }

  void finish(std::initializer_list<std::string> ignored = {}) const {
    for (const auto& [key, _] : j_.items()) {
      if (seen_.count(key) || std::find(ignored.begin(), ignored.end(), key) != ignored.end())
        continue;
      throw ConfigError(field(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<Layer> parse_layers(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected a list of layers");
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < j.size(); ++i) {
    Section s(j[i], path + "[" + std::to_string(i) + "]");
    const auto type = s.get<std::string>("type");
    if (type == "dense") {
      layers.push_back(DenseLayer{s.get<std::size_t>("out"), s.get<std::size_t>("in", 0)});
    } else if (type == "relu") {
      layers.push_back(ReluLayer{});
    } else if (type == "conv2d") {
      Conv2dLayer c;
      c.out_channels = s.get<std::size_t>("out_channels");
      c.kernel = s.get<std::size_t>("kernel", 5);
      c.pool = s.get<bool>("pool", true);
      layers.push_back(c);
    } else if (type == "flatten") {
      layers.push_back(FlattenLayer{});
    } else {
      throw ConfigError(s.field("type"), "unknown layer type '" + type + "'");
    }
    s.finish();
  }
  return layers;
}

json layer_json(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer))
    return {{"type", "dense"}, {"in", d->in}, {"out", d->out}};
  if (const auto* c = std::get_if<Conv2dLayer>(&layer))
    return {{"type", "conv2d"}, {"out_channels", c->out_channels}, {"kernel", c->kernel},
            {"pool", c->pool}};
  if (std::holds_alternative<ReluLayer>(layer)) return {{"type", "relu"}};
  return {{"type", "flatten"}};
}

void parse_dataset(Section& root, ExperimentConfig& cfg) {
  Section s(root.raw("dataset"), "dataset");
  const auto source = s.get<std::string>("source");
  auto& ds = cfg.dataset;
  if (source == "synthetic") {
    ds.kind = DatasetSource::Kind::synthetic;
    auto& b = ds.blobs;
    b.num_classes = s.get<int>("num_classes");
    b.num_features = s.get<int>("num_features");
    if (b.num_classes < 2) throw ConfigError(s.field("num_classes"), "must be >= 2");
    if (b.num_features < 1) throw ConfigError(s.field("num_features"), "must be >= 1");
    const json& npc = s.raw("n_per_class");
    if (npc.is_number_unsigned()) {
      b.n_per_class.assign(static_cast<std::size_t>(b.num_classes), npc.get<std::size_t>());
    } else {
      b.n_per_class = s.get<std::vector<std::size_t>>("n_per_class");
    }
    if (b.n_per_class.size() != static_cast<std::size_t>(b.num_classes))
      throw ConfigError(s.field("n_per_class"), "length " + std::to_string(b.n_per_class.size()) +
                                                    " != num_classes " +
                                                    std::to_string(b.num_classes));
    for (auto n : b.n_per_class)
      if (n == 0) throw ConfigError(s.field("n_per_class"), "every class needs >= 1 sample");
    b.separation = s.get<double>("separation", 1.0);
    b.noise_std = s.get<double>("noise_std", 1.0);
    if (!(b.noise_std >= 0.0)) throw ConfigError(s.field("noise_std"), "must be >= 0");
    b.seed = s.get<std::uint64_t>("seed", 0);
    b.means = s.get<std::vector<std::vector<double>>>("means", {});
    try {
      b.means = blob_means(b);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.field("means"), e.what());
    }
    ds.num_classes = b.num_classes;
  } else if (source == "idx") {
    ds.kind = DatasetSource::Kind::idx;
    ds.images = s.get<std::string>("images");
    ds.labels = s.get<std::string>("labels");
    ds.test_images = s.get<std::string>("test_images", "");
    ds.test_labels = s.get<std::string>("test_labels", "");
    if (ds.test_images.empty() != ds.test_labels.empty())
      throw ConfigError(s.field("test_images"), "test_images and test_labels go together");
    ds.num_classes = s.get<int>("num_classes", 0);
    if (ds.num_classes < 0) throw ConfigError(s.field("num_classes"), "must be >= 0");
  } else {
    throw ConfigError(s.field("source"), "must be 'synthetic' or 'idx', got '" + source + "'");
  }
  s.finish();
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");
  cfg.name = root.get<std::string>("name", "");
  parse_dataset(root, cfg);

  {
    const double default_fraction =
        cfg.dataset.kind == DatasetSource::Kind::idx ? 1.0 / 6.0 : 0.2;
    if (root.has("split")) {
      Section s(root.raw("split"), "split");
      cfg.split.test_fraction = s.get<double>("test_fraction", default_fraction);
      cfg.split.seed = s.get<std::uint64_t>("seed", 0);
      s.finish();
    } else {
      cfg.split.test_fraction = default_fraction;
    }
    if (!(cfg.split.test_fraction > 0.0 && cfg.split.test_fraction < 1.0))
      throw ConfigError("split.test_fraction", "must be in (0, 1)");
  }

  {
    Section s(root.raw("partition"), "partition");
    try {
      cfg.partition.scheme = parse_scheme(s.get<std::string>("scheme"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.field("scheme"), e.what());
    }
    cfg.partition.num_clients = s.get<int>("num_clients", 12);
    cfg.partition.seed = s.get<std::uint64_t>("seed", 0);
    cfg.partition.classes_per_client = s.get<int>("classes_per_client", 2);
    cfg.partition.shard_fractions =
        s.get<std::vector<double>>("shard_fractions", default_shard_fractions());
    s.finish();
    if (cfg.partition.num_clients < 2) throw ConfigError("partition.num_clients", "must be >= 2");
    if (cfg.partition.scheme == Scheme::practical &&
        cfg.partition.shard_fractions.size() != static_cast<std::size_t>(cfg.partition.num_clients))
      throw ConfigError("partition.shard_fractions",
                        std::to_string(cfg.partition.shard_fractions.size()) +
                            " fractions for " + std::to_string(cfg.partition.num_clients) +
                            " clients");
    if (cfg.partition.scheme == Scheme::practical) {
      try {
        (void)practical_shard_sizes(cfg.partition.shard_fractions.size(),
                                    cfg.partition.shard_fractions);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("partition.shard_fractions", e.what());
      }
    }
    const int C = cfg.dataset.num_classes;
    if (cfg.partition.scheme == Scheme::pathological) {
      if (cfg.partition.classes_per_client < 1 ||
          (C > 0 && cfg.partition.classes_per_client > C))
        throw ConfigError("partition.classes_per_client", "must be in [1, num_classes]");
      if (C > 0 && cfg.partition.num_clients * cfg.partition.classes_per_client < C)
        throw ConfigError("partition.num_clients",
                          "num_clients x classes_per_client cannot cover " + std::to_string(C) +
                              " classes");
    }
  }

  if (root.has("model")) {
    Section s(root.raw("model"), "model");
    cfg.input_shape = s.get<std::vector<std::size_t>>("input_shape", {});
    if (s.has("layers")) cfg.layers = parse_layers(s.raw("layers"), "model.layers");
    s.finish();
  }

  {
    Section s(root.raw("federation"), "federation");
    auto& f = cfg.federation;
    f.rounds = s.get<int>("rounds", f.rounds);
    f.local_epochs = s.get<int>("local_epochs", f.local_epochs);
    f.batch_size = s.get<std::size_t>("batch_size", f.batch_size);
    f.learning_rate = s.get<double>("learning_rate", f.learning_rate);
    f.fedprox_mu = s.get<double>("fedprox_mu", f.fedprox_mu);
    try {
      f.batching = parse_batching(s.get<std::string>("batching", "shuffle"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.field("batching"), e.what());
    }
    s.finish();
    f.num_clients = cfg.partition.num_clients;
    try {
      f.validate();
    } catch (const std::invalid_argument& e) {
      const std::string what = e.what();
      throw ConfigError(what.substr(0, what.find(':')), what.substr(what.find(':') + 2));
    }
  }

  for (const auto& name : root.get<std::vector<std::string>>("algorithms")) {
    try {
      const auto a = parse_algorithm(name);
      if (std::find(cfg.algorithms.begin(), cfg.algorithms.end(), a) != cfg.algorithms.end())
        throw ConfigError("algorithms", "'" + name + "' listed twice");
      cfg.algorithms.push_back(a);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("algorithms", e.what());
    }
  }
  if (cfg.algorithms.empty()) throw ConfigError("algorithms", "must list at least one algorithm");

  cfg.seeds = root.get<std::vector<std::uint64_t>>("seeds", {0});
  if (cfg.seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size())
    throw ConfigError("seeds", "duplicate seed");

  if (root.has("metrics")) {
    Section s(root.raw("metrics"), "metrics");
    cfg.bmcta_weighted = s.get<bool>("bmcta_weighted", false);
    cfg.kde_grid_points = s.get<std::size_t>("kde_grid_points", kDefaultGridPoints);
    s.finish();
    if (cfg.kde_grid_points < 2) throw ConfigError("metrics.kde_grid_points", "must be >= 2");
  }
  cfg.output_dir = root.get<std::string>("output_dir", "");
  root.finish({"fedsim_version"});

  // Model vs dataset, when both are known without touching the disk.
  if (cfg.dataset.kind == DatasetSource::Kind::synthetic) {
    const auto& b = cfg.dataset.blobs;
    if (!cfg.layers.empty()) {
      const auto* last = std::get_if<DenseLayer>(&cfg.layers.back());
      if (last && last->out != static_cast<std::size_t>(b.num_classes))
        throw ConfigError("model.layers", "model outputs " + std::to_string(last->out) +
                                              " classes but dataset.num_classes is " +
                                              std::to_string(b.num_classes));
    }
    if (!cfg.input_shape.empty()) {
      const auto size = std::accumulate(cfg.input_shape.begin(), cfg.input_shape.end(),
                                        std::size_t{1}, std::multiplies<>());
      if (size != static_cast<std::size_t>(b.num_features))
        throw ConfigError("model.input_shape", "covers " + std::to_string(size) +
                                                   " features but dataset.num_features is " +
                                                   std::to_string(b.num_features));
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<config>", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<config>", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  const auto& ds = cfg.dataset;
  if (ds.kind == DatasetSource::Kind::synthetic) {
    const auto& b = ds.blobs;
    j["dataset"] = {{"source", "synthetic"},   {"num_classes", b.num_classes},
                    {"num_features", b.num_features}, {"n_per_class", b.n_per_class},
                    {"separation", b.separation},     {"noise_std", b.noise_std},
                    {"means", blob_means(b)},         {"seed", b.seed}};
  } else {
    j["dataset"] = {{"source", "idx"},
                    {"images", ds.images},
                    {"labels", ds.labels},
                    {"test_images", ds.test_images},
                    {"test_labels", ds.test_labels},
                    {"num_classes", ds.num_classes}};
  }
  j["split"] = {{"test_fraction", cfg.split.test_fraction}, {"seed", cfg.split.seed}};
  j["partition"] = {{"scheme", to_string(cfg.partition.scheme)},
                    {"num_clients", cfg.partition.num_clients},
                    {"seed", cfg.partition.seed},
                    {"classes_per_client", cfg.partition.classes_per_client},
                    {"shard_fractions", cfg.partition.shard_fractions}};
  json layers = json::array();
  for (const auto& l : cfg.layers) layers.push_back(layer_json(l));
  j["model"] = {{"input_shape", cfg.input_shape}, {"layers", layers}};
  const auto& f = cfg.federation;
  j["federation"] = {{"rounds", f.rounds},
                     {"local_epochs", f.local_epochs},
                     {"batch_size", f.batch_size},
                     {"learning_rate", f.learning_rate},
                     {"fedprox_mu", f.fedprox_mu},
                     {"batching", to_string(f.batching)}};
  json algs = json::array();
  for (auto a : cfg.algorithms) algs.push_back(to_string(a));
  j["algorithms"] = algs;
  j["seeds"] = cfg.seeds;
  j["metrics"] = {{"bmcta_weighted", cfg.bmcta_weighted},
                  {"kde_grid_points", cfg.kde_grid_points}};
  j["output_dir"] = cfg.output_dir;
  return j;
}

namespace {

std::pair<Dataset, Dataset> load_data(const ExperimentConfig& cfg) {
  const auto& ds = cfg.dataset;
  if (ds.kind == DatasetSource::Kind::synthetic) {
    return split_train_test(generate_synthetic(ds.blobs), cfg.split.test_fraction, cfg.split.seed);
  }
  if (!ds.test_images.empty()) {
    Dataset train = load_idx(ds.images, ds.labels, ds.num_classes);
    Dataset test = load_idx(ds.test_images, ds.test_labels, train.num_classes());
    return {std::move(train), std::move(test)};
  }
  return split_train_test(load_idx(ds.images, ds.labels, ds.num_classes), cfg.split.test_fraction,
                          cfg.split.seed);
}

ModelSpec build_model(const ExperimentConfig& cfg, const Dataset& train) {
  const auto shape = cfg.input_shape.empty() ? std::vector<std::size_t>{train.num_features()}
                                             : cfg.input_shape;
  const auto layers =
      cfg.layers.empty()
          ? std::vector<Layer>{DenseLayer{static_cast<std::size_t>(train.num_classes())}}
          : cfg.layers;
  try {
    ModelSpec spec(shape, layers, train.num_classes());
    if (spec.input_size() != train.num_features())
      throw std::invalid_argument("model input size " + std::to_string(spec.input_size()) +
                                  " != dataset features " + std::to_string(train.num_features()));
    return spec;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

bool is_artifact(const fs::path& p) {
  const auto name = p.filename().string();
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  return name == "manifest.json" || name == "partition.csv" ||
         (starts("rounds_") && p.extension() == ".csv") ||
         (starts("summary_") && p.extension() == ".json") ||
         (starts("kde_") && p.extension() == ".csv");
}

// Creates `dir`; refuses if it already holds artifacts unless overwriting,
// in which case the old artifacts are removed first.
void claim_output_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
    std::vector<fs::path> existing;
    for (const auto& e : fs::directory_iterator(dir))
      if (is_artifact(e.path())) existing.push_back(e.path());
    if (!existing.empty() && !overwrite)
      throw std::runtime_error("refusing to overwrite existing run in " + dir.string() +
                               " (pass --overwrite)");
    for (const auto& p : existing) fs::remove(p);
  }
  fs::create_directories(dir);
}

std::string partition_csv(const PreparedExperiment& p) {
  std::ostringstream out;
  write_partition_csv(out, p.shards, p.train.labels(), p.test.labels(), p.train.num_classes());
  return out.str();
}

}  // namespace

PreparedExperiment prepare(const ExperimentConfig& cfg) {
  auto [train, test] = load_data(cfg);
  if (cfg.dataset.kind == DatasetSource::Kind::idx && cfg.dataset.num_classes > 0 &&
      train.num_classes() != cfg.dataset.num_classes)
    throw ConfigError("dataset.num_classes", "declared " + std::to_string(cfg.dataset.num_classes) +
                                                 " but data has " +
                                                 std::to_string(train.num_classes()));
  ModelSpec model = build_model(cfg, train);
  auto shards = make_partition(cfg.partition, train.labels(), test.labels(), train.num_classes());
  auto counts = train_label_counts(shards, train.labels(), train.num_classes());
  return PreparedExperiment{std::move(train), std::move(test), std::move(shards),
                            std::move(counts), std::move(model)};
}

fs::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& options) {
  if (options.out) return *options.out;
  if (cfg.output_dir.empty())
    throw ConfigError("output_dir", "no output directory (set output_dir or pass --out)");
  fs::path dir = cfg.output_dir;
  if (dir.is_relative()) {
    if (const char* root = std::getenv("FEDSIM_OUTPUT_ROOT"); root && *root) dir = fs::path(root) / dir;
  }
  return dir;
}

void run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  const fs::path dir = resolve_output_dir(cfg, options);
  const PreparedExperiment prepared = prepare(cfg);
  claim_output_dir(dir, options.overwrite);

  json manifest = to_json(cfg);
  manifest["fedsim_version"] = version();
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "partition.csv", partition_csv(prepared));

  const Federation federation{prepared.train, prepared.test, prepared.shards};
  for (const auto algorithm : cfg.algorithms) {
    for (const auto seed : cfg.seeds) {
      FederationConfig fc = cfg.federation;
      fc.algorithm = algorithm;
      fc.seed = seed;
      fc.workers = options.workers;
      const std::string tag = std::string(to_string(algorithm)) + "_" + std::to_string(seed);
      if (options.log) *options.log << "[fedsim] " << tag << ": " << fc.rounds << " rounds\n";

      const auto result = run_federation(prepared.model, init_params(prepared.model, seed),
                                         federation, prepared.counts, fc);

      std::ostringstream rounds;
      write_rounds_csv(rounds, result.records, algorithm, seed);
      write_text(dir / ("rounds_" + tag + ".csv"), rounds.str());

      const auto summary = summarize(result.records, cfg.bmcta_weighted);
      const auto kde = kde_fairness(summary.final_accuracies, cfg.kde_grid_points);
      json sj = to_json(summary);
      sj["algorithm"] = to_string(algorithm);
      sj["seed"] = seed;
      sj["rounds"] = fc.rounds;
      sj["bmcta_weighted"] = cfg.bmcta_weighted;
      sj["kde_bandwidth"] = kde.bandwidth;
      write_text(dir / ("summary_" + tag + ".json"), sj.dump(2) + "\n");

      std::ostringstream kde_csv;
      write_kde_csv(kde_csv, kde);
      write_text(dir / ("kde_" + tag + ".csv"), kde_csv.str());

      if (options.log)
        *options.log << "[fedsim] " << tag << ": bmcta " << summary.bmcta << " (round "
                     << summary.bmcta_round << "), bta " << summary.bta << " (round "
                     << summary.bta_round << ")\n";
    }
  }
}

void describe_partition(const ExperimentConfig& cfg, const RunOptions& options) {
  const fs::path dir = resolve_output_dir(cfg, options);
  const PreparedExperiment prepared = prepare(cfg);
  fs::create_directories(dir);
  const fs::path target = dir / "partition.csv";
  if (fs::exists(target) && !options.overwrite)
    throw std::runtime_error("refusing to overwrite " + target.string() + " (pass --overwrite)");
  write_text(target, partition_csv(prepared));
}

namespace {

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    err << "fedsim: invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "fedsim: error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int run_command(const fs::path& config_path, const RunOptions& options, std::ostream& err) {
  return guarded(err, [&] { run_experiment(load_config(config_path), options); });
}

int describe_command(const fs::path& config_path, const RunOptions& options, std::ostream& err) {
  return guarded(err, [&] { describe_partition(load_config(config_path), options); });
}

}  // namespace fedsim
