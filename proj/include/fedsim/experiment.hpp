#pragma once

// Experiment runner behind the `fedsim` command line tool. Each cmd_* entry
// point returns a process exit code: 0 ok, 2 usage/config, 3 runtime.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/checkpoint.hpp"
#include "fedsim/data.hpp"
#include "fedsim/fed.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SyntheticSource {
  std::size_t classes = 4;
  std::size_t per_class_train = 200;
  std::size_t per_class_test = 50;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::uint64_t seed = 0;
};

struct DatasetSource {
  std::optional<SyntheticSource> synthetic;
  std::string train_path;  // used when synthetic is empty
  std::string test_path;
};

struct ExperimentConfig {
  DatasetSource dataset;
  PreprocessOpts preprocess{0, 0, 0.0, true, 0};
  PartitionScheme partition;
  std::uint64_t partition_seed = 0;
  std::string model = "mlp";
  std::size_t mlp_hidden = 64;
  FederationConfig federation;
  std::string output_dir;
  bool emit_csv = true;
  bool emit_json = true;
};

namespace detail {

// Reads fields from one JSON object, remembering which keys were consumed so
// unknown keys can be reported.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.push_back(key);
    return obj_.at(key);
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] static void fail(const std::string& field, const std::string& msg) {
    throw ConfigError(field + ": " + msg);
  }

  std::uint64_t uint(const std::string& key, std::uint64_t fallback, std::uint64_t min = 0) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      fail(where(key), "expected a non-negative integer");
    const auto x = v.get<std::uint64_t>();
    if (x < min) fail(where(key), "must be >= " + std::to_string(min));
    return x;
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_number()) fail(where(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail(where(key), "must be finite");
    return x;
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_boolean()) fail(where(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_string()) fail(where(key), "expected a string");
    return v.get<std::string>();
  }

  FieldReader object(const std::string& key) { return FieldReader(raw(key), where(key)); }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) fail(where(it.key()), "unknown field");
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline std::string resolve_path(const std::string& p, const fs::path& base) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return fs::weakly_canonical(path).string();
}

}  // namespace detail

// Parses the experiment config. Relative paths are resolved against base_dir.
// Throws ConfigError naming the offending line or field.
inline ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error at " + detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1) + ": " + e.what());
  }

  ExperimentConfig cfg;
  detail::FieldReader top(root, "");

  if (!top.has("dataset")) detail::FieldReader::fail("dataset", "missing");
  {
    auto ds = top.object("dataset");
    if (ds.has("synthetic")) {
      if (ds.has("train") || ds.has("test")) detail::FieldReader::fail("dataset", "give either synthetic or train/test, not both");
      auto syn = ds.object("synthetic");
      SyntheticSource s;
      s.classes = syn.uint("classes", s.classes, 1);
      s.per_class_train = syn.uint("per_class_train", s.per_class_train, 1);
      s.per_class_test = syn.uint("per_class_test", s.per_class_test, 1);
      s.channels = syn.uint("channels", s.channels, 1);
      s.height = syn.uint("height", s.height, 1);
      s.width = syn.uint("width", s.width, 1);
      s.seed = syn.uint("seed", s.seed);
      syn.finish();
      cfg.dataset.synthetic = s;
    } else {
      if (!ds.has("train") || !ds.has("test")) detail::FieldReader::fail("dataset", "needs synthetic or both train and test");
      cfg.dataset.train_path = detail::resolve_path(ds.string("train", ""), base_dir);
      cfg.dataset.test_path = detail::resolve_path(ds.string("test", ""), base_dir);
    }
    ds.finish();
  }

  if (top.has("preprocess")) {
    auto pp = top.object("preprocess");
    if (pp.has("crop")) {
      const json& crop = pp.raw("crop");
      if (!crop.is_array() || crop.size() != 2 || !crop[0].is_number_unsigned() || !crop[1].is_number_unsigned())
        detail::FieldReader::fail("preprocess.crop", "expected [height, width]");
      cfg.preprocess.crop_height = crop[0].get<std::size_t>();
      cfg.preprocess.crop_width = crop[1].get<std::size_t>();
    }
    cfg.preprocess.flip_prob = pp.number("flip_prob", cfg.preprocess.flip_prob);
    if (cfg.preprocess.flip_prob < 0 || cfg.preprocess.flip_prob > 1)
      detail::FieldReader::fail("preprocess.flip_prob", "must be in [0, 1]");
    cfg.preprocess.standardize = pp.boolean("standardize", cfg.preprocess.standardize);
    cfg.preprocess.replicate_channels = pp.uint("replicate_channels", 0);
    const std::string eval_crop = pp.string("eval_crop", "center");
    if (eval_crop == "center") {
      cfg.preprocess.eval_crop = EvalCrop::center;
    } else if (eval_crop == "random") {
      cfg.preprocess.eval_crop = EvalCrop::random;
    } else {
      detail::FieldReader::fail("preprocess.eval_crop", "expected \"center\" or \"random\"");
    }
    pp.finish();
  }

  {
    static const json kEmpty = json::object();
    auto fed = top.has("federation") ? top.object("federation") : detail::FieldReader(kEmpty, "federation");
    auto& f = cfg.federation;
    f.num_clients = fed.uint("clients", 8, 1);
    f.clients_per_round = fed.uint("clients_per_round", f.num_clients, 1);
    if (f.clients_per_round > f.num_clients)
      detail::FieldReader::fail("federation.clients_per_round", "must not exceed clients");
    f.rounds = fed.uint("rounds", 30, 1);
    f.local_epochs = fed.uint("local_epochs", 2, 1);
    f.batch_size = fed.uint("batch_size", 32, 1);
    f.optimizer.lr = fed.number("lr", 1e-3);
    f.optimizer.weight_decay = fed.number("weight_decay", 1e-2);
    f.optimizer.beta1 = fed.number("beta1", 0.9);
    f.optimizer.beta2 = fed.number("beta2", 0.999);
    f.optimizer.eps = fed.number("eps", 1e-8);
    try {
      f.optimizer.validate();
    } catch (const OptionError& e) {
      detail::FieldReader::fail("federation", e.what());
    }
    f.proximal_mu = fed.number("proximal_mu", 0.0);
    if (f.proximal_mu < 0) detail::FieldReader::fail("federation.proximal_mu", "must be >= 0");
    f.seed = fed.uint("seed", 0);
    const std::string weighting = fed.string("weighting", "samples");
    if (weighting == "samples") {
      f.weighting = Weighting::samples;
    } else if (weighting == "device_count") {
      f.weighting = Weighting::device_count;
    } else {
      detail::FieldReader::fail("federation.weighting", "expected \"samples\" or \"device_count\"");
    }
    fed.finish();
  }

  cfg.partition_seed = derive_seed(cfg.federation.seed, StreamPurpose::partition);
  if (top.has("partition")) {
    auto part = top.object("partition");
    const std::string scheme = part.string("scheme", "iid");
    if (scheme == "iid") {
      cfg.partition.kind = PartitionScheme::Kind::iid;
    } else if (scheme == "dirichlet") {
      cfg.partition.kind = PartitionScheme::Kind::dirichlet;
      cfg.partition.alpha = part.number("alpha", 0.5);
      if (!(cfg.partition.alpha > 0)) detail::FieldReader::fail("partition.alpha", "must be > 0");
    } else if (scheme == "shards") {
      cfg.partition.kind = PartitionScheme::Kind::shards;
      cfg.partition.shards_per_client = part.uint("shards_per_client", 2, 1);
    } else {
      detail::FieldReader::fail("partition.scheme", "expected iid, dirichlet or shards");
    }
    cfg.partition_seed = part.uint("seed", cfg.partition_seed);
    part.finish();
  }

  if (top.has("model")) {
    const json& m = top.raw("model");
    if (m.is_string()) {
      cfg.model = m.get<std::string>();
    } else {
      detail::FieldReader mr(m, "model");
      cfg.model = mr.string("name", "mlp");
      cfg.mlp_hidden = mr.uint("hidden", 64, 1);
      mr.finish();
    }
    if (cfg.model != "mlp" && cfg.model != "small_cnn")
      detail::FieldReader::fail("model", "expected \"mlp\" or \"small_cnn\"");
  }

  if (!top.has("output")) detail::FieldReader::fail("output", "missing");
  {
    auto out = top.object("output");
    if (!out.has("dir")) detail::FieldReader::fail("output.dir", "missing");
    cfg.output_dir = detail::resolve_path(out.string("dir", ""), base_dir);
    if (out.has("formats")) {
      const json& formats = out.raw("formats");
      if (!formats.is_array()) detail::FieldReader::fail("output.formats", "expected an array");
      cfg.emit_csv = cfg.emit_json = false;
      for (const auto& f : formats) {
        if (f == "csv") cfg.emit_csv = true;
        else if (f == "json") cfg.emit_json = true;
        else detail::FieldReader::fail("output.formats", "unknown format " + f.dump());
      }
    }
    out.finish();
  }
  top.finish();
  return cfg;
}

// Fully resolved config: every default explicit, every path absolute.
// Parsing this snapshot yields the same ExperimentConfig.
inline json config_to_json(const ExperimentConfig& cfg) {
  json j;
  if (cfg.dataset.synthetic) {
    const auto& s = *cfg.dataset.synthetic;
    j["dataset"]["synthetic"] = {{"classes", s.classes},        {"per_class_train", s.per_class_train},
                                 {"per_class_test", s.per_class_test}, {"channels", s.channels},
                                 {"height", s.height},          {"width", s.width},
                                 {"seed", s.seed}};
  } else {
    j["dataset"] = {{"train", cfg.dataset.train_path}, {"test", cfg.dataset.test_path}};
  }
  j["preprocess"] = {{"crop", {cfg.preprocess.crop_height, cfg.preprocess.crop_width}},
                     {"flip_prob", cfg.preprocess.flip_prob},
                     {"standardize", cfg.preprocess.standardize},
                     {"replicate_channels", cfg.preprocess.replicate_channels},
                     {"eval_crop", cfg.preprocess.eval_crop == EvalCrop::center ? "center" : "random"}};
  json part;
  switch (cfg.partition.kind) {
    case PartitionScheme::Kind::iid: part["scheme"] = "iid"; break;
    case PartitionScheme::Kind::dirichlet:
      part["scheme"] = "dirichlet";
      part["alpha"] = cfg.partition.alpha;
      break;
    case PartitionScheme::Kind::shards:
      part["scheme"] = "shards";
      part["shards_per_client"] = cfg.partition.shards_per_client;
      break;
  }
  part["seed"] = cfg.partition_seed;
  j["partition"] = part;
  j["model"] = {{"name", cfg.model}, {"hidden", cfg.mlp_hidden}};
  const auto& f = cfg.federation;
  j["federation"] = {{"clients", f.num_clients},
                     {"clients_per_round", f.clients_per_round},
                     {"rounds", f.rounds},
                     {"local_epochs", f.local_epochs},
                     {"batch_size", f.batch_size},
                     {"lr", f.optimizer.lr},
                     {"weight_decay", f.optimizer.weight_decay},
                     {"beta1", f.optimizer.beta1},
                     {"beta2", f.optimizer.beta2},
                     {"eps", f.optimizer.eps},
                     {"proximal_mu", f.proximal_mu},
                     {"seed", f.seed},
                     {"weighting", f.weighting == Weighting::samples ? "samples" : "device_count"}};
  json formats = json::array();
  if (cfg.emit_csv) formats.push_back("csv");
  if (cfg.emit_json) formats.push_back("json");
  j["output"] = {{"dir", cfg.output_dir}, {"formats", formats}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(fs::path(path)).parent_path());
}

// ---------------------------------------------------------------------------
// Shared setup
// ---------------------------------------------------------------------------

inline ModelSpec build_model(const std::string& name, const Shape& input_shape, std::size_t classes,
                             std::size_t hidden = 64) {
  if (name == "mlp") return mlp_spec(input_shape, classes, hidden);
  if (name == "small_cnn") return small_cnn_spec(input_shape, classes);
  throw ConfigError("model: unknown model '" + name + "'");
}

struct LoadedData {
  Dataset train;
  Dataset test;
};

inline LoadedData load_data(const DatasetSource& src) {
  if (src.synthetic) {
    const auto& s = *src.synthetic;
    auto splits = gen_synthetic_splits(s.classes, s.per_class_train, s.per_class_test, s.channels, s.height, s.width, s.seed);
    return {std::move(splits.train), std::move(splits.test)};
  }
  for (const auto* p : {&src.train_path, &src.test_path})
    if (!fs::exists(*p)) throw ConfigError("dataset: file '" + *p + "' does not exist");
  LoadedData d{load_dataset(src.train_path), load_dataset(src.test_path)};
  if (d.train.channels != d.test.channels || d.train.height != d.test.height || d.train.width != d.test.width ||
      d.train.class_names != d.test.class_names)
    throw ConfigError("dataset: train and test splits disagree on geometry or classes");
  return d;
}

// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline json round_to_json(const RoundRecord& r) {
  return json{{"round", r.round},
              {"global_test_loss", r.global_test_loss},
              {"global_test_acc", r.global_test_acc},
              {"sampled_clients", r.sampled_clients},
              {"client_samples", r.client_samples},
              {"client_train_loss", r.client_train_loss},
              {"client_train_acc", r.client_train_acc}};
}

inline std::string metrics_csv(const std::vector<RoundRecord>& rounds) {
  std::string csv = "round,global_test_loss,global_test_acc\r\n";
  for (const auto& r : rounds)
    csv += std::to_string(r.round) + "," + format_double(r.global_test_loss) + "," + format_double(r.global_test_acc) + "\r\n";
  return csv;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace detail

// Output file names inside the output directory.
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kRoundsJson = "rounds.json";
inline constexpr const char* kClientsJson = "clients.json";
inline constexpr const char* kCheckpoint = "model.fspm";
inline constexpr const char* kResolvedConfig = "config.resolved.json";

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int cmd_run(const std::string& config_path, std::size_t threads, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  ExperimentConfig cfg;
  LoadedData data;
  ModelSpec spec;
  PartitionPlan plan;
  try {
    cfg = load_config(config_path);
    data = load_data(cfg.dataset);
    validate_preprocess(cfg.preprocess, geometry_of(data.train));
    if (data.test.size() == 0) throw ConfigError("dataset: test split is empty");
    spec = build_model(cfg.model, preprocessed_shape(cfg.preprocess, geometry_of(data.train)),
                       data.train.num_classes(), cfg.mlp_hidden);
    infer_shapes(spec);
    plan = make_partition(data.train, cfg.federation.num_clients, cfg.partition, cfg.partition_seed);
    fs::create_directories(cfg.output_dir);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    FederationData fdata{data.train, data.test, plan, cfg.preprocess, data.train.stats};
    RunOptions options;
    options.threads = threads;
    options.on_round = [&](const RoundRecord& r) {
      out << "round " << r.round << " test_loss " << format_double(r.global_test_loss) << " test_acc "
          << format_double(r.global_test_acc) << "\n";
    };
    const auto result = run_federation(cfg.federation, fdata, spec, options);

    for (const auto& r : result.rounds) {
      if (!std::isfinite(r.global_test_loss) || !std::isfinite(r.global_test_acc))
        throw NumericError("round " + std::to_string(r.round) + " produced a non-finite metric");
    }

    const fs::path dir(cfg.output_dir);
    if (cfg.emit_csv) detail::write_text(dir / kMetricsCsv, metrics_csv(result.rounds));
    if (cfg.emit_json) {
      json rounds = json::array();
      for (const auto& r : result.rounds) rounds.push_back(round_to_json(r));
      detail::write_text(dir / kRoundsJson, rounds.dump(2) + "\n");
    }

    const auto& last = result.rounds.back();
    json clients = json::array();
    for (std::size_t i = 0; i < last.sampled_clients.size(); ++i)
      clients.push_back({{"client", last.sampled_clients[i]},
                         {"samples", last.client_samples[i]},
                         {"train_loss", last.client_train_loss[i]},
                         {"train_acc", last.client_train_acc[i]}});
    json per_client = {{"round", last.round}, {"metric", "final-epoch training accuracy"}, {"clients", clients}};
    detail::write_text(dir / kClientsJson, per_client.dump(2) + "\n");

    save_params(result.final_params, (dir / kCheckpoint).string());
    detail::write_text(dir / kResolvedConfig, config_to_json(cfg).dump(2) + "\n");
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

struct GenSynthArgs {
  std::size_t classes = 4;
  std::size_t per_class = 200;
  std::size_t test_per_class = 0;  // 0 means same as per_class
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  std::string out_dir;
};

// Writes train.fsds and test.fsds into out_dir.
inline int cmd_gen_synth(const GenSynthArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const std::size_t test_per_class = args.test_per_class ? args.test_per_class : args.per_class;
    auto splits = gen_synthetic_splits(args.classes, args.per_class, test_per_class, args.channels, args.height,
                                       args.width, args.seed);
    std::error_code ec;
    fs::create_directories(args.out_dir, ec);
    if (ec) throw Error("cannot create '" + args.out_dir + "': " + ec.message());
    const fs::path dir(args.out_dir);
    save_dataset(splits.train, (dir / "train.fsds").string());
    save_dataset(splits.test, (dir / "test.fsds").string());
    out << "wrote " << splits.train.size() << " train and " << splits.test.size() << " test examples to "
        << args.out_dir << "\n";
  } catch (const std::exception& e) {
    err << "gen-synth: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string model = "mlp";
  std::string config;  // optional: take preprocessing and train statistics from this experiment
};

// Prints {"accuracy": .., "loss": .., "examples": ..} on out.
inline int cmd_eval(const EvalArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    const ModelParams params = load_params(args.checkpoint);
    const Dataset test = load_dataset(args.dataset);
    if (test.size() == 0) throw ConfigError("dataset '" + args.dataset + "' has no examples");

    PreprocessOpts opts{0, 0, 0.0, false, 0};
    ChannelStats stats = test.stats;
    std::string model = args.model;
    std::size_t hidden = 64;
    // random evaluation crops replay the stream of the experiment's last round
    Rng crop_rng;
    if (!args.config.empty()) {
      const auto cfg = load_config(args.config);
      opts = cfg.preprocess;
      stats = load_data(cfg.dataset).train.stats;
      hidden = cfg.mlp_hidden;
      crop_rng = make_stream(cfg.federation.seed, StreamPurpose::eval_crop, cfg.federation.rounds);
    }
    validate_preprocess(opts, geometry_of(test));
    const ModelSpec spec = build_model(model, preprocessed_shape(opts, geometry_of(test)), test.num_classes(), hidden);
    check_layout(make_layout(spec), params.layout);
    const auto r = evaluate(spec, params, test, opts, stats, 256, &crop_rng);
    out << json{{"accuracy", r.accuracy}, {"loss", r.loss}, {"examples", test.size()}}.dump() << "\n";
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace fedsim
