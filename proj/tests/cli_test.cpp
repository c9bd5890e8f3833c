#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "fedsim/experiment.hpp"

using namespace fedsim;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("fedsim_cli_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string small_config(const std::string& out_dir, std::size_t rounds = 3) {
  return R"({
  "dataset": {"synthetic": {"classes": 3, "per_class_train": 20, "per_class_test": 8, "height": 8, "width": 8, "seed": 4}},
  "federation": {"clients": 3, "clients_per_round": 2, "rounds": )" +
         std::to_string(rounds) + R"(, "local_epochs": 1, "batch_size": 8, "seed": 11},
  "partition": {"scheme": "dirichlet", "alpha": 0.5},
  "model": {"name": "mlp", "hidden": 8},
  "output": {"dir": ")" + out_dir + R"("}
})";
}

int run(const fs::path& config, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = cmd_run(config.string(), 0, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

std::vector<std::string> csv_lines(const std::string& csv) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const auto end = csv.find("\r\n", pos);
    if (end == std::string::npos) break;
    lines.push_back(csv.substr(pos, end - pos));
    pos = end + 2;
  }
  return lines;
}

std::string shell_quote(const std::string& s) { return "'" + s + "'"; }

}  // namespace

TEST(CmdRun, WritesAllArtifacts) {
  TempDir tmp;
  write(tmp / "exp.json", small_config("out", 4));
  ASSERT_EQ(run(tmp / "exp.json"), kExitOk);
  for (const char* name : {kMetricsCsv, kRoundsJson, kClientsJson, kCheckpoint, kResolvedConfig})
    EXPECT_TRUE(fs::exists(tmp / "out" / name)) << name;

  const auto lines = csv_lines(slurp(tmp / "out" / kMetricsCsv));
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "round,global_test_loss,global_test_acc");
  for (std::size_t r = 1; r < lines.size(); ++r) {
    std::stringstream ss(lines[r]);
    std::string a, b, c, extra;
    ASSERT_TRUE(std::getline(ss, a, ',') && std::getline(ss, b, ',') && std::getline(ss, c, ','));
    EXPECT_FALSE(std::getline(ss, extra, ','));
    EXPECT_EQ(std::stoul(a), r);
    EXPECT_TRUE(std::isfinite(std::stod(b)));
    EXPECT_TRUE(std::isfinite(std::stod(c)));
  }

  const auto rounds = json::parse(slurp(tmp / "out" / kRoundsJson));
  ASSERT_EQ(rounds.size(), 4u);
  for (const char* key : {"round", "global_test_loss", "global_test_acc", "sampled_clients", "client_train_loss",
                          "client_train_acc"})
    EXPECT_TRUE(rounds[0].contains(key)) << key;
  EXPECT_EQ(rounds[0]["sampled_clients"].size(), 2u);

  const auto clients = json::parse(slurp(tmp / "out" / kClientsJson));
  EXPECT_EQ(clients["round"], 4);
  EXPECT_EQ(clients["clients"].size(), 2u);
}

TEST(CmdRun, SameConfigTwiceIsByteIdentical) {
  TempDir tmp;
  write(tmp / "a.json", small_config("a"));
  write(tmp / "b.json", small_config("b"));
  ASSERT_EQ(run(tmp / "a.json"), kExitOk);
  ASSERT_EQ(run(tmp / "b.json"), kExitOk);
  EXPECT_EQ(slurp(tmp / "a" / kMetricsCsv), slurp(tmp / "b" / kMetricsCsv));
  EXPECT_EQ(slurp(tmp / "a" / kCheckpoint), slurp(tmp / "b" / kCheckpoint));
}

TEST(CmdRun, ResolvedSnapshotReproducesOutputs) {
  TempDir tmp;
  write(tmp / "exp.json", small_config("first"));
  ASSERT_EQ(run(tmp / "exp.json"), kExitOk);
  auto snapshot = json::parse(slurp(tmp / "first" / kResolvedConfig));
  // every default is spelled out
  EXPECT_TRUE(snapshot["federation"].contains("lr"));
  EXPECT_TRUE(snapshot["partition"].contains("seed"));
  EXPECT_TRUE(fs::path(snapshot["output"]["dir"].get<std::string>()).is_absolute());

  snapshot["output"]["dir"] = (tmp / "second").string();
  write(tmp / "snap.json", snapshot.dump(2));
  ASSERT_EQ(run(tmp / "snap.json"), kExitOk);
  EXPECT_EQ(slurp(tmp / "first" / kMetricsCsv), slurp(tmp / "second" / kMetricsCsv));
  EXPECT_EQ(slurp(tmp / "first" / kCheckpoint), slurp(tmp / "second" / kCheckpoint));
  auto again = json::parse(slurp(tmp / "second" / kResolvedConfig));
  again["output"]["dir"] = snapshot["output"]["dir"];
  EXPECT_EQ(again, snapshot);
}

TEST(CmdRun, ConfigErrorsExitTwoWithDiagnostics) {
  TempDir tmp;
  std::string err;

  write(tmp / "syntax.json", "{\n  \"dataset\": {\n    \"synthetic\": {,}\n  }\n}");
  EXPECT_EQ(run(tmp / "syntax.json", &err), kExitConfig);
  EXPECT_NE(err.find("line 3"), std::string::npos) << err;

  auto cfg = json::parse(small_config("out"));
  cfg["federation"]["batch_size"] = "big";
  write(tmp / "type.json", cfg.dump());
  EXPECT_EQ(run(tmp / "type.json", &err), kExitConfig);
  EXPECT_NE(err.find("federation.batch_size"), std::string::npos) << err;

  cfg = json::parse(small_config("out"));
  cfg["federation"]["learning_rate"] = 0.1;
  write(tmp / "unknown.json", cfg.dump());
  EXPECT_EQ(run(tmp / "unknown.json", &err), kExitConfig);
  EXPECT_NE(err.find("federation.learning_rate"), std::string::npos) << err;

  cfg = json::parse(small_config("out"));
  cfg["dataset"] = {{"train", "missing_train.fsds"}, {"test", "missing_test.fsds"}};
  write(tmp / "missing.json", cfg.dump());
  EXPECT_EQ(run(tmp / "missing.json", &err), kExitConfig);
  EXPECT_NE(err.find("does not exist"), std::string::npos) << err;

  EXPECT_EQ(run(tmp / "nope.json", &err), kExitConfig);
}

TEST(CmdRun, NumericBlowUpExitsThree) {
  TempDir tmp;
  auto cfg = json::parse(small_config("out"));
  cfg["federation"]["lr"] = 1e300;
  cfg["federation"]["local_epochs"] = 3;
  write(tmp / "exp.json", cfg.dump());
  std::string err;
  EXPECT_EQ(run(tmp / "exp.json", &err), kExitRuntime);
  EXPECT_NE(err.find("runtime error"), std::string::npos) << err;
}

TEST(CmdGenSynth, RoundTripsWithRequestedCounts) {
  TempDir tmp;
  GenSynthArgs args;
  args.classes = 3;
  args.per_class = 7;
  args.test_per_class = 2;
  args.height = 6;
  args.width = 5;
  args.seed = 8;
  args.out_dir = (tmp / "data").string();
  std::ostringstream out, err;
  ASSERT_EQ(cmd_gen_synth(args, out, err), kExitOk);
  const auto train = load_dataset((tmp / "data" / "train.fsds").string());
  const auto test = load_dataset((tmp / "data" / "test.fsds").string());
  EXPECT_EQ(train.size(), 21u);
  EXPECT_EQ(test.size(), 6u);
  EXPECT_EQ(train.height, 6u);
  EXPECT_EQ(train.width, 5u);
  for (const auto* ds : {&train, &test}) {
    std::vector<std::size_t> hist(3, 0);
    for (auto l : ds->labels) ++hist[l];
    for (auto h : hist) EXPECT_EQ(h, ds->size() / 3);
  }
  const auto again = gen_synthetic_splits(3, 7, 2, 1, 6, 5, 8);
  EXPECT_EQ(train.pixels, again.train.pixels);
  EXPECT_EQ(test.pixels, again.test.pixels);
}

TEST(CmdGenSynth, DistinctSeedsGiveDistinctFiles) {
  TempDir tmp;
  GenSynthArgs args;
  args.per_class = 5;
  std::ostringstream out, err;
  args.out_dir = (tmp / "s1").string();
  args.seed = 1;
  ASSERT_EQ(cmd_gen_synth(args, out, err), kExitOk);
  args.out_dir = (tmp / "s2").string();
  args.seed = 2;
  ASSERT_EQ(cmd_gen_synth(args, out, err), kExitOk);
  const auto h = [](const std::string& s) { return std::hash<std::string>{}(s); };
  EXPECT_NE(h(slurp(tmp / "s1" / "train.fsds")), h(slurp(tmp / "s2" / "train.fsds")));
  EXPECT_NE(h(slurp(tmp / "s1" / "test.fsds")), h(slurp(tmp / "s2" / "test.fsds")));
}

TEST(CmdGenSynth, UnwritablePathExitsTwo) {
  TempDir tmp;
  write(tmp / "file", "x");
  GenSynthArgs args;
  args.per_class = 2;
  args.out_dir = (tmp / "file" / "sub").string();
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gen_synth(args, out, err), kExitConfig);
}

TEST(CmdEval, ReproducesLastCsvRow) {
  TempDir tmp;
  GenSynthArgs gen;
  gen.classes = 3;
  gen.per_class = 20;
  gen.test_per_class = 8;
  gen.height = gen.width = 8;
  gen.seed = 4;
  gen.out_dir = (tmp / "data").string();
  std::ostringstream sink;
  ASSERT_EQ(cmd_gen_synth(gen, sink, sink), kExitOk);

  auto cfg = json::parse(small_config("out"));
  cfg["dataset"] = {{"train", "data/train.fsds"}, {"test", "data/test.fsds"}};
  cfg["preprocess"] = {{"crop", {6, 6}}, {"flip_prob", 0.5}};
  write(tmp / "exp.json", cfg.dump());
  ASSERT_EQ(run(tmp / "exp.json"), kExitOk);
  const auto lines = csv_lines(slurp(tmp / "out" / kMetricsCsv));
  std::stringstream last(lines.back());
  std::string round, loss, acc;
  std::getline(last, round, ',');
  std::getline(last, loss, ',');
  std::getline(last, acc, ',');

  EvalArgs args{(tmp / "out" / kCheckpoint).string(), (tmp / "data" / "test.fsds").string(), "mlp",
                (tmp / "exp.json").string()};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(args, out, err), kExitOk) << err.str();
  const auto r = json::parse(out.str());
  EXPECT_NEAR(r["loss"].get<double>(), std::stod(loss), 1e-9);
  EXPECT_NEAR(r["accuracy"].get<double>(), std::stod(acc), 1e-9);
  EXPECT_EQ(r["examples"], 24);
}

TEST(CmdEval, ReproducesLastCsvRowWithRandomEvalCrop) {
  TempDir tmp;
  auto cfg = json::parse(small_config("out"));
  cfg["preprocess"] = {{"crop", {6, 6}}, {"eval_crop", "random"}};
  write(tmp / "exp.json", cfg.dump());
  ASSERT_EQ(run(tmp / "exp.json"), kExitOk);
  const auto rounds = json::parse(slurp(tmp / "out" / kRoundsJson));

  const auto data = gen_synthetic_splits(3, 20, 8, 1, 8, 8, 4);
  save_dataset(data.test, (tmp / "test.fsds").string());
  EvalArgs args{(tmp / "out" / kCheckpoint).string(), (tmp / "test.fsds").string(), "mlp", (tmp / "exp.json").string()};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(args, out, err), kExitOk) << err.str();
  const auto r = json::parse(out.str());
  EXPECT_NEAR(r["loss"].get<double>(), rounds.back()["global_test_loss"].get<double>(), 1e-9);
  EXPECT_NEAR(r["accuracy"].get<double>(), rounds.back()["global_test_acc"].get<double>(), 1e-9);
  EXPECT_EQ(json::parse(slurp(tmp / "out" / kResolvedConfig))["preprocess"]["eval_crop"], "random");
}

TEST(CmdEval, UniformCheckpointGivesLogN) {
  TempDir tmp;
  const auto splits = gen_synthetic_splits(5, 4, 4, 1, 6, 6, 3);
  save_dataset(splits.test, (tmp / "test.fsds").string());
  save_params(zero_params(mlp_spec({1, 6, 6}, 5)), (tmp / "zero.fspm").string());
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval({(tmp / "zero.fspm").string(), (tmp / "test.fsds").string(), "mlp", ""}, out, err), kExitOk)
      << err.str();
  EXPECT_NEAR(json::parse(out.str())["loss"].get<double>(), std::log(5.0), 1e-12);
}

TEST(CmdEval, ErrorsExitTwo) {
  TempDir tmp;
  Dataset empty = gen_synthetic(2, 1, 1, 4, 4, 1);
  empty.pixels.clear();
  empty.labels.clear();
  save_dataset(empty, (tmp / "empty.fsds").string());
  save_dataset(gen_synthetic(2, 3, 1, 4, 4, 1), (tmp / "ok.fsds").string());
  save_params(zero_params(mlp_spec({1, 4, 4}, 2)), (tmp / "mlp.fspm").string());
  std::ostringstream out, err;
  EXPECT_EQ(cmd_eval({(tmp / "mlp.fspm").string(), (tmp / "empty.fsds").string(), "mlp", ""}, out, err), kExitConfig);
  EXPECT_EQ(cmd_eval({(tmp / "mlp.fspm").string(), (tmp / "ok.fsds").string(), "small_cnn", ""}, out, err),
            kExitConfig);
  EXPECT_EQ(cmd_eval({(tmp / "none.fspm").string(), (tmp / "ok.fsds").string(), "mlp", ""}, out, err), kExitConfig);
}

TEST(Binary, ThreadCountDoesNotChangeCsv) {
  TempDir tmp;
  write(tmp / "a.json", small_config("a"));
  write(tmp / "b.json", small_config("b"));
  const std::string bin = shell_quote(FEDSIM_CLI_PATH);
  ASSERT_EQ(std::system(("FEDSIM_THREADS=0 " + bin + " run --config " + shell_quote((tmp / "a.json").string()) +
                         " > /dev/null")
                            .c_str()),
            0);
  ASSERT_EQ(std::system(("FEDSIM_THREADS=8 " + bin + " run --config " + shell_quote((tmp / "b.json").string()) +
                         " > /dev/null")
                            .c_str()),
            0);
  EXPECT_EQ(slurp(tmp / "a" / kMetricsCsv), slurp(tmp / "b" / kMetricsCsv));
}

TEST(Binary, UsageErrorsExitTwo) {
  const std::string bin = shell_quote(FEDSIM_CLI_PATH);
  const auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin), 2);
  EXPECT_EQ(status(bin + " run"), 2);
  EXPECT_EQ(status(bin + " gen-synth --out /tmp/x --size 16by16"), 2);
  EXPECT_EQ(status(bin + " eval --checkpoint a --dataset b --model resnet"), 2);
  EXPECT_EQ(status(bin + " --help"), 0);
}
