// fedsim: run federated experiments, generate synthetic data, evaluate checkpoints.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fedsim/experiment.hpp"

namespace {

std::size_t threads_from_env() {
  const char* v = std::getenv("FEDSIM_THREADS");
  if (!v || !*v) return 0;
  try {
    return static_cast<std::size_t>(std::stoul(v));
  } catch (const std::exception&) {
    std::cerr << "ignoring malformed FEDSIM_THREADS='" << v << "'\n";
    return 0;
  }
}

bool parse_size(const std::string& s, std::size_t& h, std::size_t& w) {
  const auto x = s.find('x');
  if (x == std::string::npos) return false;
  try {
    h = std::stoul(s.substr(0, x));
    w = std::stoul(s.substr(x + 1));
  } catch (const std::exception&) {
    return false;
  }
  return h > 0 && w > 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale federated averaging simulator"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run a federated experiment described by a config file");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();

  fedsim::GenSynthArgs gen;
  std::string size = "16x16";
  auto* synth = app.add_subcommand("gen-synth", "Write a synthetic train/test dataset pair");
  synth->add_option("--classes", gen.classes, "Number of classes")->check(CLI::PositiveNumber);
  synth->add_option("--per-class", gen.per_class, "Training examples per class")->check(CLI::PositiveNumber);
  synth->add_option("--test-per-class", gen.test_per_class, "Test examples per class (default: --per-class)");
  synth->add_option("--size", size, "Image size HxW");
  synth->add_option("--channels", gen.channels, "Channels per image")->check(CLI::PositiveNumber);
  synth->add_option("--seed", gen.seed, "Generator seed");
  synth->add_option("--out", gen.out_dir, "Output directory")->required();

  fedsim::EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  ev->add_option("--checkpoint", eval.checkpoint, "Checkpoint (FSPM)")->required();
  ev->add_option("--dataset", eval.dataset, "Dataset file (FSDS)")->required();
  ev->add_option("--model", eval.model, "mlp or small_cnn")->check(CLI::IsMember({"mlp", "small_cnn"}));
  ev->add_option("--config", eval.config, "Experiment config supplying preprocessing and train statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fedsim::kExitConfig;
  }

  if (*run) return fedsim::cmd_run(config_path, threads_from_env());
  if (*synth) {
    if (!parse_size(size, gen.height, gen.width)) {
      std::cerr << "gen-synth: --size must look like 16x16\n";
      return fedsim::kExitConfig;
    }
    return fedsim::cmd_gen_synth(gen);
  }
  return fedsim::cmd_eval(eval);
}
