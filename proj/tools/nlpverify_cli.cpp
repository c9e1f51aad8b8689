#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nlpverify/dataset.hpp"
#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kConfigFailure = 1;
constexpr int kStageFailure = 2;

struct StageArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_stage_options(CLI::App* cmd, StageArgs& args) {
  cmd->add_option("--config", args.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out, "Output directory")->required();
  cmd->add_option("--seed", args.seed, "Override the master seed");
  cmd->add_flag("--stage-force", args.force, "Re-run even when inputs are unchanged");
}

int run_stages(const StageArgs& args, std::optional<nlv::Stage> only) {
  nlv::PipelineConfig config;
  std::string raw;
  try {
    raw = nlv::read_text_file(args.config);
    config = nlv::PipelineConfig::from_json(raw, fs::path(args.config).parent_path());
    if (args.seed) config.seed = *args.seed;
    config.validate();
  } catch (const nlv::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigFailure;
  }

  nlv::Pipeline pipeline(config, args.out, raw);
  const std::vector<nlv::Stage> stages = only ? std::vector<nlv::Stage>{*only} : nlv::all_stages();
  for (nlv::Stage s : stages) {
    const auto start = std::chrono::steady_clock::now();
    try {
      const nlv::StageResult r = pipeline.run_stage(s, args.force);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (r.skipped) {
        std::cerr << nlv::to_string(s) << ": up to date\n";
      } else {
        std::cerr << nlv::to_string(s) << ": done in " << nlv::format_double(secs) << " s\n";
      }
    } catch (const nlv::Error& e) {
      std::cerr << nlv::to_string(s) << ": " << e.what() << "\n";
      return e.kind() == nlv::ErrorKind::ConfigError ? kConfigFailure : kStageFailure;
    } catch (const std::exception& e) {
      std::cerr << nlv::to_string(s) << ": " << e.what() << "\n";
      return kStageFailure;
    }
  }
  if (!only || *only == nlv::Stage::Eval) {
    std::cout << nlv::read_text_file(fs::path(args.out) / "eval/report.csv");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding-space robustness verification for sentence classifiers"};
  app.require_subcommand(1);

  StageArgs args;
  std::optional<nlv::Stage> chosen;
  bool run_all = false;
  for (nlv::Stage s : nlv::all_stages()) {
    const std::string name(nlv::to_string(s));
    auto* cmd = app.add_subcommand(name, "Run the " + name + " stage");
    add_stage_options(cmd, args);
    cmd->callback([&chosen, s] { chosen = s; });
  }
  auto* run = app.add_subcommand("run", "Run every stage in order");
  add_stage_options(run, args);
  run->callback([&run_all] { run_all = true; });

  std::size_t per_class = 100;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write the synthetic two-class corpus");
  synth->add_option("--per-class", per_class, "Sentences per class")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output file (.csv or .jsonl)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigFailure;
  }

  if (synth->parsed()) {
    try {
      const nlv::Dataset data = nlv::synthetic_robot_dataset(per_class, synth_seed);
      nlv::save_dataset(data, synth_out, nlv::dataset_format_for(synth_out));
    } catch (const nlv::Error& e) {
      std::cerr << "synth: " << e.what() << "\n";
      return e.kind() == nlv::ErrorKind::IoError ? kStageFailure : kConfigFailure;
    }
    return 0;
  }
  return run_stages(args, run_all ? std::nullopt : chosen);
}
