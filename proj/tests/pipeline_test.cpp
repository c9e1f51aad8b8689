#include <cstdlib>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/pipeline.hpp"

namespace nlv {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nlpverify_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json small_config() {
  return json::parse(R"({
    "seed": 3,
    "dataset": {"synthetic_per_class": 40},
    "box_perturbation": {"per_sentence_count": 4},
    "attack": {"per_sentence_count": 2},
    "embedder": {"dim": 16},
    "prep": {"pca_dim": 6},
    "boxes": {"kinds": ["perturbation"], "k": 2},
    "train": {"modes": ["base"], "epochs": 5, "hidden": [8]},
    "verify": {"samples": 50, "pgd_steps": 5}
  })");
}

Pipeline make(const json& j, const fs::path& out) {
  const std::string raw = j.dump();
  return Pipeline(PipelineConfig::from_json(raw), out, raw);
}

json manifest(const fs::path& out) { return json::parse(read_text_file(out / "manifest.json")); }

std::map<std::string, std::string> output_hashes(const fs::path& out) {
  std::map<std::string, std::string> h;
  for (const auto& [stage, rec] : manifest(out)["stages"].items()) {
    for (const auto& [file, hash] : rec["outputs"].items()) h[file] = hash.get<std::string>();
  }
  return h;
}

TEST(Config, DefaultsAndRoundTrip) {
  const PipelineConfig c = PipelineConfig::from_json("{\"dataset\": {\"synthetic_per_class\": 5}}");
  EXPECT_EQ(c.box_perturbation.per_sentence_count, 10u);
  EXPECT_EQ(c.test_fraction, 0.2);
  EXPECT_TRUE(c.shrink_after_cluster);
  ASSERT_TRUE(c.train.pgd.has_value());
  EXPECT_EQ(c.train.pgd->epsilon, c.epsilon);
  const PipelineConfig back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Config, Errors) {
  auto kind = [](const std::string& text) {
    try {
      PipelineConfig::from_json(text).validate();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::InvalidArgument;
  };
  EXPECT_EQ(kind("{not json"), ErrorKind::ConfigError);
  EXPECT_EQ(kind("{\"sed\": 1}"), ErrorKind::ConfigError);
  EXPECT_EQ(kind("{}"), ErrorKind::ConfigError);
  EXPECT_EQ(kind("{\"dataset\": {\"synthetic_per_class\": 5}, \"boxes\": {\"order\": \"x\"}}"),
            ErrorKind::ConfigError);
  EXPECT_EQ(kind("{\"dataset\": {\"path\": \"/no/such/file.csv\"}}"), ErrorKind::ConfigError);
  EXPECT_EQ(kind("{\"dataset\": {\"synthetic_per_class\": 5}, \"train\": {\"modes\": [\"magic\"]}}"),
            ErrorKind::ConfigError);
}

TEST(Config, PcaLargerThanEmbeddingIsRejectedBeforeWork) {
  json j = small_config();
  j["prep"]["pca_dim"] = 17;
  const fs::path out = temp_dir("pca");
  try {
    make(j, out).run_all();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(out / "curate"));
}

TEST(Pipeline, MissingUpstreamNamesArtifact) {
  const fs::path out = temp_dir("missing");
  Pipeline p = make(small_config(), out);
  p.run_stage(Stage::Curate);
  try {
    p.run_stage(Stage::Boxes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingUpstream);
    EXPECT_NE(std::string(e.what()).find("embeddings"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, SecondRunIsNoOpAndForceReruns) {
  const fs::path out = temp_dir("noop");
  Pipeline p = make(small_config(), out);
  p.run_all();
  const auto before = output_hashes(out);
  for (Stage s : all_stages()) EXPECT_TRUE(p.run_stage(s).skipped) << to_string(s);
  EXPECT_EQ(output_hashes(out), before);
  EXPECT_FALSE(p.run_stage(Stage::Train, true).skipped);
  EXPECT_EQ(output_hashes(out), before);

  write_text_file(out / "train" / "model_base.txt", "tampered");
  EXPECT_FALSE(p.run_stage(Stage::Train).skipped);
  EXPECT_EQ(output_hashes(out), before);
}

TEST(Pipeline, RunAllMatchesSequentialStages) {
  const fs::path a = temp_dir("all"), b = temp_dir("seq");
  const EvaluationReport report = make(small_config(), a).run_all();
  Pipeline p = make(small_config(), b);
  for (Stage s : all_stages()) p.run_stage(s);
  EXPECT_EQ(output_hashes(a), output_hashes(b));
  EXPECT_EQ(report.to_json(), EvaluationReport::from_json(read_text_file(b / "eval" / "report.json")).to_json());
}

TEST(Pipeline, FullMatrixHasOneRowPerModeAndKind) {
  json j = small_config();
  j["train"]["modes"] = {"base", "augmented", "adversarial"};
  j["boxes"]["kinds"] = {"perturbation", "shrunk", "eps_cube"};
  const EvaluationReport r = make(j, temp_dir("matrix")).run_all();
  ASSERT_EQ(r.rows.size(), 9u);
  std::set<std::pair<std::string, ProvenanceKind>> cells;
  for (const auto& row : r.rows) {
    cells.insert({row.model, row.provenance});
    EXPECT_EQ(row.verified + row.falsified + row.unknown, row.total);
    EXPECT_GE(row.standard_accuracy, 0.0);
    EXPECT_LE(row.standard_accuracy, 1.0);
  }
  EXPECT_EQ(cells.size(), 9u);
}

TEST(Pipeline, AttackAccuracyDoesNotExceedCleanAccuracy) {
  json j = small_config();
  j["dataset"]["synthetic_per_class"] = 200;
  j["train"]["epochs"] = 40;
  const EvaluationReport r = make(j, temp_dir("attack")).run_all();
  for (const auto& row : r.rows) EXPECT_LE(row.attack_accuracy, row.standard_accuracy + 0.05);
}

TEST(Pipeline, SeedChangeLeavesUnseededSlicesAlone) {
  const fs::path a = temp_dir("seed_a"), b = temp_dir("seed_b");
  json j = small_config();
  make(j, a).run_all();
  j["seed"] = 4;
  make(j, b).run_all();
  const json ma = manifest(a)["stages"], mb = manifest(b)["stages"];
  for (const char* s : {"embed", "prep"}) {
    EXPECT_EQ(ma[s]["inputs"]["config"], mb[s]["inputs"]["config"]) << s;
  }
  EXPECT_NE(ma["curate"]["inputs"]["config"], mb["curate"]["inputs"]["config"]);
  EXPECT_NE(ma["train"]["inputs"]["config"], mb["train"]["inputs"]["config"]);
}

int run_cli(const std::string& args) {
  const char* cli = std::getenv("NLPVERIFY_CLI");
  if (cli == nullptr) return -1;
  const int status = std::system((std::string(cli) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  if (std::getenv("NLPVERIFY_CLI") == nullptr) GTEST_SKIP() << "NLPVERIFY_CLI not set";
  const fs::path dir = temp_dir("cli");
  write_text_file(dir / "good.json", small_config().dump());
  json bad = small_config();
  bad["prep"]["pca_dim"] = 99;
  write_text_file(dir / "bad.json", bad.dump());

  EXPECT_EQ(run_cli("run --config " + (dir / "good.json").string() + " --out " + (dir / "out").string()), 0);
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.json").string() + " --out " + (dir / "bad").string()), 1);
  EXPECT_EQ(run_cli("eval --config " + (dir / "good.json").string() + " --out " + (dir / "fresh").string()), 2);
  EXPECT_EQ(run_cli("train --bogus"), 1);
  EXPECT_EQ(run_cli("synth --per-class 3 --seed 1 --out " + (dir / "s.csv").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "s.csv"));
}

}  // namespace
}  // namespace nlv
