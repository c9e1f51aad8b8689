#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nlpverify/dataset.hpp"
#include "nlpverify/evaluation.hpp"
#include "nlpverify/geometry.hpp"
#include "nlpverify/model.hpp"
#include "nlpverify/text_perturbation.hpp"

namespace nlv {

enum class Stage { Curate, Embed, Prep, Boxes, Train, Verify, Eval };

std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);
const std::vector<Stage>& all_stages();

struct PolicySpec {
  std::vector<PerturbationKind> kinds;
  std::size_t per_sentence_count = 1;
};

struct PipelineConfig {
  std::uint64_t seed = 0;

  // Dataset source: a file, or the bundled synthetic corpus.
  std::optional<std::filesystem::path> dataset_path;
  std::size_t synthetic_per_class = 0;
  LabelMap label_map;
  double test_fraction = 0.2;

  PolicySpec augment;           // training-data augmentation
  PolicySpec box_perturbation;  // perturbation-based boxes
  PolicySpec attack;            // attack accuracy
  bool attack_include_originals = false;

  // Embedder: hashed n-gram fallback unless embedding_lookup is set.
  std::size_t embed_dim = 384;
  std::size_t ngram_low = 2;
  std::size_t ngram_high = 4;
  std::uint64_t embed_seed = 0;
  std::optional<std::filesystem::path> embedding_lookup;

  bool rotate = true;
  std::optional<std::size_t> pca_dim;

  std::vector<ProvenanceKind> box_kinds{ProvenanceKind::PerturbationBased};
  std::size_t cluster_k = 5;
  double epsilon = 0.05;
  bool shrink_after_cluster = true;

  std::vector<TrainMode> train_modes{TrainMode::Base};
  TrainConfig train;  // mode and seed are filled per run

  Backend backend = Backend::BundledIbp;
  std::size_t falsify_steps = 50;
  std::size_t falsify_samples = 1000;

  // Parses JSON, filling defaults for absent keys. Relative paths resolve
  // against base_dir. Throws ConfigError.
  static PipelineConfig from_json(const std::string& text,
                                  const std::filesystem::path& base_dir = {});
  // Every field, defaults included.
  std::string to_json() const;
  // Cross-field checks; throws ConfigError before any work is done.
  void validate() const;
};

struct StageResult {
  Stage stage;
  bool skipped = false;  // inputs unchanged since the recorded run
};

// Runs stages against an output directory. Each stage reads only serialized
// upstream artifacts and records input/output hashes in manifest.json.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, std::filesystem::path out_dir,
           std::optional<std::string> raw_config = std::nullopt);

  // Throws MissingUpstream naming the first absent upstream artifact.
  StageResult run_stage(Stage stage, bool force = false);
  EvaluationReport run_all(bool force = false);

  const std::filesystem::path& out_dir() const { return out_dir_; }

 private:
  void curate();
  void embed();
  void prep();
  void boxes();
  void train();
  void verify();
  void eval();

  std::unique_ptr<Embedder> make_embedder() const;
  std::uint64_t stage_seed(std::string_view purpose) const;

  PipelineConfig config_;
  std::filesystem::path out_dir_;
  std::optional<std::string> raw_config_;
};

}  // namespace nlv
