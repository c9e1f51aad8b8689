#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nlpverify/model.hpp"
#include "nlpverify/text_perturbation.hpp"
#include "nlpverify/verifier.hpp"

namespace nlv {

// Fraction of rows whose strict argmax equals the label; ties are wrong.
// Inputs are already in the model's input space. Throws EmptySet.
double standard_accuracy(const MlpModel& model, const Matrix& inputs,
                         std::span<const std::size_t> labels);
double standard_accuracy(const TrainedModelBundle& bundle, const EmbeddedDataset& prepared_test);

struct AttackAccuracy {
  double accuracy = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

// Perturbs every sentence of `test` (stream = index in `test`), embeds the
// variants, applies bundle.prep and scores them. Originals are excluded unless
// include_originals. Throws EmptySet when nothing is left to score.
AttackAccuracy attack_accuracy(const TrainedModelBundle& bundle, const Dataset& test,
                               const PerturbationPolicy& policy, const Embedder& embedder,
                               bool include_originals = false);

enum class Backend { BundledIbp, ExportOnly };
std::string_view to_string(Backend backend);
Backend backend_from_string(std::string_view name);

struct BreakdownRow {
  ProvenanceKind provenance = ProvenanceKind::Naive;
  Backend backend = Backend::BundledIbp;
  std::size_t total = 0;
  std::size_t verified = 0;
  std::size_t falsified = 0;
  std::size_t unknown = 0;

  double verified_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(verified) / static_cast<double>(total);
  }
};

struct VerificationSummary {
  std::vector<BreakdownRow> rows;  // one per provenance kind present, in enum order
  std::vector<Outcome> outcomes;   // per box; empty for ExportOnly
};

struct VerifyOptions {
  Backend backend = Backend::BundledIbp;
  FalsifyOptions falsify;
  // Required for ExportOnly: query_<i>.vnnlib / query_<i>.mlp.txt go here.
  std::optional<std::filesystem::path> export_dir;
};

// ExportOnly writes one property and one network file per box and records
// every box as unknown.
VerificationSummary verified_percentage(const MlpModel& model,
                                        const std::vector<HyperRectangle>& boxes,
                                        const VerifyOptions& options);

struct ReportRow {
  std::string model;  // training mode label
  ProvenanceKind provenance = ProvenanceKind::Naive;
  Backend backend = Backend::BundledIbp;
  double standard_accuracy = 0.0;
  double attack_accuracy = 0.0;
  std::size_t total = 0;
  std::size_t verified = 0;
  std::size_t falsified = 0;
  std::size_t unknown = 0;
  double verified_percentage = 0.0;  // fraction in [0, 1]
};

struct EvaluationReport {
  std::vector<ReportRow> rows;
  std::string config_fingerprint;
  std::map<std::string, std::uint64_t> seeds;

  std::string to_json() const;
  std::string to_csv() const;
  static EvaluationReport from_json(const std::string& text);
};

}  // namespace nlv
