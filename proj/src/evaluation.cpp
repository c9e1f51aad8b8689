#include "nlpverify/evaluation.hpp"

#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;

constexpr std::array<ProvenanceKind, 5> kProvenanceOrder{
    ProvenanceKind::Naive, ProvenanceKind::Shrunk, ProvenanceKind::Clustered,
    ProvenanceKind::PerturbationBased, ProvenanceKind::EpsCube};

}  // namespace

double standard_accuracy(const MlpModel& model, const Matrix& inputs,
                         std::span<const std::size_t> labels) {
  if (inputs.rows() == 0) throw Error(ErrorKind::EmptySet, "accuracy of an empty set");
  if (labels.size() != static_cast<std::size_t>(inputs.rows())) {
    throw Error(ErrorKind::DimMismatch, "labels and inputs differ in length");
  }
  const Matrix logits = forward_batch(model, inputs);
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (strict_argmax(logits.row(r).transpose()) == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(inputs.rows());
}

double standard_accuracy(const TrainedModelBundle& bundle, const EmbeddedDataset& prepared_test) {
  return standard_accuracy(bundle.model, prepared_test.vectors, prepared_test.labels);
}

AttackAccuracy attack_accuracy(const TrainedModelBundle& bundle, const Dataset& test,
                               const PerturbationPolicy& policy, const Embedder& embedder,
                               bool include_originals) {
  policy.validate();
  std::vector<std::string> texts;
  std::vector<std::size_t> labels;
  AttackAccuracy out;
  for (std::size_t i = 0; i < test.sentences.size(); ++i) {
    const auto& s = test.sentences[i];
    if (include_originals) {
      texts.push_back(s.text);
      labels.push_back(s.label);
    }
    VariantSet vs = perturb_variants(s.text, policy, i);
    out.skipped += vs.skipped;
    for (auto& v : vs.variants) {
      texts.push_back(std::move(v));
      labels.push_back(s.label);
    }
  }
  if (texts.empty()) throw Error(ErrorKind::EmptySet, "every perturbation was skipped");
  const Matrix prepared = bundle.prep.apply(embedder.embed(texts));
  out.accuracy = standard_accuracy(bundle.model, prepared, labels);
  out.evaluated = texts.size();
  return out;
}

std::string_view to_string(Backend backend) {
  return backend == Backend::BundledIbp ? "ibp" : "export_only";
}

Backend backend_from_string(std::string_view name) {
  if (name == "ibp") return Backend::BundledIbp;
  if (name == "export_only") return Backend::ExportOnly;
  throw Error(ErrorKind::ConfigError, "unknown verification backend '" + std::string(name) + "'");
}

VerificationSummary verified_percentage(const MlpModel& model,
                                        const std::vector<HyperRectangle>& boxes,
                                        const VerifyOptions& options) {
  if (boxes.empty()) throw Error(ErrorKind::EmptySet, "no boxes to verify");
  for (const auto& b : boxes) {
    if (b.dim() != model.in_dim()) {
      throw Error(ErrorKind::DimMismatch, "box dimension differs from model input");
    }
  }
  if (options.backend == Backend::ExportOnly && !options.export_dir) {
    throw Error(ErrorKind::ConfigError, "export_only backend needs an export directory");
  }

  std::map<ProvenanceKind, BreakdownRow> rows;
  VerificationSummary summary;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& box = boxes[i];
    BreakdownRow& row = rows[box.provenance.kind];
    row.provenance = box.provenance.kind;
    row.backend = options.backend;
    ++row.total;
    const VerificationQuery query{&model, box};
    if (options.backend == Backend::ExportOnly) {
      export_query(query, *options.export_dir / ("query_" + std::to_string(i)));
      ++row.unknown;
      continue;
    }
    FalsifyOptions f = options.falsify;
    f.seed = derive_seed(options.falsify.seed, i);
    const Outcome o = verify_box(query, f).outcome();
    summary.outcomes.push_back(o);
    if (o == Outcome::Verified) ++row.verified;
    if (o == Outcome::Falsified) ++row.falsified;
    if (o == Outcome::Unknown) ++row.unknown;
  }
  for (auto kind : kProvenanceOrder) {
    if (auto it = rows.find(kind); it != rows.end()) summary.rows.push_back(it->second);
  }
  return summary;
}

std::string EvaluationReport::to_json() const {
  json j;
  j["config_fingerprint"] = config_fingerprint;
  j["seeds"] = seeds;
  json arr = json::array();
  for (const auto& r : rows) {
    json o;
    o["model"] = r.model;
    o["provenance"] = std::string(to_string(r.provenance));
    o["backend"] = std::string(to_string(r.backend));
    o["standard_accuracy"] = r.standard_accuracy;
    o["attack_accuracy"] = r.attack_accuracy;
    o["total"] = r.total;
    o["verified"] = r.verified;
    o["falsified"] = r.falsified;
    o["unknown"] = r.unknown;
    o["verified_percentage"] = r.verified_percentage;
    arr.push_back(o);
  }
  j["rows"] = arr;
  return j.dump(2) + "\n";
}

std::string EvaluationReport::to_csv() const {
  std::string out =
      "model,provenance,backend,standard_accuracy,attack_accuracy,total,verified,falsified,"
      "unknown,verified_percentage\n";
  for (const auto& r : rows) {
    out += r.model + ',' + std::string(to_string(r.provenance)) + ',' +
           std::string(to_string(r.backend)) + ',' + format_double(r.standard_accuracy) + ',' +
           format_double(r.attack_accuracy) + ',' + std::to_string(r.total) + ',' +
           std::to_string(r.verified) + ',' + std::to_string(r.falsified) + ',' +
           std::to_string(r.unknown) + ',' + format_double(r.verified_percentage) + '\n';
  }
  return out;
}

EvaluationReport EvaluationReport::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    EvaluationReport rep;
    rep.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    rep.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const auto& o : j.at("rows")) {
      ReportRow r;
      r.model = o.at("model").get<std::string>();
      r.provenance = provenance_kind_from_string(o.at("provenance").get<std::string>());
      r.backend = backend_from_string(o.at("backend").get<std::string>());
      r.standard_accuracy = o.at("standard_accuracy").get<double>();
      r.attack_accuracy = o.at("attack_accuracy").get<double>();
      r.total = o.at("total").get<std::size_t>();
      r.verified = o.at("verified").get<std::size_t>();
      r.falsified = o.at("falsified").get<std::size_t>();
      r.unknown = o.at("unknown").get<std::size_t>();
      r.verified_percentage = o.at("verified_percentage").get<double>();
      rep.rows.push_back(r);
    }
    return rep;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("report: ") + e.what());
  }
}

}  // namespace nlv
