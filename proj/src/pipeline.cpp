#include "nlpverify/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <set>

#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr std::array<std::pair<Stage, std::string_view>, 7> kStageNames{{
    {Stage::Curate, "curate"},
    {Stage::Embed, "embed"},
    {Stage::Prep, "prep"},
    {Stage::Boxes, "boxes"},
    {Stage::Train, "train"},
    {Stage::Verify, "verify"},
    {Stage::Eval, "eval"},
}};

[[noreturn]] void config_error(const std::string& what) {
  throw Error(ErrorKind::ConfigError, what);
}

void check_keys(const json& obj, std::string_view section, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) config_error(std::string(section) + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error("unknown key '" + key + "' in " + std::string(section));
    }
  }
}

PolicySpec read_policy(const json& j, std::string_view section, PolicySpec fallback,
                       std::initializer_list<std::string_view> extra = {}) {
  if (j.is_null()) return fallback;
  std::vector<std::string_view> allowed{"kinds", "per_sentence_count"};
  allowed.insert(allowed.end(), extra.begin(), extra.end());
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error("unknown key '" + key + "' in " + std::string(section));
    }
  }
  PolicySpec p = fallback;
  if (j.contains("kinds")) {
    p.kinds.clear();
    for (const auto& k : j["kinds"]) {
      try {
        p.kinds.push_back(perturbation_kind_from_string(k.get<std::string>()));
      } catch (const Error& e) {
        config_error(std::string(section) + ": " + e.what());
      }
    }
  }
  p.per_sentence_count = j.value("per_sentence_count", p.per_sentence_count);
  return p;
}

json policy_json(const PolicySpec& p) {
  json kinds = json::array();
  for (auto k : p.kinds) kinds.push_back(std::string(to_string(k)));
  return {{"kinds", kinds}, {"per_sentence_count", p.per_sentence_count}};
}

PerturbationPolicy make_policy(const PolicySpec& spec, std::uint64_t seed) {
  return PerturbationPolicy{spec.kinds, spec.per_sentence_count, seed};
}

std::string json_hash(const json& j) { return sha256_hex(j.dump()); }

// Relative paths of every regular file under dir, sorted.
std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset subset(const Dataset& data, Split split, std::vector<std::size_t>* indices = nullptr) {
  Dataset out;
  out.num_classes = data.num_classes;
  out.label_names = data.label_names;
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    if (data.sentences[i].split != split) continue;
    out.sentences.push_back(data.sentences[i]);
    if (indices) indices->push_back(i);
  }
  return out;
}

std::vector<Eigen::Index> rows_where(const EmbeddedDataset& d, Split split, std::optional<std::size_t> label) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.splits[i] != split) continue;
    if (label && d.labels[i] != *label) continue;
    rows.push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

}  // namespace

std::string_view to_string(Stage stage) {
  for (const auto& [s, name] : kStageNames) {
    if (s == stage) return name;
  }
  return "unknown";
}

Stage stage_from_string(std::string_view name) {
  for (const auto& [s, n] : kStageNames) {
    if (n == name) return s;
  }
  throw Error(ErrorKind::ConfigError, "unknown stage '" + std::string(name) + "'");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::Curate, Stage::Embed, Stage::Prep, Stage::Boxes,
                                         Stage::Train,  Stage::Verify, Stage::Eval};
  return stages;
}

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig PipelineConfig::from_json(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  c.label_map = {{"ambiguous", 1}, {"negative", 0}, {"positive", 1}};
  c.augment = {all_perturbation_kinds(), 1};
  c.box_perturbation = {all_perturbation_kinds(), 10};
  c.attack = {all_perturbation_kinds(), 3};
  c.train.pgd = PgdConfig{};
  c.train.pgd->region = PgdRegion::PerInputBox;

  auto resolve = [&base_dir](const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };

  try {
    check_keys(j, "config", {"seed", "dataset", "augment", "box_perturbation", "attack", "embedder",
                             "prep", "boxes", "train", "verify"});
    c.seed = j.value("seed", c.seed);

    const json ds = j.value("dataset", json::object());
    check_keys(ds, "dataset", {"path", "synthetic_per_class", "label_map", "test_fraction"});
    if (ds.contains("path") && !ds["path"].is_null()) c.dataset_path = resolve(ds["path"].get<std::string>());
    c.synthetic_per_class = ds.value("synthetic_per_class", c.synthetic_per_class);
    if (ds.contains("label_map")) c.label_map = ds["label_map"].get<LabelMap>();
    c.test_fraction = ds.value("test_fraction", c.test_fraction);

    c.augment = read_policy(j.value("augment", json()), "augment", c.augment);
    c.box_perturbation = read_policy(j.value("box_perturbation", json()), "box_perturbation",
                                     c.box_perturbation);
    const json attack = j.value("attack", json());
    c.attack = read_policy(attack, "attack", c.attack, {"include_originals"});
    if (!attack.is_null()) c.attack_include_originals = attack.value("include_originals", false);

    const json em = j.value("embedder", json::object());
    check_keys(em, "embedder", {"dim", "n_low", "n_high", "seed", "lookup"});
    c.embed_dim = em.value("dim", c.embed_dim);
    c.ngram_low = em.value("n_low", c.ngram_low);
    c.ngram_high = em.value("n_high", c.ngram_high);
    c.embed_seed = em.value("seed", c.embed_seed);
    if (em.contains("lookup") && !em["lookup"].is_null()) {
      c.embedding_lookup = resolve(em["lookup"].get<std::string>());
    }

    const json pr = j.value("prep", json::object());
    check_keys(pr, "prep", {"rotate", "pca_dim"});
    c.rotate = pr.value("rotate", c.rotate);
    if (pr.contains("pca_dim") && !pr["pca_dim"].is_null()) c.pca_dim = pr["pca_dim"].get<std::size_t>();

    const json bx = j.value("boxes", json::object());
    check_keys(bx, "boxes", {"kinds", "k", "epsilon", "order"});
    if (bx.contains("kinds")) {
      c.box_kinds.clear();
      for (const auto& k : bx["kinds"]) {
        c.box_kinds.push_back(provenance_kind_from_string(k.get<std::string>()));
      }
    }
    c.cluster_k = bx.value("k", c.cluster_k);
    c.epsilon = bx.value("epsilon", c.epsilon);
    const std::string order = bx.value("order", std::string("cluster_then_shrink"));
    if (order != "cluster_then_shrink" && order != "shrink_then_cluster") {
      config_error("boxes.order must be cluster_then_shrink or shrink_then_cluster");
    }
    c.shrink_after_cluster = order == "cluster_then_shrink";

    const json tr = j.value("train", json::object());
    check_keys(tr, "train", {"modes", "epochs", "batch_size", "learning_rate", "hidden", "mix_clean", "pgd"});
    if (tr.contains("modes")) {
      c.train_modes.clear();
      for (const auto& m : tr["modes"]) c.train_modes.push_back(train_mode_from_string(m.get<std::string>()));
    }
    c.train.epochs = tr.value("epochs", c.train.epochs);
    c.train.batch_size = tr.value("batch_size", c.train.batch_size);
    c.train.learning_rate = tr.value("learning_rate", c.train.learning_rate);
    c.train.hidden = tr.value("hidden", c.train.hidden);
    c.train.mix_clean = tr.value("mix_clean", c.train.mix_clean);
    if (tr.contains("pgd")) {
      const json& p = tr["pgd"];
      check_keys(p, "train.pgd", {"steps", "step_size", "region", "epsilon"});
      c.train.pgd->steps = p.value("steps", c.train.pgd->steps);
      if (p.contains("step_size") && !p["step_size"].is_null()) {
        c.train.pgd->step_size = p["step_size"].get<double>();
      }
      c.train.pgd->region = pgd_region_from_string(p.value("region", std::string("per_input_box")));
      c.train.pgd->epsilon = p.value("epsilon", c.epsilon);
    } else {
      c.train.pgd->epsilon = c.epsilon;
    }

    const json vf = j.value("verify", json::object());
    check_keys(vf, "verify", {"backend", "pgd_steps", "samples"});
    c.backend = backend_from_string(vf.value("backend", std::string("ibp")));
    c.falsify_steps = vf.value("pgd_steps", c.falsify_steps);
    c.falsify_samples = vf.value("samples", c.falsify_samples);
  } catch (const json::exception& e) {
    config_error(std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError) throw;
    config_error(e.what());
  }
  return c;
}

std::string PipelineConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["dataset"] = {
      {"path", dataset_path ? json(dataset_path->string()) : json()},
      {"synthetic_per_class", synthetic_per_class},
      {"label_map", label_map},
      {"test_fraction", test_fraction},
  };
  j["augment"] = policy_json(augment);
  j["box_perturbation"] = policy_json(box_perturbation);
  j["attack"] = policy_json(attack);
  j["attack"]["include_originals"] = attack_include_originals;
  j["embedder"] = {
      {"dim", embed_dim},
      {"n_low", ngram_low},
      {"n_high", ngram_high},
      {"seed", embed_seed},
      {"lookup", embedding_lookup ? json(embedding_lookup->string()) : json()},
  };
  j["prep"] = {{"rotate", rotate}, {"pca_dim", pca_dim ? json(*pca_dim) : json()}};
  json kinds = json::array();
  for (auto k : box_kinds) kinds.push_back(std::string(to_string(k)));
  j["boxes"] = {{"kinds", kinds},
                {"k", cluster_k},
                {"epsilon", epsilon},
                {"order", shrink_after_cluster ? "cluster_then_shrink" : "shrink_then_cluster"}};
  json modes = json::array();
  for (auto m : train_modes) modes.push_back(std::string(to_string(m)));
  json tr = json::parse(train_config_to_json(train));
  tr.erase("mode");
  tr.erase("seed");
  tr["modes"] = modes;
  j["train"] = tr;
  j["verify"] = {{"backend", std::string(to_string(backend))},
                 {"pgd_steps", falsify_steps},
                 {"samples", falsify_samples}};
  return j.dump(2) + "\n";
}

void PipelineConfig::validate() const {
  if (dataset_path.has_value() == (synthetic_per_class > 0)) {
    config_error("exactly one of dataset.path and dataset.synthetic_per_class must be set");
  }
  if (dataset_path && !fs::exists(*dataset_path)) {
    config_error("dataset file does not exist: " + dataset_path->string());
  }
  if (dataset_path) {
    try {
      (void)dataset_format_for(*dataset_path);
    } catch (const Error& e) {
      config_error(e.what());
    }
  }
  if (label_map.empty()) config_error("label_map is empty");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) config_error("test_fraction must lie in (0, 1)");
  for (const auto* p : {&augment, &box_perturbation, &attack}) {
    if (p->kinds.empty() || p->per_sentence_count == 0) {
      config_error("perturbation policies need kinds and a positive per_sentence_count");
    }
  }
  std::size_t dim = embed_dim;
  if (embedding_lookup) {
    if (!fs::exists(*embedding_lookup)) {
      config_error("embedding lookup file does not exist: " + embedding_lookup->string());
    }
    dim = LookupEmbedder::from_file(*embedding_lookup).dim();
  } else {
    if (embed_dim < 2) config_error("embedder.dim must be >= 2");
    if (ngram_low < 1 || ngram_high < ngram_low) config_error("invalid n-gram range");
  }
  if (pca_dim && (*pca_dim < 1 || *pca_dim > dim)) {
    config_error("prep.pca_dim " + std::to_string(*pca_dim) + " exceeds embedding dimension " +
                 std::to_string(dim));
  }
  if (box_kinds.empty()) config_error("boxes.kinds is empty");
  if (cluster_k == 0) config_error("boxes.k must be positive");
  if (!(epsilon > 0.0)) config_error("boxes.epsilon must be positive");
  if (train_modes.empty()) config_error("train.modes is empty");
  if (train.epochs == 0 || train.batch_size == 0) config_error("epochs and batch_size must be positive");
  if (!(train.learning_rate > 0.0)) config_error("learning_rate must be positive");
  if (!train.pgd) config_error("train.pgd is required");
  if (!(train.pgd->epsilon > 0.0)) config_error("train.pgd.epsilon must be positive");
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig config, fs::path out_dir, std::optional<std::string> raw_config)
    : config_(std::move(config)), out_dir_(std::move(out_dir)), raw_config_(std::move(raw_config)) {}

std::uint64_t Pipeline::stage_seed(std::string_view purpose) const {
  return derive_seed(config_.seed, purpose);
}

std::unique_ptr<Embedder> Pipeline::make_embedder() const {
  if (config_.embedding_lookup) {
    return std::make_unique<LookupEmbedder>(LookupEmbedder::from_file(*config_.embedding_lookup));
  }
  return hashed_ngram_embedder(config_.embed_dim, config_.ngram_low, config_.ngram_high,
                               config_.embed_seed);
}

StageResult Pipeline::run_stage(Stage stage, bool force) {
  config_.validate();
  const json cfg = json::parse(config_.to_json());
  const bool per_input = std::any_of(config_.train_modes.begin(), config_.train_modes.end(),
                                     [](TrainMode m) { return m == TrainMode::Adversarial; }) &&
                         config_.train.pgd->region == PgdRegion::PerInputBox;

  // Named upstream artifacts, checked in order, plus the config slice.
  std::vector<std::pair<std::string, fs::path>> upstream;
  json slice;
  auto dataset_art = std::pair<std::string, fs::path>{"curated dataset", out_dir_ / "curate/dataset.jsonl"};
  auto prepared_art = std::pair<std::string, fs::path>{"prepared embeddings", out_dir_ / "prep/prepared.csv"};
  auto prep_art = std::pair<std::string, fs::path>{"preparation", out_dir_ / "prep/prep.json"};
  switch (stage) {
    case Stage::Curate:
      if (config_.dataset_path) upstream.emplace_back("dataset file", *config_.dataset_path);
      slice = {{"seed", cfg["seed"]}, {"dataset", cfg["dataset"]}, {"augment", cfg["augment"]},
               {"box_perturbation", cfg["box_perturbation"]}, {"attack", cfg["attack"]}};
      break;
    case Stage::Embed:
      upstream = {dataset_art, {"augmented dataset", out_dir_ / "curate/augmented.jsonl"}};
      if (config_.embedding_lookup) upstream.emplace_back("embedding lookup", *config_.embedding_lookup);
      slice = {{"embedder", cfg["embedder"]}};
      break;
    case Stage::Prep:
      upstream = {dataset_art,
                  {"embeddings", out_dir_ / "embed/embeddings.csv"},
                  {"augmented embeddings", out_dir_ / "embed/augmented_embeddings.csv"}};
      slice = {{"prep", cfg["prep"]}};
      break;
    case Stage::Boxes:
      upstream = {dataset_art, {"embeddings", out_dir_ / "embed/embeddings.csv"}, prep_art,
                  prepared_art};
      if (config_.embedding_lookup) upstream.emplace_back("embedding lookup", *config_.embedding_lookup);
      slice = {{"seed", cfg["seed"]}, {"boxes", cfg["boxes"]},
               {"box_perturbation", cfg["box_perturbation"]}, {"embedder", cfg["embedder"]},
               {"per_input", per_input}};
      break;
    case Stage::Train:
      upstream = {dataset_art, prep_art, prepared_art,
                  {"prepared augmented embeddings", out_dir_ / "prep/prepared_augmented.csv"}};
      if (per_input) upstream.emplace_back("training boxes", out_dir_ / "boxes/train_boxes.jsonl");
      slice = {{"seed", cfg["seed"]}, {"train", cfg["train"]}};
      break;
    case Stage::Verify:
      for (auto m : config_.train_modes) {
        upstream.emplace_back("model " + std::string(to_string(m)),
                              out_dir_ / "train" / ("model_" + std::string(to_string(m)) + ".txt"));
      }
      for (auto k : config_.box_kinds) {
        upstream.emplace_back("boxes " + std::string(to_string(k)),
                              out_dir_ / "boxes" / ("verify_" + std::string(to_string(k)) + ".jsonl"));
      }
      slice = {{"seed", cfg["seed"]}, {"verify", cfg["verify"]}, {"modes", cfg["train"]["modes"]},
               {"kinds", cfg["boxes"]["kinds"]}};
      break;
    case Stage::Eval:
      upstream = {dataset_art, prep_art, prepared_art};
      if (config_.embedding_lookup) upstream.emplace_back("embedding lookup", *config_.embedding_lookup);
      for (auto m : config_.train_modes) {
        const std::string name(to_string(m));
        upstream.emplace_back("model " + name, out_dir_ / "train" / ("model_" + name + ".txt"));
        upstream.emplace_back("verification " + name, out_dir_ / "verify" / (name + ".json"));
      }
      slice = {{"seed", cfg["seed"]}, {"attack", cfg["attack"]}, {"embedder", cfg["embedder"]},
               {"modes", cfg["train"]["modes"]}, {"kinds", cfg["boxes"]["kinds"]},
               {"verify", cfg["verify"]}};
      break;
  }

  json inputs;
  inputs["config"] = json_hash(slice);
  for (const auto& [name, path] : upstream) {
    if (!fs::exists(path)) {
      throw Error(ErrorKind::MissingUpstream, name + " (" + path.string() + ")");
    }
    inputs[name] = sha256_hex(read_text_file(path));
  }
  const std::string fingerprint = json_hash(inputs);

  const fs::path manifest_path = out_dir_ / "manifest.json";
  json manifest = json::object();
  if (fs::exists(manifest_path)) {
    try {
      manifest = json::parse(read_text_file(manifest_path));
    } catch (const json::parse_error&) {
      manifest = json::object();
    }
  }
  const std::string name(to_string(stage));
  const fs::path stage_dir = out_dir_ / name;

  if (!force && manifest.contains("stages") && manifest["stages"].contains(name)) {
    const json& entry = manifest["stages"][name];
    bool intact = entry.value("input_fingerprint", std::string()) == fingerprint;
    if (intact) {
      for (const auto& [rel, hash] : entry["outputs"].items()) {
        const fs::path p = out_dir_ / rel;
        if (!fs::exists(p) || sha256_hex(read_text_file(p)) != hash.get<std::string>()) {
          intact = false;
          break;
        }
      }
    }
    if (intact) return {stage, true};
  }

  fs::create_directories(out_dir_);
  if (raw_config_) write_text_file(out_dir_ / "config.json", *raw_config_);
  fs::remove_all(stage_dir);
  fs::create_directories(stage_dir);

  const auto start = std::chrono::steady_clock::now();
  switch (stage) {
    case Stage::Curate: curate(); break;
    case Stage::Embed: embed(); break;
    case Stage::Prep: prep(); break;
    case Stage::Boxes: boxes(); break;
    case Stage::Train: train(); break;
    case Stage::Verify: verify(); break;
    case Stage::Eval: eval(); break;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  json entry;
  entry["inputs"] = inputs;
  entry["input_fingerprint"] = fingerprint;
  json outputs = json::object();
  for (const auto& p : files_under(stage_dir)) {
    outputs[fs::relative(p, out_dir_).generic_string()] = sha256_hex(read_text_file(p));
  }
  entry["outputs"] = outputs;
  entry["seed"] = config_.seed;
  entry["wall_time_s"] = wall;
  manifest["config"] = cfg;
  manifest["stages"][name] = entry;
  write_text_file(manifest_path, manifest.dump(2) + "\n");
  return {stage, false};
}

EvaluationReport Pipeline::run_all(bool force) {
  config_.validate();
  for (Stage s : all_stages()) {
    try {
      run_stage(s, force);
    } catch (const Error& e) {
      std::string what = e.what();
      what = what.substr(what.find(": ") + 2);
      throw Error(e.kind(), "stage " + std::string(to_string(s)) + ": " + what);
    }
  }
  return EvaluationReport::from_json(read_text_file(out_dir_ / "eval/report.json"));
}

// ---------------------------------------------------------------------------
// Stages

void Pipeline::curate() {
  Dataset data = config_.dataset_path
                     ? load_dataset(*config_.dataset_path, dataset_format_for(*config_.dataset_path),
                                    config_.label_map)
                     : synthetic_robot_dataset(config_.synthetic_per_class, stage_seed("synthetic"));
  if (!config_.dataset_path) {
    data.label_names = {"negative", "positive"};
    for (const auto& [name, idx] : config_.label_map) {
      if (idx >= 2) config_error("synthetic dataset has two classes; label_map uses index " + std::to_string(idx));
    }
  }
  data = split_dataset(data, config_.test_fraction, stage_seed("split"));
  save_dataset(data, out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl);

  const Dataset train_part = subset(data, Split::Train);
  const AugmentResult aug = augment_dataset(train_part, make_policy(config_.augment, stage_seed("augment")));
  save_dataset(aug.data, out_dir_ / "curate/augmented.jsonl", DatasetFormat::Jsonl);

  // Every text a downstream stage embeds, for users supplying external vectors.
  std::set<std::string> texts;
  for (const auto& s : data.sentences) texts.insert(s.text);
  for (const auto& s : aug.data.sentences) texts.insert(s.text);
  const PerturbationPolicy box_policy = make_policy(config_.box_perturbation, stage_seed("box_perturbation"));
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    for (auto& v : perturb_variants(data.sentences[i].text, box_policy, i).variants) texts.insert(v);
  }
  const Dataset test_part = subset(data, Split::Test);
  const PerturbationPolicy attack_policy = make_policy(config_.attack, stage_seed("attack"));
  for (std::size_t i = 0; i < test_part.sentences.size(); ++i) {
    for (auto& v : perturb_variants(test_part.sentences[i].text, attack_policy, i).variants) texts.insert(v);
  }
  std::string lines;
  for (const auto& t : texts) lines += json{{"text", t}}.dump() + "\n";
  write_text_file(out_dir_ / "curate/all_texts.jsonl", lines);

  json stats = {{"sentences", data.size()},
                {"augmented", aug.data.size()},
                {"augment_skipped", aug.skipped},
                {"texts_to_embed", texts.size()}};
  write_text_file(out_dir_ / "curate/stats.json", stats.dump(2) + "\n");
}

void Pipeline::embed() {
  const auto embedder = make_embedder();
  const Dataset data = load_dataset(out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const Dataset aug = load_dataset(out_dir_ / "curate/augmented.jsonl", DatasetFormat::Jsonl, config_.label_map);
  save_embeddings(embed_dataset(data, *embedder), out_dir_ / "embed/embeddings.csv");
  save_embeddings(embed_dataset(aug, *embedder), out_dir_ / "embed/augmented_embeddings.csv");
  json meta = {{"embedder_id", embedder->id()},
               {"dim", embedder->dim()},
               {"seed", embedder->seed() ? json(*embedder->seed()) : json()},
               {"normalized", !config_.embedding_lookup.has_value()}};
  write_text_file(out_dir_ / "embed/meta.json", meta.dump(2) + "\n");
}

namespace {

EmbeddedDataset load_tagged(const fs::path& vectors, const Dataset& data) {
  EmbeddedDataset e = load_embeddings(vectors);
  if (e.size() != data.size()) {
    throw Error(ErrorKind::DimMismatch, vectors.string() + " has " + std::to_string(e.size()) +
                                            " rows for " + std::to_string(data.size()) + " sentences");
  }
  for (const auto& s : data.sentences) e.splits.push_back(s.split);
  return e;
}

}  // namespace

void Pipeline::prep() {
  const Dataset data = load_dataset(out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const Dataset aug = load_dataset(out_dir_ / "curate/augmented.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const EmbeddedDataset emb = load_tagged(out_dir_ / "embed/embeddings.csv", data);
  const EmbeddedDataset aug_emb = load_tagged(out_dir_ / "embed/augmented_embeddings.csv", aug);

  const EmbeddedDataset train_rows = emb.select(Split::Train);
  const Preparation p = Preparation::fit(train_rows.vectors, config_.rotate, config_.pca_dim);
  write_text_file(out_dir_ / "prep/prep.json", p.to_json());

  EmbeddedDataset prepared = emb;
  prepared.vectors = p.apply(emb.vectors);
  save_embeddings(prepared, out_dir_ / "prep/prepared.csv");
  EmbeddedDataset prepared_aug = aug_emb;
  prepared_aug.vectors = p.apply(aug_emb.vectors);
  save_embeddings(prepared_aug, out_dir_ / "prep/prepared_augmented.csv");

  json meta = {{"in_dim", p.in_dim()},
               {"out_dim", p.out_dim()},
               {"explained_variance_ratio", p.pca() ? p.pca()->explained_variance_ratio : 1.0}};
  write_text_file(out_dir_ / "prep/meta.json", meta.dump(2) + "\n");
}

void Pipeline::boxes() {
  const Dataset data = load_dataset(out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const EmbeddedDataset prepared = load_tagged(out_dir_ / "prep/prepared.csv", data);
  const Preparation p = Preparation::from_json(read_text_file(out_dir_ / "prep/prep.json"));
  const auto embedder = make_embedder();
  const PerturbationPolicy box_policy = make_policy(config_.box_perturbation, stage_seed("box_perturbation"));

  const auto train_rows = rows_where(prepared, Split::Train, std::nullopt);
  const Matrix train_vectors = prepared.vectors(train_rows, Eigen::all);
  std::vector<std::size_t> train_labels;
  for (auto r : train_rows) train_labels.push_back(prepared.labels[static_cast<std::size_t>(r)]);

  json stats = json::object();
  for (ProvenanceKind kind : config_.box_kinds) {
    std::vector<HyperRectangle> out;
    std::size_t dropped = 0;
    for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
      const auto pos_rows = rows_where(prepared, Split::Train, cls);
      std::vector<Eigen::Index> neg_rows;
      for (auto r : train_rows) {
        if (prepared.labels[static_cast<std::size_t>(r)] != cls) neg_rows.push_back(r);
      }
      const Matrix positives = prepared.vectors(pos_rows, Eigen::all);
      const Matrix negatives = prepared.vectors(neg_rows, Eigen::all);
      const std::uint64_t cseed = derive_seed(stage_seed("cluster"), cls);
      switch (kind) {
        case ProvenanceKind::Naive:
          out.push_back(box_naive(train_vectors, train_labels, cls));
          break;
        case ProvenanceKind::Clustered:
          for (auto& b : box_cluster(train_vectors, train_labels, cls, config_.cluster_k, cseed)) {
            out.push_back(std::move(b));
          }
          break;
        case ProvenanceKind::Shrunk:
          if (config_.shrink_after_cluster) {
            for (const auto& b : box_cluster(train_vectors, train_labels, cls, config_.cluster_k, cseed)) {
              try {
                HyperRectangle s = box_shrink(b, positives, negatives);
                s.provenance.index = b.provenance.index;
                out.push_back(std::move(s));
              } catch (const Error& e) {
                if (e.kind() != ErrorKind::AllPositivesEvicted) throw;
                ++dropped;
              }
            }
          } else {
            HyperRectangle s;
            try {
              s = box_shrink(box_naive(train_vectors, train_labels, cls), positives, negatives);
            } catch (const Error& e) {
              if (e.kind() != ErrorKind::AllPositivesEvicted) throw;
              ++dropped;
              break;
            }
            std::vector<Eigen::Index> inside;
            for (Eigen::Index r = 0; r < positives.rows(); ++r) {
              if (box_contains(s, positives.row(r).transpose())) inside.push_back(r);
            }
            const Matrix kept = positives(inside, Eigen::all);
            const std::size_t k = std::min(config_.cluster_k, inside.size());
            const KMeansResult km = kmeans(kept, k, cseed);
            for (std::size_t c = 0; c < k; ++c) {
              std::vector<Eigen::Index> members;
              for (std::size_t i = 0; i < km.assignment.size(); ++i) {
                if (km.assignment[i] == c) members.push_back(static_cast<Eigen::Index>(i));
              }
              if (members.empty()) continue;
              out.push_back(box_around(kept(members, Eigen::all), cls, {ProvenanceKind::Shrunk, c, 0.0}));
            }
          }
          break;
        case ProvenanceKind::PerturbationBased:
        case ProvenanceKind::EpsCube:
          break;
      }
    }
    if (kind == ProvenanceKind::PerturbationBased || kind == ProvenanceKind::EpsCube) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.sentences[i].split != Split::Test) continue;
        if (kind == ProvenanceKind::PerturbationBased) {
          out.push_back(box_from_perturbations(data.sentences[i], i, box_policy, *embedder, p));
        } else {
          out.push_back(eps_cube(prepared.vectors.row(static_cast<Eigen::Index>(i)).transpose(),
                                 config_.epsilon, data.sentences[i].label, i));
        }
      }
    }
    stats[std::string(to_string(kind))] = {{"boxes", out.size()}, {"dropped", dropped}};
    save_boxes(out, out_dir_ / "boxes" / ("verify_" + std::string(to_string(kind)) + ".jsonl"));
  }

  const bool per_input = std::any_of(config_.train_modes.begin(), config_.train_modes.end(),
                                     [](TrainMode m) { return m == TrainMode::Adversarial; }) &&
                         config_.train.pgd->region == PgdRegion::PerInputBox;
  if (per_input) {
    std::vector<HyperRectangle> train_boxes;
    for (auto r : train_rows) {
      const auto i = static_cast<std::size_t>(r);
      train_boxes.push_back(box_from_perturbations(data.sentences[i], i, box_policy, *embedder, p));
    }
    save_boxes(train_boxes, out_dir_ / "boxes/train_boxes.jsonl");
  }
  write_text_file(out_dir_ / "boxes/stats.json", stats.dump(2) + "\n");
}

void Pipeline::train() {
  const Dataset data = load_dataset(out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const Dataset aug = load_dataset(out_dir_ / "curate/augmented.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const EmbeddedDataset prepared = load_tagged(out_dir_ / "prep/prepared.csv", data);
  const EmbeddedDataset prepared_aug = load_tagged(out_dir_ / "prep/prepared_augmented.csv", aug);
  const Preparation p = Preparation::from_json(read_text_file(out_dir_ / "prep/prep.json"));

  std::optional<std::vector<HyperRectangle>> train_boxes;
  const fs::path boxes_path = out_dir_ / "boxes/train_boxes.jsonl";
  for (TrainMode mode : config_.train_modes) {
    TrainConfig c = config_.train;
    c.mode = mode;
    c.seed = stage_seed("train");
    const std::vector<HyperRectangle>* regions = nullptr;
    if (mode == TrainMode::Adversarial && c.pgd->region == PgdRegion::PerInputBox) {
      if (!train_boxes) train_boxes = load_boxes(boxes_path);
      regions = &*train_boxes;
    }
    const EmbeddedDataset& source = mode == TrainMode::Augmented ? prepared_aug : prepared;
    const TrainedModelBundle bundle = nlv::train(source, regions, c, p);
    const std::string name(to_string(mode));
    save_model(bundle.model, out_dir_ / "train" / ("model_" + name + ".txt"));
    json meta = {{"config", json::parse(train_config_to_json(c))},
                 {"train_loss", bundle.history.train_loss},
                 {"train_accuracy", bundle.history.train_accuracy}};
    write_text_file(out_dir_ / "train" / ("bundle_" + name + ".json"), meta.dump(2) + "\n");
  }
}

void Pipeline::verify() {
  for (TrainMode mode : config_.train_modes) {
    const std::string name(to_string(mode));
    const MlpModel model = load_model(out_dir_ / "train" / ("model_" + name + ".txt"));
    json result = json::object();
    for (ProvenanceKind kind : config_.box_kinds) {
      const std::string kname(to_string(kind));
      const auto boxes = load_boxes(out_dir_ / "boxes" / ("verify_" + kname + ".jsonl"));
      json entry = {{"total", 0}, {"verified", 0}, {"falsified", 0}, {"unknown", 0},
                    {"outcomes", json::array()}};
      if (!boxes.empty()) {
        VerifyOptions opts;
        opts.backend = config_.backend;
        opts.falsify = {config_.falsify_steps, config_.falsify_samples, stage_seed("verify")};
        opts.export_dir = out_dir_ / "verify" / ("queries_" + name + "_" + kname);
        const VerificationSummary s = verified_percentage(model, boxes, opts);
        std::size_t total = 0, verified = 0, falsified = 0, unknown = 0;
        for (const auto& r : s.rows) {
          total += r.total;
          verified += r.verified;
          falsified += r.falsified;
          unknown += r.unknown;
        }
        json outcomes = json::array();
        for (auto o : s.outcomes) outcomes.push_back(std::string(to_string(o)));
        entry = {{"total", total}, {"verified", verified}, {"falsified", falsified},
                 {"unknown", unknown}, {"outcomes", outcomes}};
      }
      result[kname] = entry;
    }
    write_text_file(out_dir_ / "verify" / (name + ".json"), result.dump(2) + "\n");
  }
}

void Pipeline::eval() {
  const Dataset data = load_dataset(out_dir_ / "curate/dataset.jsonl", DatasetFormat::Jsonl, config_.label_map);
  const EmbeddedDataset prepared = load_tagged(out_dir_ / "prep/prepared.csv", data);
  const Preparation p = Preparation::from_json(read_text_file(out_dir_ / "prep/prep.json"));
  const EmbeddedDataset test = prepared.select(Split::Test);
  const Dataset test_sentences = subset(data, Split::Test);
  const auto embedder = make_embedder();
  const PerturbationPolicy attack_policy = make_policy(config_.attack, stage_seed("attack"));

  EvaluationReport report;
  report.config_fingerprint = sha256_hex(config_.to_json());
  for (const char* purpose : {"split", "augment", "box_perturbation", "attack", "cluster", "train", "verify"}) {
    report.seeds[purpose] = stage_seed(purpose);
  }
  report.seeds["master"] = config_.seed;

  for (TrainMode mode : config_.train_modes) {
    const std::string name(to_string(mode));
    TrainedModelBundle bundle;
    bundle.model = load_model(out_dir_ / "train" / ("model_" + name + ".txt"));
    bundle.prep = p;
    const double std_acc = standard_accuracy(bundle, test);
    const double atk_acc =
        attack_accuracy(bundle, test_sentences, attack_policy, *embedder, config_.attack_include_originals)
            .accuracy;
    const json verdicts = json::parse(read_text_file(out_dir_ / "verify" / (name + ".json")));
    for (ProvenanceKind kind : config_.box_kinds) {
      const json& v = verdicts.at(std::string(to_string(kind)));
      ReportRow row;
      row.model = name;
      row.provenance = kind;
      row.backend = config_.backend;
      row.standard_accuracy = std_acc;
      row.attack_accuracy = atk_acc;
      row.total = v.at("total").get<std::size_t>();
      row.verified = v.at("verified").get<std::size_t>();
      row.falsified = v.at("falsified").get<std::size_t>();
      row.unknown = v.at("unknown").get<std::size_t>();
      row.verified_percentage =
          row.total == 0 ? 0.0 : static_cast<double>(row.verified) / static_cast<double>(row.total);
      report.rows.push_back(row);
    }
  }
  write_text_file(out_dir_ / "eval/report.json", report.to_json());
  write_text_file(out_dir_ / "eval/report.csv", report.to_csv());
}

}  // namespace nlv
