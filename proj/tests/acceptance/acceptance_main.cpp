#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpverify/dataset.hpp"
#include "nlpverify/error.hpp"
#include "nlpverify/geometry.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/model.hpp"
#include "nlpverify/pipeline.hpp"
#include "nlpverify/random.hpp"
#include "nlpverify/text_perturbation.hpp"
#include "nlpverify/verifier.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace nlv;

namespace {

struct Result {
  bool pass = true;
  std::string detail;
};

// Tolerances.
constexpr std::size_t kSoundnessSamples = 100000;
constexpr std::size_t kSoundnessPgdSteps = 50;
constexpr double kDegenerateTol = 1e-9;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-6;
constexpr double kGradFloor = 1e-8;
constexpr double kCovTol = 1e-8;
constexpr double kDistanceTol = 1e-9;
constexpr double kPcaTol = 1e-6;
constexpr double kMinVerifiedGap = 0.10;
constexpr double kMaxAccuracyDrop = 0.05;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nlpverify_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

MlpModel random_mlp(Rng& rng, std::size_t max_dim, std::size_t max_layers) {
  std::vector<std::size_t> sizes{1 + rng.index(max_dim)};
  const std::size_t layers = 1 + rng.index(max_layers);
  for (std::size_t l = 0; l + 1 < layers; ++l) sizes.push_back(1 + rng.index(max_dim));
  sizes.push_back(2 + rng.index(max_dim - 1));
  MlpModel m = init_mlp(sizes, rng.next());
  for (auto& layer : m.layers) {
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-0.5, 0.5);
  }
  return m;
}

Vector random_vector(Rng& rng, std::size_t n, double lo, double hi) {
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

HyperRectangle random_box(Rng& rng, std::size_t dim, std::size_t cls) {
  const Vector c = random_vector(rng, dim, -1.0, 1.0);
  Vector half(static_cast<Eigen::Index>(dim));
  const double scale = std::pow(10.0, rng.uniform(-3.0, 0.0));
  for (Eigen::Index i = 0; i < half.size(); ++i) half[i] = scale * rng.uniform(0.1, 1.0);
  HyperRectangle b;
  b.lower = c - half;
  b.upper = c + half;
  b.target_class = cls;
  return b;
}

Matrix correlated(Rng& rng, std::size_t n, std::size_t d) {
  Matrix mix(d, d);
  for (Eigen::Index i = 0; i < mix.size(); ++i) mix.data()[i] = rng.uniform(-1.0, 1.0);
  Matrix raw(n, d);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = rng.uniform(-1.0, 1.0);
  return raw * mix;
}

// ---------------------------------------------------------------------------

Result ibp_soundness() {
  Rng rng(101);
  std::size_t verified = 0, violations = 0, boxes = 0;
  for (std::size_t net = 0; net < 200; ++net) {
    const MlpModel m = random_mlp(rng, 8, 3);
    for (std::size_t b = 0; b < 5; ++b, ++boxes) {
      HyperRectangle box = random_box(rng, m.in_dim(), 0);
      const Vector mid = (box.lower + box.upper) / 2;
      box.target_class = strict_argmax(forward(m, mid)).value_or(0);
      const Verdict v = verify_box({&m, box}, {50, 200, rng.next()});
      if (v.outcome() != Outcome::Verified) continue;
      ++verified;
      const Matrix samples = box_sample(box, kSoundnessSamples, rng.next());
      const Matrix logits = forward_batch(m, samples);
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        if (strict_argmax(Vector(logits.row(r).transpose())) != box.target_class) ++violations;
      }
      const double step = (box.upper - box.lower).mean() / 10.0;
      for (std::size_t start = 0; start < 4; ++start) {
        Vector x0 = mid;
        if (start > 0) x0 = box_sample(box, 1, rng.next()).row(0).transpose();
        const Vector adv = pgd_attack(m, x0, box.target_class, box, kSoundnessPgdSteps, step);
        if (misclassifies(m, adv, box.target_class)) ++violations;
      }
    }
  }
  std::ostringstream s;
  s << boxes << " boxes, " << verified << " verified, " << violations << " violations";
  return {violations == 0 && verified > 0, s.str()};
}

Result degenerate_exactness() {
  Rng rng(202);
  double worst = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    const MlpModel m = random_mlp(rng, 8, 3);
    const Vector x = random_vector(rng, m.in_dim(), -2.0, 2.0);
    const Vector y = forward(m, x);
    const IntervalVector b = ibp_bounds(m, IntervalVector::point(x));
    worst = std::max({worst, (b.lo - y).cwiseAbs().maxCoeff(), (b.hi - y).cwiseAbs().maxCoeff()});
  }
  std::ostringstream s;
  s << "100 points, max deviation " << worst;
  return {worst <= kDegenerateTol, s.str()};
}

// Input with every hidden pre-activation away from the ReLU kink.
Vector kink_free_input(const MlpModel& m, Rng& rng) {
  for (;;) {
    const Vector x = random_vector(rng, m.in_dim(), -1.0, 1.0);
    Vector h = x;
    bool ok = true;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const Vector z = m.layers[l].weight * h + m.layers[l].bias;
      if (l + 1 < m.layers.size()) {
        if (z.cwiseAbs().minCoeff() < 1e-3) ok = false;
        h = z.cwiseMax(0.0);
      }
    }
    if (ok) return x;
  }
}

Result gradient_check() {
  Rng rng(303);
  double worst = 0.0;
  std::size_t params = 0;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kGradFloor}); };
  for (std::size_t net = 0; net < 50; ++net) {
    MlpModel m = random_mlp(rng, 6, 3);
    const Vector x = kink_free_input(m, rng);
    const std::size_t label = rng.index(m.out_dim());
    Gradients g;
    loss_and_gradients(m, x, label, &g);
    auto loss = [&](const MlpModel& mm) { return cross_entropy_loss(forward(mm, x), label).loss; };
    auto check = [&](double& p, double analytic) {
      const double keep = p;
      p = keep + kGradStep;
      const double up = loss(m);
      p = keep - kGradStep;
      const double down = loss(m);
      p = keep;
      worst = std::max(worst, rel(analytic, (up - down) / (2 * kGradStep)));
      ++params;
    };
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      auto& w = m.layers[l].weight;
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) check(w(r, c), g.weight[l](r, c));
      }
      auto& b = m.layers[l].bias;
      for (Eigen::Index r = 0; r < b.size(); ++r) check(b[r], g.bias[l][r]);
    }
  }
  std::ostringstream s;
  s << params << " parameters, max relative error " << worst;
  return {worst < kGradRelTol, s.str()};
}

Result geometry_suite() {
  Rng rng(404);
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + rng.index(7);
    const Matrix x = correlated(rng, 60 + rng.index(100), d);

    const RotationModel rot = fit_rotation(x);
    const Matrix r = apply_rotation(rot, x);
    const Matrix centered = r.rowwise() - r.colwise().mean();
    const Matrix cov = centered.transpose() * centered / double(r.rows() - 1);
    const double lmax = rot.eigenvalues.maxCoeff();
    double off = 0.0;
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
      for (Eigen::Index j = 0; j < cov.cols(); ++j) {
        if (i != j) off = std::max(off, std::abs(cov(i, j)));
      }
    }
    expect(off < kCovTol * lmax, "covariance off-diagonal");
    double dist = 0.0;
    for (Eigen::Index i = 0; i + 1 < x.rows(); ++i) {
      dist = std::max(dist, std::abs((x.row(i) - x.row(i + 1)).norm() - (r.row(i) - r.row(i + 1)).norm()));
    }
    expect(dist < kDistanceTol, "distance preservation");

    const std::size_t k = 1 + rng.index(d);
    const PcaModel pca = fit_pca(x, k);
    const Matrix back = reconstruct_pca(pca, apply_pca(pca, x));
    const double err = (x - back).squaredNorm() / double(x.rows() - 1);
    const double discarded = rot.eigenvalues.tail(static_cast<Eigen::Index>(d - k)).sum();
    expect(std::abs(err - discarded) < kPcaTol, "PCA reconstruction");

    std::vector<std::size_t> labels(static_cast<std::size_t>(x.rows()));
    for (auto& l : labels) l = rng.index(2);
    const HyperRectangle naive = box_naive(x, labels, 1);
    Vector lo = Vector::Constant(static_cast<Eigen::Index>(d), INFINITY);
    Vector hi = Vector::Constant(static_cast<Eigen::Index>(d), -INFINITY);
    std::vector<Eigen::Index> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      (labels[i] == 1 ? pos : neg).push_back(row);
      if (labels[i] != 1) continue;
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        lo[j] = std::min(lo[j], x(row, j));
        hi[j] = std::max(hi[j], x(row, j));
      }
    }
    expect(naive.lower == lo && naive.upper == hi, "box_naive scan");

    const Matrix p = x(pos, Eigen::all), n = x(neg, Eigen::all);
    try {
      const HyperRectangle s = box_shrink(naive, p, n);
      for (Eigen::Index i = 0; i < n.rows(); ++i) {
        expect(!box_contains(s, n.row(i).transpose()), "shrunk box contains a negative");
      }
      expect((s.lower.array() >= naive.lower.array()).all() && (s.upper.array() <= naive.upper.array()).all(),
             "shrunk box escapes input");
    } catch (const Error& e) {
      expect(e.kind() == ErrorKind::AllPositivesEvicted, e.what());
    }

    const auto clustered = box_cluster(x, labels, 1, 1, rng.next());
    expect(clustered.size() == 1 && clustered[0].lower == naive.lower && clustered[0].upper == naive.upper,
           "k=1 clustering");
  }
  std::set<std::string> unique(failures.begin(), failures.end());
  std::string detail = "20 datasets";
  for (const auto& f : unique) detail += "; " + f;
  return {failures.empty(), detail};
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
      if (i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1]) {
        d[i][j] = std::min(d[i][j], d[i - 2][j - 2] + 1);
      }
    }
  }
  return d[a.size()][b.size()];
}

std::vector<std::string> sorted_cores(const std::string& s) {
  std::vector<std::string> out;
  for (const auto& t : word_tokens(s)) out.emplace_back(word_core(t));
  std::sort(out.begin(), out.end());
  return out;
}

bool char_invariants(const std::string& in, const std::string& out, PerturbationKind kind) {
  const auto a = word_tokens(in), b = word_tokens(out);
  if (a.size() != b.size()) return false;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++changed;
    const std::string ca(word_core(a[i])), cb(word_core(b[i]));
    if (ca.size() < 3 || cb.empty() || ca.front() != cb.front() || ca.back() != cb.back()) return false;
  }
  if (changed != 1) return false;
  switch (kind) {
    case PerturbationKind::CharInsert:
    case PerturbationKind::CharRepeat:
      return out.size() == in.size() + 1 && edit_distance(in, out) == 1;
    case PerturbationKind::CharDelete:
      return out.size() + 1 == in.size() && edit_distance(in, out) == 1;
    case PerturbationKind::CharReplace:
      return out.size() == in.size() && edit_distance(in, out) == 1;
    case PerturbationKind::CharSwap: {
      std::vector<std::size_t> diff;
      for (std::size_t i = 0; i < in.size() && out.size() == in.size(); ++i) {
        if (in[i] != out[i]) diff.push_back(i);
      }
      return diff.size() == 2 && diff[1] == diff[0] + 1 && in[diff[0]] == out[diff[1]] &&
             in[diff[1]] == out[diff[0]];
    }
    default:
      return false;
  }
}

bool word_invariants(const std::string& in, const std::string& out, PerturbationKind kind) {
  const std::size_t a = word_tokens(in).size(), b = word_tokens(out).size();
  switch (kind) {
    case PerturbationKind::WordDelete: return b + 1 == a;
    case PerturbationKind::WordRepeat: return b == a + 1;
    case PerturbationKind::WordOrderSwap: return out != in && sorted_cores(in) == sorted_cores(out);
    default: return out != in && (b == a || b == a + 1 || b + 1 == a);
  }
}

Result perturbation_suite() {
  const std::vector<std::string> sentences{
      "Can u tell me if you are a chatbot?",
      "Are you a robot?",
      "I was wondering whether she likes the blue jacket.",
      "We don't know what they want.",
  };
  std::size_t bad = 0, runs = 0;
  for (PerturbationKind k : all_perturbation_kinds()) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed, ++runs) {
      const std::string& s = sentences[seed % sentences.size()];
      Rng rng(seed);
      try {
        const std::string out = perturb(s, k, rng);
        if (!(is_char_level(k) ? char_invariants(s, out, k) : word_invariants(s, out, k))) ++bad;
      } catch (const Error&) {
        ++bad;
      }
    }
  }
  auto producible = [](const std::string& in, PerturbationKind k, const std::string& want) {
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
      Rng rng(seed);
      try {
        if (perturb(in, k, rng) == want) return true;
      } catch (const Error&) {
      }
    }
    return false;
  };
  const std::string q = "Can u tell me if you are a chatbot?";
  std::size_t found = 0;
  found += producible("Are you a robot?", PerturbationKind::CharInsert, "Are yovu a robot?");
  found += producible("Are you a robot?", PerturbationKind::CharDelete, "Are you a robt?");
  found += producible(q, PerturbationKind::WordOrderSwap, "Can u tell me if you are chatbot a?");
  found += producible(q, PerturbationKind::WordNegate, "Can u tell me if you are not a chatbot?");
  std::ostringstream s;
  s << runs << " perturbations, " << bad << " invariant failures, " << found << "/4 examples reproduced";
  return {bad == 0 && found == 4, s.str()};
}

json trend_config() {
  return json::parse(R"({
    "seed": 1,
    "dataset": {"synthetic_per_class": 500},
    "box_perturbation": {"per_sentence_count": 20},
    "embedder": {"dim": 32},
    "prep": {"rotate": true, "pca_dim": 8},
    "boxes": {"kinds": ["perturbation"]},
    "train": {"modes": ["base", "adversarial"], "epochs": 100, "hidden": [16], "learning_rate": 0.05,
              "pgd": {"steps": 10, "region": "per_input_box"}},
    "verify": {"backend": "ibp"}
  })");
}

Result trend_reproduction() {
  const std::string raw = trend_config().dump();
  const EvaluationReport r = Pipeline(PipelineConfig::from_json(raw), scratch("trend"), raw).run_all();
  const ReportRow *base = nullptr, *adv = nullptr;
  for (const auto& row : r.rows) {
    if (row.provenance != ProvenanceKind::PerturbationBased) continue;
    if (row.model == "base") base = &row;
    if (row.model == "adversarial") adv = &row;
  }
  if (base == nullptr || adv == nullptr) return {false, "report rows missing"};
  std::ostringstream s;
  s << "verified base " << base->verified_percentage << " adversarial " << adv->verified_percentage
    << "; accuracy base " << base->standard_accuracy << " adversarial " << adv->standard_accuracy
    << "; " << base->total << " boxes";
  const bool gap = adv->verified_percentage >= base->verified_percentage + kMinVerifiedGap;
  const bool acc = std::abs(adv->standard_accuracy - base->standard_accuracy) <= kMaxAccuracyDrop;
  return {gap && acc, s.str()};
}

Result pgd_containment() {
  auto run = [](std::vector<Vector>& outs) {
    Rng rng(707);
    std::size_t escapes = 0;
    for (std::size_t i = 0; i < 10000; ++i) {
      const MlpModel m = random_mlp(rng, 6, 2);
      const HyperRectangle box = random_box(rng, m.in_dim(), rng.index(m.out_dim()));
      const Vector x = box_sample(box, 1, rng.next()).row(0).transpose();
      const double step = rng.uniform(0.01, 5.0);
      const Vector adv = pgd_attack(m, x, box.target_class, box, 1 + rng.index(20), step);
      if ((adv.array() < box.lower.array()).any() || (adv.array() > box.upper.array()).any()) ++escapes;
      outs.push_back(adv);
    }
    return escapes;
  };
  std::vector<Vector> a, b;
  const std::size_t escapes = run(a);
  run(b);
  bool identical = a.size() == b.size();
  for (std::size_t i = 0; identical && i < a.size(); ++i) {
    identical = std::memcmp(a[i].data(), b[i].data(), sizeof(double) * a[i].size()) == 0;
  }
  return {escapes == 0 && identical,
          std::to_string(a.size()) + " attacks, " + std::to_string(escapes) + " escapes, reruns " +
              (identical ? "bit-identical" : "differ")};
}

Result vnnlib_roundtrip() {
  Rng rng(808);
  const fs::path dir = scratch("vnnlib");
  std::size_t mismatches = 0;
  const std::vector<double> awkward{0.1, -1.0 / 3.0, 1e-300, 5e-324, 123456789.123456789, -0.0, 2.0 / 3.0};
  for (std::size_t i = 0; i < 200; ++i) {
    const MlpModel m = random_mlp(rng, 8, 2);
    HyperRectangle box = random_box(rng, m.in_dim(), rng.index(m.out_dim()));
    box.lower[0] = std::min(awkward[i % awkward.size()], box.upper[0]);
    const ExportedQuery q = export_query({&m, box}, dir / ("q" + std::to_string(i)));
    const VnnlibProperty p = parse_vnnlib(read_text_file(q.property));
    std::vector<std::pair<std::size_t, std::size_t>> want;
    for (std::size_t j = 0; j < m.out_dim(); ++j) {
      if (j != box.target_class) want.emplace_back(j, box.target_class);
    }
    auto got = p.disjuncts;
    std::sort(got.begin(), got.end());
    const bool ok = p.num_inputs == m.in_dim() && p.num_outputs == m.out_dim() &&
                    p.lower.size() == box.lower.size() && (p.lower.array() == box.lower.array()).all() &&
                    (p.upper.array() == box.upper.array()).all() && got == want &&
                    load_model(q.network) == m;
    mismatches += !ok;
  }
  return {mismatches == 0, "200 queries, " + std::to_string(mismatches) + " mismatches"};
}

std::map<std::string, std::string> outputs(const fs::path& out) {
  std::map<std::string, std::string> h;
  const json m = json::parse(read_text_file(out / "manifest.json"));
  for (const auto& [stage, rec] : m["stages"].items()) {
    for (const auto& [file, hash] : rec["outputs"].items()) h[file] = hash.get<std::string>();
  }
  return h;
}

Result pipeline_reproducibility() {
  const fs::path data = scratch("repro_data") / "robots.csv";
  write_text_file(data, dataset_to_csv(synthetic_robot_dataset(60, 5)));
  json j = json::parse(R"({
    "seed": 11,
    "box_perturbation": {"per_sentence_count": 4},
    "embedder": {"dim": 16},
    "prep": {"pca_dim": 6},
    "boxes": {"kinds": ["perturbation", "clustered", "eps_cube"], "k": 2},
    "train": {"modes": ["base", "augmented", "adversarial"], "epochs": 5, "hidden": [8]},
    "verify": {"samples": 50, "pgd_steps": 5}
  })");
  j["dataset"] = {{"path", data.string()}};
  auto run = [](const json& cfg, const fs::path& out) {
    const std::string raw = cfg.dump();
    Pipeline(PipelineConfig::from_json(raw), out, raw).run_all();
  };
  const fs::path a = scratch("repro_a"), b = scratch("repro_b"), c = scratch("repro_c");
  run(j, a);
  run(j, b);
  const bool same = outputs(a) == outputs(b);

  j["seed"] = 12;
  run(j, c);
  const json ma = json::parse(read_text_file(a / "manifest.json"));
  const json mc = json::parse(read_text_file(c / "manifest.json"));
  std::vector<std::string> leaks;
  json ca = ma["config"], cc = mc["config"];
  ca.erase("seed");
  cc.erase("seed");
  if (ca != cc) leaks.push_back("config");
  // A stage whose recorded inputs are unchanged must reproduce its outputs.
  std::size_t changed_stages = 0;
  for (const auto& [stage, rec] : mc["stages"].items()) {
    const json& old = ma["stages"][stage];
    if (rec["outputs"] != old["outputs"]) ++changed_stages;
    if (rec["inputs"] == old["inputs"] && rec["outputs"] != old["outputs"]) leaks.push_back(stage);
  }
  for (const char* unseeded : {"embed", "prep"}) {
    if (mc["stages"][unseeded]["inputs"]["config"] != ma["stages"][unseeded]["inputs"]["config"]) {
      leaks.push_back(std::string(unseeded) + " config");
    }
  }
  for (const char* file : {"embed/embeddings.csv", "embed/meta.json"}) {
    if (mc["stages"]["embed"]["outputs"][file] != ma["stages"]["embed"]["outputs"][file]) leaks.push_back(file);
  }
  std::string detail = std::string("rerun ") + (same ? "identical" : "differs") + "; seed change altered " +
                       std::to_string(changed_stages) + " stages";
  for (const auto& l : leaks) detail += "; unexpected change in " + l;
  return {same && leaks.empty() && changed_stages > 0, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Result()>>> criteria{
      {"IBP soundness", ibp_soundness},
      {"degenerate-box exactness", degenerate_exactness},
      {"gradient check", gradient_check},
      {"geometry suite", geometry_suite},
      {"perturbation suite", perturbation_suite},
      {"end-to-end verified-percentage trend", trend_reproduction},
      {"PGD containment and determinism", pgd_containment},
      {"VNN-LIB round-trip", vnnlib_roundtrip},
      {"pipeline reproducibility", pipeline_reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failed += !r.pass;
    std::printf("%s criterion %zu (%s): %s\n", r.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                r.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
