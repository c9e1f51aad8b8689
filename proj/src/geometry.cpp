#include "nlpverify/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_cols(const Matrix& m, std::size_t dim, const char* what) {
  if (static_cast<std::size_t>(m.cols()) != dim) {
    throw Error(ErrorKind::DimMismatch, std::string(what) + ": expected " + std::to_string(dim) +
                                            " columns, got " + std::to_string(m.cols()));
  }
}

double side_log(double side) { return side > 0.0 ? std::log(side) : kNegInf; }

json vector_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Vector vector_from_json(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorKind::ParseError, "expected a numeric array");
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw Error(ErrorKind::ParseError, "non-numeric array entry");
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

RotationModel fit_rotation(const Matrix& vectors) {
  if (vectors.rows() < 2) {
    throw Error(ErrorKind::InvalidArgument, "fit_rotation needs at least two vectors");
  }
  if (!vectors.allFinite()) throw Error(ErrorKind::InvalidArgument, "non-finite input");
  const Eigen::Index n = vectors.rows();
  const Eigen::Index d = vectors.cols();

  RotationModel model;
  model.mean = vectors.colwise().mean().transpose();
  const Eigen::MatrixXd centered = vectors.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorKind::NumericalFailure, "eigendecomposition did not converge");
  }
  // Eigen returns ascending order.
  model.basis.resize(d, d);
  model.eigenvalues.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const Eigen::Index src = d - 1 - j;
    Eigen::VectorXd col = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i) {
      if (std::abs(col[i]) > std::abs(col[arg])) arg = i;
    }
    if (col[arg] < 0) col = -col;
    model.basis.col(j) = col;
    // Round-off can leave tiny negatives for singular covariances.
    model.eigenvalues[j] = std::max(0.0, solver.eigenvalues()[src]);
  }
  return model;
}

Matrix apply_rotation(const RotationModel& model, const Matrix& vectors) {
  require_cols(vectors, model.dim(), "apply_rotation");
  return (vectors.rowwise() - model.mean.transpose()) * model.basis;
}

Matrix invert_rotation(const RotationModel& model, const Matrix& rotated) {
  require_cols(rotated, model.dim(), "invert_rotation");
  Matrix out = rotated * model.basis.transpose();
  out.rowwise() += model.mean.transpose();
  return out;
}

PcaModel fit_pca(const Matrix& vectors, std::size_t out_dim) {
  const auto d = static_cast<std::size_t>(vectors.cols());
  if (out_dim < 1 || out_dim > d) {
    throw Error(ErrorKind::DimMismatch, "pca out_dim " + std::to_string(out_dim) +
                                            " outside 1.." + std::to_string(d));
  }
  PcaModel model;
  model.rotation = fit_rotation(vectors);
  model.out_dim = out_dim;
  const double total = model.rotation.eigenvalues.sum();
  const double kept = model.rotation.eigenvalues.head(static_cast<Eigen::Index>(out_dim)).sum();
  model.explained_variance_ratio = total > 0.0 ? kept / total : 1.0;
  return model;
}

Matrix apply_pca(const PcaModel& model, const Matrix& vectors) {
  return apply_rotation(model.rotation, vectors).leftCols(static_cast<Eigen::Index>(model.out_dim));
}

Matrix reconstruct_pca(const PcaModel& model, const Matrix& reduced) {
  require_cols(reduced, model.out_dim, "reconstruct_pca");
  Matrix out = reduced * model.rotation.basis.leftCols(static_cast<Eigen::Index>(model.out_dim)).transpose();
  out.rowwise() += model.rotation.mean.transpose();
  return out;
}

Preparation Preparation::identity(std::size_t dim) {
  Preparation p;
  p.in_dim_ = dim;
  return p;
}

Preparation Preparation::fit(const Matrix& train_vectors, bool rotate,
                             std::optional<std::size_t> pca_dim) {
  Preparation p;
  p.in_dim_ = static_cast<std::size_t>(train_vectors.cols());
  if (pca_dim) {
    p.pca_ = fit_pca(train_vectors, *pca_dim);
  } else if (rotate) {
    p.pca_ = fit_pca(train_vectors, p.in_dim_);
  }
  return p;
}

Matrix Preparation::apply(const Matrix& vectors) const {
  require_cols(vectors, in_dim_, "Preparation::apply");
  return pca_ ? apply_pca(*pca_, vectors) : vectors;
}

Vector Preparation::apply(const Vector& vector) const {
  Matrix row = vector.transpose();
  return apply(row).row(0).transpose();
}

std::string Preparation::to_json() const {
  json j;
  j["in_dim"] = in_dim_;
  if (!pca_) {
    j["kind"] = "identity";
  } else {
    const auto& r = pca_->rotation;
    j["kind"] = "pca";
    j["out_dim"] = pca_->out_dim;
    j["explained_variance_ratio"] = pca_->explained_variance_ratio;
    j["mean"] = vector_json(r.mean);
    j["eigenvalues"] = vector_json(r.eigenvalues);
    json basis = json::array();
    for (Eigen::Index i = 0; i < r.basis.rows(); ++i) {
      basis.push_back(vector_json(r.basis.row(i).transpose()));
    }
    j["basis"] = basis;
  }
  return j.dump() + "\n";
}

Preparation Preparation::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
  Preparation p;
  p.in_dim_ = j.at("in_dim").get<std::size_t>();
  if (j.at("kind") == "pca") {
    PcaModel m;
    m.out_dim = j.at("out_dim").get<std::size_t>();
    m.explained_variance_ratio = j.at("explained_variance_ratio").get<double>();
    m.rotation.mean = vector_from_json(j.at("mean"));
    m.rotation.eigenvalues = vector_from_json(j.at("eigenvalues"));
    const auto& basis = j.at("basis");
    m.rotation.basis.resize(static_cast<Eigen::Index>(basis.size()),
                            static_cast<Eigen::Index>(basis.size()));
    for (std::size_t i = 0; i < basis.size(); ++i) {
      m.rotation.basis.row(static_cast<Eigen::Index>(i)) = vector_from_json(basis[i]).transpose();
    }
    if (m.rotation.dim() != p.in_dim_) {
      throw Error(ErrorKind::DimMismatch, "preparation mean length differs from in_dim");
    }
    p.pca_ = std::move(m);
  }
  return p;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ProvenanceKind kind) {
  switch (kind) {
    case ProvenanceKind::Naive: return "naive";
    case ProvenanceKind::Shrunk: return "shrunk";
    case ProvenanceKind::Clustered: return "clustered";
    case ProvenanceKind::PerturbationBased: return "perturbation";
    case ProvenanceKind::EpsCube: return "eps_cube";
  }
  return "unknown";
}

ProvenanceKind provenance_kind_from_string(std::string_view name) {
  for (auto k : {ProvenanceKind::Naive, ProvenanceKind::Shrunk, ProvenanceKind::Clustered,
                 ProvenanceKind::PerturbationBased, ProvenanceKind::EpsCube}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::InvalidArgument, "unknown box provenance '" + std::string(name) + "'");
}

void HyperRectangle::validate() const {
  if (lower.size() != upper.size()) {
    throw Error(ErrorKind::InvalidArgument, "box bounds differ in length");
  }
  if ((!open_lower.empty() && open_lower.size() != dim()) ||
      (!open_upper.empty() && open_upper.size() != dim())) {
    throw Error(ErrorKind::InvalidArgument, "open-face flags differ in length");
  }
  if (!lower.allFinite() || !upper.allFinite()) {
    throw Error(ErrorKind::InvalidArgument, "box has non-finite bounds");
  }
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    if (lower[i] > upper[i]) {
      throw Error(ErrorKind::InvalidArgument, "box lower > upper at dimension " + std::to_string(i));
    }
  }
}

bool HyperRectangle::operator==(const HyperRectangle& other) const {
  auto flags = [](const std::vector<bool>& f, std::size_t n) {
    return f.empty() ? std::vector<bool>(n, false) : f;
  };
  return lower.size() == other.lower.size() && lower == other.lower && upper == other.upper &&
         target_class == other.target_class && provenance == other.provenance &&
         flags(open_lower, dim()) == flags(other.open_lower, dim()) &&
         flags(open_upper, dim()) == flags(other.open_upper, dim());
}

bool box_contains(const HyperRectangle& box, const Vector& point) {
  if (static_cast<std::size_t>(point.size()) != box.dim()) {
    throw Error(ErrorKind::DimMismatch, "point dimension differs from box");
  }
  for (std::size_t i = 0; i < box.dim(); ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    const double x = point[e];
    if (box.lower_open(i) ? !(x > box.lower[e]) : !(x >= box.lower[e])) return false;
    if (box.upper_open(i) ? !(x < box.upper[e]) : !(x <= box.upper[e])) return false;
  }
  return true;
}

bool box_contains_closed(const HyperRectangle& box, const Vector& point) {
  if (static_cast<std::size_t>(point.size()) != box.dim()) {
    throw Error(ErrorKind::DimMismatch, "point dimension differs from box");
  }
  return (point.array() >= box.lower.array()).all() && (point.array() <= box.upper.array()).all();
}

double box_log_volume(const HyperRectangle& box) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < box.lower.size(); ++i) {
    const double side = box.upper[i] - box.lower[i];
    if (!(side > 0.0)) return kNegInf;
    total += std::log(side);
  }
  return total;
}

Matrix box_sample(const HyperRectangle& box, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  Matrix out(static_cast<Eigen::Index>(count), box.lower.size());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      out(r, c) = rng.uniform(box.lower[c], box.upper[c]);
    }
  }
  return out;
}

HyperRectangle box_around(const Matrix& points, std::size_t cls, Provenance provenance) {
  if (points.rows() == 0) throw Error(ErrorKind::EmptyClass, "no points to enclose");
  HyperRectangle box;
  box.lower = points.colwise().minCoeff().transpose();
  box.upper = points.colwise().maxCoeff().transpose();
  box.target_class = cls;
  box.provenance = provenance;
  return box;
}

HyperRectangle box_naive(const Matrix& vectors, std::span<const std::size_t> labels,
                         std::size_t cls) {
  if (labels.size() != static_cast<std::size_t>(vectors.rows())) {
    throw Error(ErrorKind::DimMismatch, "labels and vectors differ in length");
  }
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) throw Error(ErrorKind::EmptyClass, "class " + std::to_string(cls) + " is empty");
  return box_around(vectors(rows, Eigen::all), cls, {ProvenanceKind::Naive, 0, 0.0});
}

HyperRectangle box_shrink(const HyperRectangle& box, const Matrix& positives,
                          const Matrix& negatives) {
  box.validate();
  require_cols(positives, box.dim(), "box_shrink positives");
  if (negatives.rows() > 0) require_cols(negatives, box.dim(), "box_shrink negatives");

  HyperRectangle out = box;
  const std::size_t d = box.dim();
  out.open_lower.resize(d, false);
  out.open_upper.resize(d, false);
  out.provenance.kind = ProvenanceKind::Shrunk;

  std::vector<Eigen::Index> inside_pos;
  for (Eigen::Index r = 0; r < positives.rows(); ++r) {
    if (box_contains(out, positives.row(r).transpose())) inside_pos.push_back(r);
  }
  if (inside_pos.empty()) {
    throw Error(ErrorKind::InvalidArgument, "box_shrink: box contains no positive point");
  }

  while (true) {
    Eigen::Index neg = -1;
    for (Eigen::Index r = 0; r < negatives.rows(); ++r) {
      if (box_contains(out, negatives.row(r).transpose())) {
        neg = r;
        break;
      }
    }
    if (neg < 0) break;

    struct Cut {
      std::size_t evicted;
      double volume_loss;
      std::size_t dim;
      bool keep_lower;  // true: upper face moves down to the negative
    };
    std::optional<Cut> best;
    for (std::size_t i = 0; i < d; ++i) {
      const auto e = static_cast<Eigen::Index>(i);
      const double v = negatives(neg, e);
      const double old_side = out.upper[e] - out.lower[e];
      for (bool keep_lower : {true, false}) {
        std::size_t evicted = 0;
        for (Eigen::Index r : inside_pos) {
          const double x = positives(r, e);
          if (keep_lower ? x >= v : x <= v) ++evicted;
        }
        const double new_side = keep_lower ? v - out.lower[e] : out.upper[e] - v;
        const double loss = new_side == old_side ? 0.0 : side_log(old_side) - side_log(new_side);
        Cut cut{evicted, loss, i, keep_lower};
        // Candidates arrive in (dim, keep_lower-first) order, so strict
        // comparison keeps the earliest on ties.
        if (!best || cut.evicted < best->evicted ||
            (cut.evicted == best->evicted && cut.volume_loss < best->volume_loss)) {
          best = cut;
        }
      }
    }

    const auto e = static_cast<Eigen::Index>(best->dim);
    const double v = negatives(neg, e);
    if (best->keep_lower) {
      out.upper[e] = v;
      out.open_upper[best->dim] = true;
    } else {
      out.lower[e] = v;
      out.open_lower[best->dim] = true;
    }
    std::erase_if(inside_pos,
                  [&](Eigen::Index r) { return !box_contains(out, positives.row(r).transpose()); });
    if (inside_pos.empty()) {
      throw Error(ErrorKind::AllPositivesEvicted, "shrinking evicted every positive point");
    }
  }
  return out;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter,
                    double tol) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) throw Error(ErrorKind::EmptyClass, "kmeans on an empty point set");
  if (k == 0 || k > n) {
    throw Error(ErrorKind::KTooLarge,
                "k = " + std::to_string(k) + " with " + std::to_string(n) + " points");
  }
  const Eigen::Index dim = points.cols();
  auto sqdist = [&](std::size_t i, const Matrix& c, std::size_t j) {
    return (points.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(j))).squaredNorm();
  };

  KMeansResult res;
  res.centroids.resize(static_cast<Eigen::Index>(k), dim);
  Rng rng(seed);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t next = rng.index(n);
  for (std::size_t c = 0; c < k; ++c) {
    res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(next));
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sqdist(i, res.centroids, c));
    next = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
  }

  res.assignment.assign(n, 0);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    double objective = 0.0;
    std::vector<double> own(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bestd = sqdist(i, res.centroids, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sqdist(i, res.centroids, c);
        if (dd < bestd) {
          bestd = dd;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      own[i] = bestd;
      objective += bestd;
    }
    res.objective_history.push_back(objective);
    res.iterations = iter + 1;

    Matrix updated = Matrix::Zero(static_cast<Eigen::Index>(k), dim);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      updated.row(static_cast<Eigen::Index>(res.assignment[i])) += points.row(static_cast<Eigen::Index>(i));
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        updated.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
        continue;
      }
      // Re-seed from the point farthest from its own centroid.
      const auto far = static_cast<std::size_t>(std::max_element(own.begin(), own.end()) - own.begin());
      updated.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(far));
      own[far] = 0.0;
    }
    const double shift = (updated - res.centroids).rowwise().norm().maxCoeff();
    res.centroids = std::move(updated);
    if (shift < tol) break;
  }
  // Final assignment against the converged centroids.
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t arg = 0;
    double bestd = sqdist(i, res.centroids, 0);
    for (std::size_t c = 1; c < k; ++c) {
      const double dd = sqdist(i, res.centroids, c);
      if (dd < bestd) {
        bestd = dd;
        arg = c;
      }
    }
    res.assignment[i] = arg;
  }
  return res;
}

std::vector<HyperRectangle> box_cluster(const Matrix& vectors, std::span<const std::size_t> labels,
                                        std::size_t cls, std::size_t k, std::uint64_t seed) {
  if (labels.size() != static_cast<std::size_t>(vectors.rows())) {
    throw Error(ErrorKind::DimMismatch, "labels and vectors differ in length");
  }
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) throw Error(ErrorKind::EmptyClass, "class " + std::to_string(cls) + " is empty");
  if (k > rows.size()) {
    throw Error(ErrorKind::KTooLarge, "k = " + std::to_string(k) + " exceeds class size " +
                                          std::to_string(rows.size()));
  }
  const Matrix points = vectors(rows, Eigen::all);
  const KMeansResult km = kmeans(points, k, seed);

  std::vector<HyperRectangle> boxes;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < km.assignment.size(); ++i) {
      if (km.assignment[i] == c) members.push_back(static_cast<Eigen::Index>(i));
    }
    if (members.empty()) continue;
    boxes.push_back(box_around(points(members, Eigen::all), cls,
                               {ProvenanceKind::Clustered, c, 0.0}));
  }
  return boxes;
}

HyperRectangle box_from_perturbations(const LabeledSentence& sentence, std::size_t stream_index,
                                      const PerturbationPolicy& policy, const Embedder& embedder,
                                      const Preparation& prep) {
  VariantSet vs = perturb_variants(sentence.text, policy, stream_index);
  std::vector<std::string> texts{sentence.text};
  for (auto& v : vs.variants) texts.push_back(std::move(v));
  const Matrix prepared = prep.apply(embedder.embed(texts));
  return box_around(prepared, sentence.label,
                    {ProvenanceKind::PerturbationBased, stream_index, 0.0});
}

HyperRectangle eps_cube(const Vector& center, double epsilon, std::size_t cls, std::size_t center_id) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw Error(ErrorKind::InvalidArgument, "epsilon must be positive and finite");
  }
  HyperRectangle box;
  box.lower = center.array() - epsilon;
  box.upper = center.array() + epsilon;
  box.target_class = cls;
  box.provenance = {ProvenanceKind::EpsCube, center_id, epsilon};
  return box;
}

std::string boxes_to_jsonl(const std::vector<HyperRectangle>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    b.validate();
    json j;
    j["lower"] = vector_json(b.lower);
    j["upper"] = vector_json(b.upper);
    j["class"] = b.target_class;
    json prov;
    prov["kind"] = std::string(to_string(b.provenance.kind));
    prov["index"] = b.provenance.index;
    if (b.provenance.kind == ProvenanceKind::EpsCube) prov["epsilon"] = b.provenance.epsilon;
    j["provenance"] = prov;
    json ol = json::array();
    json ou = json::array();
    for (std::size_t i = 0; i < b.dim(); ++i) {
      if (b.lower_open(i)) ol.push_back(i);
      if (b.upper_open(i)) ou.push_back(i);
    }
    if (!ol.empty()) j["open_lower"] = ol;
    if (!ou.empty()) j["open_upper"] = ou;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<HyperRectangle> boxes_from_jsonl(const std::string& text) {
  std::vector<HyperRectangle> boxes;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      HyperRectangle b;
      b.lower = vector_from_json(j.at("lower"));
      b.upper = vector_from_json(j.at("upper"));
      b.target_class = j.at("class").get<std::size_t>();
      const auto& prov = j.at("provenance");
      b.provenance.kind = provenance_kind_from_string(prov.at("kind").get<std::string>());
      b.provenance.index = prov.value("index", std::size_t{0});
      b.provenance.epsilon = prov.value("epsilon", 0.0);
      for (const char* key : {"open_lower", "open_upper"}) {
        if (!j.contains(key)) continue;
        auto& flags = std::string_view(key) == "open_lower" ? b.open_lower : b.open_upper;
        flags.assign(b.dim(), false);
        for (const auto& idx : j[key]) {
          const auto i = idx.get<std::size_t>();
          if (i >= b.dim()) throw Error(ErrorKind::ParseError, "open-face index out of range");
          flags[i] = true;
        }
      }
      b.validate();
      boxes.push_back(std::move(b));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::ParseError, "box line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::ParseError, "box line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return boxes;
}

void save_boxes(const std::vector<HyperRectangle>& boxes, const std::filesystem::path& path) {
  write_text_file(path, boxes_to_jsonl(boxes));
}

std::vector<HyperRectangle> load_boxes(const std::filesystem::path& path) {
  return boxes_from_jsonl(read_text_file(path));
}

}  // namespace nlv
