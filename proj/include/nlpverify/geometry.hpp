#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nlpverify/dataset.hpp"
#include "nlpverify/embedding.hpp"
#include "nlpverify/text_perturbation.hpp"

namespace nlv {

// ---------------------------------------------------------------------------
// Eigenspace rotation and PCA

struct RotationModel {
  Matrix basis;        // D x D, column j is the j-th covariance eigenvector
  Vector mean;         // length D
  Vector eigenvalues;  // non-increasing

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

// Mean and eigenbasis of the sample covariance (denominator N - 1). Each
// eigenvector is signed so that its largest-magnitude component is positive
// (first such component on ties). Zero eigenvalues are allowed.
RotationModel fit_rotation(const Matrix& vectors);

// (vectors - mean) * basis
Matrix apply_rotation(const RotationModel& model, const Matrix& vectors);
// rotated * basis^T + mean
Matrix invert_rotation(const RotationModel& model, const Matrix& rotated);

struct PcaModel {
  RotationModel rotation;
  std::size_t out_dim = 0;
  double explained_variance_ratio = 1.0;
};

PcaModel fit_pca(const Matrix& vectors, std::size_t out_dim);
Matrix apply_pca(const PcaModel& model, const Matrix& vectors);
// Maps reduced coordinates back to the input space.
Matrix reconstruct_pca(const PcaModel& model, const Matrix& reduced);

// Transform fitted on training vectors and applied to everything downstream:
// identity, rotation (out_dim = in_dim) or rotation plus truncation.
class Preparation {
 public:
  static Preparation identity(std::size_t dim);
  static Preparation fit(const Matrix& train_vectors, bool rotate,
                         std::optional<std::size_t> pca_dim);

  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return pca_ ? pca_->out_dim : in_dim_; }
  const std::optional<PcaModel>& pca() const { return pca_; }

  Matrix apply(const Matrix& vectors) const;
  Vector apply(const Vector& vector) const;

  std::string to_json() const;
  static Preparation from_json(const std::string& text);

 private:
  std::size_t in_dim_ = 0;
  std::optional<PcaModel> pca_;
};

// ---------------------------------------------------------------------------
// Hyper-rectangles

enum class ProvenanceKind { Naive, Shrunk, Clustered, PerturbationBased, EpsCube };

std::string_view to_string(ProvenanceKind kind);
ProvenanceKind provenance_kind_from_string(std::string_view name);

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::Naive;
  // Cluster index, source sentence id or centre id depending on kind.
  std::size_t index = 0;
  double epsilon = 0.0;

  bool operator==(const Provenance&) const = default;
};

struct HyperRectangle {
  Vector lower;
  Vector upper;
  std::size_t target_class = 0;
  Provenance provenance;
  // Faces produced by shrinking are open: points on them are outside.
  std::vector<bool> open_lower;
  std::vector<bool> open_upper;

  std::size_t dim() const { return static_cast<std::size_t>(lower.size()); }
  bool lower_open(std::size_t i) const { return !open_lower.empty() && open_lower[i]; }
  bool upper_open(std::size_t i) const { return !open_upper.empty() && open_upper[i]; }

  // Throws InvalidArgument unless lower <= upper, all finite, shapes agree.
  void validate() const;

  bool operator==(const HyperRectangle& other) const;
};

// Containment with open cut faces and closed uncut faces.
bool box_contains(const HyperRectangle& box, const Vector& point);
// Containment treating every face as closed.
bool box_contains_closed(const HyperRectangle& box, const Vector& point);
// Sum of ln(upper - lower); -infinity when any side is zero.
double box_log_volume(const HyperRectangle& box);
// count x D matrix, uniform per dimension over [lower, upper].
Matrix box_sample(const HyperRectangle& box, std::size_t count, std::uint64_t seed);

// Per-dimension min/max over rows of `points`.
HyperRectangle box_around(const Matrix& points, std::size_t cls, Provenance provenance);

HyperRectangle box_naive(const Matrix& vectors, std::span<const std::size_t> labels,
                         std::size_t cls);

// Greedy face cuts until no negative is contained. Each round takes the first
// contained negative and, over the 2D candidate cuts placed at its coordinate,
// picks the one evicting the fewest positives, then the smallest log-volume
// loss, then the lowest dimension, then the cut that keeps the lower part of
// the dimension before the one that keeps the upper part.
// Throws AllPositivesEvicted when no positive survives.
HyperRectangle box_shrink(const HyperRectangle& box, const Matrix& positives,
                          const Matrix& negatives);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  Matrix centroids;
  // Objective after each assignment step.
  std::vector<double> objective_history;
  std::size_t iterations = 0;
};

// Lloyd iterations from farthest-point seeding; the first centre is drawn from
// `seed`. Stops after max_iter rounds or when every centroid moves less than
// tol. Empty clusters are re-seeded with the point farthest from its centroid.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 100, double tol = 1e-6);

std::vector<HyperRectangle> box_cluster(const Matrix& vectors, std::span<const std::size_t> labels,
                                        std::size_t cls, std::size_t k, std::uint64_t seed);

// Box over a sentence's embedding and the embeddings of its policy
// perturbations (stream `stream_index`), after `prep`.
HyperRectangle box_from_perturbations(const LabeledSentence& sentence, std::size_t stream_index,
                                      const PerturbationPolicy& policy, const Embedder& embedder,
                                      const Preparation& prep);

HyperRectangle eps_cube(const Vector& center, double epsilon, std::size_t cls,
                        std::size_t center_id = 0);

// One box per line: {"lower", "upper", "class", "provenance"} plus optional
// "open_lower"/"open_upper" index lists.
std::string boxes_to_jsonl(const std::vector<HyperRectangle>& boxes);
std::vector<HyperRectangle> boxes_from_jsonl(const std::string& text);
void save_boxes(const std::vector<HyperRectangle>& boxes, const std::filesystem::path& path);
std::vector<HyperRectangle> load_boxes(const std::filesystem::path& path);

}  // namespace nlv
