#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlpverify/geometry.hpp"
#include "nlpverify/model.hpp"

namespace nlv {

struct IntervalVector {
  Vector lo;
  Vector hi;

  std::size_t size() const { return static_cast<std::size_t>(lo.size()); }
  static IntervalVector point(const Vector& x) { return {x, x}; }
  static IntervalVector of_box(const HyperRectangle& box) { return {box.lower, box.upper}; }
  bool contains(const Vector& x) const;
  bool contains(const IntervalVector& inner) const;
};

// Interval bound propagation: affine layers through the positive and negative
// parts of W, ReLU componentwise on both bounds. Sound for every input in the
// interval.
IntervalVector ibp_bounds(const MlpModel& model, const IntervalVector& input);

enum class Outcome { Verified, Falsified, Unknown };
std::string_view to_string(Outcome outcome);

struct VerificationQuery {
  const MlpModel* model = nullptr;
  HyperRectangle box;
};

class Verdict {
 public:
  static Verdict verified(IntervalVector bounds, double wall_time);
  static Verdict unknown(IntervalVector bounds, double wall_time);
  // Throws InvalidArgument unless the witness is inside the box and the model
  // does not strictly classify it as the target class.
  static Verdict falsified(const MlpModel& model, const HyperRectangle& box, Vector witness,
                           IntervalVector bounds, double wall_time);

  Outcome outcome() const { return outcome_; }
  const std::optional<Vector>& witness() const { return witness_; }
  const IntervalVector& bounds() const { return bounds_; }
  double wall_time() const { return wall_time_; }

 private:
  Verdict(Outcome o, std::optional<Vector> w, IntervalVector b, double t)
      : outcome_(o), witness_(std::move(w)), bounds_(std::move(b)), wall_time_(t) {}

  Outcome outcome_;
  std::optional<Vector> witness_;
  IntervalVector bounds_;
  double wall_time_;
};

struct FalsifyOptions {
  std::size_t pgd_steps = 50;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
};

// True when the model's strict argmax at x is not `target` (ties misclassify).
bool misclassifies(const MlpModel& model, const Vector& x, std::size_t target);

// Verified iff lo[target] > hi[j] for all j != target. Otherwise searches for a
// counterexample with margin-PGD from the box centre and uniform samples.
Verdict verify_box(const VerificationQuery& query, const FalsifyOptions& options = {});

// Writes <stem>.vnnlib and <stem>.mlp.txt; returns both paths.
struct ExportedQuery {
  std::filesystem::path property;
  std::filesystem::path network;
};
ExportedQuery export_query(const VerificationQuery& query, const std::filesystem::path& stem);

// VNN-LIB text: X_i/Y_j declarations, closed box bounds, and the negated
// robustness property as a disjunction of (>= Y_j Y_target). 17 significant
// digits per bound.
std::string vnnlib_property(const HyperRectangle& box, std::size_t num_outputs);

struct VnnlibProperty {
  std::size_t num_inputs = 0;
  std::size_t num_outputs = 0;
  Vector lower;
  Vector upper;
  // (j, target) pairs of the disjunction (>= Y_j Y_target).
  std::vector<std::pair<std::size_t, std::size_t>> disjuncts;
};

std::vector<std::string> tokenize_vnnlib(const std::string& text);
// Reads the subset of VNN-LIB that vnnlib_property emits. Throws ParseError.
VnnlibProperty parse_vnnlib(const std::string& text);

}  // namespace nlv
