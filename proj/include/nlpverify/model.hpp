#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlpverify/embedding.hpp"
#include "nlpverify/geometry.hpp"

namespace nlv {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Vector bias;             // out
};

// Affine layers with ReLU between them and identity after the last.
struct MlpModel {
  std::vector<DenseLayer> layers;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  // Throws InvalidArgument unless shapes compose and parameters are finite.
  void validate() const;

  bool operator==(const MlpModel& other) const;
};

// layer_sizes = {in, hidden..., out}. Weights uniform in +-sqrt(6/(fan_in+fan_out)),
// biases zero.
MlpModel init_mlp(std::span<const std::size_t> layer_sizes, std::uint64_t seed);

Vector forward(const MlpModel& model, const Vector& x);
// One row per input.
Matrix forward_batch(const MlpModel& model, const Matrix& inputs);

// Index of the unique maximum; nullopt when the maximum is tied.
std::optional<std::size_t> strict_argmax(const Vector& logits);

struct LossAndGrad {
  double loss = 0.0;
  Vector grad;  // d loss / d logits
};

// -log softmax(logits)[label] with max subtraction; grad = softmax - one_hot.
LossAndGrad cross_entropy_loss(const Vector& logits, std::size_t label);

struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Vector> bias;
  Vector input;
};

// Gradient of an arbitrary scalar of the logits; output_grad maps the logits
// to d scalar / d logits.
using OutputGradient = std::function<Vector(const Vector& logits)>;

struct Backprop {
  Vector logits;
  Gradients grads;
};

Backprop backprop(const MlpModel& model, const Vector& x, const OutputGradient& output_grad);

// Cross-entropy loss of one example and its gradients.
double loss_and_gradients(const MlpModel& model, const Vector& x, std::size_t label,
                          Gradients* grads);

// Sign-gradient ascent on the cross-entropy loss, clamped to [lower, upper]
// after every step. Throws RegionMismatch if x is outside the closed region.
Vector pgd_attack(const MlpModel& model, const Vector& x, std::size_t label,
                  const HyperRectangle& region, std::size_t steps, double step_size);

enum class TrainMode { Base, Augmented, Adversarial };
enum class PgdRegion { EpsCube, PerInputBox };

std::string_view to_string(TrainMode mode);
TrainMode train_mode_from_string(std::string_view name);
std::string_view to_string(PgdRegion region);
PgdRegion pgd_region_from_string(std::string_view name);

struct PgdConfig {
  std::size_t steps = 10;
  // Default: mean side of the region divided by steps.
  std::optional<double> step_size;
  PgdRegion region = PgdRegion::EpsCube;
  double epsilon = 0.1;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Base;
  std::optional<PgdConfig> pgd;
  std::vector<std::size_t> hidden{128};
  // Adversarial mode: average the clean and perturbed losses instead of
  // training on perturbed points only.
  bool mix_clean = false;
};

struct TrainHistory {
  // Clean mean loss / accuracy over the training rows after each epoch.
  std::vector<double> train_loss;
  std::vector<double> train_accuracy;
};

struct TrainedModelBundle {
  MlpModel model;
  Preparation prep;
  TrainConfig config;
  TrainHistory history;
};

// Trains on the Train-split rows of `data` (all rows when untagged).
// `boxes`, when given, holds one region per training row in row order and is
// required for Adversarial + PerInputBox. Pure function of its arguments.
TrainedModelBundle train(const EmbeddedDataset& data,
                         const std::vector<HyperRectangle>* boxes, const TrainConfig& config,
                         std::optional<Preparation> prep = std::nullopt);

// Plain-text network format:
//   mlp <num_layers> <in_dim> <out_dim>
//   layer <out> <in>
//   <out lines of `in` weights>
//   <one line of `out` biases>
// Decimals use the shortest round-trip form, so the round trip is bit-exact.
std::string model_to_text(const MlpModel& model);
MlpModel model_from_text(const std::string& text);
void save_model(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_model(const std::filesystem::path& path);

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

}  // namespace nlv
