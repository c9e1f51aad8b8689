#include "nlpverify/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;

void check_input(const MlpModel& model, Eigen::Index size) {
  if (static_cast<std::size_t>(size) != model.in_dim()) {
    throw Error(ErrorKind::DimMismatch, "input dimension " + std::to_string(size) +
                                            ", model expects " + std::to_string(model.in_dim()));
  }
}

Gradients zero_gradients(const MlpModel& model) {
  Gradients g;
  for (const auto& l : model.layers) {
    g.weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

void accumulate(Gradients& into, const Gradients& g, double scale) {
  for (std::size_t i = 0; i < into.weight.size(); ++i) {
    into.weight[i] += scale * g.weight[i];
    into.bias[i] += scale * g.bias[i];
  }
}

double mean_side(const HyperRectangle& box) {
  return box.dim() == 0 ? 0.0 : (box.upper - box.lower).mean();
}

}  // namespace

std::size_t MlpModel::in_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols());
}

std::size_t MlpModel::out_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.rows());
}

void MlpModel::validate() const {
  if (layers.empty()) throw Error(ErrorKind::InvalidArgument, "model has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.bias.size() != l.weight.rows()) {
      throw Error(ErrorKind::InvalidArgument, "bias length mismatch in layer " + std::to_string(i));
    }
    if (i > 0 && l.weight.cols() != layers[i - 1].weight.rows()) {
      throw Error(ErrorKind::InvalidArgument, "layer " + std::to_string(i) + " does not compose");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      throw Error(ErrorKind::InvalidArgument, "non-finite parameters in layer " + std::to_string(i));
    }
  }
}

bool MlpModel::operator==(const MlpModel& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = other.layers[i];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
    if (a.weight != b.weight || a.bias != b.bias) return false;
  }
  return true;
}

MlpModel init_mlp(std::span<const std::size_t> layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) {
    throw Error(ErrorKind::InvalidArgument, "need at least input and output sizes");
  }
  Rng rng(seed);
  MlpModel model;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    const std::size_t fan_in = layer_sizes[i];
    const std::size_t fan_out = layer_sizes[i + 1];
    if (fan_in == 0 || fan_out == 0) throw Error(ErrorKind::InvalidArgument, "zero layer width");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    DenseLayer layer;
    layer.weight.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = rng.uniform(-limit, limit);
      }
    }
    layer.bias = Vector::Zero(static_cast<Eigen::Index>(fan_out));
    model.layers.push_back(std::move(layer));
  }
  return model;
}

Vector forward(const MlpModel& model, const Vector& x) {
  check_input(model, x.size());
  Vector a = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    a = model.layers[i].weight * a + model.layers[i].bias;
    if (i + 1 < model.layers.size()) a = a.cwiseMax(0.0);
  }
  return a;
}

Matrix forward_batch(const MlpModel& model, const Matrix& inputs) {
  check_input(model, inputs.cols());
  Eigen::MatrixXd a = inputs.transpose();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    a = (model.layers[i].weight * a).colwise() + model.layers[i].bias;
    if (i + 1 < model.layers.size()) a = a.cwiseMax(0.0);
  }
  return a.transpose();
}

std::optional<std::size_t> strict_argmax(const Vector& logits) {
  if (logits.size() == 0) return std::nullopt;
  Eigen::Index arg = 0;
  bool tied = false;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[arg]) {
      arg = i;
      tied = false;
    } else if (logits[i] == logits[arg]) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return static_cast<std::size_t>(arg);
}

LossAndGrad cross_entropy_loss(const Vector& logits, std::size_t label) {
  if (label >= static_cast<std::size_t>(logits.size())) {
    throw Error(ErrorKind::InvalidArgument, "label out of range for logits");
  }
  const double m = logits.maxCoeff();
  const Vector shifted = logits.array() - m;
  const Vector exps = shifted.array().exp();
  const double z = exps.sum();
  LossAndGrad out;
  out.loss = std::log(z) - shifted[static_cast<Eigen::Index>(label)];
  out.grad = exps / z;
  out.grad[static_cast<Eigen::Index>(label)] -= 1.0;
  return out;
}

Backprop backprop(const MlpModel& model, const Vector& x, const OutputGradient& output_grad) {
  check_input(model, x.size());
  const std::size_t L = model.layers.size();
  std::vector<Vector> inputs(L);  // input to each layer
  std::vector<Vector> pre(L);     // pre-activation of each layer
  Vector a = x;
  for (std::size_t i = 0; i < L; ++i) {
    inputs[i] = a;
    pre[i] = model.layers[i].weight * a + model.layers[i].bias;
    a = (i + 1 < L) ? Vector(pre[i].cwiseMax(0.0)) : pre[i];
  }

  Backprop out;
  out.logits = a;
  out.grads.weight.resize(L);
  out.grads.bias.resize(L);
  Vector delta = output_grad(out.logits);
  for (std::size_t k = L; k-- > 0;) {
    out.grads.weight[k] = delta * inputs[k].transpose();
    out.grads.bias[k] = delta;
    Vector back = model.layers[k].weight.transpose() * delta;
    if (k > 0) {
      // ReLU derivative, taken as 0 at 0.
      for (Eigen::Index j = 0; j < back.size(); ++j) {
        if (!(pre[k - 1][j] > 0.0)) back[j] = 0.0;
      }
    }
    delta = std::move(back);
  }
  out.grads.input = std::move(delta);
  return out;
}

double loss_and_gradients(const MlpModel& model, const Vector& x, std::size_t label,
                          Gradients* grads) {
  double loss = 0.0;
  Backprop bp = backprop(model, x, [&](const Vector& logits) {
    LossAndGrad lg = cross_entropy_loss(logits, label);
    loss = lg.loss;
    return lg.grad;
  });
  if (grads) *grads = std::move(bp.grads);
  return loss;
}

Vector pgd_attack(const MlpModel& model, const Vector& x, std::size_t label,
                  const HyperRectangle& region, std::size_t steps, double step_size) {
  if (region.dim() != model.in_dim()) {
    throw Error(ErrorKind::DimMismatch, "region dimension differs from model input");
  }
  if (!box_contains_closed(region, x)) {
    throw Error(ErrorKind::RegionMismatch, "attack start point lies outside its region");
  }
  Vector cur = x;
  for (std::size_t s = 0; s < steps; ++s) {
    Gradients g;
    loss_and_gradients(model, cur, label, &g);
    const Vector sign = g.input.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    cur = (cur + step_size * sign).cwiseMax(region.lower).cwiseMin(region.upper);
  }
  return cur;
}

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Base: return "base";
    case TrainMode::Augmented: return "augmented";
    case TrainMode::Adversarial: return "adversarial";
  }
  return "unknown";
}

TrainMode train_mode_from_string(std::string_view name) {
  for (auto m : {TrainMode::Base, TrainMode::Augmented, TrainMode::Adversarial}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::ConfigError, "unknown training mode '" + std::string(name) + "'");
}

std::string_view to_string(PgdRegion region) {
  return region == PgdRegion::EpsCube ? "eps_cube" : "per_input_box";
}

PgdRegion pgd_region_from_string(std::string_view name) {
  if (name == "eps_cube") return PgdRegion::EpsCube;
  if (name == "per_input_box") return PgdRegion::PerInputBox;
  throw Error(ErrorKind::ConfigError, "unknown PGD region '" + std::string(name) + "'");
}

TrainedModelBundle train(const EmbeddedDataset& data, const std::vector<HyperRectangle>* boxes,
                         const TrainConfig& config, std::optional<Preparation> prep) {
  const std::vector<std::size_t> rows = data.indices(Split::Train);
  if (rows.empty()) throw Error(ErrorKind::ConfigError, "no training rows");
  if (config.batch_size == 0) throw Error(ErrorKind::ConfigError, "batch_size must be positive");
  const bool adversarial = config.mode == TrainMode::Adversarial;
  if (adversarial && !config.pgd) {
    throw Error(ErrorKind::ConfigError, "adversarial mode requires PGD settings");
  }
  const bool per_input = adversarial && config.pgd->region == PgdRegion::PerInputBox;
  if (per_input) {
    if (!boxes) throw Error(ErrorKind::ConfigError, "per-input PGD requires one region per row");
    if (boxes->size() != rows.size()) {
      throw Error(ErrorKind::ConfigError, "got " + std::to_string(boxes->size()) +
                                              " regions for " + std::to_string(rows.size()) +
                                              " training rows");
    }
    for (const auto& b : *boxes) {
      if (b.dim() != data.dim()) throw Error(ErrorKind::ConfigError, "region dimension mismatch");
    }
  }
  std::size_t num_classes = 0;
  for (std::size_t r : rows) num_classes = std::max(num_classes, data.labels[r] + 1);
  num_classes = std::max<std::size_t>(num_classes, 2);

  std::vector<std::size_t> sizes{data.dim()};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(num_classes);

  TrainedModelBundle bundle;
  bundle.config = config;
  bundle.prep = prep.value_or(Preparation::identity(data.dim()));
  if (bundle.prep.out_dim() != data.dim()) {
    throw Error(ErrorKind::ConfigError, "preparation output dimension differs from data");
  }
  bundle.model = init_mlp(sizes, derive_seed(config.seed, "init"));
  MlpModel& model = bundle.model;

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);

  auto region_for = [&](std::size_t pos, const Vector& x) -> HyperRectangle {
    if (per_input) return (*boxes)[pos];
    return eps_cube(x, config.pgd->epsilon, data.labels[rows[pos]]);
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Gradients total = zero_gradients(model);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t pos = order[b];
        const std::size_t row = rows[pos];
        const Vector x = data.vectors.row(static_cast<Eigen::Index>(row)).transpose();
        const std::size_t label = data.labels[row];
        Gradients g;
        if (!adversarial) {
          loss_and_gradients(model, x, label, &g);
          accumulate(total, g, scale);
          continue;
        }
        const HyperRectangle region = region_for(pos, x);
        const double step =
            config.pgd->step_size.value_or(config.pgd->steps == 0
                                               ? 0.0
                                               : mean_side(region) /
                                                     static_cast<double>(config.pgd->steps));
        const Vector adv = pgd_attack(model, x, label, region, config.pgd->steps, step);
        loss_and_gradients(model, adv, label, &g);
        if (config.mix_clean) {
          accumulate(total, g, 0.5 * scale);
          loss_and_gradients(model, x, label, &g);
          accumulate(total, g, 0.5 * scale);
        } else {
          accumulate(total, g, scale);
        }
      }
      for (std::size_t i = 0; i < model.layers.size(); ++i) {
        model.layers[i].weight -= config.learning_rate * total.weight[i];
        model.layers[i].bias -= config.learning_rate * total.bias[i];
      }
    }

    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t row : rows) {
      const Vector logits = forward(model, data.vectors.row(static_cast<Eigen::Index>(row)).transpose());
      loss += cross_entropy_loss(logits, data.labels[row]).loss;
      if (strict_argmax(logits) == data.labels[row]) ++correct;
    }
    bundle.history.train_loss.push_back(loss / static_cast<double>(rows.size()));
    bundle.history.train_accuracy.push_back(static_cast<double>(correct) /
                                            static_cast<double>(rows.size()));
  }
  model.validate();
  return bundle;
}

// ---------------------------------------------------------------------------

std::string model_to_text(const MlpModel& model) {
  model.validate();
  std::string out = "mlp " + std::to_string(model.layers.size()) + " " +
                    std::to_string(model.in_dim()) + " " + std::to_string(model.out_dim()) + "\n";
  for (const auto& l : model.layers) {
    out += "layer " + std::to_string(l.weight.rows()) + " " + std::to_string(l.weight.cols()) + "\n";
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
        if (c) out += ' ';
        out += format_double(l.weight(r, c));
      }
      out += '\n';
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
      if (r) out += ' ';
      out += format_double(l.bias[r]);
    }
    out += '\n';
  }
  return out;
}

MlpModel model_from_text(const std::string& text) {
  std::istringstream in(text);
  auto fail = [](const std::string& what) -> void {
    throw Error(ErrorKind::ParseError, "model file: " + what);
  };
  auto next_word = [&](const char* what) {
    std::string w;
    if (!(in >> w)) fail(std::string("unexpected end of input reading ") + what);
    return w;
  };
  auto next_size = [&](const char* what) {
    const std::string w = next_word(what);
    if (w.empty() || w.find_first_not_of("0123456789") != std::string::npos) {
      fail(std::string("bad ") + what + " '" + w + "'");
    }
    return static_cast<std::size_t>(std::stoull(w));
  };
  auto next_real = [&](const char* what) {
    const std::string w = next_word(what);
    const auto v = parse_double(w);
    if (!v || !std::isfinite(*v)) fail(std::string("bad ") + what + " '" + w + "'");
    return *v;
  };

  if (next_word("header") != "mlp") fail("missing 'mlp' header");
  const std::size_t num_layers = next_size("layer count");
  const std::size_t in_dim = next_size("input dimension");
  const std::size_t out_dim = next_size("output dimension");
  MlpModel model;
  for (std::size_t i = 0; i < num_layers; ++i) {
    if (next_word("layer tag") != "layer") fail("expected 'layer'");
    const std::size_t rows = next_size("layer rows");
    const std::size_t cols = next_size("layer cols");
    DenseLayer l;
    l.weight.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    l.bias.resize(static_cast<Eigen::Index>(rows));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = next_real("weight");
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = next_real("bias");
    model.layers.push_back(std::move(l));
  }
  std::string extra;
  if (in >> extra) fail("trailing content '" + extra + "'");
  try {
    model.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  if (model.in_dim() != in_dim || model.out_dim() != out_dim) fail("header dimensions disagree");
  return model;
}

void save_model(const MlpModel& model, const std::filesystem::path& path) {
  write_text_file(path, model_to_text(model));
}

MlpModel load_model(const std::filesystem::path& path) {
  return model_from_text(read_text_file(path));
}

std::string train_config_to_json(const TrainConfig& config) {
  json j;
  j["epochs"] = config.epochs;
  j["batch_size"] = config.batch_size;
  j["learning_rate"] = config.learning_rate;
  j["seed"] = config.seed;
  j["mode"] = std::string(to_string(config.mode));
  j["hidden"] = config.hidden;
  j["mix_clean"] = config.mix_clean;
  if (config.pgd) {
    json p;
    p["steps"] = config.pgd->steps;
    if (config.pgd->step_size) p["step_size"] = *config.pgd->step_size;
    p["region"] = std::string(to_string(config.pgd->region));
    p["epsilon"] = config.pgd->epsilon;
    j["pgd"] = p;
  }
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.mode = train_mode_from_string(j.value("mode", std::string("base")));
    c.hidden = j.value("hidden", c.hidden);
    c.mix_clean = j.value("mix_clean", c.mix_clean);
    if (j.contains("pgd")) {
      const auto& p = j["pgd"];
      PgdConfig pgd;
      pgd.steps = p.value("steps", pgd.steps);
      if (p.contains("step_size")) pgd.step_size = p["step_size"].get<double>();
      pgd.region = pgd_region_from_string(p.value("region", std::string("eps_cube")));
      pgd.epsilon = p.value("epsilon", pgd.epsilon);
      c.pgd = pgd;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
}

}  // namespace nlv
