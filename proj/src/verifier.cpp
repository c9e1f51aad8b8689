#include "nlpverify/verifier.hpp"

#include <chrono>
#include <cmath>
#include <memory>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"

namespace nlv {
namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Gradient of max_{j != target} y_j - y_target with respect to the logits.
Vector margin_gradient(const Vector& logits, std::size_t target) {
  const auto t = static_cast<Eigen::Index>(target);
  Eigen::Index best = t == 0 ? 1 : 0;
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    if (j != t && logits[j] > logits[best]) best = j;
  }
  Vector g = Vector::Zero(logits.size());
  g[best] = 1.0;
  g[t] = -1.0;
  return g;
}

struct Sexp {
  std::string atom;
  std::vector<Sexp> children;
  bool is_list = false;
};

[[noreturn]] void vnn_error(const std::string& what) {
  throw Error(ErrorKind::ParseError, "vnnlib: " + what);
}

Sexp read_sexp(const std::vector<std::string>& tokens, std::size_t& pos) {
  if (pos >= tokens.size()) vnn_error("unexpected end of input");
  const std::string& tok = tokens[pos++];
  if (tok == ")") vnn_error("unexpected ')'");
  if (tok != "(") return Sexp{tok, {}, false};
  Sexp list;
  list.is_list = true;
  while (true) {
    if (pos >= tokens.size()) vnn_error("unbalanced '('");
    if (tokens[pos] == ")") {
      ++pos;
      return list;
    }
    list.children.push_back(read_sexp(tokens, pos));
  }
}

// "X_12" -> 12 when the prefix matches.
std::optional<std::size_t> variable_index(const Sexp& e, char prefix) {
  if (e.is_list || e.atom.size() < 3 || e.atom[0] != prefix || e.atom[1] != '_') return std::nullopt;
  const std::string digits = e.atom.substr(2);
  if (digits.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return static_cast<std::size_t>(std::stoull(digits));
}

double constant(const Sexp& e) {
  if (e.is_list) vnn_error("expected a numeric constant");
  const auto v = parse_double(e.atom);
  if (!v) vnn_error("bad numeric constant '" + e.atom + "'");
  return *v;
}

std::pair<std::size_t, std::size_t> output_comparison(const Sexp& e) {
  if (!e.is_list || e.children.size() != 3 || e.children[0].atom != ">=") {
    vnn_error("expected (>= Y_j Y_t)");
  }
  const auto j = variable_index(e.children[1], 'Y');
  const auto t = variable_index(e.children[2], 'Y');
  if (!j || !t) vnn_error("output comparison must relate two Y variables");
  return {*j, *t};
}

}  // namespace

bool IntervalVector::contains(const Vector& x) const {
  return x.size() == lo.size() && (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

bool IntervalVector::contains(const IntervalVector& inner) const {
  return inner.lo.size() == lo.size() && (inner.lo.array() >= lo.array()).all() &&
         (inner.hi.array() <= hi.array()).all();
}

IntervalVector ibp_bounds(const MlpModel& model, const IntervalVector& input) {
  if (input.size() != model.in_dim() || input.hi.size() != input.lo.size()) {
    throw Error(ErrorKind::DimMismatch, "interval dimension differs from model input");
  }
  Vector lo = input.lo;
  Vector hi = input.hi;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& w = model.layers[i].weight;
    const Eigen::MatrixXd wp = w.cwiseMax(0.0);
    const Eigen::MatrixXd wn = w.cwiseMin(0.0);
    Vector new_lo = wp * lo + wn * hi + model.layers[i].bias;
    Vector new_hi = wp * hi + wn * lo + model.layers[i].bias;
    if (i + 1 < model.layers.size()) {
      new_lo = new_lo.cwiseMax(0.0);
      new_hi = new_hi.cwiseMax(0.0);
    }
    lo = std::move(new_lo);
    hi = std::move(new_hi);
  }
  return {lo, hi};
}

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::Verified: return "verified";
    case Outcome::Falsified: return "falsified";
    case Outcome::Unknown: return "unknown";
  }
  return "unknown";
}

Verdict Verdict::verified(IntervalVector bounds, double wall_time) {
  return Verdict(Outcome::Verified, std::nullopt, std::move(bounds), wall_time);
}

Verdict Verdict::unknown(IntervalVector bounds, double wall_time) {
  return Verdict(Outcome::Unknown, std::nullopt, std::move(bounds), wall_time);
}

Verdict Verdict::falsified(const MlpModel& model, const HyperRectangle& box, Vector witness,
                           IntervalVector bounds, double wall_time) {
  if (!box_contains(box, witness)) {
    throw Error(ErrorKind::InvalidArgument, "counterexample lies outside the query box");
  }
  if (!misclassifies(model, witness, box.target_class)) {
    throw Error(ErrorKind::InvalidArgument, "counterexample is classified correctly");
  }
  return Verdict(Outcome::Falsified, std::move(witness), std::move(bounds), wall_time);
}

bool misclassifies(const MlpModel& model, const Vector& x, std::size_t target) {
  return strict_argmax(forward(model, x)) != target;
}

Verdict verify_box(const VerificationQuery& query, const FalsifyOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  if (!query.model) throw Error(ErrorKind::InvalidArgument, "query has no model");
  const MlpModel& model = *query.model;
  const HyperRectangle& box = query.box;
  if (box.dim() != model.in_dim()) {
    throw Error(ErrorKind::DimMismatch, "box dimension differs from model input");
  }
  if (box.target_class >= model.out_dim()) {
    throw Error(ErrorKind::InvalidArgument, "target class outside model outputs");
  }
  box.validate();

  IntervalVector bounds = ibp_bounds(model, IntervalVector::of_box(box));
  const auto t = static_cast<Eigen::Index>(box.target_class);
  bool proved = true;
  for (Eigen::Index j = 0; j < bounds.lo.size(); ++j) {
    if (j != t && !(bounds.lo[t] > bounds.hi[j])) {
      proved = false;
      break;
    }
  }
  if (proved) return Verdict::verified(std::move(bounds), seconds_since(start));

  auto try_witness = [&](const Vector& x) -> std::optional<Verdict> {
    if (box_contains(box, x) && misclassifies(model, x, box.target_class)) {
      return Verdict::falsified(model, box, x, bounds, seconds_since(start));
    }
    return std::nullopt;
  };

  // Margin ascent from the centre with per-dimension steps of a tenth of the side.
  Vector x = 0.5 * (box.lower + box.upper);
  const Vector step = (box.upper - box.lower) / 10.0;
  if (auto v = try_witness(x)) return *v;
  const auto target = box.target_class;
  for (std::size_t s = 0; s < options.pgd_steps; ++s) {
    const Backprop bp =
        backprop(model, x, [target](const Vector& logits) { return margin_gradient(logits, target); });
    const Vector sign = bp.grads.input.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    x = (x + step.cwiseProduct(sign)).cwiseMax(box.lower).cwiseMin(box.upper);
    if (auto v = try_witness(x)) return *v;
  }

  if (options.samples > 0) {
    const Matrix samples = box_sample(box, options.samples, options.seed);
    const Matrix logits = forward_batch(model, samples);
    for (Eigen::Index r = 0; r < samples.rows(); ++r) {
      if (strict_argmax(logits.row(r).transpose()) != target) {
        if (auto v = try_witness(samples.row(r).transpose())) return *v;
      }
    }
  }
  return Verdict::unknown(std::move(bounds), seconds_since(start));
}

std::string vnnlib_property(const HyperRectangle& box, std::size_t num_outputs) {
  box.validate();
  if (box.target_class >= num_outputs) {
    throw Error(ErrorKind::InvalidArgument, "target class outside model outputs");
  }
  std::string out;
  out += "; robustness of class " + std::to_string(box.target_class) + " over an axis-aligned box\n";
  for (std::size_t i = 0; i < box.dim(); ++i) {
    out += "(declare-const X_" + std::to_string(i) + " Real)\n";
  }
  out += '\n';
  for (std::size_t j = 0; j < num_outputs; ++j) {
    out += "(declare-const Y_" + std::to_string(j) + " Real)\n";
  }
  out += "\n; input constraints\n";
  for (std::size_t i = 0; i < box.dim(); ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    const std::string x = "X_" + std::to_string(i);
    out += "(assert (<= " + x + " " + format_double17(box.upper[e]) + "))\n";
    out += "(assert (>= " + x + " " + format_double17(box.lower[e]) + "))\n";
  }
  out += "\n; unsafe if any other class scores at least as high\n";
  out += "(assert (or\n";
  const std::string target = "Y_" + std::to_string(box.target_class);
  for (std::size_t j = 0; j < num_outputs; ++j) {
    if (j == box.target_class) continue;
    out += "    (and (>= Y_" + std::to_string(j) + " " + target + "))\n";
  }
  out += "))\n";
  return out;
}

ExportedQuery export_query(const VerificationQuery& query, const std::filesystem::path& stem) {
  if (!query.model) throw Error(ErrorKind::InvalidArgument, "query has no model");
  if (query.box.dim() != query.model->in_dim()) {
    throw Error(ErrorKind::DimMismatch, "box dimension differs from model input");
  }
  ExportedQuery out;
  out.property = stem;
  out.property += ".vnnlib";
  out.network = stem;
  out.network += ".mlp.txt";
  write_text_file(out.property, vnnlib_property(query.box, query.model->out_dim()));
  write_text_file(out.network, model_to_text(*query.model));
  return out;
}

std::vector<std::string> tokenize_vnnlib(const std::string& text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ';') {
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (c == '(' || c == ')') {
      tokens.emplace_back(1, c);
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size() && text[i] != '(' && text[i] != ')' && text[i] != ';' &&
             !std::isspace(static_cast<unsigned char>(text[i]))) {
        ++i;
      }
      tokens.push_back(text.substr(start, i - start));
    }
  }
  return tokens;
}

VnnlibProperty parse_vnnlib(const std::string& text) {
  const auto tokens = tokenize_vnnlib(text);
  std::vector<Sexp> commands;
  for (std::size_t pos = 0; pos < tokens.size();) commands.push_back(read_sexp(tokens, pos));

  VnnlibProperty prop;
  std::vector<std::optional<double>> lower;
  std::vector<std::optional<double>> upper;
  for (const auto& cmd : commands) {
    if (!cmd.is_list || cmd.children.empty()) vnn_error("top-level item is not a command");
    const std::string& head = cmd.children[0].atom;
    if (head == "declare-const") {
      if (cmd.children.size() != 3 || cmd.children[2].atom != "Real") {
        vnn_error("malformed declare-const");
      }
      if (auto i = variable_index(cmd.children[1], 'X')) {
        if (*i != prop.num_inputs) vnn_error("input declarations out of order");
        ++prop.num_inputs;
        lower.emplace_back();
        upper.emplace_back();
      } else if (auto j = variable_index(cmd.children[1], 'Y')) {
        if (*j != prop.num_outputs) vnn_error("output declarations out of order");
        ++prop.num_outputs;
      } else {
        vnn_error("unsupported variable '" + cmd.children[1].atom + "'");
      }
    } else if (head == "assert") {
      if (cmd.children.size() != 2) vnn_error("assert takes one term");
      const Sexp& term = cmd.children[1];
      if (!term.is_list || term.children.empty()) vnn_error("malformed assert term");
      const std::string& op = term.children[0].atom;
      if ((op == "<=" || op == ">=") && term.children.size() == 3 &&
          variable_index(term.children[1], 'X')) {
        const std::size_t i = *variable_index(term.children[1], 'X');
        if (i >= prop.num_inputs) vnn_error("bound on undeclared input");
        auto& slot = op == "<=" ? upper[i] : lower[i];
        if (slot) vnn_error("duplicate bound on X_" + std::to_string(i));
        slot = constant(term.children[2]);
      } else if (op == "or") {
        for (std::size_t k = 1; k < term.children.size(); ++k) {
          const Sexp& d = term.children[k];
          if (d.is_list && !d.children.empty() && d.children[0].atom == "and") {
            if (d.children.size() != 2) vnn_error("only single-comparison conjunctions are supported");
            prop.disjuncts.push_back(output_comparison(d.children[1]));
          } else {
            prop.disjuncts.push_back(output_comparison(d));
          }
        }
      } else if (op == ">=" && term.children.size() == 3) {
        prop.disjuncts.push_back(output_comparison(term));
      } else {
        vnn_error("unsupported assertion '" + op + "'");
      }
    } else {
      vnn_error("unsupported command '" + head + "'");
    }
  }
  prop.lower.resize(static_cast<Eigen::Index>(prop.num_inputs));
  prop.upper.resize(static_cast<Eigen::Index>(prop.num_inputs));
  for (std::size_t i = 0; i < prop.num_inputs; ++i) {
    if (!lower[i] || !upper[i]) vnn_error("X_" + std::to_string(i) + " is not fully bounded");
    prop.lower[static_cast<Eigen::Index>(i)] = *lower[i];
    prop.upper[static_cast<Eigen::Index>(i)] = *upper[i];
  }
  for (const auto& [j, t] : prop.disjuncts) {
    if (j >= prop.num_outputs || t >= prop.num_outputs) vnn_error("undeclared output in property");
  }
  return prop;
}

}  // namespace nlv
