#include "nlpverify/embedding.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;

[[noreturn]] void row_error(std::size_t row, const std::string& what) {
  throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": " + what);
}

void check_dim(std::size_t dim, std::optional<std::size_t> expected) {
  if (expected && dim != *expected) {
    throw Error(ErrorKind::DimMismatch, "embedding dimension " + std::to_string(dim) +
                                            ", expected " + std::to_string(*expected));
  }
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t parse_label(const std::string& s, std::size_t row) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    row_error(row, "invalid label '" + s + "'");
  }
  return static_cast<std::size_t>(std::stoull(s));
}

}  // namespace

EmbeddedDataset EmbeddedDataset::select(Split split) const {
  const auto idx = indices(split);
  EmbeddedDataset out;
  out.vectors.resize(static_cast<Eigen::Index>(idx.size()), vectors.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.vectors.row(static_cast<Eigen::Index>(r)) = vectors.row(static_cast<Eigen::Index>(idx[r]));
    out.labels.push_back(labels[idx[r]]);
    if (!splits.empty()) out.splits.push_back(splits[idx[r]]);
  }
  out.embedder_id = embedder_id;
  out.seed = seed;
  return out;
}

std::vector<std::size_t> EmbeddedDataset::indices(Split split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i) {
    if (splits.empty() || splits[i] == split) idx.push_back(i);
  }
  return idx;
}

Vector Embedder::embed_one(const std::string& text) const {
  const Matrix m = embed(std::span<const std::string>(&text, 1));
  return m.row(0).transpose();
}

HashedNgramEmbedder::HashedNgramEmbedder(std::size_t dim, std::size_t n_low, std::size_t n_high,
                                         std::uint64_t seed)
    : dim_(dim), n_low_(n_low), n_high_(n_high), seed_(seed) {
  if (dim < 2) throw Error(ErrorKind::InvalidArgument, "embedder dim must be >= 2");
  if (n_low < 1 || n_high < n_low) {
    throw Error(ErrorKind::InvalidArgument, "n-gram range must satisfy 1 <= n_low <= n_high");
  }
}

std::string HashedNgramEmbedder::id() const {
  return "hashed-ngram(dim=" + std::to_string(dim_) + ",n=" + std::to_string(n_low_) + "-" +
         std::to_string(n_high_) + ",seed=" + std::to_string(seed_) + ")";
}

Vector HashedNgramEmbedder::embed_text(const std::string& text) const {
  if (text.empty()) throw Error(ErrorKind::EmbedderFailure, "empty text");
  std::string lowered(text);
  for (char& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

  Vector sum = Vector::Zero(static_cast<Eigen::Index>(dim_));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim_));
  auto add_gram = [&](std::string_view gram) {
    const std::uint64_t h = hash_bytes(gram, seed_);
    for (std::size_t d = 0; d < dim_; ++d) {
      const bool negative = (splitmix64(h + d) >> 63) != 0;
      sum[static_cast<Eigen::Index>(d)] += negative ? -scale : scale;
    }
  };
  const std::string_view view(lowered);
  if (view.size() < n_low_) {
    add_gram(view);
  } else {
    for (std::size_t n = n_low_; n <= n_high_ && n <= view.size(); ++n) {
      for (std::size_t i = 0; i + n <= view.size(); ++i) add_gram(view.substr(i, n));
    }
  }
  const double norm = sum.norm();
  if (!(norm > 0.0)) {
    throw Error(ErrorKind::EmbedderFailure, "n-gram projections cancel for \"" + text + "\"");
  }
  return sum / norm;
}

Matrix HashedNgramEmbedder::embed(std::span<const std::string> texts) const {
  Matrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = embed_text(texts[i]).transpose();
  }
  return out;
}

std::unique_ptr<Embedder> hashed_ngram_embedder(std::size_t dim, std::size_t n_low,
                                                std::size_t n_high, std::uint64_t seed) {
  return std::make_unique<HashedNgramEmbedder>(dim, n_low, n_high, seed);
}

LookupEmbedder::LookupEmbedder(std::string id, std::unordered_map<std::string, Vector> table)
    : id_(std::move(id)), table_(std::move(table)) {
  if (table_.empty()) throw Error(ErrorKind::InvalidArgument, "empty embedding lookup table");
  dim_ = static_cast<std::size_t>(table_.begin()->second.size());
  for (const auto& [text, v] : table_) {
    check_dim(static_cast<std::size_t>(v.size()), dim_);
  }
}

LookupEmbedder LookupEmbedder::from_file(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::unordered_map<std::string, Vector> table;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      row_error(row, e.what());
    }
    if (!obj.contains("text") || !obj.contains("vec") || !obj["vec"].is_array()) {
      row_error(row, "expected {\"text\": ..., \"vec\": [...]}");
    }
    const auto& arr = obj["vec"];
    Vector v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t d = 0; d < arr.size(); ++d) {
      if (!arr[d].is_number()) row_error(row, "non-numeric entry");
      v[static_cast<Eigen::Index>(d)] = arr[d].get<double>();
    }
    if (!v.allFinite()) row_error(row, "non-finite entry");
    table.insert_or_assign(obj["text"].get<std::string>(), std::move(v));
    ++row;
  }
  return LookupEmbedder("lookup:" + path.filename().string(), std::move(table));
}

Matrix LookupEmbedder::embed(std::span<const std::string> texts) const {
  Matrix out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto it = table_.find(texts[i]);
    if (it == table_.end()) {
      throw Error(ErrorKind::EmbedderFailure, "no precomputed vector for \"" + texts[i] + "\"");
    }
    out.row(static_cast<Eigen::Index>(i)) = it->second.transpose();
  }
  return out;
}

EmbeddedDataset embed_dataset(const Dataset& data, const Embedder& embedder) {
  if (data.empty()) throw Error(ErrorKind::EmptySet, "cannot embed an empty dataset");
  std::vector<std::string> texts;
  texts.reserve(data.size());
  for (const auto& s : data.sentences) texts.push_back(s.text);

  EmbeddedDataset out;
  out.vectors = embedder.embed(texts);
  if (static_cast<std::size_t>(out.vectors.rows()) != texts.size() ||
      static_cast<std::size_t>(out.vectors.cols()) != embedder.dim()) {
    throw Error(ErrorKind::EmbedderFailure, "embedder returned a matrix of the wrong shape");
  }
  for (Eigen::Index r = 0; r < out.vectors.rows(); ++r) {
    if (!out.vectors.row(r).allFinite()) {
      throw Error(ErrorKind::EmbedderFailure,
                  "non-finite embedding for sentence " + std::to_string(r));
    }
  }
  for (const auto& s : data.sentences) {
    out.labels.push_back(s.label);
    out.splits.push_back(s.split);
  }
  out.embedder_id = embedder.id();
  out.seed = embedder.seed();
  return out;
}

std::string embeddings_to_csv(const EmbeddedDataset& data) {
  std::string out = "label";
  for (std::size_t d = 0; d < data.dim(); ++d) out += ",e" + std::to_string(d);
  out += '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    out += std::to_string(data.labels[r]);
    for (std::size_t d = 0; d < data.dim(); ++d) {
      out += ',';
      out += format_double(data.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)));
    }
    out += '\n';
  }
  return out;
}

EmbeddedDataset embeddings_from_csv(const std::string& text, std::optional<std::size_t> expected_dim) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::ParseError, "missing header");
  const auto header = split_commas(line);
  if (header.empty() || header[0] != "label") {
    throw Error(ErrorKind::ParseError, "header must start with 'label'");
  }
  const std::size_t dim = header.size() - 1;
  for (std::size_t d = 0; d < dim; ++d) {
    if (header[d + 1] != "e" + std::to_string(d)) {
      throw Error(ErrorKind::ParseError, "unexpected header column '" + header[d + 1] + "'");
    }
  }
  check_dim(dim, expected_dim);

  std::vector<std::vector<double>> rows;
  EmbeddedDataset out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != dim + 1) {
      row_error(row, "expected " + std::to_string(dim + 1) + " fields");
    }
    out.labels.push_back(parse_label(fields[0], row));
    std::vector<double> values(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      const auto v = parse_double(fields[d + 1]);
      if (!v) row_error(row, "invalid number '" + fields[d + 1] + "'");
      if (!std::isfinite(*v)) row_error(row, "non-finite entry in column e" + std::to_string(d));
      values[d] = *v;
    }
    rows.push_back(std::move(values));
    ++row;
  }
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t d = 0; d < dim; ++d) {
      out.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = rows[r][d];
    }
  }
  return out;
}

EmbeddedDataset embeddings_from_jsonl(const std::string& text,
                                      std::optional<std::size_t> expected_dim) {
  std::istringstream in(text);
  std::string line;
  std::vector<Vector> rows;
  EmbeddedDataset out;
  std::size_t row = 0;
  std::optional<std::size_t> dim = expected_dim;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      row_error(row, e.what());
    }
    if (!obj.is_object() || !obj.contains("label") || !obj.contains("vec") ||
        !obj["vec"].is_array() || !obj["label"].is_number_unsigned()) {
      row_error(row, "expected {\"label\": k, \"vec\": [...]}");
    }
    const auto& arr = obj["vec"];
    check_dim(arr.size(), dim);
    dim = arr.size();
    Vector v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t d = 0; d < arr.size(); ++d) {
      // nlohmann maps NaN/Infinity literals to null or parse errors.
      if (!arr[d].is_number()) row_error(row, "non-numeric entry at index " + std::to_string(d));
      v[static_cast<Eigen::Index>(d)] = arr[d].get<double>();
    }
    if (!v.allFinite()) row_error(row, "non-finite entry");
    out.labels.push_back(obj["label"].get<std::size_t>());
    rows.push_back(std::move(v));
    ++row;
  }
  const std::size_t d = dim.value_or(0);
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.vectors.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  }
  return out;
}

EmbeddedDataset load_embeddings(const std::filesystem::path& path,
                                std::optional<std::size_t> expected_dim) {
  const std::string text = read_text_file(path);
  EmbeddedDataset out = path.extension() == ".jsonl" ? embeddings_from_jsonl(text, expected_dim)
                                                     : embeddings_from_csv(text, expected_dim);
  out.embedder_id = "file:" + path.filename().string();
  return out;
}

void save_embeddings(const EmbeddedDataset& data, const std::filesystem::path& path) {
  if (path.extension() == ".jsonl") {
    std::string out;
    for (std::size_t r = 0; r < data.size(); ++r) {
      // Manual formatting keeps the shortest round-trip decimal per entry.
      out += "{\"label\":" + std::to_string(data.labels[r]) + ",\"vec\":[";
      for (std::size_t d = 0; d < data.dim(); ++d) {
        if (d) out += ',';
        out += format_double(data.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)));
      }
      out += "]}\n";
    }
    write_text_file(path, out);
  } else {
    write_text_file(path, embeddings_to_csv(data));
  }
}

double cosine_similarity(const Vector& a, const Vector& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

}  // namespace nlv
