#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "nlpverify/dataset.hpp"

namespace nlv {

// Row-major so one row per sentence is contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct EmbeddedDataset {
  Matrix vectors;  // N x D
  std::vector<std::size_t> labels;
  // Empty when the source carries no split information.
  std::vector<Split> splits;
  std::string embedder_id;
  std::optional<std::uint64_t> seed;

  std::size_t size() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }

  // Rows whose split tag equals `split`; all rows when no tags are present.
  EmbeddedDataset select(Split split) const;
  std::vector<std::size_t> indices(Split split) const;
};

class Embedder {
 public:
  virtual ~Embedder() = default;

  // One row per text. Must be deterministic.
  virtual Matrix embed(std::span<const std::string> texts) const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string id() const = 0;
  virtual std::optional<std::uint64_t> seed() const { return std::nullopt; }

  Vector embed_one(const std::string& text) const;
};

// Character n-gram sign-hash projection.
//
// The lowercased text contributes every byte n-gram for n in [n_low, n_high]
// (texts shorter than n_low contribute themselves as one gram). Gram g hashes
// to h = hash_bytes(g, seed); its vector has component d equal to
// +1/sqrt(dim) when the top bit of splitmix64(h + d) is clear and -1/sqrt(dim)
// otherwise. Grams are summed with multiplicity and the sum is L2-normalized.
class HashedNgramEmbedder final : public Embedder {
 public:
  HashedNgramEmbedder(std::size_t dim, std::size_t n_low, std::size_t n_high,
                      std::uint64_t seed);

  Matrix embed(std::span<const std::string> texts) const override;
  std::size_t dim() const override { return dim_; }
  std::string id() const override;
  std::optional<std::uint64_t> seed() const override { return seed_; }

  // Throws EmbedderFailure for empty text or a zero gram sum.
  Vector embed_text(const std::string& text) const;

 private:
  std::size_t dim_;
  std::size_t n_low_;
  std::size_t n_high_;
  std::uint64_t seed_;
};

std::unique_ptr<Embedder> hashed_ngram_embedder(std::size_t dim = 384, std::size_t n_low = 2,
                                                std::size_t n_high = 4, std::uint64_t seed = 0);

// Serves vectors computed elsewhere, keyed by exact text. Unknown texts are an
// EmbedderFailure.
class LookupEmbedder final : public Embedder {
 public:
  LookupEmbedder(std::string id, std::unordered_map<std::string, Vector> table);

  // JSONL lines of the form {"text": "...", "vec": [...]}.
  static LookupEmbedder from_file(const std::filesystem::path& path);

  Matrix embed(std::span<const std::string> texts) const override;
  std::size_t dim() const override { return dim_; }
  std::string id() const override { return id_; }

 private:
  std::string id_;
  std::size_t dim_ = 0;
  std::unordered_map<std::string, Vector> table_;
};

// Row i embeds sentence i; labels and split tags are carried over. Throws
// EmbedderFailure naming the first non-finite row.
EmbeddedDataset embed_dataset(const Dataset& data, const Embedder& embedder);

// Embedding files: CSV with header label,e0,...,e{D-1}, or JSONL lines
// {"label": k, "vec": [...]}. Format chosen by extension (.csv / .jsonl).
EmbeddedDataset load_embeddings(const std::filesystem::path& path,
                                std::optional<std::size_t> expected_dim = std::nullopt);
void save_embeddings(const EmbeddedDataset& data, const std::filesystem::path& path);

std::string embeddings_to_csv(const EmbeddedDataset& data);
EmbeddedDataset embeddings_from_csv(const std::string& text,
                                    std::optional<std::size_t> expected_dim = std::nullopt);
EmbeddedDataset embeddings_from_jsonl(const std::string& text,
                                      std::optional<std::size_t> expected_dim = std::nullopt);

double cosine_similarity(const Vector& a, const Vector& b);

}  // namespace nlv
