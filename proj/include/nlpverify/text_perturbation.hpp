#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "nlpverify/dataset.hpp"
#include "nlpverify/random.hpp"

namespace nlv {

enum class PerturbationKind {
  CharInsert,
  CharDelete,
  CharReplace,
  CharSwap,
  CharRepeat,
  WordDelete,
  WordRepeat,
  WordNegate,
  WordNumberFlip,
  WordOrderSwap,
  WordTenseShift,
};

std::string_view to_string(PerturbationKind kind);
PerturbationKind perturbation_kind_from_string(std::string_view name);
bool is_char_level(PerturbationKind kind);
const std::vector<PerturbationKind>& all_perturbation_kinds();

struct PerturbationPolicy {
  std::vector<PerturbationKind> kinds;
  std::size_t per_sentence_count = 1;
  std::uint64_t seed = 0;

  // Throws InvalidArgument when kinds is empty or the count is zero.
  void validate() const;
};

// Symmetric adjacency between lowercase letters of a keyboard.
class KeyboardLayout {
 public:
  static const KeyboardLayout& qwerty();

  explicit KeyboardLayout(std::map<char, std::string> adjacency);

  // Neighbours of the lowercase form of c; empty when c is not on the layout.
  std::string_view neighbors(char c) const;
  bool adjacent(char a, char b) const;
  const std::map<char, std::string>& adjacency() const { return adjacency_; }

 private:
  std::map<char, std::string> adjacency_;
};

// One character edit on an interior character of a random word whose core
// (the token with surrounding punctuation stripped) has at least three
// characters. Throws NoEligibleWord when no word qualifies for the kind.
std::string perturb_char(std::string_view sentence, PerturbationKind kind,
                         Rng& rng,
                         const KeyboardLayout& layout = KeyboardLayout::qwerty());

// Word-level edit; tokens are re-joined with single spaces. Throws
// NoEligibleTarget when the required word or verb is absent.
std::string perturb_word(std::string_view sentence, PerturbationKind kind,
                         Rng& rng);

std::string perturb(std::string_view sentence, PerturbationKind kind, Rng& rng);

struct VariantSet {
  std::vector<std::string> variants;
  std::size_t skipped = 0;
};

// Draws policy.per_sentence_count kinds from the stream seeded by
// derive_seed(policy.seed, stream_index) and applies each to sentence.
VariantSet perturb_variants(std::string_view sentence,
                            const PerturbationPolicy& policy,
                            std::uint64_t stream_index);

struct AugmentResult {
  Dataset data;
  std::size_t skipped = 0;
};

// Each original is followed by its variants; variants inherit label and split
// and carry source_id = index of the original in the input.
AugmentResult augment_dataset(const Dataset& data,
                              const PerturbationPolicy& policy);

// Whitespace tokens of a sentence and the punctuation-stripped core of one.
std::vector<std::string> word_tokens(std::string_view sentence);
std::string_view word_core(std::string_view token);

}  // namespace nlv
