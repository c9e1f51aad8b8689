#include "nlpverify/text_perturbation.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <unordered_map>

#include "nlpverify/error.hpp"

namespace nlv {
namespace {

constexpr std::array<std::pair<PerturbationKind, std::string_view>, 11> kKindNames{{
    {PerturbationKind::CharInsert, "char_insert"},
    {PerturbationKind::CharDelete, "char_delete"},
    {PerturbationKind::CharReplace, "char_replace"},
    {PerturbationKind::CharSwap, "char_swap"},
    {PerturbationKind::CharRepeat, "char_repeat"},
    {PerturbationKind::WordDelete, "word_delete"},
    {PerturbationKind::WordRepeat, "word_repeat"},
    {PerturbationKind::WordNegate, "word_negate"},
    {PerturbationKind::WordNumberFlip, "word_number_flip"},
    {PerturbationKind::WordOrderSwap, "word_order_swap"},
    {PerturbationKind::WordTenseShift, "word_tense_shift"},
}};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
bool is_upper(char c) { return std::isupper(static_cast<unsigned char>(c)) != 0; }
char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }
char upper(char c) { return static_cast<char>(std::toupper(static_cast<unsigned char>(c))); }

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = lower(c);
  return out;
}

bool is_ascii(std::string_view s) {
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return static_cast<unsigned char>(c) < 0x80; });
}

// Byte span of a word core inside the sentence.
struct CoreSpan {
  std::size_t begin;
  std::size_t length;
};

std::vector<CoreSpan> char_eligible_cores(std::string_view sentence) {
  std::vector<CoreSpan> cores;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && is_space(sentence[i])) ++i;
    const std::size_t start = i;
    while (i < sentence.size() && !is_space(sentence[i])) ++i;
    if (start == i) break;
    std::size_t b = start;
    std::size_t e = i;
    while (b < e && is_punct(sentence[b])) ++b;
    while (e > b && is_punct(sentence[e - 1])) --e;
    const std::string_view core = sentence.substr(b, e - b);
    if (core.size() >= 3 && is_ascii(core)) cores.push_back({b, core.size()});
  }
  return cores;
}

// Positions within a core where the kind can act; first and last characters
// are never touched.
std::vector<std::size_t> char_positions(std::string_view core, PerturbationKind kind,
                                        const KeyboardLayout& layout) {
  std::vector<std::size_t> out;
  const std::size_t n = core.size();
  switch (kind) {
    case PerturbationKind::CharInsert:
      // Insertion before core[p].
      for (std::size_t p = 1; p < n; ++p) out.push_back(p);
      break;
    case PerturbationKind::CharDelete:
    case PerturbationKind::CharRepeat:
      for (std::size_t p = 1; p + 1 < n; ++p) out.push_back(p);
      break;
    case PerturbationKind::CharReplace:
      for (std::size_t p = 1; p + 1 < n; ++p) {
        if (!layout.neighbors(core[p]).empty()) out.push_back(p);
      }
      break;
    case PerturbationKind::CharSwap:
      for (std::size_t p = 1; p + 2 < n; ++p) {
        if (core[p] != core[p + 1]) out.push_back(p);
      }
      break;
    default:
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verb lexicon

struct VerbForms {
  std::string_view base;
  std::string_view third;
  std::string_view past;
  std::string_view participle;
};

constexpr std::array<VerbForms, 48> kVerbs{{
    {"ask", "asks", "asked", "asking"},
    {"answer", "answers", "answered", "answering"},
    {"become", "becomes", "became", "becoming"},
    {"believe", "believes", "believed", "believing"},
    {"call", "calls", "called", "calling"},
    {"come", "comes", "came", "coming"},
    {"chat", "chats", "chatted", "chatting"},
    {"feel", "feels", "felt", "feeling"},
    {"find", "finds", "found", "finding"},
    {"get", "gets", "got", "getting"},
    {"give", "gives", "gave", "giving"},
    {"go", "goes", "went", "going"},
    {"hear", "hears", "heard", "hearing"},
    {"help", "helps", "helped", "helping"},
    {"know", "knows", "knew", "knowing"},
    {"like", "likes", "liked", "liking"},
    {"listen", "listens", "listened", "listening"},
    {"live", "lives", "lived", "living"},
    {"look", "looks", "looked", "looking"},
    {"love", "loves", "loved", "loving"},
    {"make", "makes", "made", "making"},
    {"mean", "means", "meant", "meaning"},
    {"need", "needs", "needed", "needing"},
    {"play", "plays", "played", "playing"},
    {"read", "reads", "read", "reading"},
    {"run", "runs", "ran", "running"},
    {"say", "says", "said", "saying"},
    {"see", "sees", "saw", "seeing"},
    {"seem", "seems", "seemed", "seeming"},
    {"sound", "sounds", "sounded", "sounding"},
    {"speak", "speaks", "spoke", "speaking"},
    {"sleep", "sleeps", "slept", "sleeping"},
    {"start", "starts", "started", "starting"},
    {"take", "takes", "took", "taking"},
    {"talk", "talks", "talked", "talking"},
    {"tell", "tells", "told", "telling"},
    {"text", "texts", "texted", "texting"},
    {"think", "thinks", "thought", "thinking"},
    {"try", "tries", "tried", "trying"},
    {"type", "types", "typed", "typing"},
    {"understand", "understands", "understood", "understanding"},
    {"use", "uses", "used", "using"},
    {"want", "wants", "wanted", "wanting"},
    {"watch", "watches", "watched", "watching"},
    {"work", "works", "worked", "working"},
    {"write", "writes", "wrote", "writing"},
    {"eat", "eats", "ate", "eating"},
    {"drink", "drinks", "drank", "drinking"},
}};

enum class VerbForm { Base, Third, Past, Participle };

struct LexiconHit {
  const VerbForms* verb;
  VerbForm form;
};

std::optional<LexiconHit> lexicon_lookup(std::string_view lower_word) {
  for (const auto& v : kVerbs) {
    // Check base and third first; "read" is both base and past.
    if (lower_word == v.base) return LexiconHit{&v, VerbForm::Base};
    if (lower_word == v.third) return LexiconHit{&v, VerbForm::Third};
    if (lower_word == v.past) return LexiconHit{&v, VerbForm::Past};
    if (lower_word == v.participle) return LexiconHit{&v, VerbForm::Participle};
  }
  return std::nullopt;
}

const std::unordered_map<std::string_view, std::string_view>& number_flips() {
  static const std::unordered_map<std::string_view, std::string_view> m{
      {"is", "are"},   {"are", "is"},   {"was", "were"}, {"were", "was"},
      {"am", "are"},   {"has", "have"}, {"have", "has"}, {"does", "do"},
      {"do", "does"},  {"isn't", "aren't"}, {"aren't", "isn't"},
      {"wasn't", "weren't"}, {"weren't", "wasn't"}, {"doesn't", "don't"},
      {"don't", "doesn't"}, {"hasn't", "haven't"}, {"haven't", "hasn't"},
  };
  return m;
}

const std::unordered_map<std::string_view, std::string_view>& tense_shifts() {
  static const std::unordered_map<std::string_view, std::string_view> m{
      {"am", "was"},     {"is", "was"},     {"are", "were"},  {"has", "had"},
      {"have", "had"},   {"do", "did"},     {"does", "did"},  {"can", "could"},
      {"will", "would"}, {"shall", "should"}, {"may", "might"},
      {"isn't", "wasn't"}, {"aren't", "weren't"}, {"don't", "didn't"},
      {"doesn't", "didn't"}, {"can't", "couldn't"}, {"won't", "wouldn't"},
      {"hasn't", "hadn't"}, {"haven't", "hadn't"},
  };
  return m;
}

// Auxiliaries that take a following "not".
bool is_negatable_aux(std::string_view w) {
  static constexpr std::array<std::string_view, 17> kAux{
      "am", "is", "are", "was", "were", "do", "does", "did", "can",
      "could", "will", "would", "shall", "should", "may", "might", "must"};
  return std::find(kAux.begin(), kAux.end(), w) != kAux.end();
}

const std::unordered_map<std::string_view, std::string_view>& contractions() {
  static const std::unordered_map<std::string_view, std::string_view> m{
      {"isn't", "is"},     {"aren't", "are"},      {"wasn't", "was"},
      {"weren't", "were"}, {"don't", "do"},        {"doesn't", "does"},
      {"didn't", "did"},   {"can't", "can"},       {"cannot", "can"},
      {"couldn't", "could"}, {"won't", "will"},    {"wouldn't", "would"},
      {"shouldn't", "should"}, {"mustn't", "must"}, {"hasn't", "has"},
      {"haven't", "have"}, {"hadn't", "had"},
  };
  return m;
}

struct Token {
  std::string lead;
  std::string core;
  std::string trail;

  std::string str() const { return lead + core + trail; }
};

Token split_token(std::string_view tok) {
  std::size_t b = 0;
  std::size_t e = tok.size();
  while (b < e && is_punct(tok[b])) ++b;
  while (e > b && is_punct(tok[e - 1])) --e;
  // Keep apostrophes inside contractions as part of the core.
  return Token{std::string(tok.substr(0, b)), std::string(tok.substr(b, e - b)),
               std::string(tok.substr(e))};
}

std::string match_case(std::string_view original, std::string_view replacement) {
  std::string out(replacement);
  if (!original.empty() && !out.empty() && is_upper(original.front())) {
    out.front() = upper(out.front());
  }
  return out;
}

std::string join(const std::vector<Token>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i].str();
  }
  return out;
}

[[noreturn]] void no_target(PerturbationKind kind, std::string_view sentence) {
  throw Error(ErrorKind::NoEligibleTarget,
              std::string(to_string(kind)) + " has no target in \"" +
                  std::string(sentence) + "\"");
}

std::string word_delete(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!tokens[i].core.empty()) cand.push_back(i);
  }
  if (tokens.size() < 2 || cand.empty()) no_target(PerturbationKind::WordDelete, s);
  const std::size_t i = cand[rng.index(cand.size())];
  const std::string carried = tokens[i].trail;
  tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(i));
  if (i == tokens.size() && !carried.empty()) tokens.back().trail += carried;
  return join(tokens);
}

std::string word_repeat(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!tokens[i].core.empty()) cand.push_back(i);
  }
  if (cand.empty()) no_target(PerturbationKind::WordRepeat, s);
  const std::size_t i = cand[rng.index(cand.size())];
  Token copy{"", tokens[i].core, tokens[i].trail};
  if (i == 0) copy.core = lowercase(copy.core);
  tokens[i].trail.clear();
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1, copy);
  return join(tokens);
}

std::string word_order_swap(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (!tokens[i].core.empty() && !tokens[i + 1].core.empty() &&
        tokens[i].core != tokens[i + 1].core) {
      cand.push_back(i);
    }
  }
  if (cand.empty()) no_target(PerturbationKind::WordOrderSwap, s);
  const std::size_t i = cand[rng.index(cand.size())];
  std::swap(tokens[i].core, tokens[i + 1].core);
  return join(tokens);
}

std::string word_negate(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  const auto& contr = contractions();
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string w = lowercase(tokens[i].core);
    if (is_negatable_aux(w) || contr.contains(w)) cand.push_back(i);
  }
  if (cand.empty()) no_target(PerturbationKind::WordNegate, s);
  const std::size_t i = cand[rng.index(cand.size())];
  const std::string w = lowercase(tokens[i].core);
  if (auto it = contr.find(w); it != contr.end()) {
    tokens[i].core = match_case(tokens[i].core, it->second);
    return join(tokens);
  }
  if (i + 1 < tokens.size() && lowercase(tokens[i + 1].core) == "not" &&
      tokens[i].trail.empty()) {
    tokens[i].trail = tokens[i + 1].trail;
    tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1);
    return join(tokens);
  }
  Token negation{"", "not", tokens[i].trail};
  tokens[i].trail.clear();
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1, negation);
  return join(tokens);
}

std::string word_number_flip(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  const auto& flips = number_flips();
  std::vector<std::pair<std::size_t, std::string>> cand;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string w = lowercase(tokens[i].core);
    if (auto it = flips.find(w); it != flips.end()) {
      cand.emplace_back(i, std::string(it->second));
    } else if (auto hit = lexicon_lookup(w)) {
      if (hit->form == VerbForm::Base) cand.emplace_back(i, std::string(hit->verb->third));
      if (hit->form == VerbForm::Third) cand.emplace_back(i, std::string(hit->verb->base));
    }
  }
  if (cand.empty()) no_target(PerturbationKind::WordNumberFlip, s);
  const auto& [i, replacement] = cand[rng.index(cand.size())];
  tokens[i].core = match_case(tokens[i].core, replacement);
  return join(tokens);
}

std::string word_tense_shift(std::vector<Token> tokens, Rng& rng, std::string_view s) {
  const auto& shifts = tense_shifts();
  std::vector<std::pair<std::size_t, std::string>> cand;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string w = lowercase(tokens[i].core);
    if (auto it = shifts.find(w); it != shifts.end()) {
      cand.emplace_back(i, std::string(it->second));
    } else if (auto hit = lexicon_lookup(w)) {
      if (hit->form == VerbForm::Base || hit->form == VerbForm::Third) {
        cand.emplace_back(i, std::string(hit->verb->past));
      }
    }
  }
  if (cand.empty()) no_target(PerturbationKind::WordTenseShift, s);
  const auto& [i, replacement] = cand[rng.index(cand.size())];
  tokens[i].core = match_case(tokens[i].core, replacement);
  return join(tokens);
}

}  // namespace

std::string_view to_string(PerturbationKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

PerturbationKind perturbation_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw Error(ErrorKind::InvalidArgument,
              "unknown perturbation kind '" + std::string(name) + "'");
}

bool is_char_level(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::CharInsert:
    case PerturbationKind::CharDelete:
    case PerturbationKind::CharReplace:
    case PerturbationKind::CharSwap:
    case PerturbationKind::CharRepeat:
      return true;
    default:
      return false;
  }
}

const std::vector<PerturbationKind>& all_perturbation_kinds() {
  static const std::vector<PerturbationKind> kinds = [] {
    std::vector<PerturbationKind> v;
    for (const auto& [k, name] : kKindNames) v.push_back(k);
    return v;
  }();
  return kinds;
}

void PerturbationPolicy::validate() const {
  if (kinds.empty()) {
    throw Error(ErrorKind::InvalidArgument, "perturbation policy has no kinds");
  }
  if (per_sentence_count == 0) {
    throw Error(ErrorKind::InvalidArgument, "per_sentence_count must be >= 1");
  }
}

// ---------------------------------------------------------------------------

KeyboardLayout::KeyboardLayout(std::map<char, std::string> adjacency)
    : adjacency_(std::move(adjacency)) {}

const KeyboardLayout& KeyboardLayout::qwerty() {
  static const KeyboardLayout layout = [] {
    const std::array<std::string_view, 3> rows{"qwertyuiop", "asdfghjkl", "zxcvbnm"};
    std::map<char, std::string> adj;
    auto link = [&adj](char a, char b) {
      if (adj[a].find(b) == std::string::npos) adj[a] += b;
      if (adj[b].find(a) == std::string::npos) adj[b] += a;
    };
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto row = rows[r];
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c + 1 < row.size()) link(row[c], row[c + 1]);
        // Staggered rows: a key touches the keys at c and c+1 of the row above.
        if (r > 0) {
          const auto above = rows[r - 1];
          if (c < above.size()) link(row[c], above[c]);
          if (c + 1 < above.size()) link(row[c], above[c + 1]);
        }
      }
    }
    for (auto& [k, v] : adj) std::sort(v.begin(), v.end());
    return KeyboardLayout(std::move(adj));
  }();
  return layout;
}

std::string_view KeyboardLayout::neighbors(char c) const {
  auto it = adjacency_.find(lower(c));
  if (it == adjacency_.end()) return {};
  return it->second;
}

bool KeyboardLayout::adjacent(char a, char b) const {
  return neighbors(a).find(lower(b)) != std::string_view::npos;
}

// ---------------------------------------------------------------------------

std::vector<std::string> word_tokens(std::string_view sentence) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && is_space(sentence[i])) ++i;
    const std::size_t start = i;
    while (i < sentence.size() && !is_space(sentence[i])) ++i;
    if (i > start) out.emplace_back(sentence.substr(start, i - start));
  }
  return out;
}

std::string_view word_core(std::string_view token) {
  std::size_t b = 0;
  std::size_t e = token.size();
  while (b < e && is_punct(token[b])) ++b;
  while (e > b && is_punct(token[e - 1])) --e;
  return token.substr(b, e - b);
}

std::string perturb_char(std::string_view sentence, PerturbationKind kind, Rng& rng,
                         const KeyboardLayout& layout) {
  if (!is_char_level(kind)) {
    throw Error(ErrorKind::InvalidArgument,
                std::string(to_string(kind)) + " is not a character-level kind");
  }
  struct Candidate {
    CoreSpan span;
    std::vector<std::size_t> positions;
  };
  std::vector<Candidate> candidates;
  for (const auto& span : char_eligible_cores(sentence)) {
    auto positions = char_positions(sentence.substr(span.begin, span.length), kind, layout);
    if (!positions.empty()) candidates.push_back({span, std::move(positions)});
  }
  if (candidates.empty()) {
    throw Error(ErrorKind::NoEligibleWord, std::string(to_string(kind)) +
                                               " has no eligible word in \"" +
                                               std::string(sentence) + "\"");
  }
  const Candidate& pick = candidates[rng.index(candidates.size())];
  const std::size_t p = pick.positions[rng.index(pick.positions.size())];
  const std::size_t at = pick.span.begin + p;

  std::string out(sentence);
  switch (kind) {
    case PerturbationKind::CharInsert:
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(at),
                 static_cast<char>('a' + rng.index(26)));
      break;
    case PerturbationKind::CharDelete:
      out.erase(at, 1);
      break;
    case PerturbationKind::CharReplace: {
      const auto nb = layout.neighbors(out[at]);
      char r = nb[rng.index(nb.size())];
      out[at] = is_upper(out[at]) ? upper(r) : r;
      break;
    }
    case PerturbationKind::CharSwap:
      std::swap(out[at], out[at + 1]);
      break;
    case PerturbationKind::CharRepeat:
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(at) + 1, out[at]);
      break;
    default:
      break;
  }
  return out;
}

std::string perturb_word(std::string_view sentence, PerturbationKind kind, Rng& rng) {
  if (is_char_level(kind)) {
    throw Error(ErrorKind::InvalidArgument,
                std::string(to_string(kind)) + " is not a word-level kind");
  }
  std::vector<Token> tokens;
  for (const auto& t : word_tokens(sentence)) tokens.push_back(split_token(t));
  if (tokens.empty()) no_target(kind, sentence);

  switch (kind) {
    case PerturbationKind::WordDelete: return word_delete(std::move(tokens), rng, sentence);
    case PerturbationKind::WordRepeat: return word_repeat(std::move(tokens), rng, sentence);
    case PerturbationKind::WordNegate: return word_negate(std::move(tokens), rng, sentence);
    case PerturbationKind::WordNumberFlip:
      return word_number_flip(std::move(tokens), rng, sentence);
    case PerturbationKind::WordOrderSwap:
      return word_order_swap(std::move(tokens), rng, sentence);
    case PerturbationKind::WordTenseShift:
      return word_tense_shift(std::move(tokens), rng, sentence);
    default:
      no_target(kind, sentence);
  }
}

std::string perturb(std::string_view sentence, PerturbationKind kind, Rng& rng) {
  return is_char_level(kind) ? perturb_char(sentence, kind, rng)
                             : perturb_word(sentence, kind, rng);
}

VariantSet perturb_variants(std::string_view sentence, const PerturbationPolicy& policy,
                            std::uint64_t stream_index) {
  policy.validate();
  VariantSet out;
  Rng rng(derive_seed(policy.seed, stream_index));
  for (std::size_t c = 0; c < policy.per_sentence_count; ++c) {
    const PerturbationKind kind = policy.kinds[rng.index(policy.kinds.size())];
    try {
      out.variants.push_back(perturb(sentence, kind, rng));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoEligibleWord && e.kind() != ErrorKind::NoEligibleTarget) {
        throw;
      }
      ++out.skipped;
    }
  }
  return out;
}

AugmentResult augment_dataset(const Dataset& data, const PerturbationPolicy& policy) {
  policy.validate();
  AugmentResult result;
  result.data.num_classes = data.num_classes;
  result.data.label_names = data.label_names;
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    const LabeledSentence& original = data.sentences[i];
    result.data.sentences.push_back(original);
    VariantSet vs = perturb_variants(original.text, policy, i);
    result.skipped += vs.skipped;
    for (auto& text : vs.variants) {
      result.data.sentences.push_back(
          LabeledSentence{std::move(text), original.label, i, original.split});
    }
  }
  return result;
}

}  // namespace nlv
