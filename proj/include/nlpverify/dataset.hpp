#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace nlv {

enum class Split { Train, Test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view text);

struct LabeledSentence {
  std::string text;
  std::size_t label = 0;
  // Index of the sentence this one was derived from, if it is a perturbation.
  std::optional<std::size_t> source_id;
  Split split = Split::Train;

  bool operator==(const LabeledSentence&) const = default;
};

struct Dataset {
  std::vector<LabeledSentence> sentences;
  std::size_t num_classes = 0;
  std::vector<std::string> label_names;

  std::size_t size() const { return sentences.size(); }
  bool empty() const { return sentences.empty(); }

  // Throws InvalidArgument on empty text or out-of-range labels.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

enum class DatasetFormat { Csv, Jsonl };

DatasetFormat dataset_format_for(const std::filesystem::path& path);

using LabelMap = std::map<std::string, std::size_t>;

// Records are returned in file order. Labels not present in label_map are an
// UnknownLabel error; malformed records are a ParseError carrying the line.
//
// CSV: header row with at least the columns `text,label`; optional `split`
// and `source` columns are read when present. JSONL: one object per line with
// "text" and "label", optional "split" and "source".
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const LabelMap& label_map);

void save_dataset(const Dataset& data, const std::filesystem::path& path,
                  DatasetFormat format);

// Canonical text serializations used by save_dataset.
std::string dataset_to_csv(const Dataset& data);
std::string dataset_to_jsonl(const Dataset& data);
Dataset dataset_from_csv(const std::string& text, const LabelMap& label_map);
Dataset dataset_from_jsonl(const std::string& text, const LabelMap& label_map);

// Stratified assignment of split tags. Per class, round(test_fraction * n_c)
// examples go to Test. Throws DegenerateSplit when a class would end up with
// no test or no train example.
Dataset split_dataset(const Dataset& data, double test_fraction,
                      std::uint64_t seed);

// Label map recovered from label_names (name -> index).
LabelMap label_map_of(const Dataset& data);

// Two-class template corpus used for desk-scale pipeline runs: class 1 asks
// whether the other party is a machine, class 0 is unrelated chit-chat.
Dataset synthetic_robot_dataset(std::size_t per_class, std::uint64_t seed);

}  // namespace nlv
