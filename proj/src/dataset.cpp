#include "nlpverify/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nlpverify/error.hpp"
#include "nlpverify/io.hpp"
#include "nlpverify/random.hpp"

namespace nlv {
namespace {

using json = nlohmann::json;

[[noreturn]] void parse_error(std::size_t line, const std::string& what) {
  throw Error(ErrorKind::ParseError, "line " + std::to_string(line) + ": " + what);
}

struct CsvRecord {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

// RFC 4180 reader: quoted fields may contain commas, doubled quotes and
// newlines.
std::vector<CsvRecord> parse_csv(const std::string& text) {
  std::vector<CsvRecord> records;
  std::size_t line = 1;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    CsvRecord rec;
    rec.line = line;
    std::string field;
    bool done = false;
    while (!done) {
      field.clear();
      if (i < n && text[i] == '"') {
        ++i;
        while (true) {
          if (i >= n) parse_error(rec.line, "unterminated quoted field");
          if (text[i] == '"') {
            if (i + 1 < n && text[i + 1] == '"') {
              field += '"';
              i += 2;
            } else {
              ++i;
              break;
            }
          } else {
            if (text[i] == '\n') ++line;
            field += text[i++];
          }
        }
        if (i < n && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          parse_error(rec.line, "unexpected character after closing quote");
        }
      } else {
        while (i < n && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          if (text[i] == '"') parse_error(rec.line, "quote inside unquoted field");
          field += text[i++];
        }
      }
      rec.fields.push_back(field);
      if (i < n && text[i] == ',') {
        ++i;
      } else {
        if (i < n && text[i] == '\r') ++i;
        if (i < n && text[i] == '\n') {
          ++i;
          ++line;
        }
        done = true;
      }
    }
    if (!(rec.fields.size() == 1 && rec.fields[0].empty())) records.push_back(std::move(rec));
  }
  return records;
}

std::string csv_field(const std::string& s) {
  const bool needs_quotes =
      s.find_first_of(",\"\r\n") != std::string::npos ||
      (!s.empty() && (std::isspace(static_cast<unsigned char>(s.front())) ||
                      std::isspace(static_cast<unsigned char>(s.back()))));
  if (!needs_quotes) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> names_from_map(const LabelMap& label_map, std::size_t& num_classes) {
  num_classes = 0;
  for (const auto& [name, idx] : label_map) num_classes = std::max(num_classes, idx + 1);
  std::vector<std::string> names(num_classes);
  // std::map iterates keys in order, so the first key seen is the smallest.
  for (const auto& [name, idx] : label_map) {
    if (names[idx].empty()) names[idx] = name;
  }
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k].empty()) names[k] = "class" + std::to_string(k);
  }
  return names;
}

std::size_t lookup_label(const LabelMap& label_map, const std::string& label, std::size_t line) {
  auto it = label_map.find(label);
  if (it == label_map.end()) {
    throw Error(ErrorKind::UnknownLabel,
                "label '" + label + "' at line " + std::to_string(line));
  }
  return it->second;
}

Split parse_split(const std::string& s, std::size_t line) {
  try {
    return split_from_string(s);
  } catch (const Error&) {
    parse_error(line, "invalid split '" + s + "'");
  }
}

std::size_t parse_index(const std::string& s, std::size_t line) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    parse_error(line, "invalid source index '" + s + "'");
  }
  if (pos != s.size()) parse_error(line, "invalid source index '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Split split_from_string(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  throw Error(ErrorKind::InvalidArgument, "unknown split '" + std::string(text) + "'");
}

void Dataset::validate() const {
  if (label_names.size() != num_classes) {
    throw Error(ErrorKind::InvalidArgument, "label_names size differs from num_classes");
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (sentences[i].text.empty()) {
      throw Error(ErrorKind::InvalidArgument, "empty text at index " + std::to_string(i));
    }
    if (sentences[i].label >= num_classes) {
      throw Error(ErrorKind::InvalidArgument, "label out of range at index " + std::to_string(i));
    }
  }
}

DatasetFormat dataset_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return DatasetFormat::Csv;
  if (ext == ".jsonl" || ext == ".json") return DatasetFormat::Jsonl;
  throw Error(ErrorKind::InvalidArgument, "cannot infer dataset format of " + path.string());
}

Dataset dataset_from_csv(const std::string& text, const LabelMap& label_map) {
  const auto records = parse_csv(text);
  if (records.empty()) parse_error(1, "missing header row");
  const auto& header = records.front().fields;
  auto column = [&header](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };
  const auto text_col = column("text");
  const auto label_col = column("label");
  if (!text_col || !label_col) parse_error(1, "header must contain text,label");
  const auto split_col = column("split");
  const auto source_col = column("source");

  Dataset data;
  data.label_names = names_from_map(label_map, data.num_classes);
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.fields.size() != header.size()) {
      parse_error(rec.line, "expected " + std::to_string(header.size()) + " fields, got " +
                                std::to_string(rec.fields.size()));
    }
    LabeledSentence s;
    s.text = rec.fields[*text_col];
    if (s.text.empty()) parse_error(rec.line, "empty text");
    s.label = lookup_label(label_map, rec.fields[*label_col], rec.line);
    if (split_col) s.split = parse_split(rec.fields[*split_col], rec.line);
    if (source_col && !rec.fields[*source_col].empty()) {
      s.source_id = parse_index(rec.fields[*source_col], rec.line);
    }
    data.sentences.push_back(std::move(s));
  }
  return data;
}

Dataset dataset_from_jsonl(const std::string& text, const LabelMap& label_map) {
  Dataset data;
  data.label_names = names_from_map(label_map, data.num_classes);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      parse_error(line_no, e.what());
    }
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("label") ||
        !obj["text"].is_string()) {
      parse_error(line_no, "record needs string \"text\" and \"label\"");
    }
    LabeledSentence s;
    s.text = obj["text"].get<std::string>();
    if (s.text.empty()) parse_error(line_no, "empty text");
    const auto& label = obj["label"];
    const std::string label_text = label.is_string() ? label.get<std::string>() : label.dump();
    s.label = lookup_label(label_map, label_text, line_no);
    if (obj.contains("split")) {
      if (!obj["split"].is_string()) parse_error(line_no, "split must be a string");
      s.split = parse_split(obj["split"].get<std::string>(), line_no);
    }
    if (obj.contains("source") && !obj["source"].is_null()) {
      if (!obj["source"].is_number_unsigned()) parse_error(line_no, "source must be an index");
      s.source_id = obj["source"].get<std::size_t>();
    }
    data.sentences.push_back(std::move(s));
  }
  return data;
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const LabelMap& label_map) {
  const std::string text = read_text_file(path);
  return format == DatasetFormat::Csv ? dataset_from_csv(text, label_map)
                                      : dataset_from_jsonl(text, label_map);
}

std::string dataset_to_csv(const Dataset& data) {
  data.validate();
  std::string out = "text,label,split,source\n";
  for (const auto& s : data.sentences) {
    out += csv_field(s.text);
    out += ',';
    out += csv_field(data.label_names[s.label]);
    out += ',';
    out += to_string(s.split);
    out += ',';
    if (s.source_id) out += std::to_string(*s.source_id);
    out += '\n';
  }
  return out;
}

std::string dataset_to_jsonl(const Dataset& data) {
  data.validate();
  std::string out;
  for (const auto& s : data.sentences) {
    json obj;
    obj["text"] = s.text;
    obj["label"] = data.label_names[s.label];
    obj["split"] = std::string(to_string(s.split));
    if (s.source_id) obj["source"] = *s.source_id;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path, DatasetFormat format) {
  write_text_file(path, format == DatasetFormat::Csv ? dataset_to_csv(data) : dataset_to_jsonl(data));
}

LabelMap label_map_of(const Dataset& data) {
  LabelMap m;
  for (std::size_t k = 0; k < data.label_names.size(); ++k) m.emplace(data.label_names[k], k);
  return m;
}

Dataset split_dataset(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "test_fraction must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    const std::size_t label = data.sentences[i].label;
    if (label >= data.num_classes) {
      throw Error(ErrorKind::InvalidArgument, "label out of range at index " + std::to_string(i));
    }
    by_class[label].push_back(i);
  }
  Dataset out = data;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    const auto n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(idx.size())));
    if (n_test == 0 || n_test >= idx.size()) {
      throw Error(ErrorKind::DegenerateSplit,
                  "class " + std::to_string(c) + " with " + std::to_string(idx.size()) +
                      " examples cannot be split at fraction " + std::to_string(test_fraction));
    }
    Rng rng(derive_seed(seed, c));
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.sentences[idx[j]].split = j < n_test ? Split::Test : Split::Train;
    }
  }
  return out;
}

Dataset synthetic_robot_dataset(std::size_t per_class, std::uint64_t seed) {
  const std::vector<std::string> openers{"", "hey ", "hi, ", "so ", "excuse me, ", "ok ",
                                         "wait, "};
  const std::vector<std::string> tails{"?", " right?", " honestly?", " or not?"};
  const std::vector<std::string> machines{"robot", "bot", "chatbot", "machine",
                                          "computer", "program", "recording", "ai"};
  const std::vector<std::string> humans{"person", "human", "real person", "human being"};
  const std::vector<std::string> things{"weather", "score", "time", "news", "menu", "price"};
  const std::vector<std::string> places{"restaurant", "pharmacy", "bank", "library", "gym",
                                        "cafe"};
  const std::vector<std::string> whens{"today", "tomorrow", "tonight", "now", "on sunday"};
  const std::vector<std::string> items{"order", "account", "phone", "bill", "ticket"};

  std::set<std::string> positive;
  std::set<std::string> negative;
  for (const auto& o : openers) {
    for (const auto& t : tails) {
      for (const auto& m : machines) {
        positive.insert(o + "are you a " + m + t);
        positive.insert(o + "am i talking to a " + m + t);
        positive.insert(o + "can you tell me if you are a " + m + t);
        for (const auto& h : humans) {
          positive.insert(o + "is this a " + m + " or a " + h + t);
          positive.insert(o + "are you a " + h + " or a " + m + t);
        }
      }
      for (const auto& h : humans) {
        positive.insert(o + "am i speaking with a " + h + t);
        positive.insert(o + "are you a " + h + t);
      }
      for (const auto& th : things) {
        negative.insert(o + "can you tell me the " + th + t);
        for (const auto& w : whens) negative.insert(o + "what is the " + th + " " + w + t);
      }
      for (const auto& p : places) {
        negative.insert(o + "do you know a good " + p + t);
        for (const auto& w : whens) negative.insert(o + "is the " + p + " open " + w + t);
      }
      for (const auto& it : items) {
        negative.insert(o + "how much does the " + it + " cost" + t);
        negative.insert(o + "i need help with my " + it + t);
      }
    }
  }

  auto draw = [&](const std::set<std::string>& pool, std::uint64_t stream) {
    std::vector<std::string> v(pool.begin(), pool.end());
    if (v.size() < per_class) {
      throw Error(ErrorKind::InvalidArgument,
                  "synthetic corpus has only " + std::to_string(v.size()) + " sentences per class");
    }
    Rng rng(derive_seed(seed, stream));
    rng.shuffle(v.begin(), v.end());
    v.resize(per_class);
    for (auto& s : v) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return v;
  };

  Dataset data;
  data.num_classes = 2;
  data.label_names = {"negative", "positive"};
  const auto pos = draw(positive, 1);
  const auto neg = draw(negative, 0);
  for (std::size_t i = 0; i < per_class; ++i) {
    data.sentences.push_back({pos[i], 1, std::nullopt, Split::Train});
    data.sentences.push_back({neg[i], 0, std::nullopt, Split::Train});
  }
  return data;
}

}  // namespace nlv
