#pragma once

// Domain values shared by every module: class labels, descriptors, descriptor
// sets, classification feedback, memory records and the run configuration.
// All of them are plain values; nothing here holds a reference to anything else.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "descevo/error.hpp"
#include "descevo/strings.hpp"

namespace descevo {

using json = nlohmann::json;

/// Name of a class. Compared byte-wise, case-sensitive.
class ClassLabel {
 public:
  explicit ClassLabel(std::string name) : name_(std::move(name)) {
    if (strings::trim(name_).empty()) throw DataError("class label is empty");
  }

  const std::string& str() const noexcept { return name_; }

  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
  friend std::strong_ordering operator<=>(const ClassLabel& a, const ClassLabel& b) noexcept {
    const int c = a.name_.compare(b.name_);
    return c < 0 ? std::strong_ordering::less
                 : (c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal);
  }

 private:
  std::string name_;
};

/// One line of visual description for a class, e.g. "has two legs".
class Descriptor {
 public:
  explicit Descriptor(std::string text) : text_(std::move(text)) {
    if (strings::trim(text_).empty()) throw DataError("descriptor is empty");
    if (text_.find_first_of("\r\n") != std::string::npos) {
      throw DataError("descriptor contains a line break: " + text_);
    }
  }

  const std::string& str() const noexcept { return text_; }

  friend bool operator==(const Descriptor&, const Descriptor&) = default;
  friend std::strong_ordering operator<=>(const Descriptor& a, const Descriptor& b) noexcept {
    const int c = a.text_.compare(b.text_);
    return c < 0 ? std::strong_ordering::less
                 : (c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal);
  }

 private:
  std::string text_;
};

inline std::vector<ClassLabel> make_labels(std::initializer_list<std::string_view> names) {
  std::vector<ClassLabel> out;
  for (auto n : names) out.emplace_back(std::string(n));
  return out;
}

inline std::vector<Descriptor> make_descriptors(std::initializer_list<std::string_view> texts) {
  std::vector<Descriptor> out;
  for (auto t : texts) out.emplace_back(std::string(t));
  return out;
}

/// Map from class to its ordered descriptor list. Order within a list is significant.
/// The container does not enforce the set invariants; see validate_descriptor_set.
class DescriptorSet {
 public:
  using Entries = std::map<ClassLabel, std::vector<Descriptor>>;

  DescriptorSet() = default;
  explicit DescriptorSet(Entries entries) : entries_(std::move(entries)) {}

  void set(const ClassLabel& cls, std::vector<Descriptor> descriptors) {
    entries_.insert_or_assign(cls, std::move(descriptors));
  }

  bool contains(const ClassLabel& cls) const { return entries_.count(cls) != 0; }

  const std::vector<Descriptor>& at(const ClassLabel& cls) const {
    auto it = entries_.find(cls);
    if (it == entries_.end()) throw DataError("no descriptors for class " + cls.str());
    return it->second;
  }

  std::vector<ClassLabel> classes() const {
    std::vector<ClassLabel> out;
    out.reserve(entries_.size());
    for (const auto& [cls, _] : entries_) out.push_back(cls);
    return out;
  }

  /// Subset containing only `keep` (classes absent from this set are skipped).
  DescriptorSet restricted_to(std::span<const ClassLabel> keep) const {
    DescriptorSet out;
    for (const auto& cls : keep) {
      auto it = entries_.find(cls);
      if (it != entries_.end()) out.entries_.insert(*it);
    }
    return out;
  }

  /// Overwrites every class of `part` in this set.
  void splice(const DescriptorSet& part) {
    for (const auto& [cls, ds] : part.entries_) entries_.insert_or_assign(cls, ds);
  }

  const Entries& entries() const noexcept { return entries_; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  std::size_t descriptor_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, ds] : entries_) n += ds.size();
    return n;
  }

  friend bool operator==(const DescriptorSet&, const DescriptorSet&) = default;

 private:
  Entries entries_;
};

struct Violation {
  enum class Kind { missing_class, empty_list, duplicate };

  Kind kind;
  ClassLabel cls;
  std::string detail;  // the duplicated text, when kind == duplicate

  std::string message() const {
    switch (kind) {
      case Kind::missing_class: return "missing " + cls.str();
      case Kind::empty_list: return "empty list for " + cls.str();
      case Kind::duplicate: return "duplicate in " + cls.str() + ": \"" + detail + "\"";
    }
    return {};
  }

  friend bool operator==(const Violation&, const Violation&) = default;
};

struct ValidationResult {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
};

/// Checks that every class in `classes` has a non-empty list without duplicate texts.
/// Violations come out ordered by class name, whatever the order of `classes`.
inline ValidationResult validate_descriptor_set(const DescriptorSet& ds,
                                                std::span<const ClassLabel> classes) {
  std::set<ClassLabel> wanted(classes.begin(), classes.end());
  ValidationResult result;
  for (const auto& cls : wanted) {
    if (!ds.contains(cls)) {
      result.violations.push_back({Violation::Kind::missing_class, cls, {}});
      continue;
    }
    const auto& list = ds.at(cls);
    if (list.empty()) {
      result.violations.push_back({Violation::Kind::empty_list, cls, {}});
      continue;
    }
    std::set<std::string_view> seen;
    std::set<std::string_view> reported;
    for (const auto& d : list) {
      if (!seen.insert(d.str()).second && reported.insert(d.str()).second) {
        result.violations.push_back({Violation::Kind::duplicate, cls, d.str()});
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Classification feedback

struct ConfusionEntry {
  ClassLabel cls;
  std::size_t count;

  friend bool operator==(const ConfusionEntry&, const ConfusionEntry&) = default;
};

using ConfusionRows = std::map<ClassLabel, std::vector<ConfusionEntry>>;

/// Accuracy plus the top-m rows of the thresholded confusion matrix.
struct VisualFeedback {
  double overall_accuracy = 0.0;
  std::map<ClassLabel, double> per_class_accuracy;
  ConfusionRows confusion_rows;

  friend bool operator==(const VisualFeedback&, const VisualFeedback&) = default;
};

// ---------------------------------------------------------------------------
// Memory bank

enum class Polarity { positive, negative };

struct MemoryRecord {
  ClassLabel cls;
  Descriptor descriptor;
  std::size_t iteration;
  Polarity polarity;

  friend bool operator==(const MemoryRecord&, const MemoryRecord&) = default;
};

// ---------------------------------------------------------------------------
// Run configuration

enum class SelectionScope { cluster, global };

/// How descriptor prompts are rendered before text embedding.
struct PromptStyle {
  bool photo_prefix = false;  // "A photo of a hen, which ..." instead of "hen, which ..."

  friend bool operator==(const PromptStyle&, const PromptStyle&) = default;
};

struct RunConfig {
  std::size_t n_iterations = 10;
  std::size_t n_init = 30;
  std::size_t n_change = 15;
  std::size_t n_mutants = 4;
  double lambda = 0.9;
  std::size_t top_m = 3;
  std::size_t cluster_target_size = 10;
  double temperature = 1.0;
  std::uint64_t rng_seed = 0;
  std::size_t max_tokens = 4096;
  std::size_t threads = 1;
  SelectionScope selection_scope = SelectionScope::cluster;
  PromptStyle style;

  void validate() const {
    if (n_init == 0) throw ConfigError("n_init must be positive");
    if (n_change == 0) throw ConfigError("n_change must be positive");
    if (n_change > n_init) throw ConfigError("n_change must not exceed n_init");
    if (n_mutants == 0) throw ConfigError("n_mutants must be positive");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1]");
    if (top_m == 0) throw ConfigError("top_m must be positive");
    if (cluster_target_size == 0) throw ConfigError("cluster_target_size must be positive");
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
    if (max_tokens == 0) throw ConfigError("max_tokens must be positive");
    if (threads == 0) throw ConfigError("threads must be positive");
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(json& j, const DescriptorSet& ds) {
  j = json::object();
  for (const auto& [cls, list] : ds) {
    json arr = json::array();
    for (const auto& d : list) arr.push_back(d.str());
    j[cls.str()] = std::move(arr);
  }
}

inline void from_json(const json& j, DescriptorSet& ds) {
  if (!j.is_object()) throw DataError("descriptor set must be a JSON object");
  DescriptorSet out;
  for (const auto& [name, arr] : j.items()) {
    if (!arr.is_array()) throw DataError("descriptors of " + name + " must be an array");
    std::vector<Descriptor> list;
    for (const auto& v : arr) {
      if (!v.is_string()) throw DataError("descriptors of " + name + " must be strings");
      list.emplace_back(v.get<std::string>());
    }
    out.set(ClassLabel(name), std::move(list));
  }
  ds = std::move(out);
}

inline std::string serialize_descriptor_set(const DescriptorSet& ds) {
  return json(ds).dump(2) + "\n";
}

inline DescriptorSet parse_descriptor_set(std::string_view text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw DataError("descriptor file is not valid JSON");
  return j.get<DescriptorSet>();
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline DescriptorSet load_descriptor_set(const std::filesystem::path& path) {
  try {
    return parse_descriptor_set(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void save_descriptor_set(const DescriptorSet& ds, const std::filesystem::path& path) {
  write_text_file(path, serialize_descriptor_set(ds));
}

/// One class name per line; blank lines are skipped. Duplicates are an error.
inline std::vector<ClassLabel> parse_class_list(std::string_view text) {
  std::vector<ClassLabel> out;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    auto name = std::string(strings::trim(line));
    if (name.empty()) continue;
    if (!seen.insert(name).second) throw DataError("duplicate class " + name);
    out.emplace_back(std::move(name));
  }
  return out;
}

inline void to_json(json& j, const VisualFeedback& fb) {
  json per_class = json::object();
  for (const auto& [cls, acc] : fb.per_class_accuracy) per_class[cls.str()] = acc;
  json rows = json::object();
  for (const auto& [cls, row] : fb.confusion_rows) {
    json arr = json::array();
    for (const auto& e : row) arr.push_back({{"class", e.cls.str()}, {"count", e.count}});
    rows[cls.str()] = std::move(arr);
  }
  j = {{"overall_accuracy", fb.overall_accuracy},
       {"per_class_accuracy", std::move(per_class)},
       {"confusion", std::move(rows)}};
}

inline void from_json(const json& j, VisualFeedback& fb) {
  VisualFeedback out;
  out.overall_accuracy = j.at("overall_accuracy").get<double>();
  for (const auto& [name, acc] : j.at("per_class_accuracy").items()) {
    out.per_class_accuracy.emplace(ClassLabel(name), acc.get<double>());
  }
  for (const auto& [name, arr] : j.at("confusion").items()) {
    std::vector<ConfusionEntry> row;
    for (const auto& e : arr) {
      row.push_back({ClassLabel(e.at("class").get<std::string>()), e.at("count").get<std::size_t>()});
    }
    out.confusion_rows.emplace(ClassLabel(name), std::move(row));
  }
  fb = std::move(out);
}

inline void to_json(json& j, const MemoryRecord& r) {
  j = {{"class", r.cls.str()},
       {"descriptor", r.descriptor.str()},
       {"iteration", r.iteration},
       {"polarity", r.polarity == Polarity::positive ? "positive" : "negative"}};
}

inline MemoryRecord memory_record_from_json(const json& j) {
  const auto polarity = j.at("polarity").get<std::string>();
  if (polarity != "positive" && polarity != "negative") {
    throw DataError("memory record polarity must be positive or negative");
  }
  return MemoryRecord{ClassLabel(j.at("class").get<std::string>()),
                      Descriptor(j.at("descriptor").get<std::string>()),
                      j.at("iteration").get<std::size_t>(),
                      polarity == "positive" ? Polarity::positive : Polarity::negative};
}

inline void to_json(json& j, const RunConfig& c) {
  j = {{"n_iterations", c.n_iterations},
       {"n_init", c.n_init},
       {"n_change", c.n_change},
       {"n_mutants", c.n_mutants},
       {"lambda", c.lambda},
       {"top_m", c.top_m},
       {"cluster_target_size", c.cluster_target_size},
       {"temperature", c.temperature},
       {"rng_seed", c.rng_seed},
       {"max_tokens", c.max_tokens},
       {"threads", c.threads},
       {"selection_scope", c.selection_scope == SelectionScope::cluster ? "cluster" : "global"},
       {"photo_prefix", c.style.photo_prefix}};
}

/// Keys understood by apply_run_config.
inline const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "n_iterations", "n_init",     "n_change",    "n_mutants",   "lambda",
      "top_m",        "cluster_target_size",       "temperature", "rng_seed",
      "max_tokens",   "threads",    "selection_scope",            "photo_prefix"};
  return keys;
}

/// Overlays the RunConfig keys present in `j` onto `c`. Other keys are ignored.
inline bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline void apply_run_config(const json& j, RunConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
  };
  auto get_count = [&](const char* key, std::size_t& field) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!is_non_negative_integer(v)) throw ConfigError(std::string(key) + " must be a non-negative integer");
    field = v.get<std::size_t>();
  };
  get_count("n_iterations", c.n_iterations);
  get_count("n_init", c.n_init);
  get_count("n_change", c.n_change);
  get_count("n_mutants", c.n_mutants);
  get("lambda", c.lambda);
  get_count("top_m", c.top_m);
  get_count("cluster_target_size", c.cluster_target_size);
  get("temperature", c.temperature);
  if (j.contains("rng_seed")) {
    const auto& v = j.at("rng_seed");
    if (!is_non_negative_integer(v)) throw ConfigError("rng_seed must be a non-negative integer");
    c.rng_seed = v.get<std::uint64_t>();
  }
  get_count("max_tokens", c.max_tokens);
  get_count("threads", c.threads);
  if (j.contains("selection_scope")) {
    std::string scope;
    get("selection_scope", scope);
    if (scope == "cluster") c.selection_scope = SelectionScope::cluster;
    else if (scope == "global") c.selection_scope = SelectionScope::global;
    else throw ConfigError("selection_scope must be \"cluster\" or \"global\"");
  }
  get("photo_prefix", c.style.photo_prefix);
}

inline void from_json(const json& j, RunConfig& c) {
  RunConfig out;
  apply_run_config(j, out);
  c = out;
}

}  // namespace descevo
