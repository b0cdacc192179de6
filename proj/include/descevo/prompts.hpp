#pragma once

// Prompt construction for the three LLM stages: initialization, mutation and
// crossover. Each stage has a system and a user template; templates use
// {{placeholder}} markers and can be replaced by files in a directory (see
// PromptTemplates::load). The built-in defaults are identical to prompts/*.txt.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "descevo/error.hpp"
#include "descevo/scoring.hpp"
#include "descevo/types.hpp"

namespace descevo {

enum class Stage { initialization, mutation, crossover };

inline const char* stage_name(Stage s) noexcept {
  switch (s) {
    case Stage::initialization: return "initialization";
    case Stage::mutation: return "mutation";
    case Stage::crossover: return "crossover";
  }
  return "unknown";
}

/// Routing information for in-process providers. Never sent to a remote
/// endpoint and not part of the replay digest.
struct RequestTag {
  Stage stage = Stage::initialization;
  std::vector<ClassLabel> classes;
  std::size_t variant = 0;  // index of the sample among identical requests (mutation candidates)

  friend bool operator==(const RequestTag&, const RequestTag&) = default;
};

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 1.0;
  std::size_t max_tokens = 4096;
  RequestTag tag;

  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

struct PromptTemplates {
  std::string initialization_system;
  std::string initialization_user;
  std::string mutation_system;
  std::string mutation_user;
  std::string crossover_system;
  std::string crossover_user;

  static PromptTemplates defaults() {
    PromptTemplates t;
  t.initialization_system = R"PROMPT(You help a vision-language model such as CLIP recognize images. The model compares an image with short text prompts of the form "<class name>, which <descriptor>" and predicts the class whose prompts match best on average.

Your task is to write visual descriptors for a group of related classes. A descriptor is a short phrase naming something that can be seen in a photo of the class.

Design tips:
- Describe observable properties: shape, color, texture, parts, size, typical surroundings.
- Each descriptor must read naturally after "<class name>, which", for example "has two legs" or "is covered in red, brown, or white feathers".
- The classes in one request are easy to confuse with each other. Prefer features that separate a class from the others over features they all share.
- Avoid non-visual facts such as history, behavior, or taxonomy.
- Never repeat a descriptor within a class.

Output format: reply with one JSON object. Its keys are the class names exactly as given; each value is an array of descriptor strings. Do not write anything outside the JSON object.
)PROMPT";
  t.initialization_user = R"PROMPT(Classes ({{num_classes}}):
{{class_list}}

Write exactly {{n_descriptors}} descriptors for each class.
)PROMPT";
  t.mutation_system = R"PROMPT(You improve the visual descriptors a vision-language model such as CLIP uses to classify images. The model compares an image with prompts of the form "<class name>, which <descriptor>" and predicts the class whose descriptors match best on average.

You receive:
- the current descriptors of a group of easily confused classes,
- visual feedback measured by classifying real images with those descriptors: the overall accuracy, the accuracy of each class, and for each class the classes it is most often confused with (with counts),
- a memory bank of descriptors from earlier rounds, marked (+) when they helped accuracy and (-) when they hurt it.

Use the feedback to find which descriptors do not help and replace them with descriptors that emphasize the distinct visual features of each class, especially features that separate it from the classes it is confused with. Reuse ideas marked (+) and avoid ideas marked (-).

Output format: reply with one JSON object. Its keys are the class names exactly as given; each value is the complete new array of descriptor strings for that class. Do not write anything outside the JSON object.
)PROMPT";
  t.mutation_user = R"PROMPT(Current descriptors:
{{descriptors}}

Visual feedback:
{{feedback}}

Memory bank:
{{memory}}

For each class, pick the {{n_change}} most useless descriptors and replace them with {{n_change}} new descriptors that emphasize distinct visual features. Keep the other descriptors as they are, and return the full list for every class with the same number of descriptors as before.
)PROMPT";
  t.crossover_system = R"PROMPT(You combine candidate sets of visual descriptors used by a vision-language model such as CLIP to classify images. The model compares an image with prompts of the form "<class name>, which <descriptor>" and predicts the class whose descriptors match best on average.

You receive several candidate descriptor sets for the same group of classes, each with visual feedback measured on real images: overall accuracy, per-class accuracy, and the classes each class is most often confused with.

Mix and match: for each class, pick the most useful descriptors from the different candidates, favoring candidates that scored well on that class, and assemble one new descriptor list per class.

Output format: reply with one JSON object. Its keys are the class names exactly as given; each value is an array of descriptor strings. Do not write anything outside the JSON object.
)PROMPT";
  t.crossover_user = R"PROMPT({{candidates}}
Combine the {{num_candidates}} candidates into one new descriptor set. For each class, use the same number of descriptors as the candidates have for that class.
)PROMPT";
    return t;
  }

  /// Defaults overridden by any of <stage>_<role>.txt found in `dir`.
  static PromptTemplates load(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError("prompt directory not found: " + dir.string());
    PromptTemplates t = defaults();
    const std::pair<const char*, std::string*> files[] = {
        {"initialization_system.txt", &t.initialization_system},
        {"initialization_user.txt", &t.initialization_user},
        {"mutation_system.txt", &t.mutation_system},
        {"mutation_user.txt", &t.mutation_user},
        {"crossover_system.txt", &t.crossover_system},
        {"crossover_user.txt", &t.crossover_user},
    };
    for (const auto& [name, field] : files) {
      if (std::filesystem::exists(dir / name)) *field = read_text_file(dir / name);
    }
    return t;
  }

  friend bool operator==(const PromptTemplates&, const PromptTemplates&) = default;
};

/// Replaces every {{key}} in one left-to-right pass; substituted text is not rescanned.
inline std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) break;
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    const std::string key(tmpl.substr(open + 2, close - open - 2));
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("unknown prompt placeholder {{" + key + "}}");
    out.append(tmpl.substr(pos, open - pos));
    out += it->second;
    pos = close + 2;
  }
  out.append(tmpl.substr(pos));
  return out;
}

inline constexpr std::size_t kMemoryLinesPerPolarity = 50;

/// "class: descriptor (+)" lines, positives first, each polarity limited to its
/// latest `limit` records among `classes` (all classes when empty). "none" when nothing is left.
inline std::string render_memory(std::span<const MemoryRecord> memory, std::span<const ClassLabel> classes = {},
                                 std::size_t limit = kMemoryLinesPerPolarity) {
  auto wanted = [&](const MemoryRecord& r) {
    return classes.empty() || std::find(classes.begin(), classes.end(), r.cls) != classes.end();
  };
  std::string out;
  for (Polarity p : {Polarity::positive, Polarity::negative}) {
    std::vector<const MemoryRecord*> picked;
    for (auto it = memory.rbegin(); it != memory.rend() && picked.size() < limit; ++it) {
      if (it->polarity == p && wanted(*it)) picked.push_back(&*it);
    }
    for (auto it = picked.rbegin(); it != picked.rend(); ++it) {
      out += (*it)->cls.str() + ": " + (*it)->descriptor.str() + (p == Polarity::positive ? " (+)\n" : " (-)\n");
    }
  }
  return out.empty() ? std::string("none") : out;
}

inline std::string descriptors_block(const DescriptorSet& ds) { return json(ds).dump(2); }

inline ChatRequest build_init_prompt(std::span<const ClassLabel> classes, std::size_t n_init,
                                     const PromptTemplates& templates, double temperature = 1.0,
                                     std::size_t max_tokens = 4096) {
  if (classes.empty()) throw PreconditionError("initialization prompt needs at least one class");
  std::string list;
  for (const auto& cls : classes) list += "- " + cls.str() + "\n";
  if (!list.empty()) list.pop_back();
  const std::map<std::string, std::string> values = {
      {"num_classes", std::to_string(classes.size())},
      {"class_list", list},
      {"n_descriptors", std::to_string(n_init)},
  };
  ChatRequest req;
  req.system = fill_template(templates.initialization_system, values);
  req.user = fill_template(templates.initialization_user, values);
  req.temperature = temperature;
  req.max_tokens = max_tokens;
  req.tag = {Stage::initialization, {classes.begin(), classes.end()}, 0};
  return req;
}

inline ChatRequest build_mutation_prompt(const DescriptorSet& cluster_descriptors, std::string_view feedback_text,
                                         std::string_view memory_text, std::size_t n_change,
                                         const PromptTemplates& templates, double temperature = 1.0,
                                         std::size_t max_tokens = 4096, std::size_t variant = 0) {
  const std::map<std::string, std::string> values = {
      {"descriptors", descriptors_block(cluster_descriptors)},
      {"feedback", std::string(strings::trim(feedback_text))},
      {"memory", std::string(strings::trim(memory_text))},
      {"n_change", std::to_string(n_change)},
  };
  ChatRequest req;
  req.system = fill_template(templates.mutation_system, values);
  req.user = fill_template(templates.mutation_user, values);
  req.temperature = temperature;
  req.max_tokens = max_tokens;
  req.tag = {Stage::mutation, cluster_descriptors.classes(), variant};
  return req;
}

struct ScoredCandidate {
  DescriptorSet descriptors;
  VisualFeedback feedback;
};

inline ChatRequest build_crossover_prompt(std::span<const ScoredCandidate> candidates, std::size_t k,
                                          const PromptTemplates& templates, double temperature = 1.0,
                                          std::size_t max_tokens = 4096) {
  if (candidates.size() != k) {
    throw PreconditionError("crossover expects " + std::to_string(k) + " candidates, got " +
                            std::to_string(candidates.size()));
  }
  std::string blocks;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (i > 0) blocks += "\n";
    blocks += "Candidate " + std::to_string(i + 1) + ":\n";
    blocks += "Visual feedback:\n" + feedback_to_text(candidates[i].feedback);
    blocks += "Descriptors:\n" + descriptors_block(candidates[i].descriptors) + "\n";
  }
  const std::map<std::string, std::string> values = {
      {"candidates", blocks},
      {"num_candidates", std::to_string(k)},
  };
  ChatRequest req;
  req.system = fill_template(templates.crossover_system, values);
  req.user = fill_template(templates.crossover_user, values);
  req.temperature = temperature;
  req.max_tokens = max_tokens;
  req.tag = {Stage::crossover, candidates.empty() ? std::vector<ClassLabel>{} : candidates.front().descriptors.classes(), 0};
  return req;
}

}  // namespace descevo
