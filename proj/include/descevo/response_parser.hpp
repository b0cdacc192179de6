#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "descevo/error.hpp"
#include "descevo/strings.hpp"
#include "descevo/types.hpp"

namespace descevo {

struct ParsedDescriptors {
  DescriptorSet descriptors;
  std::vector<std::string> warnings;
};

namespace detail {

// End (one past the closing brace) of the balanced object starting at `open`, ignoring braces in strings.
inline std::optional<std::size_t> balanced_object_end(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i + 1;
  }
  return std::nullopt;
}

}  // namespace detail

/// First top-level JSON object embedded in `raw`, skipping prose and code fences around it.
inline std::optional<json> extract_json_object(std::string_view raw) {
  for (std::size_t open = raw.find('{'); open != std::string_view::npos; open = raw.find('{', open + 1)) {
    const auto end = detail::balanced_object_end(raw, open);
    if (!end) continue;
    json j = json::parse(raw.substr(open, *end - open), nullptr, /*allow_exceptions=*/false);
    if (!j.is_discarded() && j.is_object()) return j;
  }
  return std::nullopt;
}

/// Turns an LLM reply into descriptors for `expected_classes`.
///
/// Descriptors are whitespace-normalized and deduplicated (first occurrence wins).
/// With `expected_count`, longer lists are truncated and shorter ones are kept
/// with a warning. Keys for other classes are ignored with a warning.
inline ParsedDescriptors parse_descriptor_response(std::string_view raw, std::span<const ClassLabel> expected_classes,
                                                   std::optional<std::size_t> expected_count = std::nullopt) {
  auto object = extract_json_object(raw);
  if (!object) throw ResponseError("no JSON object found in response");

  ParsedDescriptors out;
  std::set<std::string> used_keys;
  for (const auto& cls : expected_classes) {
    const json* value = nullptr;
    if (auto it = object->find(cls.str()); it != object->end()) {
      value = &*it;
      used_keys.insert(cls.str());
    } else {
      for (auto it2 = object->begin(); it2 != object->end(); ++it2) {
        if (strings::trim(it2.key()) == cls.str()) {
          value = &*it2;
          used_keys.insert(it2.key());
          break;
        }
      }
    }
    if (!value) throw ResponseError("missing " + cls.str());
    if (!value->is_array()) throw ResponseError("descriptors for " + cls.str() + " are not an array");

    std::vector<Descriptor> list;
    std::set<std::string> seen;
    for (const auto& item : *value) {
      if (!item.is_string()) {
        out.warnings.push_back("non-string descriptor skipped in " + cls.str());
        continue;
      }
      auto text = strings::collapse_whitespace(item.get<std::string>());
      if (text.empty()) {
        out.warnings.push_back("empty descriptor skipped in " + cls.str());
        continue;
      }
      if (!seen.insert(text).second) {
        out.warnings.push_back("duplicate descriptor dropped in " + cls.str() + ": " + text);
        continue;
      }
      list.emplace_back(std::move(text));
    }
    if (list.empty()) throw ResponseError("no usable descriptors for " + cls.str());
    if (expected_count) {
      if (list.size() > *expected_count) {
        out.warnings.push_back(cls.str() + ": truncated " + std::to_string(list.size()) + " descriptors to " +
                               std::to_string(*expected_count));
        list.erase(list.begin() + static_cast<std::ptrdiff_t>(*expected_count), list.end());
      } else if (list.size() < *expected_count) {
        out.warnings.push_back(cls.str() + ": expected " + std::to_string(*expected_count) + " descriptors, got " +
                               std::to_string(list.size()));
      }
    }
    out.descriptors.set(cls, std::move(list));
  }
  for (const auto& [key, _] : object->items()) {
    if (used_keys.count(key) == 0) out.warnings.push_back("ignored unexpected class \"" + key + "\"");
  }
  return out;
}

}  // namespace descevo
