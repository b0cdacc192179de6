#pragma once

// Brute-force reference implementations. They share no code with the library
// beyond mock_embed (the embedding source both sides agree on) and use plain
// strings and nested loops throughout.

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "descevo/mock_embed.hpp"

namespace oracle {

struct Image {
  std::string label;
  std::vector<float> v;
};

using Descriptors = std::map<std::string, std::vector<std::string>>;  // class -> descriptor texts

inline std::string prompt(const std::string& cls, const std::string& d, bool photo_prefix = false) {
  if (d == "{bare}") return "A photo of a " + cls;
  std::string p = photo_prefix ? "A photo of a " : "";
  return p + cls + ", which " + d;
}

inline double inner(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

/// Mean over descriptors of <image, text>, texts embedded with mock_embed.
inline std::map<std::string, double> scores(const Image& img, const Descriptors& ds, std::size_t dim) {
  std::map<std::string, double> out;
  for (const auto& [cls, list] : ds) {
    double total = 0.0;
    for (const auto& d : list) total += inner(img.v, descevo::mock_embed(prompt(cls, d), dim));
    out[cls] = total / double(list.size());
  }
  return out;
}

/// Highest score; among equal scores the alphabetically first class.
inline std::string predict(const std::map<std::string, double>& s) {
  std::string best;
  double best_score = 0.0;
  bool first = true;
  for (const auto& [cls, v] : s) {  // std::map iterates in name order
    if (first || v > best_score) {
      best = cls;
      best_score = v;
      first = false;
    }
  }
  return best;
}

struct Accuracy {
  double overall = 0.0;
  std::map<std::string, double> per_class;
};

inline Accuracy accuracy(const std::vector<Image>& images, const Descriptors& ds, std::size_t dim) {
  std::map<std::string, int> hit, seen;
  int correct = 0;
  for (const auto& img : images) {
    seen[img.label] += 1;
    if (predict(scores(img, ds, dim)) == img.label) {
      hit[img.label] += 1;
      correct += 1;
    }
  }
  Accuracy a;
  a.overall = double(correct) / double(images.size());
  for (const auto& [cls, n] : seen) a.per_class[cls] = double(hit[cls]) / double(n);
  return a;
}

using Row = std::vector<std::pair<std::string, std::size_t>>;

/// Full |C|x|C| matrix (gt column included), then per row: drop gt, drop zeros,
/// sort by count desc / name asc, keep m. Rows exist for classes that have images.
inline std::map<std::string, Row> confusion(const std::vector<Image>& images, const Descriptors& ds, std::size_t dim,
                                            double lambda, std::size_t m) {
  std::map<std::string, std::map<std::string, std::size_t>> full;
  for (const auto& img : images) {
    auto s = scores(img, ds, dim);
    auto& row = full[img.label];
    for (const auto& [cls, v] : s) {
      if (v > lambda * s[img.label]) row[cls] += 1;
      else row[cls] += 0;
    }
  }
  std::map<std::string, Row> out;
  for (auto& [gt, row] : full) {
    Row r;
    for (const auto& [cls, n] : row) {
      if (cls != gt && n > 0) r.emplace_back(cls, n);
    }
    std::sort(r.begin(), r.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (r.size() > m) r.resize(m);
    out[gt] = r;
  }
  return out;
}

}  // namespace oracle
