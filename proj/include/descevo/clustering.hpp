#pragma once

// Grouping of classes into clusters of similar classes with Lloyd's k-means.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "descevo/error.hpp"
#include "descevo/rng.hpp"
#include "descevo/scoring.hpp"
#include "descevo/types.hpp"

namespace descevo {

using Point = std::vector<double>;

/// Clusters of class labels. Members are in name order and clusters are ordered
/// by their first member, so equal partitions compare equal.
struct ClusterAssignment {
  std::vector<std::vector<ClassLabel>> clusters;

  std::size_t k() const noexcept { return clusters.size(); }

  friend bool operator==(const ClusterAssignment&, const ClusterAssignment&) = default;
};

inline void to_json(json& j, const ClusterAssignment& a) {
  j = json::array();
  for (const auto& cluster : a.clusters) {
    json members = json::array();
    for (const auto& cls : cluster) members.push_back(cls.str());
    j.push_back(std::move(members));
  }
}

inline void from_json(const json& j, ClusterAssignment& a) {
  ClusterAssignment out;
  for (const auto& members : j) {
    std::vector<ClassLabel> cluster;
    for (const auto& m : members) cluster.emplace_back(m.get<std::string>());
    out.clusters.push_back(std::move(cluster));
  }
  a = std::move(out);
}

/// max(1, round-half-up(n_classes / target)).
inline std::size_t default_k(std::size_t n_classes, std::size_t target) {
  if (n_classes == 0) throw PreconditionError("default_k needs at least one class");
  if (target == 0) throw PreconditionError("cluster target size must be positive");
  return std::max<std::size_t>(1, (2 * n_classes + target) / (2 * target));
}

/// Bare-template representative per class: the embedding of "A photo of a <name>".
inline std::map<ClassLabel, Point> class_representatives(std::span<const ClassLabel> classes,
                                                         const EmbeddingTable& table) {
  std::map<ClassLabel, Point> out;
  for (const auto& cls : classes) {
    const auto prompt = bare_prompt(cls);
    auto it = table.find(prompt);
    if (it == table.end()) throw DataError("missing text embedding for prompt \"" + prompt + "\"");
    out.emplace(cls, Point(it->second.begin(), it->second.end()));
  }
  return out;
}

/// Descriptor representative per class: the normalized mean of its prompt embeddings.
/// A mean of exactly zero is kept as the zero vector.
inline std::map<ClassLabel, Point> class_representatives(const DescriptorSet& ds, const EmbeddingTable& table,
                                                         PromptStyle style = {}) {
  std::map<ClassLabel, Point> out;
  for (const auto& [cls, list] : ds) {
    if (list.empty()) throw DataError("class " + cls.str() + " has no descriptors");
    Point mean;
    for (const auto& d : list) {
      const auto prompt = render_prompt(cls, d, style);
      auto it = table.find(prompt);
      if (it == table.end()) throw DataError("missing text embedding for prompt \"" + prompt + "\"");
      if (mean.empty()) mean.assign(it->second.size(), 0.0);
      if (it->second.size() != mean.size()) throw DataError("mixed embedding dimensions in class " + cls.str());
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += it->second[i];
    }
    double norm = 0.0;
    for (double x : mean) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& x : mean) x /= norm;
    }
    out.emplace(cls, std::move(mean));
  }
  return out;
}

struct KMeansResult {
  ClusterAssignment assignment;
  std::vector<std::size_t> labels;       // cluster index per input point, in input (name) order
  std::vector<double> objective_trace;   // sum of squared distances after each Lloyd round
  std::size_t rounds = 0;
};

namespace detail {

inline double squared_distance(const Point& a, const Point& b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline std::vector<Point> kmeans_plus_plus(const std::vector<Point>& pts, std::size_t k, SplitMix64& rng) {
  std::vector<Point> centers;
  std::vector<bool> chosen(pts.size(), false);
  const auto first = static_cast<std::size_t>(rng.below(pts.size()));
  centers.push_back(pts[first]);
  chosen[first] = true;

  std::vector<double> d2(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = squared_distance(pts[i], centers[0]);

  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t pick = pts.size();
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (chosen[i] || d2[i] == 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      // Every remaining point coincides with a center.
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!chosen[i]) {
          pick = i;
          break;
        }
      }
    }
    chosen[pick] = true;
    centers.push_back(pts[pick]);
    for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = std::min(d2[i], squared_distance(pts[i], centers.back()));
  }
  return centers;
}

}  // namespace detail

/// Lloyd's algorithm with Euclidean distance and k-means++ seeding.
///
/// Stops when assignments are stable or after 100 rounds. An empty cluster takes
/// the point of the largest cluster that lies farthest from that cluster's
/// centroid. Distance ties go to the lowest centroid index. Deterministic in
/// (points, k, seed).
inline KMeansResult kmeans_detailed(const std::map<ClassLabel, Point>& points, std::size_t k,
                                    std::uint64_t seed) {
  if (k == 0) throw PreconditionError("k must be at least 1");
  if (k > points.size()) {
    throw PreconditionError("k = " + std::to_string(k) + " exceeds the number of points (" +
                            std::to_string(points.size()) + ")");
  }
  std::vector<ClassLabel> names;
  std::vector<Point> pts;
  for (const auto& [cls, p] : points) {
    if (!pts.empty() && p.size() != pts.front().size()) throw DataError("points have mixed dimensions");
    names.push_back(cls);
    pts.push_back(p);
  }
  const std::size_t n = pts.size();
  const std::size_t dim = pts.front().size();

  SplitMix64 rng(seed);
  std::vector<Point> centers = detail::kmeans_plus_plus(pts, k, rng);

  KMeansResult result;
  std::vector<std::size_t> labels(n, k);  // k = unassigned
  constexpr std::size_t kMaxRounds = 100;
  for (std::size_t round = 0; round < kMaxRounds; ++round) {
    std::vector<std::size_t> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = detail::squared_distance(pts[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = detail::squared_distance(pts[i], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      next[i] = best;
    }

    // Repair empty clusters.
    for (std::size_t empty = 0; empty < k; ++empty) {
      if (std::find(next.begin(), next.end(), empty) != next.end()) continue;
      std::vector<std::size_t> sizes(k, 0);
      for (auto l : next) ++sizes[l];
      const auto largest = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (next[i] != largest) continue;
        const double d = detail::squared_distance(pts[i], centers[largest]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next[far] = empty;
      centers[empty] = pts[far];
    }

    const bool stable = next == labels;
    labels = std::move(next);

    for (std::size_t c = 0; c < k; ++c) {
      Point mean(dim, 0.0);
      std::size_t members = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        for (std::size_t d = 0; d < dim; ++d) mean[d] += pts[i][d];
        ++members;
      }
      for (double& x : mean) x /= static_cast<double>(members);
      centers[c] = std::move(mean);
    }

    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) objective += detail::squared_distance(pts[i], centers[labels[i]]);
    result.objective_trace.push_back(objective);
    result.rounds = round + 1;
    if (stable) break;
  }

  std::vector<std::vector<ClassLabel>> clusters(k);
  for (std::size_t i = 0; i < n; ++i) clusters[labels[i]].push_back(names[i]);
  std::sort(clusters.begin(), clusters.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  result.assignment.clusters = std::move(clusters);
  result.labels = std::move(labels);
  return result;
}

inline ClusterAssignment kmeans(const std::map<ClassLabel, Point>& points, std::size_t k, std::uint64_t seed) {
  return kmeans_detailed(points, k, seed).assignment;
}

}  // namespace descevo
