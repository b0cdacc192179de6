#pragma once

// Random instances for property tests.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "descevo/descevo.hpp"
#include "support/oracles.hpp"

namespace testgen {

inline const std::vector<std::string>& class_pool() {
  static const std::vector<std::string> names = {"cat", "dog", "hen", "owl", "fox", "elk", "yak", "emu"};
  return names;
}

inline const std::vector<std::string>& word_pool() {
  static const std::vector<std::string> words = {
      "has two legs",  "has feathers", "is furry",        "has a long tail", "has stripes", "is small",
      "has antlers",   "has a beak",   "is often brown",  "has hooves",      "has big eyes", "lives on farms",
      "has whiskers",  "can fly",      "has thick wool",  "is nocturnal"};
  return words;
}

/// Picks `k` distinct indices below `n`.
inline std::vector<std::size_t> sample_indices(descevo::SplitMix64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

inline std::vector<float> unit(const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

struct ScoringInstance {
  std::size_t dim = 0;
  oracle::Descriptors descriptors;
  std::vector<oracle::Image> images;

  descevo::DescriptorSet descriptor_set() const {
    descevo::DescriptorSet ds;
    for (const auto& [cls, list] : descriptors) {
      std::vector<descevo::Descriptor> d;
      for (const auto& t : list) d.emplace_back(t);
      ds.set(descevo::ClassLabel(cls), std::move(d));
    }
    return ds;
  }

  std::vector<descevo::LabeledEmbedding> labeled_images() const {
    std::vector<descevo::LabeledEmbedding> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
      out.push_back({descevo::ClassLabel(images[i].label), "img-" + std::to_string(i), images[i].v});
    }
    return out;
  }
};

/// |C| in [2, max_classes], 1..max_descriptors per class, 1..max_images images
/// that lean toward one of their class's descriptor embeddings.
inline ScoringInstance random_scoring_instance(std::uint64_t seed, std::size_t max_classes = 6,
                                               std::size_t max_images = 30, std::size_t max_descriptors = 5) {
  descevo::SplitMix64 rng(seed);
  ScoringInstance inst;
  const std::size_t dims[] = {4, 8, 16, 32};
  inst.dim = dims[rng.below(4)];
  const auto n_classes = 2 + static_cast<std::size_t>(rng.below(max_classes - 1));
  for (auto ci : sample_indices(rng, class_pool().size(), n_classes)) {
    const auto n_desc = 1 + static_cast<std::size_t>(rng.below(max_descriptors));
    std::vector<std::string> list;
    for (auto wi : sample_indices(rng, word_pool().size(), n_desc)) list.push_back(word_pool()[wi]);
    inst.descriptors[class_pool()[ci]] = list;
  }
  std::vector<std::string> names;
  for (const auto& [cls, _] : inst.descriptors) names.push_back(cls);

  const auto n_images = 1 + static_cast<std::size_t>(rng.below(max_images));
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto& label = names[rng.below(names.size())];
    const auto& list = inst.descriptors[label];
    const auto anchor = descevo::mock_embed(oracle::prompt(label, list[rng.below(list.size())]), inst.dim);
    const double pull = 2.0 * rng.uniform();
    std::vector<double> v(inst.dim);
    for (std::size_t d = 0; d < inst.dim; ++d) v[d] = pull * anchor[d] + rng.gaussian() * 0.5;
    inst.images.push_back({label, unit(v)});
  }
  return inst;
}

/// Mock-embedding table for every prompt of the instance.
inline descevo::EmbeddingTable table_for(const ScoringInstance& inst) {
  auto embedder = descevo::TextEmbedder::mock(inst.dim);
  embedder.ensure(descevo::prompts_for(inst.descriptor_set()));
  return embedder.table();
}

/// n random points of dimension dim, labeled c00, c01, ...
inline std::map<descevo::ClassLabel, descevo::Point> random_points(descevo::SplitMix64& rng, std::size_t n,
                                                                   std::size_t dim) {
  std::map<descevo::ClassLabel, descevo::Point> pts;
  for (std::size_t i = 0; i < n; ++i) {
    descevo::Point p(dim);
    for (auto& x : p) x = rng.gaussian();
    char name[16];
    std::snprintf(name, sizeof(name), "c%02zu", i);
    pts.emplace(descevo::ClassLabel(name), std::move(p));
  }
  return pts;
}

}  // namespace testgen
