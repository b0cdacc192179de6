#pragma once

// Descriptor-ensemble classification and the feedback computed from it.
//
// A class scores an image by the mean cosine between the image and each of the
// class's descriptor prompts. All vectors are unit length, so cosine is a dot
// product. Sums run in double precision in a fixed order (descriptor list
// order, then component order), which makes every result independent of how
// callers schedule the work.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "descevo/archive.hpp"
#include "descevo/error.hpp"
#include "descevo/strings.hpp"
#include "descevo/text_embedder.hpp"
#include "descevo/types.hpp"

namespace descevo {

/// Descriptor text that stands for the plain class-name template.
inline constexpr std::string_view kBareDescriptor = "{bare}";

inline std::string bare_prompt(const ClassLabel& cls) { return "A photo of a " + cls.str(); }

inline std::string render_prompt(const ClassLabel& cls, const Descriptor& d, PromptStyle style = {}) {
  if (d.str() == kBareDescriptor) return bare_prompt(cls);
  if (style.photo_prefix) return "A photo of a " + cls.str() + ", which " + d.str();
  return cls.str() + ", which " + d.str();
}

/// One placeholder descriptor per class: classification by "A photo of a <name>".
inline DescriptorSet bare_descriptor_set(std::span<const ClassLabel> classes) {
  DescriptorSet ds;
  for (const auto& cls : classes) ds.set(cls, {Descriptor(std::string(kBareDescriptor))});
  return ds;
}

/// Every prompt needed to score with `ds`.
inline std::vector<PromptRequest> prompts_for(const DescriptorSet& ds, PromptStyle style = {}) {
  std::vector<PromptRequest> out;
  out.reserve(ds.descriptor_count());
  for (const auto& [cls, list] : ds) {
    for (const auto& d : list) out.push_back({cls, render_prompt(cls, d, style)});
  }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// A descriptor set with its prompt embeddings resolved once.
class EnsembleClassifier {
 public:
  EnsembleClassifier(const DescriptorSet& ds, const EmbeddingTable& table, PromptStyle style = {}) {
    classes_.reserve(ds.size());
    prompts_.reserve(ds.size());
    for (const auto& [cls, list] : ds) {
      if (list.empty()) throw DataError("class " + cls.str() + " has no descriptors");
      std::vector<const Embedding*> resolved;
      resolved.reserve(list.size());
      for (const auto& d : list) {
        const auto prompt = render_prompt(cls, d, style);
        auto it = table.find(prompt);
        if (it == table.end()) throw DataError("missing text embedding for prompt \"" + prompt + "\"");
        if (dimension_ == 0) dimension_ = it->second.size();
        if (it->second.size() != dimension_) {
          throw DataError("text embedding for \"" + prompt + "\" has dimension " +
                          std::to_string(it->second.size()) + ", expected " + std::to_string(dimension_));
        }
        resolved.push_back(&it->second);
      }
      classes_.push_back(cls);
      prompts_.push_back(std::move(resolved));
    }
  }

  /// Classes in ascending name order; scores() follows the same order.
  const std::vector<ClassLabel>& classes() const noexcept { return classes_; }

  std::vector<double> scores(std::span<const float> image) const {
    if (!classes_.empty() && image.size() != dimension_) {
      throw DataError("image dimension " + std::to_string(image.size()) + " does not match text dimension " +
                      std::to_string(dimension_));
    }
    std::vector<double> out(classes_.size());
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      double sum = 0.0;
      for (const Embedding* e : prompts_[c]) sum += dot(image, *e);
      out[c] = sum / static_cast<double>(prompts_[c].size());
    }
    return out;
  }

  /// Index of the highest score; the first (smallest-named) class wins ties.
  static std::size_t argmax(std::span<const double> scores) noexcept {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c) {
      if (scores[c] > scores[best]) best = c;
    }
    return best;
  }

  std::optional<std::size_t> index_of(const ClassLabel& cls) const {
    auto it = std::lower_bound(classes_.begin(), classes_.end(), cls);
    if (it == classes_.end() || *it != cls) return std::nullopt;
    return static_cast<std::size_t>(it - classes_.begin());
  }

 private:
  std::vector<ClassLabel> classes_;
  std::vector<std::vector<const Embedding*>> prompts_;
  std::size_t dimension_ = 0;
};

inline std::map<ClassLabel, double> class_scores(const LabeledEmbedding& image, const DescriptorSet& ds,
                                                 const EmbeddingTable& table, PromptStyle style = {}) {
  EnsembleClassifier clf(ds, table, style);
  const auto s = clf.scores(image.vector);
  std::map<ClassLabel, double> out;
  for (std::size_t c = 0; c < s.size(); ++c) out.emplace(clf.classes()[c], s[c]);
  return out;
}

inline ClassLabel classify(const LabeledEmbedding& image, const DescriptorSet& ds, const EmbeddingTable& table,
                           PromptStyle style = {}) {
  if (ds.empty()) throw DataError("cannot classify with an empty descriptor set");
  EnsembleClassifier clf(ds, table, style);
  return clf.classes()[EnsembleClassifier::argmax(clf.scores(image.vector))];
}

struct AccuracyReport {
  double overall = 0.0;
  std::map<ClassLabel, double> per_class;  // classes without images are absent
};

/// Accuracy and thresholded confusion from one pass over the images.
/// Rows are keyed by ground-truth class; each keeps the `top_m` competitors with
/// the highest non-zero counts (ties by name), never the ground-truth column.
inline VisualFeedback evaluate_feedback(std::span<const LabeledEmbedding> images, const DescriptorSet& ds,
                                        const EmbeddingTable& table, double lambda, std::size_t top_m,
                                        PromptStyle style = {}) {
  if (images.empty()) throw DataError("cannot evaluate on an empty image set");
  if (ds.empty()) throw DataError("cannot evaluate an empty descriptor set");
  EnsembleClassifier clf(ds, table, style);
  const std::size_t n = clf.classes().size();

  std::vector<std::size_t> correct(n, 0), total(n, 0);
  std::vector<std::vector<std::size_t>> confusion(n, std::vector<std::size_t>(n, 0));
  std::size_t correct_all = 0;

  for (const auto& image : images) {
    const auto gt = clf.index_of(image.label);
    if (!gt) throw DataError("image \"" + image.key + "\" has class " + image.label.str() + " with no descriptors");
    const auto s = clf.scores(image.vector);
    ++total[*gt];
    if (EnsembleClassifier::argmax(s) == *gt) {
      ++correct[*gt];
      ++correct_all;
    }
    const double threshold = lambda * s[*gt];
    for (std::size_t c = 0; c < n; ++c) {
      if (c != *gt && s[c] > threshold) ++confusion[*gt][c];
    }
  }

  VisualFeedback fb;
  fb.overall_accuracy = static_cast<double>(correct_all) / static_cast<double>(images.size());
  for (std::size_t g = 0; g < n; ++g) {
    if (total[g] == 0) continue;
    const auto& cls = clf.classes()[g];
    fb.per_class_accuracy.emplace(cls, static_cast<double>(correct[g]) / static_cast<double>(total[g]));
    std::vector<ConfusionEntry> row;
    for (std::size_t c = 0; c < n; ++c) {
      if (confusion[g][c] > 0) row.push_back({clf.classes()[c], confusion[g][c]});
    }
    // Candidates are already in name order, so a stable sort by count keeps the name tie-break.
    std::stable_sort(row.begin(), row.end(),
                     [](const ConfusionEntry& a, const ConfusionEntry& b) { return a.count > b.count; });
    if (row.size() > top_m) row.erase(row.begin() + static_cast<std::ptrdiff_t>(top_m), row.end());
    fb.confusion_rows.emplace(cls, std::move(row));
  }
  return fb;
}

inline AccuracyReport accuracy(std::span<const LabeledEmbedding> images, const DescriptorSet& ds,
                               const EmbeddingTable& table, PromptStyle style = {}) {
  auto fb = evaluate_feedback(images, ds, table, 1.0, 1, style);
  return {fb.overall_accuracy, std::move(fb.per_class_accuracy)};
}

inline ConfusionRows improved_confusion(std::span<const LabeledEmbedding> images, const DescriptorSet& ds,
                                        const EmbeddingTable& table, double lambda, std::size_t top_m,
                                        PromptStyle style = {}) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw PreconditionError("lambda must lie in (0, 1]");
  if (top_m == 0) throw PreconditionError("top_m must be positive");
  return evaluate_feedback(images, ds, table, lambda, top_m, style).confusion_rows;
}

inline double fitness(const VisualFeedback& fb) noexcept { return fb.overall_accuracy; }

/// Feedback restricted to the rows of `classes` (overall accuracy kept as is).
inline VisualFeedback feedback_for_classes(const VisualFeedback& fb, std::span<const ClassLabel> classes) {
  VisualFeedback out;
  out.overall_accuracy = fb.overall_accuracy;
  for (const auto& cls : classes) {
    if (auto it = fb.per_class_accuracy.find(cls); it != fb.per_class_accuracy.end()) {
      out.per_class_accuracy.insert(*it);
    }
    if (auto it = fb.confusion_rows.find(cls); it != fb.confusion_rows.end()) out.confusion_rows.insert(*it);
  }
  return out;
}

/// Plain-text rendering embedded into LLM prompts:
///
///   Overall accuracy: 83.3%
///   hen (acc=75.0%): confused with owl(3), duck(1)
///   owl (acc=100.0%): confused with: none
inline std::string feedback_to_text(const VisualFeedback& fb) {
  std::set<ClassLabel> rows;
  for (const auto& [cls, _] : fb.per_class_accuracy) rows.insert(cls);
  for (const auto& [cls, _] : fb.confusion_rows) rows.insert(cls);

  std::string out = "Overall accuracy: " + strings::percent(fb.overall_accuracy) + "%\n";
  for (const auto& cls : rows) {
    out += cls.str() + " (acc=";
    auto acc = fb.per_class_accuracy.find(cls);
    out += acc == fb.per_class_accuracy.end() ? std::string("n/a") : strings::percent(acc->second) + "%";
    out += "): confused with";
    auto row = fb.confusion_rows.find(cls);
    if (row == fb.confusion_rows.end() || row->second.empty()) {
      out += ": none\n";
      continue;
    }
    for (std::size_t i = 0; i < row->second.size(); ++i) {
      out += i == 0 ? " " : ", ";
      out += row->second[i].cls.str() + "(" + std::to_string(row->second[i].count) + ")";
    }
    out += "\n";
  }
  return out;
}

}  // namespace descevo
