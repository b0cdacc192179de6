#pragma once

// The descriptor optimization loop.
//
//   initialize:  cluster classes by their name embeddings, ask the LLM for
//                n_init descriptors per class, one request per cluster.
//   step:        re-cluster on descriptor means; per cluster generate K
//                mutants and one crossover child, keep the fittest; then update
//                the memory bank and the global best, and checkpoint.
//   run:         initialize (or resume) and step until n_iterations.
//
// Everything that influences results is ordered deterministically: LLM calls
// may run in parallel, but their results are collected by index and all
// state changes happen in one serialized commit per iteration.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "descevo/archive.hpp"
#include "descevo/clustering.hpp"
#include "descevo/error.hpp"
#include "descevo/prompts.hpp"
#include "descevo/provider.hpp"
#include "descevo/response_parser.hpp"
#include "descevo/rng.hpp"
#include "descevo/scoring.hpp"
#include "descevo/text_embedder.hpp"
#include "descevo/types.hpp"

namespace descevo {

/// Runs fn(0..n-1) on up to `threads` threads. Rethrows the exception of the lowest failing index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// State

struct RunState {
  std::size_t iteration = 0;
  DescriptorSet current;
  DescriptorSet global_best;
  double global_best_fitness = 0.0;
  std::vector<MemoryRecord> memory;
  std::uint64_t rng_seed = 0;
  ClusterAssignment clusters;

  friend bool operator==(const RunState&, const RunState&) = default;
};

inline void to_json(json& j, const RunState& s) {
  json memory = json::array();
  for (const auto& r : s.memory) memory.push_back(r);
  j = {{"iteration", s.iteration},
       {"current", s.current},
       {"global_best", s.global_best},
       {"global_best_fitness", s.global_best_fitness},
       {"memory", std::move(memory)},
       {"rng_seed", s.rng_seed},
       {"clusters", s.clusters}};
}

inline void from_json(const json& j, RunState& s) {
  RunState out;
  out.iteration = j.at("iteration").get<std::size_t>();
  out.current = j.at("current").get<DescriptorSet>();
  out.global_best = j.at("global_best").get<DescriptorSet>();
  out.global_best_fitness = j.at("global_best_fitness").get<double>();
  for (const auto& r : j.at("memory")) out.memory.push_back(memory_record_from_json(r));
  out.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  out.clusters = j.at("clusters").get<ClusterAssignment>();
  s = std::move(out);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t iteration) {
  char name[40];
  std::snprintf(name, sizeof(name), "checkpoint-%04zu.json", iteration);
  return dir / name;
}

/// Writes the state atomically (temp file + rename).
inline std::filesystem::path save_checkpoint(const RunState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = checkpoint_path(dir, state.iteration);
  auto tmp = path;
  tmp += ".tmp";
  write_text_file(tmp, json(state).dump(2) + "\n");
  std::filesystem::rename(tmp, path);
  return path;
}

/// The checkpoint with the highest iteration in `dir`, if any.
inline std::optional<RunState> load_latest_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  std::optional<std::filesystem::path> latest;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("checkpoint-", 0) != 0 || entry.path().extension() != ".json") continue;
    if (!latest || name > latest->filename().string()) latest = entry.path();
  }
  if (!latest) return std::nullopt;
  json j = json::parse(read_text_file(*latest), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw DataError("corrupt checkpoint " + latest->string());
  try {
    return j.get<RunState>();
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint " + latest->string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

struct CandidateRecord {
  std::string origin;  // "mutation" or "crossover"
  bool fallback = false;
  double fitness = 0.0;
  std::vector<std::string> warnings;
};

struct ClusterReport {
  std::vector<ClassLabel> classes;
  std::vector<CandidateRecord> candidates;
  std::size_t winner = 0;
};

struct IterationReport {
  std::size_t iteration = 0;
  double fitness = 0.0;
  double global_best_fitness = 0.0;
  VisualFeedback feedback;
  ClusterAssignment clusters;
  std::vector<ClusterReport> selection;
  std::size_t memory_positive = 0;
  std::size_t memory_negative = 0;
  std::size_t memory_added = 0;
  Usage usage;
};

inline void to_json(json& j, const IterationReport& r) {
  json selection = json::array();
  for (const auto& c : r.selection) {
    json classes = json::array();
    for (const auto& cls : c.classes) classes.push_back(cls.str());
    json candidates = json::array();
    for (const auto& cand : c.candidates) {
      candidates.push_back({{"origin", cand.origin},
                            {"fallback", cand.fallback},
                            {"fitness", cand.fitness},
                            {"warnings", cand.warnings}});
    }
    selection.push_back({{"classes", std::move(classes)}, {"candidates", std::move(candidates)}, {"winner", c.winner}});
  }
  j = {{"iteration", r.iteration},
       {"fitness", r.fitness},
       {"global_best_fitness", r.global_best_fitness},
       {"feedback", r.feedback},
       {"clusters", r.clusters},
       {"selection", std::move(selection)},
       {"memory", {{"positive", r.memory_positive}, {"negative", r.memory_negative}, {"added", r.memory_added}}},
       {"usage", r.usage}};
}

// ---------------------------------------------------------------------------
// Selection and memory

struct SelectionResult {
  std::size_t winner = 0;
  std::vector<VisualFeedback> feedback;  // one per candidate
};

inline std::vector<LabeledEmbedding> images_of(std::span<const LabeledEmbedding> images,
                                               std::span<const ClassLabel> classes) {
  std::set<ClassLabel> keep(classes.begin(), classes.end());
  std::vector<LabeledEmbedding> out;
  for (const auto& img : images) {
    if (keep.count(img.label)) out.push_back(img);
  }
  return out;
}

/// Feedback for each cluster-scoped candidate.
///
/// Cluster scope: candidates classify only the images of their own classes,
/// among their own classes. Global scope: each candidate is spliced into
/// `current` and evaluated on every image.
inline std::vector<VisualFeedback> evaluate_candidates(std::span<const DescriptorSet> candidates,
                                                       std::span<const LabeledEmbedding> images,
                                                       const EmbeddingTable& table, const RunConfig& config,
                                                       const DescriptorSet& current) {
  std::vector<VisualFeedback> out(candidates.size());
  if (candidates.empty()) return out;
  if (config.selection_scope == SelectionScope::global) {
    parallel_for(candidates.size(), config.threads, [&](std::size_t i) {
      DescriptorSet full = current;
      full.splice(candidates[i]);
      out[i] = evaluate_feedback(images, full, table, config.lambda, config.top_m, config.style);
    });
    return out;
  }
  const auto classes = candidates.front().classes();
  const auto scoped = images_of(images, classes);
  if (scoped.empty()) return out;  // nothing to measure: every candidate scores 0
  parallel_for(candidates.size(), config.threads, [&](std::size_t i) {
    out[i] = evaluate_feedback(scoped, candidates[i], table, config.lambda, config.top_m, config.style);
  });
  return out;
}

/// Natural selection: the fittest candidate, lowest index on ties.
inline SelectionResult select_cluster(std::span<const DescriptorSet> candidates,
                                      std::span<const LabeledEmbedding> images, const EmbeddingTable& table,
                                      const RunConfig& config, const DescriptorSet& current) {
  if (candidates.empty()) throw PreconditionError("selection needs at least one candidate");
  SelectionResult result;
  result.feedback = evaluate_candidates(candidates, images, table, config, current);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (fitness(result.feedback[i]) > fitness(result.feedback[result.winner])) result.winner = i;
  }
  return result;
}

/// Appends memory records for the descriptors that changed between `prev` and `next`.
///
/// Three overall accuracies are compared on the same images: a_prev (prev),
/// a_new (next) and a_u (only the descriptors both sets share; a class with
/// nothing shared falls back to its bare-template prompt). Added descriptors
/// are positive iff a_new > a_u; deleted ones are negative iff a_prev > a_u.
inline std::vector<MemoryRecord> update_memory(std::span<const MemoryRecord> memory, const DescriptorSet& prev,
                                               const DescriptorSet& next, std::span<const LabeledEmbedding> images,
                                               const EmbeddingTable& table, PromptStyle style,
                                               std::size_t iteration) {
  if (prev.classes() != next.classes()) throw PreconditionError("memory update needs matching class sets");
  std::vector<MemoryRecord> out(memory.begin(), memory.end());

  struct Diff {
    ClassLabel cls;
    std::vector<Descriptor> added, deleted;
  };
  std::vector<Diff> diffs;
  DescriptorSet unchanged_only;
  bool changed = false;
  for (const auto& [cls, before] : prev) {
    const auto& after = next.at(cls);
    auto in = [](const std::vector<Descriptor>& list, const Descriptor& d) {
      return std::find(list.begin(), list.end(), d) != list.end();
    };
    Diff diff{cls, {}, {}};
    std::vector<Descriptor> unchanged;
    for (const auto& d : before) {
      if (in(after, d)) unchanged.push_back(d);
      else diff.deleted.push_back(d);
    }
    for (const auto& d : after) {
      if (!in(before, d)) diff.added.push_back(d);
    }
    changed = changed || !diff.added.empty() || !diff.deleted.empty();
    if (unchanged.empty()) unchanged.emplace_back(std::string(kBareDescriptor));
    unchanged_only.set(cls, std::move(unchanged));
    diffs.push_back(std::move(diff));
  }
  if (!changed) return out;

  const double a_prev = accuracy(images, prev, table, style).overall;
  const double a_new = accuracy(images, next, table, style).overall;
  const double a_u = accuracy(images, unchanged_only, table, style).overall;
  const Polarity added_polarity = a_new > a_u ? Polarity::positive : Polarity::negative;
  const Polarity deleted_polarity = a_prev > a_u ? Polarity::negative : Polarity::positive;

  for (const auto& diff : diffs) {
    for (const auto& d : diff.added) out.push_back({diff.cls, d, iteration, added_polarity});
    for (const auto& d : diff.deleted) out.push_back({diff.cls, d, iteration, deleted_polarity});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Engine

struct MutationOutcome {
  std::vector<DescriptorSet> candidates;
  std::vector<bool> fallback;
  std::vector<std::vector<std::string>> warnings;
};

struct CrossoverOutcome {
  DescriptorSet candidate;
  bool fallback = false;
  std::vector<std::string> warnings;
};

struct StepOutcome {
  RunState state;
  IterationReport report;
};

struct RunPaths {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path log_path;        // empty: no JSON-lines log
};

struct RunResult {
  RunState state;
  std::vector<IterationReport> reports;
};

class Evolution {
 public:
  Evolution(RunConfig config, LlmProvider& llm, TextEmbedder& embedder, std::vector<LabeledEmbedding> images,
            PromptTemplates templates = PromptTemplates::defaults())
      : config_(std::move(config)),
        llm_(llm),
        embedder_(embedder),
        images_(std::move(images)),
        templates_(std::move(templates)) {
    config_.validate();
    if (images_.empty()) throw DataError("the optimization split has no images");
  }

  const RunConfig& config() const noexcept { return config_; }
  std::span<const LabeledEmbedding> images() const noexcept { return images_; }

  /// Feedback of a full descriptor set on every image.
  VisualFeedback evaluate(const DescriptorSet& ds) {
    embedder_.ensure(prompts_for(ds, config_.style));
    return evaluate_feedback(images_, ds, embedder_.table(), config_.lambda, config_.top_m, config_.style);
  }

  RunState initialize(std::span<const ClassLabel> classes) {
    check_classes(classes);
    ensure_bare_prompts(classes);
    const auto reps = class_representatives(classes, embedder_.table());
    const auto k = default_k(classes.size(), config_.cluster_target_size);
    const auto clusters = kmeans(reps, k, derive_seed(config_.rng_seed, "kmeans", 0));

    std::vector<DescriptorSet> parts(clusters.k());
    parallel_for(clusters.k(), config_.threads, [&](std::size_t c) {
      const auto& members = clusters.clusters[c];
      const auto req = build_init_prompt(members, config_.n_init, templates_, config_.temperature, config_.max_tokens);
      std::string last_error;
      for (int attempt = 0; attempt < 2; ++attempt) {
        try {
          parts[c] = parse_descriptor_response(llm_.complete(req), members, config_.n_init).descriptors;
          return;
        } catch (const ResponseError& e) {
          last_error = e.what();
        }
      }
      throw ResponseError("initialization of cluster " + describe(members) + ": " + last_error);
    });

    RunState state;
    for (const auto& part : parts) state.current.splice(part);
    embedder_.ensure(prompts_for(state.current, config_.style));
    state.global_best = state.current;
    state.global_best_fitness = fitness(evaluate(state.current));
    state.rng_seed = config_.rng_seed;
    state.clusters = clusters;
    return state;
  }

  /// K independent mutants of the cluster's descriptors. A reply that fails to
  /// parse twice becomes a copy of the current descriptors.
  MutationOutcome mutate_cluster(const RunState& state, std::span<const ClassLabel> cluster,
                                 const VisualFeedback& previous_feedback) {
    const auto current = state.current.restricted_to(cluster);
    const auto feedback_text = feedback_to_text(feedback_for_classes(previous_feedback, cluster));
    const auto memory_text = render_memory(state.memory, cluster);
    const std::size_t k = config_.n_mutants;

    MutationOutcome out;
    out.candidates.assign(k, current);
    out.fallback.assign(k, false);
    out.warnings.assign(k, {});
    parallel_for(k, config_.threads, [&](std::size_t v) {
      const auto req = build_mutation_prompt(current, feedback_text, memory_text, config_.n_change, templates_,
                                             config_.temperature, config_.max_tokens, v);
      for (int attempt = 0; attempt < 2; ++attempt) {
        try {
          auto parsed = parse_descriptor_response(llm_.complete(req), cluster, config_.n_init);
          out.candidates[v] = std::move(parsed.descriptors);
          out.warnings[v].insert(out.warnings[v].end(), parsed.warnings.begin(), parsed.warnings.end());
          return;
        } catch (const ResponseError& e) {
          out.warnings[v].push_back(std::string("unusable reply: ") + e.what());
        }
      }
      out.fallback[v] = true;
    });
    if (std::all_of(out.fallback.begin(), out.fallback.end(), [](bool f) { return f; })) {
      throw IterationError("all " + std::to_string(k) + " mutation replies for cluster " + describe(cluster) +
                           " were unusable");
    }
    return out;
  }

  /// One child mixing the mutants. Falls back to the fittest mutant after two unusable replies.
  CrossoverOutcome crossover_cluster(std::span<const ScoredCandidate> mutants) {
    if (mutants.empty()) throw PreconditionError("crossover needs candidates");
    const auto classes = mutants.front().descriptors.classes();
    std::vector<ScoredCandidate> shown;
    for (const auto& m : mutants) shown.push_back({m.descriptors, feedback_for_classes(m.feedback, classes)});
    const auto req = build_crossover_prompt(shown, mutants.size(), templates_, config_.temperature, config_.max_tokens);

    CrossoverOutcome out;
    for (int attempt = 0; attempt < 2; ++attempt) {
      try {
        auto parsed = parse_descriptor_response(llm_.complete(req), classes, config_.n_init);
        out.candidate = std::move(parsed.descriptors);
        out.warnings.insert(out.warnings.end(), parsed.warnings.begin(), parsed.warnings.end());
        return out;
      } catch (const ResponseError& e) {
        out.warnings.push_back(std::string("unusable reply: ") + e.what());
      }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < mutants.size(); ++i) {
      if (fitness(mutants[i].feedback) > fitness(mutants[best].feedback)) best = i;
    }
    out.candidate = mutants[best].descriptors;
    out.fallback = true;
    return out;
  }

  StepOutcome step(const RunState& state, const std::filesystem::path& checkpoint_dir = {}) {
    const std::size_t iteration = state.iteration + 1;
    const auto classes = state.current.classes();
    ensure_bare_prompts(classes);
    const auto previous_feedback = evaluate(state.current);

    const auto reps = class_representatives(state.current, embedder_.table(), config_.style);
    const auto k = default_k(classes.size(), config_.cluster_target_size);
    const auto clusters = kmeans(reps, k, derive_seed(state.rng_seed, "kmeans", iteration));

    IterationReport report;
    report.iteration = iteration;
    report.clusters = clusters;

    DescriptorSet next = state.current;
    for (const auto& cluster : clusters.clusters) {
      auto mutation = mutate_cluster(state, cluster, previous_feedback);
      for (const auto& cand : mutation.candidates) embedder_.ensure(prompts_for(cand, config_.style));
      const auto mutant_feedback =
          evaluate_candidates(mutation.candidates, images_, embedder_.table(), config_, state.current);

      std::vector<ScoredCandidate> scored;
      for (std::size_t i = 0; i < mutation.candidates.size(); ++i) {
        scored.push_back({mutation.candidates[i], mutant_feedback[i]});
      }
      auto crossover = crossover_cluster(scored);
      embedder_.ensure(prompts_for(crossover.candidate, config_.style));

      std::vector<DescriptorSet> pool = std::move(mutation.candidates);
      pool.push_back(crossover.candidate);
      const auto selection = select_cluster(pool, images_, embedder_.table(), config_, state.current);
      next.splice(pool[selection.winner]);

      ClusterReport cr;
      cr.classes = cluster;
      cr.winner = selection.winner;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const bool is_crossover = i + 1 == pool.size();
        cr.candidates.push_back({is_crossover ? "crossover" : "mutation",
                                 is_crossover ? crossover.fallback : mutation.fallback[i],
                                 fitness(selection.feedback[i]),
                                 is_crossover ? crossover.warnings : mutation.warnings[i]});
      }
      report.selection.push_back(std::move(cr));
    }

    RunState out;
    out.iteration = iteration;
    out.rng_seed = state.rng_seed;
    out.clusters = clusters;
    out.memory = update_memory(state.memory, state.current, next, images_, embedder_.table(), config_.style, iteration);
    report.feedback = evaluate(next);
    report.fitness = fitness(report.feedback);
    out.current = std::move(next);
    if (report.fitness > state.global_best_fitness) {
      out.global_best = out.current;
      out.global_best_fitness = report.fitness;
    } else {
      out.global_best = state.global_best;
      out.global_best_fitness = state.global_best_fitness;
    }
    fill_memory_stats(report, out.memory, state.memory.size());
    report.global_best_fitness = out.global_best_fitness;
    report.usage = llm_.usage();

    if (!checkpoint_dir.empty()) save_checkpoint(out, checkpoint_dir);
    return {std::move(out), std::move(report)};
  }

  /// Report for the state right after initialize (iteration 0).
  IterationReport initial_report(const RunState& state) {
    IterationReport report;
    report.iteration = state.iteration;
    report.feedback = evaluate(state.current);
    report.fitness = fitness(report.feedback);
    report.global_best_fitness = state.global_best_fitness;
    report.clusters = state.clusters;
    fill_memory_stats(report, state.memory, state.memory.size());
    report.usage = llm_.usage();
    return report;
  }

  /// Initializes (or resumes from the newest checkpoint when `resume` is set)
  /// and steps until config.n_iterations. Log lines are appended as they happen.
  RunResult run(std::span<const ClassLabel> classes, const RunPaths& paths = {}, bool resume = false,
                const std::function<void(const IterationReport&)>& observer = {}) {
    RunResult result;
    std::optional<RunState> restored;
    if (resume && !paths.checkpoint_dir.empty()) restored = load_latest_checkpoint(paths.checkpoint_dir);

    if (restored) {
      check_classes(classes);
      std::vector<ClassLabel> want(classes.begin(), classes.end());
      std::sort(want.begin(), want.end());
      if (restored->current.classes() != want) throw ConfigError("checkpoint classes differ from the requested classes");
      result.state = std::move(*restored);
      if (!paths.log_path.empty()) truncate_log(paths.log_path, result.state.iteration);
    } else {
      result.state = initialize(classes);
      auto report = initial_report(result.state);
      if (!paths.log_path.empty()) {
        if (paths.log_path.has_parent_path()) std::filesystem::create_directories(paths.log_path.parent_path());
        write_text_file(paths.log_path, "");
        append_log(paths.log_path, report);
      }
      if (observer) observer(report);
      result.reports.push_back(std::move(report));
    }

    while (result.state.iteration < config_.n_iterations) {
      auto outcome = step(result.state, paths.checkpoint_dir);
      if (!paths.log_path.empty()) append_log(paths.log_path, outcome.report);
      if (observer) observer(outcome.report);
      result.reports.push_back(std::move(outcome.report));
      result.state = std::move(outcome.state);
    }
    return result;
  }

 private:
  static std::string describe(std::span<const ClassLabel> classes) {
    std::string s = "[";
    for (std::size_t i = 0; i < classes.size(); ++i) s += (i ? ", " : "") + classes[i].str();
    return s + "]";
  }

  void check_classes(std::span<const ClassLabel> classes) const {
    if (classes.empty()) throw DataError("no classes to optimize");
    std::set<ClassLabel> unique(classes.begin(), classes.end());
    if (unique.size() != classes.size()) throw DataError("duplicate class labels");
    for (const auto& img : images_) {
      if (!unique.count(img.label)) {
        throw DataError("image \"" + img.key + "\" has class " + img.label.str() + ", which is not being optimized");
      }
    }
  }

  void ensure_bare_prompts(std::span<const ClassLabel> classes) {
    std::vector<PromptRequest> prompts;
    for (const auto& cls : classes) prompts.push_back({cls, bare_prompt(cls)});
    embedder_.ensure(prompts);
  }

  static void fill_memory_stats(IterationReport& report, std::span<const MemoryRecord> memory, std::size_t before) {
    report.memory_positive = static_cast<std::size_t>(
        std::count_if(memory.begin(), memory.end(), [](const auto& r) { return r.polarity == Polarity::positive; }));
    report.memory_negative = memory.size() - report.memory_positive;
    report.memory_added = memory.size() - before;
  }

  static void append_log(const std::filesystem::path& path, const IterationReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw DataError("cannot append to run log " + path.string());
    out << json(report).dump() << '\n';
  }

  static void truncate_log(const std::filesystem::path& path, std::size_t last_iteration) {
    if (!std::filesystem::exists(path)) return;
    std::istringstream in(read_text_file(path));
    std::string kept, line;
    while (std::getline(in, line)) {
      json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
      if (j.is_discarded() || !j.contains("iteration")) continue;
      if (j["iteration"].get<std::size_t>() <= last_iteration) kept += line + "\n";
    }
    write_text_file(path, kept);
  }

  RunConfig config_;
  LlmProvider& llm_;
  TextEmbedder& embedder_;
  std::vector<LabeledEmbedding> images_;
  PromptTemplates templates_;
};

}  // namespace descevo
