#pragma once

// The descevo command line: optimize, evaluate, feedback, embed-mock, embed-texts.
// Kept in a header so tests can drive it in-process.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "descevo/descevo.hpp"
#include "descevo/http_provider.hpp"

namespace descevo::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 1, kProviderError = 2, kDataError = 3 };

/// Everything optimize needs. Paths are absolute or relative to the working directory.
struct CliConfig {
  RunConfig run;
  fs::path images;
  std::optional<fs::path> test_images;
  std::optional<fs::path> classes;
  std::string text_embedder = "mock:64";
  std::string provider = "replay";
  std::optional<fs::path> replay_script;
  std::optional<fs::path> record_script;
  std::string endpoint = HttpProviderConfig{}.endpoint;
  std::string model = HttpProviderConfig{}.model;
  std::string api_key_env = HttpProviderConfig{}.api_key_env;
  std::optional<fs::path> prompt_dir;
  fs::path out = "descevo-out";
};

inline const std::set<std::string>& cli_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k(run_config_keys().begin(), run_config_keys().end());
    for (const char* extra : {"images", "test_images", "classes", "text_embedder", "provider", "replay_script",
                              "record_script", "endpoint", "model", "api_key_env", "prompt_dir", "out"}) {
      k.insert(extra);
    }
    return k;
  }();
  return keys;
}

/// Reads a flat JSON config. Relative paths resolve against the file's directory.
inline CliConfig load_cli_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j = json::parse(read_text_file(path), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("config file is not a JSON object: " + path.string());
  for (const auto& [key, _] : j.items()) {
    if (!cli_config_keys().count(key)) throw ConfigError("unknown config key \"" + key + "\"");
  }

  CliConfig c;
  apply_run_config(j, c.run);
  const fs::path base = path.parent_path();
  auto str = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_string()) throw ConfigError(std::string(key) + " must be a string");
    return j[key].get<std::string>();
  };
  auto file = [&](const char* key) -> std::optional<fs::path> {
    auto s = str(key);
    if (!s) return std::nullopt;
    fs::path p(*s);
    return p.is_absolute() ? p : base / p;
  };
  if (auto p = file("images")) c.images = *p;
  c.test_images = file("test_images");
  c.classes = file("classes");
  c.replay_script = file("replay_script");
  c.record_script = file("record_script");
  c.prompt_dir = file("prompt_dir");
  if (auto p = file("out")) c.out = *p;
  if (auto s = str("text_embedder")) {
    // archive paths inside the mode string are config-relative too
    if (s->rfind("archive:", 0) == 0 && !fs::path(s->substr(8)).is_absolute()) {
      *s = "archive:" + (base / s->substr(8)).string();
    }
    c.text_embedder = *s;
  }
  if (auto s = str("provider")) c.provider = *s;
  if (auto s = str("endpoint")) c.endpoint = *s;
  if (auto s = str("model")) c.model = *s;
  if (auto s = str("api_key_env")) c.api_key_env = *s;
  return c;
}

/// "mock:D", "archive:PATH" or "command:CMD".
inline TextEmbedder make_text_embedder(const std::string& mode) {
  const auto colon = mode.find(':');
  if (colon == std::string::npos) throw ConfigError("text embedder must be mock:D, archive:PATH or command:CMD");
  const auto kind = mode.substr(0, colon);
  const auto arg = mode.substr(colon + 1);
  if (kind == "mock") {
    std::size_t dim = 0;
    try {
      std::size_t used = 0;
      dim = std::stoul(arg, &used);
      if (used != arg.size()) dim = 0;
    } catch (const std::exception&) {
      dim = 0;
    }
    if (dim < 2) throw ConfigError("mock text embedder needs a dimension >= 2, got \"" + arg + "\"");
    return TextEmbedder::mock(dim);
  }
  if (kind == "archive") {
    if (!fs::exists(arg)) throw DataError("text archive not found: " + arg);
    return TextEmbedder::from_archive(read_archive(arg));
  }
  if (kind == "command") {
    if (arg.empty()) throw ConfigError("command text embedder needs a command");
    return TextEmbedder::external_command(arg);
  }
  throw ConfigError("unknown text embedder kind \"" + kind + "\"");
}

inline std::vector<LabeledEmbedding> load_images(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("image archive not found: " + path.string());
  auto archive = read_archive(path);
  if (archive.records.empty()) throw DataError("image archive has no records: " + path.string());
  return std::move(archive.records);
}

inline std::vector<ClassLabel> classes_of(std::span<const LabeledEmbedding> images) {
  std::set<ClassLabel> unique;
  for (const auto& img : images) unique.insert(img.label);
  return {unique.begin(), unique.end()};
}

/// Fails with the list of archive classes that the descriptor set lacks.
inline void require_classes(const DescriptorSet& ds, std::span<const LabeledEmbedding> images) {
  std::vector<std::string> missing;
  for (const auto& cls : classes_of(images)) {
    if (!ds.contains(cls)) missing.push_back(cls.str());
  }
  if (missing.empty()) return;
  std::string list;
  for (std::size_t i = 0; i < missing.size(); ++i) list += (i ? ", " : "") + missing[i];
  throw DataError("descriptor set lacks classes present in the image archive: " + list);
}

inline json report_json(const VisualFeedback& fb, std::size_t n_images, double lambda, std::size_t top_m) {
  json j = fb;
  j["images"] = n_images;
  j["lambda"] = lambda;
  j["top_m"] = top_m;
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

struct OptimizeArgs {
  std::optional<fs::path> config;
  std::optional<fs::path> images, test_images, classes, replay_script, record_script, prompt_dir, out;
  std::optional<std::string> text_embedder, provider, endpoint, model, api_key_env;
  std::optional<std::size_t> iterations, threads;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  bool quiet = false;
};

inline CliConfig resolve_optimize_config(const OptimizeArgs& a) {
  CliConfig c = a.config ? load_cli_config(*a.config) : CliConfig{};
  if (a.images) c.images = *a.images;
  if (a.test_images) c.test_images = *a.test_images;
  if (a.classes) c.classes = *a.classes;
  if (a.replay_script) c.replay_script = *a.replay_script;
  if (a.record_script) c.record_script = *a.record_script;
  if (a.prompt_dir) c.prompt_dir = *a.prompt_dir;
  if (a.out) c.out = *a.out;
  if (a.text_embedder) c.text_embedder = *a.text_embedder;
  if (a.provider) c.provider = *a.provider;
  if (a.endpoint) c.endpoint = *a.endpoint;
  if (a.model) c.model = *a.model;
  if (a.api_key_env) c.api_key_env = *a.api_key_env;
  if (a.iterations) c.run.n_iterations = *a.iterations;
  if (a.threads) c.run.threads = *a.threads;
  if (a.seed) c.run.rng_seed = *a.seed;
  c.run.validate();
  if (c.images.empty()) throw ConfigError("no image archive given (images)");
  return c;
}

inline std::unique_ptr<LlmProvider> make_provider(const CliConfig& c) {
  if (c.provider == "replay") {
    if (!c.replay_script) throw ConfigError("provider \"replay\" needs replay_script");
    return std::make_unique<ReplayProvider>(ReplayProvider::read_script(*c.replay_script));
  }
  if (c.provider == "http") {
    HttpProviderConfig hc;
    hc.endpoint = c.endpoint;
    hc.model = c.model;
    hc.api_key_env = c.api_key_env;
    return std::make_unique<HttpProvider>(hc);
  }
  throw ConfigError("provider must be \"replay\" or \"http\", got \"" + c.provider + "\"");
}

inline int cmd_optimize(const OptimizeArgs& args, std::ostream& out, std::ostream& err) {
  const CliConfig c = resolve_optimize_config(args);
  auto images = load_images(c.images);
  std::optional<std::vector<LabeledEmbedding>> test_images;
  if (c.test_images) test_images = load_images(*c.test_images);
  std::vector<ClassLabel> classes;
  if (c.classes) {
    if (!fs::exists(*c.classes)) throw DataError("class list not found: " + c.classes->string());
    classes = parse_class_list(read_text_file(*c.classes));
  } else {
    classes = classes_of(images);
  }
  auto embedder = make_text_embedder(c.text_embedder);
  auto base_provider = make_provider(c);
  std::optional<RecordingProvider> recorder;
  LlmProvider* provider = base_provider.get();
  if (c.record_script) provider = &recorder.emplace(*base_provider);
  const auto templates = c.prompt_dir ? PromptTemplates::load(*c.prompt_dir) : PromptTemplates::defaults();

  fs::create_directories(c.out);
  Evolution evo(c.run, *provider, embedder, images, templates);
  RunPaths paths{c.out / "checkpoints", c.out / "run_log.jsonl"};
  auto observer = [&](const IterationReport& r) {
    if (args.quiet) return;
    err << "iteration " << r.iteration << ": fitness " << strings::percent(r.fitness) << "%, best "
        << strings::percent(r.global_best_fitness) << "%, llm calls " << r.usage.calls << "\n";
  };

  RunResult result;
  try {
    result = evo.run(classes, paths, args.resume, observer);
  } catch (...) {
    if (recorder) recorder->save(*c.record_script);
    throw;
  }
  if (recorder) recorder->save(*c.record_script);
  save_descriptor_set(result.state.global_best, c.out / "final_descriptors.json");

  json summary = {{"iterations", result.state.iteration},
                  {"global_best_fitness", result.state.global_best_fitness},
                  {"final_descriptors", (c.out / "final_descriptors.json").string()},
                  {"usage", provider->usage()}};
  if (test_images) {
    auto& best = result.state.global_best;
    const auto bare = bare_descriptor_set(best.classes());
    embedder.ensure(prompts_for(bare, c.run.style));
    require_classes(best, *test_images);
    const double final_acc = accuracy(*test_images, best, embedder.table(), c.run.style).overall;
    const double bare_acc = accuracy(*test_images, bare, embedder.table(), c.run.style).overall;
    json test = {{"bare_accuracy", bare_acc}, {"final_accuracy", final_acc}, {"images", test_images->size()}};
    write_text_file(c.out / "test_report.json", test.dump(2) + "\n");
    summary["test"] = test;
  }
  out << summary.dump(2) << "\n";
  return kOk;
}

struct EvaluateArgs {
  fs::path descriptors;
  fs::path images;
  std::string text_embedder = "mock:64";
  double lambda = RunConfig{}.lambda;
  std::size_t top_m = RunConfig{}.top_m;
  bool photo_prefix = false;
};

inline VisualFeedback run_evaluation(const EvaluateArgs& a, std::size_t& n_images) {
  if (!fs::exists(a.descriptors)) throw DataError("descriptor file not found: " + a.descriptors.string());
  const auto ds = load_descriptor_set(a.descriptors);
  const auto images = load_images(a.images);
  require_classes(ds, images);
  if (!(a.lambda > 0.0 && a.lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1]");
  if (a.top_m == 0) throw ConfigError("top_m must be positive");
  auto embedder = make_text_embedder(a.text_embedder);
  const PromptStyle style{a.photo_prefix};
  embedder.ensure(prompts_for(ds, style));
  n_images = images.size();
  return evaluate_feedback(images, ds, embedder.table(), a.lambda, a.top_m, style);
}

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  std::size_t n = 0;
  const auto fb = run_evaluation(a, n);
  out << report_json(fb, n, a.lambda, a.top_m).dump(2) << "\n";
  return kOk;
}

inline int cmd_feedback(const EvaluateArgs& a, std::ostream& out) {
  std::size_t n = 0;
  const auto fb = run_evaluation(a, n);
  out << feedback_to_text(fb) << "\n" << report_json(fb, n, a.lambda, a.top_m).dump() << "\n";
  return kOk;
}

struct EmbedMockArgs {
  fs::path classes;
  std::string descriptors = "none";
  std::size_t dimension = 64;
  std::size_t images_per_class = 20;
  double sigma = 0.3;
  std::uint64_t seed = 0;
  fs::path out;
  bool photo_prefix = false;
};

/// Image archive: per class, mock_embed of its bare prompt plus N(0, sigma^2) noise per coordinate, renormalized.
inline EmbeddingArchive mock_image_archive(std::span<const ClassLabel> classes, std::size_t dimension,
                                           std::size_t per_class, double sigma, std::uint64_t seed) {
  EmbeddingArchive archive{static_cast<std::uint32_t>(dimension), {}};
  SplitMix64 rng(derive_seed(seed, "embed-mock", 0));
  for (const auto& cls : classes) {
    const auto center = mock_embed(bare_prompt(cls), dimension);
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> v(center.begin(), center.end());
      for (double& x : v) x += sigma * rng.gaussian();
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      Embedding e(dimension);
      for (std::size_t d = 0; d < dimension; ++d) e[d] = norm > 0.0 ? static_cast<float>(v[d] / norm) : center[d];
      char key[32];
      std::snprintf(key, sizeof(key), "/%04zu", i);
      archive.records.push_back({cls, cls.str() + key, std::move(e)});
    }
  }
  return archive;
}

/// Text archive: the bare prompt of every class plus every rendered descriptor prompt.
inline EmbeddingArchive mock_text_archive(std::span<const ClassLabel> classes, const DescriptorSet* ds,
                                          std::size_t dimension, PromptStyle style) {
  EmbeddingArchive archive{static_cast<std::uint32_t>(dimension), {}};
  std::set<std::string> seen;
  auto add = [&](const ClassLabel& cls, const std::string& prompt) {
    if (seen.insert(prompt).second) archive.records.push_back({cls, prompt, mock_embed(prompt, dimension)});
  };
  for (const auto& cls : classes) add(cls, bare_prompt(cls));
  if (ds) {
    for (const auto& p : prompts_for(*ds, style)) add(p.cls, p.prompt);
  }
  return archive;
}

inline int cmd_embed_mock(const EmbedMockArgs& a, std::ostream& out) {
  if (a.dimension < 2) throw ConfigError("dimension must be at least 2");
  if (!(a.sigma >= 0.0)) throw ConfigError("sigma must be non-negative");
  if (!fs::exists(a.classes)) throw DataError("class list not found: " + a.classes.string());
  const auto classes = parse_class_list(read_text_file(a.classes));
  if (classes.empty()) throw DataError("class list is empty");
  std::optional<DescriptorSet> ds;
  if (a.descriptors != "none") {
    if (!fs::exists(a.descriptors)) throw DataError("descriptor file not found: " + a.descriptors);
    ds = load_descriptor_set(a.descriptors);
  }
  fs::create_directories(a.out);
  const auto text = mock_text_archive(classes, ds ? &*ds : nullptr, a.dimension, PromptStyle{a.photo_prefix});
  const auto images = mock_image_archive(classes, a.dimension, a.images_per_class, a.sigma, a.seed);
  write_archive(text, a.out / "text.emb");
  write_archive(images, a.out / "images.emb");
  out << json{{"text", (a.out / "text.emb").string()},
              {"text_records", text.records.size()},
              {"images", (a.out / "images.emb").string()},
              {"image_records", images.records.size()}}
             .dump(2)
      << "\n";
  return kOk;
}

struct EmbedTextsArgs {
  fs::path prompts;
  fs::path out;
  std::string model = "mock:64";
};

/// Reference implementation of the external text-embedder command (mock model only).
inline int cmd_embed_texts(const EmbedTextsArgs& a, std::ostream& err) {
  if (a.model.rfind("mock:", 0) != 0) throw ConfigError("embed-texts supports only mock:D models");
  auto embedder = make_text_embedder(a.model);
  if (!fs::exists(a.prompts)) throw DataError("prompt list not found: " + a.prompts.string());
  std::istringstream in(read_text_file(a.prompts));
  std::string line;
  std::vector<PromptRequest> requests;
  std::set<std::string> seen;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw DataError("malformed prompt line " + std::to_string(n) + " (expected class<TAB>prompt)");
    }
    auto prompt = line.substr(tab + 1);
    if (!seen.insert(prompt).second) {
      err << "warning: duplicate prompt on line " << n << " skipped\n";
      continue;
    }
    requests.push_back({ClassLabel(line.substr(0, tab)), std::move(prompt)});
  }
  embedder.ensure(requests);
  EmbeddingArchive archive{*embedder.dimension(), {}};
  for (const auto& r : requests) archive.records.push_back({r.cls, r.prompt, embedder.table().at(r.prompt)});
  write_archive(archive, a.out);
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evolve class descriptors for zero-shot classification with LLM feedback"};
  app.require_subcommand(1);

  OptimizeArgs opt;
  auto* optimize = app.add_subcommand("optimize", "Run the descriptor optimization loop");
  optimize->add_option("--config", opt.config, "JSON config file (flat keys)");
  optimize->add_option("--images", opt.images, "Optimization-split image archive (EMB1)");
  optimize->add_option("--test-images", opt.test_images, "Held-out image archive for a final report");
  optimize->add_option("--classes", opt.classes, "Class list file (one per line); default: archive labels");
  optimize->add_option("--text-embedder", opt.text_embedder, "mock:D | archive:PATH | command:CMD");
  optimize->add_option("--provider", opt.provider, "replay | http");
  optimize->add_option("--replay-script", opt.replay_script, "Replay script for the replay provider");
  optimize->add_option("--record", opt.record_script, "Write every LLM exchange as a replay script");
  optimize->add_option("--endpoint", opt.endpoint, "Chat completions URL");
  optimize->add_option("--model", opt.model, "Chat model name");
  optimize->add_option("--api-key-env", opt.api_key_env, "Environment variable holding the API key");
  optimize->add_option("--prompt-dir", opt.prompt_dir, "Directory of prompt template overrides");
  optimize->add_option("--out", opt.out, "Output directory");
  optimize->add_option("--iterations", opt.iterations, "Number of iterations (0: initialize only)");
  optimize->add_option("--threads", opt.threads, "Worker threads for LLM calls and evaluation");
  optimize->add_option("--seed", opt.seed, "Run seed");
  optimize->add_flag("--resume", opt.resume, "Continue from the newest checkpoint in OUT/checkpoints");
  optimize->add_flag("--quiet", opt.quiet, "No per-iteration progress on stderr");

  auto add_eval_options = [](CLI::App* sub, EvaluateArgs& a) {
    sub->add_option("--descriptors", a.descriptors, "Descriptor set JSON")->required();
    sub->add_option("--images", a.images, "Image archive (EMB1)")->required();
    sub->add_option("--text-embedder", a.text_embedder, "mock:D | archive:PATH | command:CMD")
        ->capture_default_str();
    sub->add_option("--lambda", a.lambda, "Confusion threshold ratio")->capture_default_str();
    sub->add_option("--top-m", a.top_m, "Confusion entries kept per class")->capture_default_str();
    sub->add_flag("--photo-prefix", a.photo_prefix, "Render prompts as \"A photo of a <class>, which ...\"");
  };
  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "Accuracy and confusion of a descriptor set, as JSON");
  add_eval_options(evaluate, eval_args);
  EvaluateArgs fb_args;
  auto* feedback = app.add_subcommand("feedback", "The feedback text an LLM prompt embeds, then JSON");
  add_eval_options(feedback, fb_args);

  EmbedMockArgs mock;
  auto* embed_mock = app.add_subcommand("embed-mock", "Write synthetic text and image archives");
  embed_mock->add_option("--classes", mock.classes, "Class list file")->required();
  embed_mock->add_option("--descriptors", mock.descriptors, "Descriptor set JSON or \"none\"")->capture_default_str();
  embed_mock->add_option("--dimension", mock.dimension)->capture_default_str();
  embed_mock->add_option("--images-per-class", mock.images_per_class)->capture_default_str();
  embed_mock->add_option("--sigma", mock.sigma, "Gaussian noise per coordinate")->capture_default_str();
  embed_mock->add_option("--seed", mock.seed)->capture_default_str();
  embed_mock->add_option("--out", mock.out, "Output directory")->required();
  embed_mock->add_flag("--photo-prefix", mock.photo_prefix);

  EmbedTextsArgs texts;
  auto* embed_texts = app.add_subcommand("embed-texts", "Embed a class<TAB>prompt list into an EMB1 archive");
  embed_texts->add_option("--prompts", texts.prompts)->required();
  embed_texts->add_option("--out", texts.out)->required();
  embed_texts->add_option("--model", texts.model)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // help requests exit 0; anything else is a usage error
    return app.exit(e, out, err) == 0 ? kOk : kConfigError;
  }

  try {
    if (*optimize) return cmd_optimize(opt, out, err);
    if (*evaluate) return cmd_evaluate(eval_args, out);
    if (*feedback) return cmd_feedback(fb_args, out);
    if (*embed_mock) return cmd_embed_mock(mock, out);
    if (*embed_texts) return cmd_embed_texts(texts, err);
  } catch (const ConfigError& e) {
    err << "descevo: config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ProviderError& e) {
    err << "descevo: provider error: " << e.what() << "\n";
    return kProviderError;
  } catch (const std::exception& e) {
    err << "descevo: data error: " << e.what() << "\n";
    return kDataError;
  }
  return kConfigError;
}

}  // namespace descevo::cli
