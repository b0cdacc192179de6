#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unistd.h>

#include "descevo/archive.hpp"
#include "descevo/error.hpp"
#include "descevo/mock_embed.hpp"

namespace descevo {

/// Rendered prompt -> unit vector.
using EmbeddingTable = std::unordered_map<std::string, Embedding>;

struct PromptRequest {
  ClassLabel cls;
  std::string prompt;
};

/// Cache of text embeddings with an optional backend for prompts it has not seen.
///
/// Archive-backed stores cannot embed anything new; a miss is a DataError.
/// ensure() is serialized internally, but it must not run concurrently with
/// readers of table().
class TextEmbedder {
 public:
  using Backend = std::function<std::vector<Embedding>(std::span<const PromptRequest>)>;

  static TextEmbedder from_archive(const EmbeddingArchive& archive) {
    TextEmbedder e;
    e.dimension_ = archive.dimension;
    for (const auto& r : archive.records) e.table_.try_emplace(r.key, r.vector);
    e.description_ = "archive";
    return e;
  }

  static TextEmbedder mock(std::size_t dimension) {
    TextEmbedder e;
    e.dimension_ = static_cast<std::uint32_t>(dimension);
    e.backend_ = [dimension](std::span<const PromptRequest> prompts) {
      std::vector<Embedding> out;
      out.reserve(prompts.size());
      for (const auto& p : prompts) out.push_back(mock_embed(p.prompt, dimension));
      return out;
    };
    e.description_ = "mock:" + std::to_string(dimension);
    return e;
  }

  /// Runs `command --prompts LIST --out ARCHIVE` for every batch of unseen prompts.
  /// LIST holds one "class<TAB>prompt" line per prompt; ARCHIVE must be EMB1 keyed by prompt.
  static TextEmbedder external_command(std::string command) {
    TextEmbedder e;
    e.backend_ = [command](std::span<const PromptRequest> prompts) {
      return run_embed_command(command, prompts);
    };
    e.description_ = "command:" + command;
    return e;
  }

  static TextEmbedder custom(Backend backend, std::string description = "custom") {
    TextEmbedder e;
    e.backend_ = std::move(backend);
    e.description_ = std::move(description);
    return e;
  }

  TextEmbedder(TextEmbedder&& other) noexcept
      : table_(std::move(other.table_)),
        backend_(std::move(other.backend_)),
        dimension_(other.dimension_),
        description_(std::move(other.description_)) {}

  /// Makes sure every prompt has an embedding.
  void ensure(std::span<const PromptRequest> prompts) {
    std::lock_guard lock(mutex_);
    std::vector<PromptRequest> missing;
    std::unordered_map<std::string, bool> queued;
    for (const auto& p : prompts) {
      if (table_.count(p.prompt) == 0 && queued.emplace(p.prompt, true).second) missing.push_back(p);
    }
    if (missing.empty()) return;
    if (!backend_) {
      throw DataError("no text embedding for prompt \"" + missing.front().prompt + "\"" +
                      (missing.size() > 1 ? " (and " + std::to_string(missing.size() - 1) + " more)" : ""));
    }
    auto vectors = backend_(missing);
    if (vectors.size() != missing.size()) {
      throw DataError("text embedder returned " + std::to_string(vectors.size()) + " vectors for " +
                      std::to_string(missing.size()) + " prompts");
    }
    for (std::size_t i = 0; i < missing.size(); ++i) {
      auto& v = vectors[i];
      if (!dimension_) dimension_ = static_cast<std::uint32_t>(v.size());
      if (v.size() != *dimension_) {
        throw DataError("text embedding for \"" + missing[i].prompt + "\" has dimension " +
                        std::to_string(v.size()) + ", expected " + std::to_string(*dimension_));
      }
      normalize_embedding(v, missing[i].prompt);
      table_.emplace(missing[i].prompt, std::move(v));
    }
  }

  const EmbeddingTable& table() const noexcept { return table_; }
  std::optional<std::uint32_t> dimension() const noexcept { return dimension_; }
  const std::string& description() const noexcept { return description_; }

 private:
  TextEmbedder() = default;

  static std::vector<Embedding> run_embed_command(const std::string& command,
                                                  std::span<const PromptRequest> prompts) {
    static std::atomic<unsigned> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("descevo-embed-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
    const auto list = dir / "prompts.tsv";
    const auto archive_path = dir / "texts.emb";
    std::string body;
    for (const auto& p : prompts) body += p.cls.str() + "\t" + p.prompt + "\n";
    write_text_file(list, body);

    const std::string full = command + " --prompts '" + list.string() + "' --out '" + archive_path.string() + "'";
    const int status = std::system(full.c_str());
    if (status != 0) {
      std::filesystem::remove_all(dir);
      throw DataError("text embedding command failed (status " + std::to_string(status) + "): " + full);
    }
    EmbeddingArchive archive = read_archive(archive_path);
    std::filesystem::remove_all(dir);

    std::unordered_map<std::string, const Embedding*> by_key;
    for (const auto& r : archive.records) by_key.try_emplace(r.key, &r.vector);
    std::vector<Embedding> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) {
      auto it = by_key.find(p.prompt);
      if (it == by_key.end()) throw DataError("text embedding command did not embed \"" + p.prompt + "\"");
      out.push_back(*it->second);
    }
    return out;
  }

  EmbeddingTable table_;
  Backend backend_;
  std::optional<std::uint32_t> dimension_;
  std::string description_;
  std::mutex mutex_;
};

}  // namespace descevo
