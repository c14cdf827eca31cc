#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tide {

enum class NodeKind { Module, ModuleList, Linear, Embedding, Norm };

const char* to_string(NodeKind kind);

/// One attribute in a model's module tree.
struct ManifestNode {
  std::string name;
  NodeKind kind = NodeKind::Module;
  std::optional<std::size_t> rows;   // linear/embedding: out rows; norm: width
  std::optional<std::size_t> cols;
  std::size_t child_count = 0;       // module-list only
  std::vector<ManifestNode> children;

  const ManifestNode* child(std::string_view attr) const;
};

/// Structural description of a model: a root module plus config values.
struct ModelManifest {
  ManifestNode root;
  std::optional<std::size_t> hidden_size;
  std::optional<std::size_t> vocab_size;

  // Resolves a dot-separated attribute path from the root.
  const ManifestNode* find(std::string_view dotted_path) const;

  static ModelManifest parse(std::string_view text);
  static ModelManifest load(const std::filesystem::path& path);
};

class ManifestParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AdapterComponent { Layers, FinalNorm, LmHead, Embedding, HiddenDim };

const char* to_string(AdapterComponent component);

enum class ResolutionMethod { NamedPath, FallbackHeuristic, Custom };

const char* to_string(ResolutionMethod method);

struct AdapterMap {
  std::string layers;
  std::string final_norm;
  std::string lm_head;
  std::string embedding;
  std::size_t hidden_dim = 0;
  std::size_t num_layers = 0;
  std::array<ResolutionMethod, 5> method{};  // indexed by AdapterComponent

  ResolutionMethod method_for(AdapterComponent c) const {
    return method[static_cast<std::size_t>(c)];
  }
  // key=value lines in a fixed order.
  std::string to_text() const;
};

class ProbeError : public std::runtime_error {
 public:
  enum class Reason { Missing, Ambiguous };

  ProbeError(AdapterComponent component, Reason reason, const std::string& detail);

  AdapterComponent component() const { return component_; }
  Reason reason() const { return reason_; }

 private:
  AdapterComponent component_;
  Reason reason_;
};

// Priority-ordered attribute paths searched before any fallback.
inline constexpr std::array<std::string_view, 5> kLayerPaths = {
    "model.layers", "transformer.h", "transformer.layers", "gpt_neox.layers",
    "model.decoder.layers"};
inline constexpr std::array<std::string_view, 5> kFinalNormPaths = {
    "model.norm", "transformer.ln_f", "transformer.final_layernorm",
    "gpt_neox.final_layer_norm", "model.decoder.final_layer_norm"};
inline constexpr std::array<std::string_view, 2> kLmHeadPaths = {"lm_head", "embed_out"};
inline constexpr std::array<std::string_view, 5> kEmbeddingPaths = {
    "model.embed_tokens", "transformer.wte", "transformer.word_embeddings", "gpt_neox.embed_in",
    "model.decoder.embed_tokens"};

/// Built-in resolution: named paths first, then the structural fallbacks.
AdapterMap probe_builtin(const ModelManifest& manifest);

/// A custom resolver returns nullopt for manifests it does not handle.
using AdapterResolver = std::function<std::optional<AdapterMap>(const ModelManifest&)>;

class AdapterRegistry {
 public:
  // Throws std::invalid_argument on a duplicate name.
  void register_adapter(const std::string& name, AdapterResolver resolver);
  bool contains(const std::string& name) const;

  // Custom resolvers in registration order, then the built-in search.
  AdapterMap probe(const ModelManifest& manifest) const;

 private:
  mutable std::mutex mutex_;
  std::vector<std::pair<std::string, AdapterResolver>> resolvers_;
};

AdapterRegistry& default_registry();

inline void register_adapter(const std::string& name, AdapterResolver resolver) {
  default_registry().register_adapter(name, std::move(resolver));
}

inline AdapterMap probe(const ModelManifest& manifest) { return default_registry().probe(manifest); }

}  // namespace tide
