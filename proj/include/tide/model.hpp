#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tide/tensor.hpp"

namespace tide {

inline constexpr float kRmsNormEps = 1e-6f;
inline constexpr float kRopeBase = 10000.0f;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int num_layers = 12;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 256;
  int max_seq_len = 512;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden_dim / num_heads; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  // Canonical key=value text, one key per line in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  std::uint64_t digest() const;

  bool operator==(const ModelConfig&) const = default;
};

ModelConfig load_model_config(const std::filesystem::path& path);
void save_model_config(const ModelConfig& config, const std::filesystem::path& path);

struct BlockWeights {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d×d]
  Tensor ffn_norm;  // [d]
  Tensor w_gate, w_up;  // [ffn×d]
  Tensor w_down;  // [d×ffn]
};

/// Per-layer key/value storage for incremental decoding. Keys are stored
/// after rotary embedding. Layout per layer: [heads × max_seq × head_dim].
class KVCache {
 public:
  KVCache() = default;
  explicit KVCache(const ModelConfig& config);

  // Tokens processed so far; throws if layers disagree.
  std::size_t length() const;
  std::size_t layer_length(std::size_t layer) const { return lengths_.at(layer); }
  std::size_t num_layers() const { return lengths_.size(); }
  std::size_t capacity() const { return max_seq_; }

  std::span<float> keys(std::size_t layer, std::size_t head, std::size_t pos);
  std::span<float> values(std::size_t layer, std::size_t head, std::size_t pos);
  std::span<const float> keys(std::size_t layer, std::size_t head, std::size_t pos) const;
  std::span<const float> values(std::size_t layer, std::size_t head, std::size_t pos) const;

  // Filled contents of one layer ([heads × length × head_dim], flattened).
  std::vector<float> layer_keys(std::size_t layer) const;
  std::vector<float> layer_values(std::size_t layer) const;

  void advance(std::size_t layer, std::size_t n) { lengths_.at(layer) += n; }

  bool contents_equal(const KVCache& other) const;

 private:
  std::size_t offset(std::size_t head, std::size_t pos) const {
    return (head * max_seq_ + pos) * head_dim_;
  }

  std::size_t heads_ = 0, head_dim_ = 0, max_seq_ = 0;
  std::vector<std::vector<float>> k_, v_;
  std::vector<std::size_t> lengths_;
};

struct ForwardOutput {
  Tensor logits;  // [seq×vocab]
  // Empty unless hidden states were captured. Index 0 is the raw embedding
  // output; index k+1 is the output of layer k.
  std::vector<Tensor> hidden_states;
};

class ReferenceModel {
 public:
  // Deterministic construction from config.seed; throws ConfigError on invalid config.
  explicit ReferenceModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Tensor& embedding() const { return embedding_; }
  const std::vector<BlockWeights>& blocks() const { return blocks_; }
  const Tensor& final_norm() const { return final_norm_; }
  const Tensor& lm_head() const { return lm_head_; }

  KVCache new_cache() const { return KVCache(config_); }

  /// Runs the new tokens through every layer, attending over the cache, and
  /// extends the cache by tokens.size() at every layer.
  ForwardOutput forward(std::span<const int> tokens, KVCache& cache, bool capture_hidden) const;

  /// Final norm followed by the LM head, applied to any layer's hidden states.
  Tensor lm_head_from_hidden(const Tensor& hidden) const;
  // lm_head applied to rows that are already final-normed.
  Tensor project_normed(const Tensor& normed) const;

  // Writes/reads every weight tensor into a CRC-protected container.
  void save_weights(const std::filesystem::path& path) const;
  static ReferenceModel load_weights(const std::filesystem::path& path);

  bool weights_equal(const ReferenceModel& other) const;

 private:
  ReferenceModel() = default;
  void apply_rotary(std::span<float> vec, std::size_t pos) const;
  void prepare();
  std::vector<Tensor*> weight_list();
  std::vector<const Tensor*> weight_list() const;

  ModelConfig config_;
  Tensor embedding_;
  std::vector<BlockWeights> blocks_;
  Tensor final_norm_;
  Tensor lm_head_;

  // Derived from the weights above by prepare(): transposed copies ([in×out])
  // so every projection runs as a contiguous matmul, and rotary tables.
  struct Packed {
    Tensor wq, wk, wv, wo, w_gate, w_up, w_down;
  };
  std::vector<Packed> packed_;
  Tensor lm_head_t_;
  std::vector<float> rope_cos_, rope_sin_;  // [max_seq_len × head_dim/2]
};

inline ReferenceModel build_model(const ModelConfig& config) { return ReferenceModel(config); }

// Byte-level tokenizer: vocab 256.
std::vector<int> tokenize_bytes(std::string_view text);
std::string detokenize_bytes(std::span<const int> tokens);

}  // namespace tide
