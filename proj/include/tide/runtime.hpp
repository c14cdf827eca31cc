#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tide/bank.hpp"
#include "tide/model.hpp"
#include "tide/tensor.hpp"

namespace tide {

enum class ExitMode {
  PerToken,        // each row takes its own earliest passing checkpoint
  BatchUnanimous,  // the batch exits at the first checkpoint every row passes
};

const char* to_string(ExitMode mode);
ExitMode exit_mode_from_string(const std::string& s);

struct RuntimeConfig {
  float theta = 0.85f;  // exits need score > theta; 1.0 disables them
  int k_min = 0;
  ExitMode mode = ExitMode::PerToken;  // applied to prefill; decode rows are batches of one
  int max_new_tokens = 256;
  float temperature = 0.0f;  // 0 = greedy
  std::uint64_t seed = 0;    // sampling only

  void validate() const;
};

// Histogram key for tokens whose logits came from the full forward pass.
inline constexpr int kNoExit = -1;

struct ExitReport {
  std::vector<int> exit_layers;  // per token: checkpoint layer, or kNoExit
  std::map<int, std::size_t> histogram;
  std::optional<std::size_t> unique_output_tokens;

  void record(int layer);
  void merge(const ExitReport& other);

  std::size_t tokens_total() const { return exit_layers.size(); }
  std::size_t exited() const;
  // Fraction of tokens whose logits came from a checkpoint layer.
  double exit_rate() const;
};

struct SelectionResult {
  Tensor logits;  // [seq×vocab]
  ExitReport report;
};

/// Post-hoc exit selection over a completed forward pass. Scores checkpoints
/// in ascending order (skipping layers below k_min) on H[k+1]; exiting rows
/// take lm_head(final_norm(H[k+1])), the rest keep the final logits.
/// `bank` may be null, in which case nothing exits.
SelectionResult posthoc_select(const ReferenceModel& model, const ForwardOutput& out,
                               const RouterBank* bank, const RuntimeConfig& config,
                               ExitMode mode);

// Throws std::invalid_argument if the bank was not calibrated for this model's shape.
void check_bank_matches(const ReferenceModel& model, const RouterBank& bank);

struct PrefillResult {
  SelectionResult selection;
  KVCache cache;
};

PrefillResult prefill(const ReferenceModel& model, const RouterBank* bank,
                      std::span<const int> prompt, const RuntimeConfig& config);

struct GenerationResult {
  std::vector<int> output_tokens;
  ExitReport prefill;  // one entry per prompt position
  ExitReport decode;   // one entry per generated token
  KVCache cache;
};

/// Prefill, then decode until max_new_tokens tokens exist. The first token
/// comes from the last prompt position; each later one from a single-token
/// forward that runs every layer and extends the cache.
GenerationResult generate(const ReferenceModel& model, const RouterBank* bank,
                          std::span<const int> prompt, const RuntimeConfig& config);

struct SweepRow {
  float theta = 0.0f;
  ExitReport report;  // prefill accounting over all prompts, in prompt order
};

/// One prefill pass per (theta, prompt); rows sorted by theta descending.
std::vector<SweepRow> sweep_thresholds(const ReferenceModel& model, const RouterBank& bank,
                                       const std::vector<std::vector<int>>& prompts,
                                       std::vector<float> thetas, const RuntimeConfig& base);

/// Bank whose router at `exit_layer` scores near 1 for any nonzero input and
/// whose other routers score near 0. Used as a deterministic exit fixture.
RouterBank make_rigged_bank(const ModelConfig& config, int interval, int exit_layer,
                            std::uint64_t seed, bool include_final_layer = true);

}  // namespace tide
