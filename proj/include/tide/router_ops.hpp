#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tide/tensor.hpp"

namespace tide {

/// Bottleneck convergence router: score(h) = σ(W_up · SiLU(W_down · RMSNorm(h))).
/// The norm carries no gain, so the parameter count is d·b + b.
struct Router {
  int layer = 0;
  Tensor w_down;  // [b×d]
  Tensor w_up;    // [1×b]

  Router() = default;
  Router(int layer, Tensor w_down, Tensor w_up);

  std::size_t hidden_dim() const { return w_down.cols(); }
  std::size_t bottleneck() const { return w_down.rows(); }
  std::size_t parameter_count() const { return w_down.size() + w_up.size(); }

  bool operator==(const Router& other) const {
    return layer == other.layer && w_down == other.w_down && w_up == other.w_up;
  }
};

/// Single pass per row: norm statistics inline, a running accumulator over
/// the bottleneck, no batch-sized intermediates. Returns one score per row.
Tensor fused_layernorm_route(const Tensor& h, const Router& router, float eps);

/// The same scores through explicit rmsnorm → linear → silu → linear → sigmoid.
Tensor route_scores(const Tensor& h, const Router& router, float eps);

struct CompactionResult {
  Tensor continuing;  // [n_cont×d]
  Tensor exiting;     // [n_exit×d]
  std::vector<std::size_t> continuing_index;
  std::vector<std::size_t> exiting_index;
};

enum class CompactStrategy {
  Auto,       // SmallBatch up to kCompactSmallBatchLimit rows, PrefixSum above
  SmallBatch, // 32-row ballot words with popcount offsets
  PrefixSum,  // exclusive scan of the mask, then scatter
};

inline constexpr std::size_t kCompactSmallBatchLimit = 32;

/// Stable partition of rows into continuing (mask 0) and exiting (mask 1).
CompactionResult batch_compact(const Tensor& h, std::span<const std::uint8_t> exit_mask,
                               CompactStrategy strategy = CompactStrategy::Auto);

/// out[positions[j]] = exited[j]. Positions must be strictly increasing and
/// in range; nothing is written if validation fails.
void exit_scatter(const Tensor& exited, std::span<const std::size_t> positions, Tensor& out);

/// out[positions[j]] = rmsnorm(exited[j]) * gain, in one pass per row.
void exit_projection(const Tensor& exited, std::span<const float> gain, float eps,
                     std::span<const std::size_t> positions, Tensor& out);

}  // namespace tide
