#include "tide/router_ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

namespace tide {

Router::Router(int layer_, Tensor w_down_, Tensor w_up_)
    : layer(layer_), w_down(std::move(w_down_)), w_up(std::move(w_up_)) {
  if (w_down.rank() != 2 || w_up.rank() != 2 || w_up.dim(0) != 1 ||
      w_up.dim(1) != w_down.dim(0)) {
    throw ShapeError("router weights inconsistent: W_down " + w_down.shape_string() + ", W_up " +
                     w_up.shape_string());
  }
}

namespace {

void check_router_input(const Tensor& h, const Router& router) {
  if (h.rank() != 2 || h.cols() != router.hidden_dim()) {
    throw ShapeError("router input " + h.shape_string() + " does not match hidden dim " +
                     std::to_string(router.hidden_dim()));
  }
}

void check_positions(std::span<const std::size_t> positions, const Tensor& exited,
                     const Tensor& out) {
  const std::size_t n_rows = out.rows();
  const std::size_t width = out.cols();
  if (exited.rows() != positions.size()) {
    throw ShapeError("exit scatter: " + std::to_string(exited.rows()) + " rows but " +
                     std::to_string(positions.size()) + " positions");
  }
  if (!positions.empty() && exited.cols() != width) {
    throw ShapeError("exit scatter: width " + std::to_string(exited.cols()) + " vs output " +
                     std::to_string(width));
  }
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (positions[j] >= n_rows) {
      throw std::out_of_range("exit scatter: position " + std::to_string(positions[j]) +
                              " outside batch of " + std::to_string(n_rows));
    }
    if (j > 0 && positions[j] <= positions[j - 1]) {
      throw std::invalid_argument("exit scatter: positions must be strictly increasing");
    }
  }
}

}  // namespace

Tensor fused_layernorm_route(const Tensor& h, const Router& router, float eps) {
  check_router_input(h, router);
  const std::size_t b = router.bottleneck();
  const float inv_d = 1.0f / static_cast<float>(router.hidden_dim());
  const std::span<const float> w_up = router.w_up.data();
  Tensor scores({h.rows()});
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto x = h.row(r);
    // W_down · (x·s) == s · (W_down · x), so the norm is folded into one scalar.
    const float inv_rms = 1.0f / std::sqrt(dot(x, x) * inv_d + eps);
    float logit = 0.0f;
    for (std::size_t j = 0; j < b; ++j) {
      logit += w_up[j] * silu(inv_rms * dot(router.w_down.row(j), x));
    }
    scores.data()[r] = sigmoid(logit);
  }
  return scores;
}

Tensor route_scores(const Tensor& h, const Router& router, float eps) {
  check_router_input(h, router);
  const Tensor normed = rmsnorm(h, eps);
  const Tensor hidden = silu(linear(normed, router.w_down));
  const Tensor logits = linear(hidden, router.w_up);
  return Tensor({h.rows()}, sigmoid(logits).values());
}

CompactionResult batch_compact(const Tensor& h, std::span<const std::uint8_t> exit_mask,
                               CompactStrategy strategy) {
  const std::size_t n = h.rows();
  const std::size_t d = h.cols();
  if (exit_mask.size() != n) {
    throw ShapeError("batch_compact: mask length " + std::to_string(exit_mask.size()) +
                     " != batch " + std::to_string(n));
  }
  if (strategy == CompactStrategy::Auto) {
    strategy = n <= kCompactSmallBatchLimit ? CompactStrategy::SmallBatch
                                            : CompactStrategy::PrefixSum;
  }

  // Destination slot for every row, in its own partition.
  std::vector<std::size_t> slot(n);
  std::size_t n_exit = 0;
  if (strategy == CompactStrategy::SmallBatch) {
    // One 32-bit ballot per group of rows; a row's slot is the popcount of
    // the ballot bits below it plus the running total of previous groups.
    std::size_t exit_base = 0, cont_base = 0;
    for (std::size_t g = 0; g < n; g += 32) {
      const std::size_t lanes = std::min<std::size_t>(32, n - g);
      std::uint32_t ballot = 0;
      for (std::size_t lane = 0; lane < lanes; ++lane) {
        if (exit_mask[g + lane]) ballot |= 1u << lane;
      }
      for (std::size_t lane = 0; lane < lanes; ++lane) {
        const std::uint32_t below = lane == 0 ? 0u : (ballot & ((1u << lane) - 1u));
        const std::size_t exits_below = std::popcount(below);
        slot[g + lane] = exit_mask[g + lane] ? exit_base + exits_below
                                             : cont_base + (lane - exits_below);
      }
      const std::size_t group_exits = std::popcount(ballot);
      exit_base += group_exits;
      cont_base += lanes - group_exits;
    }
    n_exit = exit_base;
  } else {
    std::vector<std::size_t> flags(n), scan(n);
    for (std::size_t i = 0; i < n; ++i) flags[i] = exit_mask[i] ? 1 : 0;
    std::exclusive_scan(flags.begin(), flags.end(), scan.begin(), std::size_t{0});
    n_exit = n == 0 ? 0 : scan.back() + flags.back();
    for (std::size_t i = 0; i < n; ++i) slot[i] = flags[i] ? scan[i] : i - scan[i];
  }

  CompactionResult out;
  out.exiting = Tensor({n_exit, d});
  out.continuing = Tensor({n - n_exit, d});
  out.exiting_index.resize(n_exit);
  out.continuing_index.resize(n - n_exit);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = h.row(i);
    if (exit_mask[i]) {
      std::copy(src.begin(), src.end(), out.exiting.row(slot[i]).begin());
      out.exiting_index[slot[i]] = i;
    } else {
      std::copy(src.begin(), src.end(), out.continuing.row(slot[i]).begin());
      out.continuing_index[slot[i]] = i;
    }
  }
  return out;
}

void exit_scatter(const Tensor& exited, std::span<const std::size_t> positions, Tensor& out) {
  check_positions(positions, exited, out);
  for (std::size_t j = 0; j < positions.size(); ++j) {
    auto src = exited.row(j);
    std::copy(src.begin(), src.end(), out.row(positions[j]).begin());
  }
}

void exit_projection(const Tensor& exited, std::span<const float> gain, float eps,
                     std::span<const std::size_t> positions, Tensor& out) {
  check_positions(positions, exited, out);
  if (!gain.empty() && gain.size() != out.cols()) {
    throw ShapeError("exit projection: gain length mismatch");
  }
  for (std::size_t j = 0; j < positions.size(); ++j) {
    rmsnorm_row(exited.row(j), gain, eps, out.row(positions[j]));
  }
}

}  // namespace tide
