#include "tide/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "tide/calibration.hpp"
#include "tide/rng.hpp"
#include "tide/router_ops.hpp"

namespace tide {

const char* to_string(ExitMode mode) {
  return mode == ExitMode::PerToken ? "per-token" : "batch-unanimous";
}

ExitMode exit_mode_from_string(const std::string& s) {
  if (s == "per-token") return ExitMode::PerToken;
  if (s == "batch-unanimous") return ExitMode::BatchUnanimous;
  throw std::invalid_argument("unknown exit mode '" + s + "' (per-token | batch-unanimous)");
}

void RuntimeConfig::validate() const {
  if (!(theta > 0.0f && theta <= 1.0f)) {
    throw ConfigError("theta must be in (0, 1], got " + std::to_string(theta));
  }
  if (k_min < 0) throw ConfigError("k_min must be >= 0");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (!(temperature >= 0.0f)) throw ConfigError("temperature must be >= 0");
}

// ---------------------------------------------------------------- report

void ExitReport::record(int layer) {
  exit_layers.push_back(layer);
  ++histogram[layer];
}

void ExitReport::merge(const ExitReport& other) {
  for (int layer : other.exit_layers) record(layer);
}

std::size_t ExitReport::exited() const {
  return static_cast<std::size_t>(
      std::count_if(exit_layers.begin(), exit_layers.end(), [](int l) { return l != kNoExit; }));
}

double ExitReport::exit_rate() const {
  if (exit_layers.empty()) return 0.0;
  return static_cast<double>(exited()) / static_cast<double>(exit_layers.size());
}

// ---------------------------------------------------------------- selection

void check_bank_matches(const ReferenceModel& model, const RouterBank& bank) {
  const ModelConfig& mc = model.config();
  if (bank.hidden_dim != static_cast<std::uint32_t>(mc.hidden_dim) ||
      bank.num_layers != static_cast<std::uint32_t>(mc.num_layers)) {
    throw std::invalid_argument("router bank (d=" + std::to_string(bank.hidden_dim) + ", L=" +
                                std::to_string(bank.num_layers) + ") does not match model (d=" +
                                std::to_string(mc.hidden_dim) + ", L=" +
                                std::to_string(mc.num_layers) + ")");
  }
}

namespace {

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), src.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto s = src.row(rows[i]);
    std::copy(s.begin(), s.end(), out.row(i).begin());
  }
  return out;
}

SelectionResult select_per_token(const ReferenceModel& model, const ForwardOutput& out,
                                 const RouterBank& bank, const RuntimeConfig& config) {
  const std::size_t seq = out.logits.rows();
  const std::size_t d = model.config().hidden_dim;
  std::vector<int> exit_layer(seq, kNoExit);
  std::vector<std::size_t> active(seq);
  std::iota(active.begin(), active.end(), std::size_t{0});

  // Final-normed hidden state of every exiting token, at its original row.
  Tensor normed({seq, d});
  for (const Router& router : bank.routers) {
    if (active.empty()) break;
    if (router.layer < config.k_min) continue;
    const Tensor& h = out.hidden_states.at(router.layer + 1);
    const Tensor rows = gather_rows(h, active);
    const Tensor scores = fused_layernorm_route(rows, router, bank.eps);
    std::vector<std::uint8_t> mask(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) mask[i] = scores.data()[i] > config.theta;

    CompactionResult split = batch_compact(rows, mask);
    std::vector<std::size_t> positions;
    positions.reserve(split.exiting_index.size());
    for (std::size_t j : split.exiting_index) {
      positions.push_back(active[j]);
      exit_layer[active[j]] = router.layer;
    }
    exit_projection(split.exiting, model.final_norm().data(), kRmsNormEps, positions, normed);

    std::vector<std::size_t> still;
    still.reserve(split.continuing_index.size());
    for (std::size_t j : split.continuing_index) still.push_back(active[j]);
    active = std::move(still);
  }

  SelectionResult result;
  result.logits = out.logits;
  std::vector<std::size_t> exited;
  for (std::size_t i = 0; i < seq; ++i) {
    result.report.record(exit_layer[i]);
    if (exit_layer[i] != kNoExit) exited.push_back(i);
  }
  if (!exited.empty()) {
    const Tensor early = model.project_normed(gather_rows(normed, exited));
    exit_scatter(early, exited, result.logits);
  }
  return result;
}

SelectionResult select_unanimous(const ReferenceModel& model, const ForwardOutput& out,
                                 const RouterBank& bank, const RuntimeConfig& config) {
  const std::size_t seq = out.logits.rows();
  for (const Router& router : bank.routers) {
    if (router.layer < config.k_min) continue;
    const Tensor& h = out.hidden_states.at(router.layer + 1);
    const Tensor scores = fused_layernorm_route(h, router, bank.eps);
    const auto d = scores.data();
    if (std::all_of(d.begin(), d.end(), [&](float s) { return s > config.theta; })) {
      SelectionResult result;
      result.logits = model.lm_head_from_hidden(h);
      for (std::size_t i = 0; i < seq; ++i) result.report.record(router.layer);
      return result;
    }
  }
  SelectionResult result;
  result.logits = out.logits;
  for (std::size_t i = 0; i < seq; ++i) result.report.record(kNoExit);
  return result;
}

int choose_token(std::span<const float> logits, float temperature, SplitMix64& rng) {
  if (temperature <= 0.0f) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(static_cast<double>(logits[i] - mx) / temperature);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return static_cast<int>(i);
    u -= w[i];
  }
  return static_cast<int>(w.size() - 1);
}

}  // namespace

SelectionResult posthoc_select(const ReferenceModel& model, const ForwardOutput& out,
                               const RouterBank* bank, const RuntimeConfig& config,
                               ExitMode mode) {
  if (bank == nullptr) {
    SelectionResult result;
    result.logits = out.logits;
    for (std::size_t i = 0; i < out.logits.rows(); ++i) result.report.record(kNoExit);
    return result;
  }
  check_bank_matches(model, *bank);
  if (out.hidden_states.size() != static_cast<std::size_t>(model.config().num_layers) + 1) {
    throw std::invalid_argument("posthoc_select: forward pass did not capture hidden states");
  }
  return mode == ExitMode::PerToken ? select_per_token(model, out, *bank, config)
                                    : select_unanimous(model, out, *bank, config);
}

// ---------------------------------------------------------------- generation

PrefillResult prefill(const ReferenceModel& model, const RouterBank* bank,
                      std::span<const int> prompt, const RuntimeConfig& config) {
  config.validate();
  if (prompt.empty()) throw std::invalid_argument("prompt is empty");
  if (bank != nullptr) check_bank_matches(model, *bank);
  PrefillResult result{SelectionResult{}, model.new_cache()};
  const ForwardOutput out = model.forward(prompt, result.cache, bank != nullptr);
  result.selection = posthoc_select(model, out, bank, config, config.mode);
  return result;
}

GenerationResult generate(const ReferenceModel& model, const RouterBank* bank,
                          std::span<const int> prompt, const RuntimeConfig& config) {
  PrefillResult pre = prefill(model, bank, prompt, config);
  SplitMix64 rng(config.seed);

  GenerationResult result;
  result.prefill = pre.selection.report;
  result.cache = std::move(pre.cache);

  const std::size_t last = pre.selection.logits.rows() - 1;
  Tensor logits({1, pre.selection.logits.cols()});
  std::copy(pre.selection.logits.row(last).begin(), pre.selection.logits.row(last).end(),
            logits.row(0).begin());
  int layer = pre.selection.report.exit_layers[last];

  // Every generated token is fed back, so the cache ends at prompt + N.
  const auto n = static_cast<std::size_t>(config.max_new_tokens);
  while (result.output_tokens.size() < n) {
    const int next = choose_token(logits.row(0), config.temperature, rng);
    result.output_tokens.push_back(next);
    result.decode.record(layer);
    const int fed[1] = {next};
    const bool more = result.output_tokens.size() < n;
    ForwardOutput out = model.forward(fed, result.cache, more && bank != nullptr);
    if (!more) break;
    SelectionResult sel = posthoc_select(model, out, bank, config, ExitMode::BatchUnanimous);
    logits = std::move(sel.logits);
    layer = sel.report.exit_layers[0];
  }
  result.decode.unique_output_tokens =
      std::set<int>(result.output_tokens.begin(), result.output_tokens.end()).size();
  return result;
}

std::vector<SweepRow> sweep_thresholds(const ReferenceModel& model, const RouterBank& bank,
                                       const std::vector<std::vector<int>>& prompts,
                                       std::vector<float> thetas, const RuntimeConfig& base) {
  if (prompts.empty()) throw std::invalid_argument("sweep: no prompts");
  if (thetas.empty()) throw std::invalid_argument("sweep: no thresholds");
  std::sort(thetas.begin(), thetas.end(), std::greater<>());
  std::vector<SweepRow> rows;
  for (float theta : thetas) {
    RuntimeConfig cfg = base;
    cfg.theta = theta;
    SweepRow row;
    row.theta = theta;
    for (const auto& prompt : prompts) {
      row.report.merge(prefill(model, &bank, prompt, cfg).selection.report);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------- fixtures

RouterBank make_rigged_bank(const ModelConfig& config, int interval, int exit_layer,
                            std::uint64_t seed, bool include_final_layer) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto b = static_cast<std::size_t>(default_bottleneck(config.hidden_dim));
  const auto layers = checkpoint_layers(config.num_layers, interval, include_final_layer);
  if (std::find(layers.begin(), layers.end(), exit_layer) == layers.end()) {
    throw std::invalid_argument("rigged exit layer " + std::to_string(exit_layer) +
                                " is not a checkpoint layer");
  }

  // Rows come in pairs (v, -v). SiLU(z) + SiLU(-z) = z·tanh(z/2) >= 0, so
  // the hidden activation sum is positive for any input not orthogonal to
  // every v; the sign of W_up then pins the score near 1 or near 0.
  constexpr double kScale = 4.0;
  SplitMix64 rng(seed);
  RouterBank bank;
  bank.hidden_dim = static_cast<std::uint32_t>(d);
  bank.bottleneck = static_cast<std::uint32_t>(b);
  bank.interval = static_cast<std::uint32_t>(interval);
  bank.tau = 0.98f;
  bank.eps = kRmsNormEps;
  bank.num_layers = static_cast<std::uint32_t>(config.num_layers);
  bank.includes_final_layer = include_final_layer;
  bank.model_digest = config.digest();
  for (int layer : layers) {
    Tensor wd({b, d}), wu({1, b});
    for (std::size_t j = 0; j + 1 < b; j += 2) {
      std::vector<double> v(d);
      double norm = 0.0;
      for (double& x : v) {
        x = rng.normal(0.0, 1.0);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < d; ++i) {
        wd.at(j, i) = static_cast<float>(kScale * v[i] / norm);
        wd.at(j + 1, i) = -wd.at(j, i);
      }
    }
    const float sign = layer == exit_layer ? 1.0f : -1.0f;
    std::fill(wu.data().begin(), wu.data().end(), sign);
    bank.routers.emplace_back(layer, std::move(wd), std::move(wu));
    RouterStats stats;
    stats.layer = layer;
    bank.stats.push_back(stats);
  }
  bank.validate();
  return bank;
}

}  // namespace tide
