#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tide/bank.hpp"
#include "tide/model.hpp"
#include "tide/router_ops.hpp"
#include "tide/tensor.hpp"

namespace tide {

struct CalibrationConfig {
  int checkpoint_interval = 4;
  float tau = 0.98f;
  int bottleneck = 0;  // 0 selects default_bottleneck(hidden_dim)
  float learning_rate = 1e-3f;
  int epochs = 100;
  int batch_size = 1024;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  std::uint64_t seed = 0;
  // Also place a router on the last layer (index L-1) when the interval hits it.
  bool include_final_layer = true;
  int threads = 1;

  // Throws ConfigError naming the violated bound.
  void validate() const;
  int resolved_bottleneck(int hidden_dim) const;
};

/// min(128, d/2), at least 1.
int default_bottleneck(int hidden_dim);

/// Layers {c-1, 2c-1, ...} below L-1, or up to and including L-1 when
/// include_final_layer is set.
std::vector<int> checkpoint_layers(int num_layers, int interval, bool include_final_layer);

/// Per-token hidden vectors at each checkpoint layer and at the final layer.
struct HiddenStates {
  std::vector<int> layers;
  std::vector<Tensor> at_checkpoint;  // one [tokens×d] tensor per layer
  Tensor final_layer;                 // [tokens×d]
  std::size_t token_count = 0;
  std::uint64_t corpus_digest = 0;
};

HiddenStates collect_hidden_states(const ReferenceModel& model,
                                   const std::vector<std::string>& corpus,
                                   const CalibrationConfig& config);

struct LayerDataset {
  int layer = 0;
  Tensor hidden;                   // [tokens×d]
  std::vector<float> similarity;   // cosine to the final layer, 0 for zero-norm pairs
  std::vector<std::uint8_t> labels;
  std::size_t zero_norm_count = 0;

  std::size_t positives() const;
};

struct CalibrationDataset {
  std::vector<LayerDataset> layers;
  std::size_t token_count = 0;
  std::uint64_t corpus_digest = 0;
  float tau = 0.0f;
};

/// label = 1 iff similarity > tau (strict).
std::vector<std::uint8_t> convergence_labels(std::span<const float> similarity, float tau);

CalibrationDataset compute_labels(HiddenStates hidden, float tau);

struct RouterGradients {
  Tensor w_down;  // [b×d]
  Tensor w_up;    // [1×b]
  float loss = 0.0f;  // mean binary cross-entropy
};

/// Mean BCE over (hidden, labels) and its analytic gradient. The RMSNorm of
/// the input is a constant feature: no gradient flows into it.
RouterGradients router_gradients(const Router& router, const Tensor& hidden,
                                 std::span<const std::uint8_t> labels, float eps);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainedRouter {
  Router router;
  RouterStats stats;
};

/// Adam on mean BCE for config.epochs passes over seeded, per-epoch shuffled
/// mini-batches. Seed for this router is config.seed ^ layer.
TrainedRouter train_router(int layer, const Tensor& hidden, std::span<const std::uint8_t> labels,
                           const CalibrationConfig& config, float eps = kRmsNormEps);

/// Collect, label and train: one router per checkpoint layer.
RouterBank calibrate(const ReferenceModel& model, const std::vector<std::string>& corpus,
                     const CalibrationConfig& config);

RouterBank build_bank(const ReferenceModel& model, const CalibrationConfig& config,
                      std::vector<TrainedRouter> trained);

}  // namespace tide
