#include "tide/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "parallel.hpp"
#include "tide/corpus.hpp"
#include "tide/rng.hpp"

namespace tide {

void CalibrationConfig::validate() const {
  if (checkpoint_interval < 1) throw ConfigError("interval must be >= 1");
  if (!(tau > 0.0f && tau < 1.0f)) {
    throw ConfigError("tau must be in (0, 1), got " + std::to_string(tau));
  }
  if (bottleneck < 0) throw ConfigError("bottleneck must be >= 1 (or 0 for the default)");
  if (!(learning_rate > 0.0f)) throw ConfigError("learning rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(adam_beta1 >= 0.0f && adam_beta1 < 1.0f) || !(adam_beta2 >= 0.0f && adam_beta2 < 1.0f)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0f)) throw ConfigError("adam eps must be > 0");
}

int default_bottleneck(int hidden_dim) { return std::max(1, std::min(128, hidden_dim / 2)); }

int CalibrationConfig::resolved_bottleneck(int hidden_dim) const {
  return bottleneck > 0 ? bottleneck : default_bottleneck(hidden_dim);
}

std::vector<int> checkpoint_layers(int num_layers, int interval, bool include_final_layer) {
  if (interval < 1) throw ConfigError("interval must be >= 1");
  const int limit = include_final_layer ? num_layers : num_layers - 1;
  std::vector<int> out;
  for (int layer = interval - 1; layer < limit; layer += interval) out.push_back(layer);
  return out;
}

// ---------------------------------------------------------------- step 1

HiddenStates collect_hidden_states(const ReferenceModel& model,
                                   const std::vector<std::string>& corpus,
                                   const CalibrationConfig& config) {
  if (corpus.empty()) throw std::invalid_argument("calibration corpus is empty");
  const ModelConfig& mc = model.config();
  const auto d = static_cast<std::size_t>(mc.hidden_dim);
  const auto max_len = static_cast<std::size_t>(mc.max_seq_len);

  HiddenStates out;
  out.layers = checkpoint_layers(mc.num_layers, config.checkpoint_interval,
                                 config.include_final_layer);
  out.corpus_digest = corpus_digest(corpus);

  // Documents longer than the context are split into independent chunks.
  struct Chunk {
    std::size_t doc, begin, end;
  };
  std::vector<std::vector<int>> tokens(corpus.size());
  std::vector<Chunk> chunks;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    tokens[i] = tokenize_bytes(corpus[i]);
    if (tokens[i].empty()) {
      throw std::invalid_argument("corpus document " + std::to_string(i) + " is empty");
    }
    for (std::size_t b = 0; b < tokens[i].size(); b += max_len) {
      chunks.push_back({i, b, std::min(tokens[i].size(), b + max_len)});
    }
  }

  // Per chunk: rows of each checkpoint layer followed by the final layer.
  const std::size_t n_layers = out.layers.size();
  std::vector<std::vector<Tensor>> per_chunk(chunks.size());
  detail::parallel_for(chunks.size(), config.threads, [&](std::size_t c) {
    const Chunk& ch = chunks[c];
    KVCache cache = model.new_cache();
    std::span<const int> span(tokens[ch.doc].data() + ch.begin, ch.end - ch.begin);
    ForwardOutput fwd = model.forward(span, cache, /*capture_hidden=*/true);
    std::vector<Tensor>& slot = per_chunk[c];
    // Copies: the last checkpoint may be the final layer itself.
    for (int layer : out.layers) slot.push_back(fwd.hidden_states[layer + 1]);
    slot.push_back(std::move(fwd.hidden_states[mc.num_layers]));
  });

  std::size_t total = 0;
  for (const auto& ch : chunks) total += ch.end - ch.begin;
  out.token_count = total;
  out.at_checkpoint.assign(n_layers, Tensor({total, d}));
  out.final_layer = Tensor({total, d});
  std::size_t row = 0;
  for (const auto& slot : per_chunk) {
    const std::size_t n = slot.back().rows();
    for (std::size_t l = 0; l <= n_layers; ++l) {
      Tensor& dst = l < n_layers ? out.at_checkpoint[l] : out.final_layer;
      std::copy(slot[l].data().begin(), slot[l].data().end(), dst.row(row).begin());
    }
    row += n;
  }
  return out;
}

// ---------------------------------------------------------------- step 2

std::size_t LayerDataset::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

std::vector<std::uint8_t> convergence_labels(std::span<const float> similarity, float tau) {
  std::vector<std::uint8_t> out(similarity.size());
  for (std::size_t i = 0; i < similarity.size(); ++i) out[i] = similarity[i] > tau ? 1 : 0;
  return out;
}

CalibrationDataset compute_labels(HiddenStates hidden, float tau) {
  CalibrationDataset ds;
  ds.token_count = hidden.token_count;
  ds.corpus_digest = hidden.corpus_digest;
  ds.tau = tau;
  for (std::size_t l = 0; l < hidden.layers.size(); ++l) {
    LayerDataset layer;
    layer.layer = hidden.layers[l];
    layer.hidden = std::move(hidden.at_checkpoint[l]);
    if (layer.hidden.rows() != hidden.final_layer.rows()) {
      throw ShapeError("checkpoint and final hidden states have different token counts");
    }
    layer.similarity.resize(layer.hidden.rows());
    for (std::size_t i = 0; i < layer.hidden.rows(); ++i) {
      if (auto s = cosine_similarity(layer.hidden.row(i), hidden.final_layer.row(i))) {
        layer.similarity[i] = *s;
      } else {
        layer.similarity[i] = 0.0f;
        ++layer.zero_norm_count;
      }
    }
    // A zero-norm pair gets similarity 0 and therefore label 0 for any tau in (0, 1).
    layer.labels = convergence_labels(layer.similarity, tau);
    ds.layers.push_back(std::move(layer));
  }
  return ds;
}

// ---------------------------------------------------------------- step 3

namespace {

float silu_grad(float z) {
  const float s = sigmoid(z);
  return s + z * s * (1.0f - s);
}

// log(1 + e^x) without overflow.
float softplus(float x) { return std::max(x, 0.0f) + std::log1p(std::exp(-std::abs(x))); }

// Router state during training. W_down is kept transposed ([d×b]) so both
// the forward product and the gradient update are contiguous over b.
struct RouterParams {
  std::size_t d = 0, b = 0;
  std::vector<float> w_down_t;  // [d×b]
  std::vector<float> w_up;      // [b]

  static RouterParams from(const Router& r) {
    RouterParams p;
    p.d = r.hidden_dim();
    p.b = r.bottleneck();
    p.w_down_t.resize(p.d * p.b);
    for (std::size_t j = 0; j < p.b; ++j) {
      for (std::size_t i = 0; i < p.d; ++i) p.w_down_t[i * p.b + j] = r.w_down.at(j, i);
    }
    p.w_up.assign(r.w_up.data().begin(), r.w_up.data().end());
    return p;
  }

  Router to_router(int layer) const {
    Tensor wd({b, d});
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t i = 0; i < d; ++i) wd.at(j, i) = w_down_t[i * b + j];
    }
    return Router(layer, std::move(wd), Tensor({1, b}, w_up));
  }
};

struct Scratch {
  std::vector<float> z, a, dz;
  explicit Scratch(std::size_t b) : z(b), a(b), dz(b) {}
};

// Logit for one normalized feature row; leaves z and SiLU(z) in scratch.
float forward_row(const RouterParams& p, const float* x, Scratch& s) {
  std::fill(s.z.begin(), s.z.end(), 0.0f);
  for (std::size_t i = 0; i < p.d; ++i) {
    const float xi = x[i];
    const float* w = &p.w_down_t[i * p.b];
    for (std::size_t j = 0; j < p.b; ++j) s.z[j] += xi * w[j];
  }
  float logit = 0.0f;
  for (std::size_t j = 0; j < p.b; ++j) {
    s.a[j] = silu(s.z[j]);
    logit += p.w_up[j] * s.a[j];
  }
  return logit;
}

// Accumulates the gradient of the mean BCE over `rows` into grad_*; returns
// the mean loss over those rows.
float accumulate_gradients(const RouterParams& p, const Tensor& features,
                           std::span<const std::uint8_t> labels,
                           std::span<const std::size_t> rows, std::vector<float>& grad_down_t,
                           std::vector<float>& grad_up, Scratch& s) {
  std::fill(grad_down_t.begin(), grad_down_t.end(), 0.0f);
  std::fill(grad_up.begin(), grad_up.end(), 0.0f);
  const float inv_n = 1.0f / static_cast<float>(rows.size());
  float loss = 0.0f;
  for (std::size_t r : rows) {
    const float* x = features.row(r).data();
    const float y = labels[r] ? 1.0f : 0.0f;
    const float logit = forward_row(p, x, s);
    loss += softplus(logit) - y * logit;
    const float g = (sigmoid(logit) - y) * inv_n;
    for (std::size_t j = 0; j < p.b; ++j) {
      grad_up[j] += g * s.a[j];
      s.dz[j] = g * p.w_up[j] * silu_grad(s.z[j]);
    }
    for (std::size_t i = 0; i < p.d; ++i) {
      const float xi = x[i];
      float* gw = &grad_down_t[i * p.b];
      for (std::size_t j = 0; j < p.b; ++j) gw[j] += xi * s.dz[j];
    }
  }
  return loss * inv_n;
}

Router init_router(int layer, std::size_t d, std::size_t b, SplitMix64& rng) {
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer init.
  Tensor wd({b, d}), wu({1, b});
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bu = 1.0 / std::sqrt(static_cast<double>(b));
  for (float& v : wd.data()) v = static_cast<float>(rng.uniform(-bd, bd));
  for (float& v : wu.data()) v = static_cast<float>(rng.uniform(-bu, bu));
  return Router(layer, std::move(wd), std::move(wu));
}

}  // namespace

RouterGradients router_gradients(const Router& router, const Tensor& hidden,
                                 std::span<const std::uint8_t> labels, float eps) {
  if (hidden.rows() != labels.size() || hidden.rows() == 0) {
    throw ShapeError("router_gradients: need one label per hidden row");
  }
  const Tensor features = rmsnorm(hidden, eps);
  const RouterParams p = RouterParams::from(router);
  std::vector<std::size_t> rows(hidden.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::vector<float> gd(p.d * p.b), gu(p.b);
  Scratch s(p.b);
  RouterGradients out;
  out.loss = accumulate_gradients(p, features, labels, rows, gd, gu, s);

  RouterParams grad = p;
  grad.w_down_t = std::move(gd);
  grad.w_up = std::move(gu);
  Router g = grad.to_router(router.layer);
  out.w_down = std::move(g.w_down);
  out.w_up = std::move(g.w_up);
  return out;
}

TrainedRouter train_router(int layer, const Tensor& hidden, std::span<const std::uint8_t> labels,
                           const CalibrationConfig& config, float eps) {
  config.validate();
  if (hidden.rows() == 0) throw std::invalid_argument("train_router: empty dataset");
  if (hidden.rows() != labels.size()) throw ShapeError("train_router: label count mismatch");

  const std::size_t n = hidden.rows();
  const std::size_t d = hidden.cols();
  const auto b = static_cast<std::size_t>(config.resolved_bottleneck(static_cast<int>(d)));
  SplitMix64 rng(config.seed ^ static_cast<std::uint64_t>(layer));

  const Tensor features = rmsnorm(hidden, eps);
  RouterParams p = RouterParams::from(init_router(layer, d, b, rng));

  std::vector<float> gd(d * b), gu(b);
  std::vector<float> m_down(d * b, 0.0f), v_down(d * b, 0.0f), m_up(b, 0.0f), v_up(b, 0.0f);
  Scratch s(b);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  const float beta1 = config.adam_beta1, beta2 = config.adam_beta2;
  const float lr = config.learning_rate, adam_eps = config.adam_eps;
  float beta1_t = 1.0f, beta2_t = 1.0f;
  auto adam = [&](std::vector<float>& w, const std::vector<float>& g, std::vector<float>& m,
                  std::vector<float>& v, float bc1, float bc2) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + adam_eps);
    }
  };

  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t start = 0, step = 0; start < n; start += batch, ++step) {
      std::span<const std::size_t> rows(order.data() + start, std::min(batch, n - start));
      const float loss = accumulate_gradients(p, features, labels, rows, gd, gu, s);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite loss training router at layer " << layer << " (lr=" << lr
           << ", batch=" << step << ", epoch=" << epoch << ")";
        throw TrainingError(os.str());
      }
      beta1_t *= beta1;
      beta2_t *= beta2;
      adam(p.w_down_t, gd, m_down, v_down, 1.0f - beta1_t, 1.0f - beta2_t);
      adam(p.w_up, gu, m_up, v_up, 1.0f - beta1_t, 1.0f - beta2_t);
    }
  }

  TrainedRouter out;
  out.stats.layer = layer;
  out.stats.examples = n;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const float logit = forward_row(p, features.row(r).data(), s);
    const float y = labels[r] ? 1.0f : 0.0f;
    loss_sum += softplus(logit) - y * logit;
    if ((sigmoid(logit) > 0.5f) == (labels[r] != 0)) ++correct;
    out.stats.positives += labels[r] ? 1 : 0;
  }
  out.stats.final_loss = static_cast<float>(loss_sum / static_cast<double>(n));
  out.stats.accuracy = static_cast<float>(static_cast<double>(correct) / static_cast<double>(n));
  out.stats.single_class = out.stats.positives == 0 || out.stats.positives == n;
  if (!std::isfinite(out.stats.final_loss)) {
    throw TrainingError("non-finite final loss for router at layer " + std::to_string(layer));
  }
  out.router = p.to_router(layer);
  return out;
}

RouterBank build_bank(const ReferenceModel& model, const CalibrationConfig& config,
                      std::vector<TrainedRouter> trained) {
  const ModelConfig& mc = model.config();
  RouterBank bank;
  bank.hidden_dim = static_cast<std::uint32_t>(mc.hidden_dim);
  bank.bottleneck = static_cast<std::uint32_t>(config.resolved_bottleneck(mc.hidden_dim));
  bank.interval = static_cast<std::uint32_t>(config.checkpoint_interval);
  bank.tau = config.tau;
  bank.eps = kRmsNormEps;
  bank.num_layers = static_cast<std::uint32_t>(mc.num_layers);
  bank.includes_final_layer = config.include_final_layer;
  bank.model_digest = mc.digest();
  std::sort(trained.begin(), trained.end(),
            [](const TrainedRouter& a, const TrainedRouter& b) { return a.router.layer < b.router.layer; });
  for (auto& t : trained) {
    bank.routers.push_back(std::move(t.router));
    bank.stats.push_back(t.stats);
  }
  bank.validate();
  return bank;
}

RouterBank calibrate(const ReferenceModel& model, const std::vector<std::string>& corpus,
                     const CalibrationConfig& config) {
  config.validate();
  CalibrationDataset ds = compute_labels(collect_hidden_states(model, corpus, config), config.tau);
  std::vector<TrainedRouter> trained(ds.layers.size());
  detail::parallel_for(ds.layers.size(), config.threads, [&](std::size_t i) {
    const LayerDataset& layer = ds.layers[i];
    trained[i] = train_router(layer.layer, layer.hidden, layer.labels, config);
  });
  return build_bank(model, config, std::move(trained));
}

}  // namespace tide
