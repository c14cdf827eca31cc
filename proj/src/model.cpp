#include "tide/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "tide/rng.hpp"

namespace tide {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (num_layers < 2) throw ConfigError("num_layers must be >= 2, got " + std::to_string(num_layers));
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even for rotary embedding");
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "num_layers=" << num_layers << '\n'
     << "hidden_dim=" << hidden_dim << '\n'
     << "num_heads=" << num_heads << '\n'
     << "ffn_dim=" << ffn_dim << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "max_seq_len=" << max_seq_len << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("model config line " + std::to_string(lineno) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto take_int = [&](const char* key, int& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      std::size_t used = 0;
      field = std::stoi(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ConfigError(std::string("model config: bad integer for ") + key);
    }
    kv.erase(it);
  };
  take_int("num_layers", c.num_layers);
  take_int("hidden_dim", c.hidden_dim);
  take_int("num_heads", c.num_heads);
  take_int("ffn_dim", c.ffn_dim);
  take_int("vocab_size", c.vocab_size);
  take_int("max_seq_len", c.max_seq_len);
  if (auto it = kv.find("seed"); it != kv.end()) {
    try {
      c.seed = std::stoull(it->second);
    } catch (const std::exception&) {
      throw ConfigError("model config: bad integer for seed");
    }
    kv.erase(it);
  }
  if (!kv.empty()) throw ConfigError("model config: unknown key '" + kv.begin()->first + "'");
  c.validate();
  return c;
}

std::uint64_t ModelConfig::digest() const {
  const std::string text = to_text();
  return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ModelConfig::from_text(ss.str());
}

void save_model_config(const ModelConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write model config " + path.string());
  out << config.to_text();
}

// ---------------------------------------------------------------- cache

KVCache::KVCache(const ModelConfig& config)
    : heads_(config.num_heads),
      head_dim_(config.head_dim()),
      max_seq_(config.max_seq_len),
      k_(config.num_layers, std::vector<float>(heads_ * max_seq_ * head_dim_, 0.0f)),
      v_(config.num_layers, std::vector<float>(heads_ * max_seq_ * head_dim_, 0.0f)),
      lengths_(config.num_layers, 0) {}

std::size_t KVCache::length() const {
  if (lengths_.empty()) return 0;
  const std::size_t n = lengths_.front();
  for (std::size_t l : lengths_) {
    if (l != n) throw std::logic_error("kv cache layers have diverging lengths");
  }
  return n;
}

std::span<float> KVCache::keys(std::size_t layer, std::size_t head, std::size_t pos) {
  return std::span(k_.at(layer)).subspan(offset(head, pos), head_dim_);
}
std::span<float> KVCache::values(std::size_t layer, std::size_t head, std::size_t pos) {
  return std::span(v_.at(layer)).subspan(offset(head, pos), head_dim_);
}
std::span<const float> KVCache::keys(std::size_t layer, std::size_t head, std::size_t pos) const {
  return std::span(k_.at(layer)).subspan(offset(head, pos), head_dim_);
}
std::span<const float> KVCache::values(std::size_t layer, std::size_t head, std::size_t pos) const {
  return std::span(v_.at(layer)).subspan(offset(head, pos), head_dim_);
}

std::vector<float> KVCache::layer_keys(std::size_t layer) const {
  std::vector<float> out;
  for (std::size_t h = 0; h < heads_; ++h) {
    for (std::size_t p = 0; p < lengths_.at(layer); ++p) {
      auto s = keys(layer, h, p);
      out.insert(out.end(), s.begin(), s.end());
    }
  }
  return out;
}

std::vector<float> KVCache::layer_values(std::size_t layer) const {
  std::vector<float> out;
  for (std::size_t h = 0; h < heads_; ++h) {
    for (std::size_t p = 0; p < lengths_.at(layer); ++p) {
      auto s = values(layer, h, p);
      out.insert(out.end(), s.begin(), s.end());
    }
  }
  return out;
}

bool KVCache::contents_equal(const KVCache& other) const {
  if (lengths_ != other.lengths_) return false;
  for (std::size_t l = 0; l < lengths_.size(); ++l) {
    const auto a = layer_keys(l), b = other.layer_keys(l);
    const auto c = layer_values(l), d = other.layer_values(l);
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0) return false;
    if (std::memcmp(c.data(), d.data(), c.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------- model

namespace {

Tensor normal_fill(SplitMix64& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

Tensor ones(std::size_t n) {
  Tensor t({n});
  std::fill(t.data().begin(), t.data().end(), 1.0f);
  return t;
}

}  // namespace

ReferenceModel::ReferenceModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  const auto v = static_cast<std::size_t>(config_.vocab_size);
  const double stddev = 0.02 / std::sqrt(static_cast<double>(config_.num_layers));

  SplitMix64 rng(config_.seed);
  embedding_ = normal_fill(rng, {v, d}, stddev);
  blocks_.resize(config_.num_layers);
  for (auto& b : blocks_) {
    b.attn_norm = ones(d);
    b.wq = normal_fill(rng, {d, d}, stddev);
    b.wk = normal_fill(rng, {d, d}, stddev);
    b.wv = normal_fill(rng, {d, d}, stddev);
    b.wo = normal_fill(rng, {d, d}, stddev);
    b.ffn_norm = ones(d);
    b.w_gate = normal_fill(rng, {f, d}, stddev);
    b.w_up = normal_fill(rng, {f, d}, stddev);
    b.w_down = normal_fill(rng, {d, f}, stddev);
  }
  final_norm_ = ones(d);
  lm_head_ = normal_fill(rng, {v, d}, stddev);

  prepare();
}

namespace {

Tensor transposed(const Tensor& w) {
  Tensor t({w.dim(1), w.dim(0)});
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    for (std::size_t c = 0; c < w.dim(1); ++c) t.at(c, r) = w.at(r, c);
  }
  return t;
}

}  // namespace

void ReferenceModel::prepare() {
  packed_.clear();
  for (const auto& b : blocks_) {
    packed_.push_back({transposed(b.wq), transposed(b.wk), transposed(b.wv), transposed(b.wo),
                       transposed(b.w_gate), transposed(b.w_up), transposed(b.w_down)});
  }
  lm_head_t_ = transposed(lm_head_);

  const std::size_t half = config_.head_dim() / 2;
  const auto max_seq = static_cast<std::size_t>(config_.max_seq_len);
  rope_cos_.resize(max_seq * half);
  rope_sin_.resize(max_seq * half);
  for (std::size_t i = 0; i < half; ++i) {
    const double inv_freq =
        1.0 / std::pow(static_cast<double>(kRopeBase), static_cast<double>(2 * i) / (2.0 * half));
    for (std::size_t pos = 0; pos < max_seq; ++pos) {
      const double angle = static_cast<double>(pos) * inv_freq;
      rope_cos_[pos * half + i] = static_cast<float>(std::cos(angle));
      rope_sin_[pos * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

void ReferenceModel::apply_rotary(std::span<float> vec, std::size_t pos) const {
  // Half-split rotary layout: element i pairs with element i + head_dim/2.
  const std::size_t half = vec.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const float c = rope_cos_[pos * half + i];
    const float s = rope_sin_[pos * half + i];
    const float x0 = vec[i], x1 = vec[i + half];
    vec[i] = x0 * c - x1 * s;
    vec[i + half] = x0 * s + x1 * c;
  }
}

ForwardOutput ReferenceModel::forward(std::span<const int> tokens, KVCache& cache,
                                      bool capture_hidden) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocab of " +
                              std::to_string(config_.vocab_size));
    }
  }
  if (cache.num_layers() != static_cast<std::size_t>(config_.num_layers) ||
      cache.capacity() != static_cast<std::size_t>(config_.max_seq_len)) {
    throw std::invalid_argument("forward: cache was built for a different model config");
  }
  const std::size_t start = cache.length();
  if (start + tokens.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw std::out_of_range("forward: sequence length " + std::to_string(start + tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }

  const std::size_t n = tokens.size();
  const std::size_t d = config_.hidden_dim;
  const std::size_t heads = config_.num_heads;
  const std::size_t hd = config_.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  ForwardOutput out;
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto e = embedding_.row(tokens[i]);
    std::copy(e.begin(), e.end(), x.row(i).begin());
  }
  if (capture_hidden) {
    out.hidden_states.reserve(config_.num_layers + 1);
    out.hidden_states.push_back(x);
  }

  std::vector<float> scores(config_.max_seq_len);
  Tensor attn({n, d});
  for (std::size_t layer = 0; layer < blocks_.size(); ++layer) {
    const BlockWeights& w = blocks_[layer];
    const Packed& pk = packed_[layer];

    Tensor xn = rmsnorm(x, w.attn_norm.data(), kRmsNormEps);
    Tensor q = matmul(xn, pk.wq);
    Tensor k = matmul(xn, pk.wk);
    Tensor v = matmul(xn, pk.wv);

    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pos = start + i;
      for (std::size_t h = 0; h < heads; ++h) {
        auto qh = q.row(i).subspan(h * hd, hd);
        auto kh = k.row(i).subspan(h * hd, hd);
        apply_rotary(qh, pos);
        apply_rotary(kh, pos);
        std::copy(kh.begin(), kh.end(), cache.keys(layer, h, pos).begin());
        auto vh = v.row(i).subspan(h * hd, hd);
        std::copy(vh.begin(), vh.end(), cache.values(layer, h, pos).begin());
      }
    }
    cache.advance(layer, n);

    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pos = start + i;
      for (std::size_t h = 0; h < heads; ++h) {
        auto qh = q.row(i).subspan(h * hd, hd);
        float mx = -INFINITY;
        for (std::size_t p = 0; p <= pos; ++p) {
          scores[p] = dot(qh, cache.keys(layer, h, p)) * scale;
          mx = std::max(mx, scores[p]);
        }
        float sum = 0.0f;
        for (std::size_t p = 0; p <= pos; ++p) {
          scores[p] = std::exp(scores[p] - mx);
          sum += scores[p];
        }
        auto oh = attn.row(i).subspan(h * hd, hd);
        std::fill(oh.begin(), oh.end(), 0.0f);
        for (std::size_t p = 0; p <= pos; ++p) {
          const float wgt = scores[p] / sum;
          auto vp = cache.values(layer, h, p);
          for (std::size_t j = 0; j < hd; ++j) oh[j] += wgt * vp[j];
        }
      }
    }
    Tensor o = matmul(attn, pk.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += o.data()[i];

    Tensor xf = rmsnorm(x, w.ffn_norm.data(), kRmsNormEps);
    Tensor gate = matmul(xf, pk.w_gate);
    Tensor up = matmul(xf, pk.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) {
      gate.data()[i] = silu(gate.data()[i]) * up.data()[i];
    }
    Tensor down = matmul(gate, pk.w_down);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += down.data()[i];

    if (capture_hidden) out.hidden_states.push_back(x);
  }

  out.logits = lm_head_from_hidden(x);
  return out;
}

Tensor ReferenceModel::lm_head_from_hidden(const Tensor& hidden) const {
  if (hidden.cols() != static_cast<std::size_t>(config_.hidden_dim)) {
    throw ShapeError("lm_head_from_hidden: width " + std::to_string(hidden.cols()) +
                     " != hidden_dim " + std::to_string(config_.hidden_dim));
  }
  return project_normed(rmsnorm(hidden, final_norm_.data(), kRmsNormEps));
}

Tensor ReferenceModel::project_normed(const Tensor& normed) const {
  return matmul(normed, lm_head_t_);
}

std::vector<Tensor*> ReferenceModel::weight_list() {
  std::vector<Tensor*> out{&embedding_};
  for (auto& b : blocks_) {
    for (Tensor* t : {&b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_norm, &b.w_gate, &b.w_up,
                      &b.w_down}) {
      out.push_back(t);
    }
  }
  out.push_back(&final_norm_);
  out.push_back(&lm_head_);
  return out;
}

std::vector<const Tensor*> ReferenceModel::weight_list() const {
  auto mut = const_cast<ReferenceModel*>(this)->weight_list();
  return {mut.begin(), mut.end()};
}

bool ReferenceModel::weights_equal(const ReferenceModel& other) const {
  if (!(config_ == other.config_)) return false;
  auto a = weight_list();
  auto b = other.weight_list();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(*a[i] == *b[i])) return false;
  }
  return true;
}

// Weight container: "TIDM", u32 version, u32 config-text length, config text,
// u32 tensor count, then per tensor u32 rank, u32 dims, f32 data; trailing CRC32.
namespace {
constexpr std::uint32_t kWeightsVersion = 1;
}

void ReferenceModel::save_weights(const std::filesystem::path& path) const {
  detail::ByteWriter w;
  w.tag("TIDM");
  w.u32(kWeightsVersion);
  const std::string text = config_.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  const auto tensors = weight_list();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (std::size_t dim : t->shape()) w.u32(static_cast<std::uint32_t>(dim));
    w.f32s(t->data());
  }
  w.seal();
  detail::write_file(path, w.bytes());
}

ReferenceModel ReferenceModel::load_weights(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader head(bytes);
  auto magic = head.take(4);
  if (std::memcmp(magic.data(), "TIDM", 4) != 0) {
    throw FormatError(FormatErrorKind::BadMagic, path.string() + " is not a weights file");
  }
  if (const auto version = head.u32(); version != kWeightsVersion) {
    throw FormatError(FormatErrorKind::VersionMismatch,
                      "weights version " + std::to_string(version));
  }
  detail::ByteReader r(detail::verify_crc(bytes));
  r.take(8);
  const std::uint32_t text_len = r.u32();
  auto text_bytes = r.take(text_len);
  const ModelConfig config =
      ModelConfig::from_text(std::string(text_bytes.begin(), text_bytes.end()));

  ReferenceModel model(config);
  auto tensors = model.weight_list();
  if (r.u32() != tensors.size()) {
    throw FormatError(FormatErrorKind::DimensionMismatch, "unexpected tensor count");
  }
  for (Tensor* t : tensors) {
    if (r.u32() != t->rank()) throw FormatError(FormatErrorKind::DimensionMismatch, "tensor rank");
    for (std::size_t dim : t->shape()) {
      if (r.u32() != dim) throw FormatError(FormatErrorKind::DimensionMismatch, "tensor shape");
    }
    r.f32s(t->data());
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorKind::DimensionMismatch, "trailing bytes after weights");
  }
  model.prepare();
  return model;
}

// ---------------------------------------------------------------- tokenizer

std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string detokenize_bytes(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

}  // namespace tide
