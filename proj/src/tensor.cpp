#include "tide/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tide {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string() + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) return Tensor({0, 0});
  const std::size_t width = rows.front().size();
  std::vector<float> data;
  data.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) throw ShapeError("ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), width}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return shape_.back() == 0 ? 0 : data_.size() / shape_.back();
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t w = cols();
  return std::span<float>(data_).subspan(r * w, w);
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t w = cols();
  return std::span<const float>(data_).subspan(r * w, w);
}

bool Tensor::operator==(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  // Bitwise, so -0.0 != 0.0 and identical NaN payloads compare equal.
  return std::equal(data_.begin(), data_.end(), other.data_.begin(), [](float x, float y) {
    return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
  });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

void require_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

float dot(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = a.size();
  const float* pa = a.data();
  const float* pb = b.data();
  // Eight independent partial sums; the compiler maps these onto one vector register.
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += pa[i + l] * pb[i + l];
  }
  float s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; i < n; ++i) s += pa[i] * pb[i];
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape_string() + " x " +
                     b.shape_string());
  }
  Tensor out({m, n});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  // Each output element sums over p in ascending order. Full tiles of
  // kTile columns accumulate in registers; the rest use a row axpy.
  constexpr std::size_t kTile = 64;
  std::size_t j0 = 0;
  for (; j0 + kTile <= n; j0 += kTile) {
    for (std::size_t i = 0; i < m; ++i) {
      const float* ar = pa + i * k;
      float acc[kTile] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ar[p];
        const float* br = pb + p * n + j0;
#pragma GCC unroll 64
        for (std::size_t j = 0; j < kTile; ++j) acc[j] += av * br[j];
      }
      std::memcpy(po + i * n + j0, acc, sizeof acc);
    }
  }
  if (j0 < n) {
    for (std::size_t i = 0; i < m; ++i) {
      const float* ar = pa + i * k;
      float* o = po + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ar[p];
        const float* br = pb + p * n;
        for (std::size_t j = j0; j < n; ++j) o[j] += av * br[j];
      }
    }
  }
  require_finite(out.data(), "matmul");
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2) throw ShapeError("linear weight must be rank 2");
  if (x.cols() != w.dim(1)) {
    throw ShapeError("linear width mismatch: input " + x.shape_string() + ", weight " +
                     w.shape_string());
  }
  const std::size_t n = w.dim(0);
  std::vector<std::size_t> shape = x.shape();
  shape.back() = n;
  Tensor out(shape);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto orow = out.row(r);
    for (std::size_t j = 0; j < n; ++j) orow[j] = dot(xr, w.row(j));
  }
  require_finite(out.data(), "linear");
  return out;
}

void rmsnorm_row(std::span<const float> in, std::span<const float> gain, float eps,
                 std::span<float> out) {
  float ss = dot(in, in);
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(in.size()) + eps);
  if (gain.empty()) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * inv;
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * inv * gain[i];
  }
}

Tensor rmsnorm(const Tensor& h, std::span<const float> gain, float eps) {
  if (!gain.empty() && gain.size() != h.cols()) {
    throw ShapeError("rmsnorm gain length " + std::to_string(gain.size()) +
                     " does not match width " + std::to_string(h.cols()));
  }
  Tensor out(h.shape());
  // An all-zero row with eps = 0 would divide 0 by 0; treat it as the zero row.
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto in = h.row(r);
    if (eps == 0.0f && std::all_of(in.begin(), in.end(), [](float v) { return v == 0.0f; })) {
      continue;
    }
    rmsnorm_row(in, gain, eps, out.row(r));
  }
  require_finite(out.data(), "rmsnorm");
  return out;
}

Tensor rmsnorm(const Tensor& h, float eps) { return rmsnorm(h, {}, eps); }

float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

float silu(float x) { return x * sigmoid(x); }

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  std::transform(x.data().begin(), x.data().end(), out.data().begin(),
                 [](float v) { return sigmoid(v); });
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  std::transform(x.data().begin(), x.data().end(), out.data().begin(),
                 [](float v) { return silu(v); });
  return out;
}

Tensor softmax(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const float mx = *std::max_element(in.begin(), in.end());
    float sum = 0.0f;
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = std::exp(in[i] - mx);
      sum += o[i];
    }
    for (float& v : o) v /= sum;
  }
  require_finite(out.data(), "softmax");
  return out;
}

std::optional<float> cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity length mismatch");
  const float na = std::sqrt(dot(a, a));
  const float nb = std::sqrt(dot(b, b));
  if (na == 0.0f || nb == 0.0f) return std::nullopt;
  const float c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0f, 1.0f);
}

}  // namespace tide
