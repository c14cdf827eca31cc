#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tide {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation would produce NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major f32 array. The last dimension is the "row width"; every
/// leading dimension is flattened into rows for the row-wise kernels.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor from_rows(const std::vector<std::vector<float>>& rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Width of the innermost dimension, and the number of such rows.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Bitwise equality of shape and data.
  bool operator==(const Tensor& other) const;

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Throws NumericError naming `what` if any value is NaN or Inf.
void require_finite(std::span<const float> values, const char* what);

// f32 dot product with a fixed accumulation order.
float dot(std::span<const float> a, std::span<const float> b);

/// a[m×k] · b[k×n] -> [m×n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[…×k] · wᵀ where w is [n×k] (the nn.Linear weight layout) -> […×n].
Tensor linear(const Tensor& x, const Tensor& w);

/// Row-wise x / sqrt(mean(x²) + eps), optionally multiplied by `gain`.
Tensor rmsnorm(const Tensor& h, std::span<const float> gain, float eps);
Tensor rmsnorm(const Tensor& h, float eps);
void rmsnorm_row(std::span<const float> in, std::span<const float> gain, float eps,
                 std::span<float> out);

float sigmoid(float x);
float silu(float x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

/// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& x);

/// Cosine similarity clamped to [-1, 1]; nullopt when either vector has zero norm.
std::optional<float> cosine_similarity(std::span<const float> a, std::span<const float> b);

}  // namespace tide
