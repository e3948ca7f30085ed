#pragma once

#include <random>
#include <vector>

#include "modeforge/tensor.hpp"

namespace modeforge {

// Binary elementwise ops broadcast the smaller operand over the leading axes
// of the larger one: after dropping its leading 1s, the smaller shape must be
// a suffix of the larger shape. (2,5,4) + (5,4), (2,5,4) * (1,5,4), (b,c) + (c).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);

/// Sum of every element, shape ().
Tensor sum(const Tensor& a);
/// Mean over one axis; the axis is removed.
Tensor mean(const Tensor& a, int axis);
Tensor sum(const Tensor& a, int axis);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& a, int axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
/// Contiguous range [start, start + length) along `axis`.
Tensor slice(const Tensor& a, int axis, Eigen::Index start, Eigen::Index length);
/// One index along `axis`; the axis is removed.
Tensor select(const Tensor& a, int axis, Eigen::Index index);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Repeats `a` over new or unit leading axes (same suffix rule as add).
Tensor broadcast_to(const Tensor& a, const Shape& shape);

enum class Transpose { No, Yes };

/// a (..., m, k) times b (..., k, n). b may be rank 2, in which case it is
/// shared across every leading index of a. With Transpose::Yes b is read as
/// (..., n, k).
Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb = Transpose::No);

/// Scaled dot-product attention over `heads` interleaved heads in one op.
/// q, k, v (b, s, d) with head h occupying columns [h*d/heads, (h+1)*d/heads).
/// Returns (b, s, d). The softmax weights (b, heads, s, s) go to `probs` when
/// given; they are values only and carry no gradient.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, Tensor* probs = nullptr);

/// x (..., in) w (in, out) + bias (out). bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

struct Conv1dOptions {
  Eigen::Index dilation = 1;
  Eigen::Index pad_left = 0;
  Eigen::Index pad_right = 0;
  Eigen::Index groups = 1;
};

/// Cross-correlation. x (b, c_in, T), w (c_out, c_in / groups, K), bias (c_out)
/// or undefined. Output length T + pad_left + pad_right - dilation (K - 1).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv1dOptions& opt = {});

/// Running statistics of a batch-norm layer; not trained by the optimizer.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// x (b, c, T). In training mode normalizes with the batch statistics over
/// (b, T) and updates `stats`; otherwise uses `stats`.
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                   bool training, const BatchNormOptions& opt = {});

/// Normalizes the last axis, then applies gamma and beta of that size.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Inverted dropout. Identity when not training or rate is 0.
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

/// Mean of -log softmax(logits)[label], weighted per class when `class_weights`
/// is non-empty (normalized by the total weight of the batch). logits (b, K).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const Eigen::VectorXd& class_weights = {});

/// Diagonal selective scan. For each batch row, channel d and state n:
///   h_t = exp(delta_t,d * A_d,n) h_{t-1} + delta_t,d * B_t,n * u_t,d
///   y_t,d = sum_n C_t,n h_t,d,n,     h_0 = 0.
/// u, delta (b, T, D); A (D, N); B, C (b, T, N). Returns y (b, T, D).
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B,
                      const Tensor& C);

}  // namespace modeforge
