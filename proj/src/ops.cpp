#include "modeforge/ops.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace modeforge {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;
// Column-major view used for broadcasting: column j is the j-th repeat.
using MapCol = Eigen::Map<Eigen::ArrayXXd>;
using MapColC = Eigen::Map<const Eigen::ArrayXXd>;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(rank));
  }
  return a;
}

// (outer, n, inner) view of a shape around one axis.
struct AxisSplit {
  Eigen::Index outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// How a binary op lines up its operands.
struct BinaryPlan {
  Shape out;
  bool a_is_big = true;
  Eigen::Index small_n = 0;
  Eigen::Index reps = 1;
};

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* op) {
  BinaryPlan p;
  if (a.shape() == b.shape()) {
    p.out = a.shape();
    p.small_n = a.numel();
    return p;
  }
  if (is_suffix(strip_leading_ones(b.shape()), a.shape())) {
    p.out = a.shape();
    p.a_is_big = true;
    p.small_n = b.numel();
    p.reps = a.numel() / b.numel();
    return p;
  }
  if (is_suffix(strip_leading_ones(a.shape()), b.shape())) {
    p.out = b.shape();
    p.a_is_big = false;
    p.small_n = a.numel();
    p.reps = b.numel() / a.numel();
    return p;
  }
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                              shape_string(b.shape()) + " do not broadcast");
}

// Sums the repeats of a broadcast gradient back to the small operand's size.
Eigen::ArrayXd reduce_repeats(const Eigen::ArrayXd& g, Eigen::Index small_n, Eigen::Index reps) {
  if (reps == 1) return g;
  return MapColC(g.data(), small_n, reps).rowwise().sum();
}

Eigen::ArrayXd repeat(const Eigen::ArrayXd& v, Eigen::Index reps) {
  if (reps == 1) return v;
  Eigen::ArrayXd out(v.size() * reps);
  MapCol(out.data(), v.size(), reps).colwise() = v;
  return out;
}

template <typename Fn, typename Grad>
Tensor unary(const char* op, const Tensor& a, Fn fn, Grad dfn) {
  Eigen::ArrayXd out = a.value().unaryExpr(fn);
  return make_result(op, a.shape(), std::move(out), {a}, [dfn](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) {
      x.accumulate(self.grad * x.value.binaryExpr(self.value, dfn));
    }
  });
}

double erf_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const BinaryPlan p = plan_binary(a, b, "add");
  const Tensor& big = p.a_is_big ? a : b;
  const Tensor& small = p.a_is_big ? b : a;
  Eigen::ArrayXd out = big.value();
  MapCol(out.data(), p.small_n, p.reps).colwise() += small.value();
  return make_result("add", p.out, std::move(out), {big, small}, [p](Node& self) {
    Node& bg = *self.parents[0];
    Node& sm = *self.parents[1];
    if (bg.requires_grad) bg.accumulate(self.grad);
    if (sm.requires_grad) sm.accumulate(reduce_repeats(self.grad, p.small_n, p.reps));
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const BinaryPlan p = plan_binary(a, b, "mul");
  const Tensor& big = p.a_is_big ? a : b;
  const Tensor& small = p.a_is_big ? b : a;
  Eigen::ArrayXd out = big.value();
  MapCol(out.data(), p.small_n, p.reps).colwise() *= small.value();
  return make_result("mul", p.out, std::move(out), {big, small}, [p](Node& self) {
    Node& bg = *self.parents[0];
    Node& sm = *self.parents[1];
    if (bg.requires_grad) {
      Eigen::ArrayXd g = self.grad;
      MapCol(g.data(), p.small_n, p.reps).colwise() *= sm.value;
      bg.accumulate(g);
    }
    if (sm.requires_grad) {
      sm.accumulate(reduce_repeats(self.grad * bg.value, p.small_n, p.reps));
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_result("scale", a.shape(), a.value() * s, {a}, [s](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) x.accumulate(self.grad * s);
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return make_result("add_scalar", a.shape(), a.value() + s, {a}, [](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) x.accumulate(self.grad);
  });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary("gelu", a, [](double x) { return x * erf_cdf(x); },
               [](double x, double) {
                 const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                 return erf_cdf(x) + x * pdf;
               });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary("silu", a, [](double x) { return x * sigmoid_scalar(x); },
               [](double x, double) {
                 const double s = sigmoid_scalar(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a,
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) { return sigmoid_scalar(x); });
}

Tensor sum(const Tensor& a) {
  const Eigen::Index n = a.numel();
  return make_result("sum", {}, Eigen::ArrayXd::Constant(1, a.value().sum()), {a}, [n](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) x.accumulate(Eigen::ArrayXd::Constant(n, self.grad[0]));
  });
}

Tensor sum(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(s.outer * s.inner);
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    auto dst = out.segment(o * s.inner, s.inner);
    for (Eigen::Index j = 0; j < s.n; ++j) dst += a.value().segment((o * s.n + j) * s.inner, s.inner);
  }
  return make_result("sum_axis", out_shape, std::move(out), {a}, [s](Node& self) {
    Node& x = *self.parents[0];
    if (!x.requires_grad) return;
    Eigen::ArrayXd g(s.outer * s.n * s.inner);
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      for (Eigen::Index j = 0; j < s.n; ++j) {
        g.segment((o * s.n + j) * s.inner, s.inner) = self.grad.segment(o * s.inner, s.inner);
      }
    }
    x.accumulate(g);
  });
}

Tensor mean(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  return scale(sum(a, ax), 1.0 / static_cast<double>(a.shape()[static_cast<std::size_t>(ax)]));
}

Tensor softmax(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), axis);
  Eigen::ArrayXd out(a.numel());
  const Eigen::ArrayXd& x = a.value();
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    for (Eigen::Index i = 0; i < s.inner; ++i) {
      const Eigen::Index base = o * s.n * s.inner + i;
      double mx = x[base];
      for (Eigen::Index j = 1; j < s.n; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (Eigen::Index j = 0; j < s.n; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (Eigen::Index j = 0; j < s.n; ++j) out[base + j * s.inner] *= inv;
    }
  }
  return make_result("softmax", a.shape(), std::move(out), {a}, [s](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    const Eigen::ArrayXd& y = self.value;
    const Eigen::ArrayXd& g = self.grad;
    Eigen::ArrayXd dx(y.size());
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      for (Eigen::Index i = 0; i < s.inner; ++i) {
        const Eigen::Index base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (Eigen::Index j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (Eigen::Index j = 0; j < s.n; ++j) {
          const Eigen::Index k = base + j * s.inner;
          dx[k] = y[k] * (g[k] - dot);
        }
      }
    }
    xn.accumulate(dx);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape) +
                                " changes the element count");
  }
  return make_result("reshape", std::move(shape), a.value(), {a}, [](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) x.accumulate(self.grad);
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw std::invalid_argument("permute: wrong axis count");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r || used[static_cast<std::size_t>(ax)]) {
      throw std::invalid_argument("permute: axes must be a permutation");
    }
    used[static_cast<std::size_t>(ax)] = true;
  }
  const Shape& in = a.shape();
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Eigen::Index> in_stride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i) + 1] * in[static_cast<std::size_t>(i) + 1];
  }
  // Stride in the input for each output axis.
  std::vector<Eigen::Index> step(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    step[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  }
  // Output position -> input position, shared by forward and backward.
  auto index_map = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(a.numel()));
  {
    std::vector<Eigen::Index> counter(static_cast<std::size_t>(r), 0);
    Eigen::Index src = 0;
    for (Eigen::Index k = 0; k < a.numel(); ++k) {
      (*index_map)[static_cast<std::size_t>(k)] = src;
      for (int i = r - 1; i >= 0; --i) {
        const auto ui = static_cast<std::size_t>(i);
        ++counter[ui];
        src += step[ui];
        if (counter[ui] < out_shape[ui]) break;
        src -= step[ui] * counter[ui];
        counter[ui] = 0;
      }
    }
  }
  Eigen::ArrayXd out(a.numel());
  for (Eigen::Index k = 0; k < a.numel(); ++k) out[k] = a.value()[(*index_map)[static_cast<std::size_t>(k)]];
  return make_result("permute", out_shape, std::move(out), {a}, [index_map](Node& self) {
    Node& x = *self.parents[0];
    if (!x.requires_grad) return;
    Eigen::ArrayXd g(self.grad.size());
    for (Eigen::Index k = 0; k < g.size(); ++k) g[(*index_map)[static_cast<std::size_t>(k)]] = self.grad[k];
    x.accumulate(g);
  });
}

Tensor slice(const Tensor& a, int axis, Eigen::Index start, Eigen::Index length) {
  axis = normalize_axis(axis, a.rank());
  const AxisSplit s = split_at(a.shape(), axis);
  if (start < 0 || length < 1 || start + length > s.n) {
    throw std::out_of_range("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") outside axis of size " + std::to_string(s.n));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  const Eigen::Index chunk = length * s.inner;
  Eigen::ArrayXd out(s.outer * chunk);
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    out.segment(o * chunk, chunk) = a.value().segment((o * s.n + start) * s.inner, chunk);
  }
  return make_result("slice", out_shape, std::move(out), {a}, [s, start, chunk](Node& self) {
    Node& x = *self.parents[0];
    if (!x.requires_grad) return;
    Eigen::ArrayXd g = Eigen::ArrayXd::Zero(s.outer * s.n * s.inner);
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      g.segment((o * s.n + start) * s.inner, chunk) = self.grad.segment(o * chunk, chunk);
    }
    x.accumulate(g);
  });
}

Tensor select(const Tensor& a, int axis, Eigen::Index index) {
  axis = normalize_axis(axis, a.rank());
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  return reshape(slice(a, axis, index, 1), out_shape);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat needs at least one tensor");
  axis = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  Eigen::Index total = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (static_cast<int>(probe.size()) != parts[0].rank()) throw std::invalid_argument("concat: rank mismatch");
    total += probe[static_cast<std::size_t>(axis)];
    probe[static_cast<std::size_t>(axis)] = out_shape[static_cast<std::size_t>(axis)];
    if (probe != out_shape) {
      throw std::invalid_argument("concat: shapes " + shape_string(parts[0].shape()) + " and " +
                                  shape_string(p.shape()) + " differ off the concat axis");
    }
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<Eigen::Index> widths;
  Eigen::ArrayXd out(shape_numel(out_shape));
  Eigen::Index offset = 0;
  for (const Tensor& p : parts) {
    const Eigen::Index w = p.shape()[static_cast<std::size_t>(axis)] * os.inner;
    widths.push_back(w);
    for (Eigen::Index o = 0; o < os.outer; ++o) {
      out.segment(o * os.n * os.inner + offset, w) = p.value().segment(o * w, w);
    }
    offset += w;
  }
  return make_result("concat", out_shape, std::move(out), parts, [os, widths](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      const Eigen::Index w = widths[i];
      if (p.requires_grad) {
        Eigen::ArrayXd g(os.outer * w);
        for (Eigen::Index o = 0; o < os.outer; ++o) {
          g.segment(o * w, w) = self.grad.segment(o * os.n * os.inner + off, w);
        }
        p.accumulate(g);
      }
      off += w;
    }
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (!is_suffix(strip_leading_ones(a.shape()), shape)) {
    throw std::invalid_argument("cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  const Eigen::Index n = a.numel();
  const Eigen::Index reps = shape_numel(shape) / n;
  return make_result("broadcast", shape, repeat(a.value(), reps), {a}, [n, reps](Node& self) {
    Node& x = *self.parents[0];
    if (x.requires_grad) x.accumulate(reduce_repeats(self.grad, n, reps));
  });
}

Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb) {
  if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul needs rank >= 2 operands");
  const bool bt = tb == Transpose::Yes;
  const Eigen::Index m = a.dim(-2), k = a.dim(-1);
  const Eigen::Index bk = bt ? b.dim(-1) : b.dim(-2);
  const Eigen::Index n = bt ? b.dim(-2) : b.dim(-1);
  if (k != bk) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const bool shared_b = b.rank() == 2;
  Eigen::Index batch = 1;
  if (!shared_b) {
    if (Shape(a.shape().begin(), a.shape().end() - 2) != Shape(b.shape().begin(), b.shape().end() - 2)) {
      throw std::invalid_argument("matmul: batch dimensions differ, " + shape_string(a.shape()) + " x " +
                                  shape_string(b.shape()));
    }
    for (int i = 0; i < a.rank() - 2; ++i) batch *= a.shape()[static_cast<std::size_t>(i)];
  }
  // With a shared right operand every leading index of a folds into the rows.
  const Eigen::Index rows = shared_b ? a.numel() / k : m;
  const Eigen::Index bstride = k * n;
  Eigen::ArrayXd out(a.numel() / k * n);
  for (Eigen::Index i = 0; i < batch; ++i) {
    MapRowC A(a.value().data() + i * rows * k, rows, k);
    MapRow C(out.data() + i * rows * n, rows, n);
    if (bt) {
      MapRowC B(b.value().data() + i * bstride, n, k);
      C.noalias() = A * B.transpose();
    } else {
      MapRowC B(b.value().data() + i * bstride, k, n);
      C.noalias() = A * B;
    }
  }
  return make_result("matmul", out_shape, std::move(out), {a, b},
                     [batch, rows, k, n, bstride, bt](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    Eigen::ArrayXd ga, gb;
    if (an.requires_grad) ga.resize(an.value.size());
    if (bn.requires_grad) gb.resize(bn.value.size());
    for (Eigen::Index i = 0; i < batch; ++i) {
      MapRowC G(self.grad.data() + i * rows * n, rows, n);
      MapRowC A(an.value.data() + i * rows * k, rows, k);
      if (bt) {
        MapRowC B(bn.value.data() + i * bstride, n, k);
        if (an.requires_grad) MapRow(ga.data() + i * rows * k, rows, k).noalias() = G * B;
        if (bn.requires_grad) MapRow(gb.data() + i * bstride, n, k).noalias() = G.transpose() * A;
      } else {
        MapRowC B(bn.value.data() + i * bstride, k, n);
        if (an.requires_grad) MapRow(ga.data() + i * rows * k, rows, k).noalias() = G * B.transpose();
        if (bn.requires_grad) MapRow(gb.data() + i * bstride, k, n).noalias() = A.transpose() * G;
      }
    }
    if (an.requires_grad) an.accumulate(ga);
    if (bn.requires_grad) bn.accumulate(gb);
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, Tensor* probs) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw std::invalid_argument("attention: q, k, v must share a (b, s, d) shape");
  }
  const Eigen::Index nb = q.dim(0), s = q.dim(1), d = q.dim(2);
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("attention: heads must divide d");
  const Eigen::Index dk = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dk));
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  auto head = [s, d, dk](const Eigen::ArrayXd& a, Eigen::Index b, Eigen::Index h) {
    return Strided(a.data() + b * s * d + h * dk, s, dk, Eigen::OuterStride<>(d));
  };

  Tensor p = Tensor::zeros({nb, heads, s, s});
  Eigen::ArrayXd out(q.numel());
  for (Eigen::Index b = 0; b < nb; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      MapRow w(p.value().data() + (b * heads + h) * s * s, s, s);
      w.noalias() = sc * head(q.value(), b, h) * head(k.value(), b, h).transpose();
      const Eigen::VectorXd mx = w.rowwise().maxCoeff();
      w.array().colwise() -= mx.array();
      w.array() = w.array().exp();
      const Eigen::VectorXd inv = w.rowwise().sum().cwiseInverse();
      w.array().colwise() *= inv.array();
      StridedMut(out.data() + b * s * d + h * dk, s, dk, Eigen::OuterStride<>(d)).noalias() =
          w * head(v.value(), b, h);
    }
  }
  if (probs) *probs = p;
  return make_result("attention", q.shape(), std::move(out), {q, k, v},
                     [p, nb, s, d, dk, heads, sc, head](Node& self) {
    Node& qn = *self.parents[0];
    Node& kn = *self.parents[1];
    Node& vn = *self.parents[2];
    Eigen::ArrayXd gq = Eigen::ArrayXd::Zero(qn.value.size());
    Eigen::ArrayXd gk = Eigen::ArrayXd::Zero(kn.value.size());
    Eigen::ArrayXd gv = Eigen::ArrayXd::Zero(vn.value.size());
    RowMat dw(s, s);
    for (Eigen::Index b = 0; b < nb; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        MapRowC w(p.value().data() + (b * heads + h) * s * s, s, s);
        const Strided g = head(self.grad, b, h);
        auto at = [&](Eigen::ArrayXd& a) {
          return StridedMut(a.data() + b * s * d + h * dk, s, dk, Eigen::OuterStride<>(d));
        };
        at(gv).noalias() = w.transpose() * g;
        dw.noalias() = g * head(vn.value, b, h).transpose();
        const Eigen::VectorXd dot = (dw.array() * w.array()).rowwise().sum();
        dw.array() = w.array() * (dw.array().colwise() - dot.array()) * sc;
        at(gq).noalias() = dw * head(kn.value, b, h);
        at(gk).noalias() = dw.transpose() * head(qn.value, b, h);
      }
    }
    if (qn.requires_grad) qn.accumulate(gq);
    if (kn.requires_grad) kn.accumulate(gk);
    if (vn.requires_grad) vn.accumulate(gv);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw std::invalid_argument("linear: weight must be (in, out)");
  if (x.rank() == 1) {
    Tensor y = linear(reshape(x, {1, x.dim(0)}), w, bias);
    return reshape(y, {w.dim(1)});
  }
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv1dOptions& opt) {
  if (x.rank() != 3 || w.rank() != 3) throw std::invalid_argument("conv1d: expected x (b,c,T) and w (o,c/g,K)");
  const Eigen::Index nb = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const Eigen::Index cout = w.dim(0), cin_g = w.dim(1), ks = w.dim(2);
  const Eigen::Index g = opt.groups;
  if (g < 1 || cin % g != 0 || cout % g != 0 || cin / g != cin_g) {
    throw std::invalid_argument("conv1d: channel/group mismatch, x " + shape_string(x.shape()) + " w " +
                                shape_string(w.shape()) + " groups " + std::to_string(g));
  }
  if (opt.dilation < 1 || opt.pad_left < 0 || opt.pad_right < 0) {
    throw std::invalid_argument("conv1d: dilation must be >= 1 and padding >= 0");
  }
  const Eigen::Index span = opt.dilation * (ks - 1) + 1;
  const Eigen::Index tout = len + opt.pad_left + opt.pad_right - span + 1;
  if (tout < 1) throw std::invalid_argument("conv1d: kernel longer than padded input");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw std::invalid_argument("conv1d: bias must have c_out entries");
  }
  const Eigen::Index cout_g = cout / g;
  const Eigen::Index dil = opt.dilation, pl = opt.pad_left;
  const Eigen::Index patch = cin_g * ks;

  // cols(c * K + j, t) = x[c, t + j * dil - pl] for one batch row and group.
  auto im2col = [=](const double* xb, RowMat& cols) {
    cols.setZero(patch, tout);
    for (Eigen::Index c = 0; c < cin_g; ++c) {
      for (Eigen::Index j = 0; j < ks; ++j) {
        const Eigen::Index shift = j * dil - pl;
        const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index t1 = std::min<Eigen::Index>(tout, len - shift);
        if (t1 > t0) {
          cols.row(c * ks + j).segment(t0, t1 - t0) =
              Eigen::Map<const Eigen::RowVectorXd>(xb + c * len + t0 + shift, t1 - t0);
        }
      }
    }
  };

  Eigen::ArrayXd out(nb * cout * tout);
  RowMat cols;
  for (Eigen::Index bi = 0; bi < nb; ++bi) {
    for (Eigen::Index gi = 0; gi < g; ++gi) {
      im2col(x.value().data() + (bi * cin + gi * cin_g) * len, cols);
      MapRowC W(w.value().data() + gi * cout_g * patch, cout_g, patch);
      MapRow Y(out.data() + (bi * cout + gi * cout_g) * tout, cout_g, tout);
      Y.noalias() = W * cols;
      if (bias.defined()) Y.colwise() += bias.value().segment(gi * cout_g, cout_g).matrix();
    }
  }

  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_result("conv1d", {nb, cout, tout}, std::move(out), parents,
                     [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Node* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    Eigen::ArrayXd gx, gw, gbias;
    if (xn.requires_grad) gx.setZero(xn.value.size());
    if (wn.requires_grad) gw.setZero(wn.value.size());
    if (bn && bn->requires_grad) gbias.setZero(cout);
    RowMat cols, dcols;
    for (Eigen::Index bi = 0; bi < nb; ++bi) {
      for (Eigen::Index gi = 0; gi < g; ++gi) {
        MapRowC G(self.grad.data() + (bi * cout + gi * cout_g) * tout, cout_g, tout);
        if (gbias.size()) gbias.segment(gi * cout_g, cout_g) += G.rowwise().sum().array();
        if (wn.requires_grad) {
          im2col(xn.value.data() + (bi * cin + gi * cin_g) * len, cols);
          MapRow(gw.data() + gi * cout_g * patch, cout_g, patch).noalias() += G * cols.transpose();
        }
        if (xn.requires_grad) {
          MapRowC W(wn.value.data() + gi * cout_g * patch, cout_g, patch);
          dcols.noalias() = W.transpose() * G;
          double* dxb = gx.data() + (bi * cin + gi * cin_g) * len;
          for (Eigen::Index c = 0; c < cin_g; ++c) {
            for (Eigen::Index j = 0; j < ks; ++j) {
              const Eigen::Index shift = j * dil - pl;
              const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
              const Eigen::Index t1 = std::min<Eigen::Index>(tout, len - shift);
              if (t1 > t0) {
                Eigen::Map<Eigen::RowVectorXd>(dxb + c * len + t0 + shift, t1 - t0) +=
                    dcols.row(c * ks + j).segment(t0, t1 - t0);
              }
            }
          }
        }
      }
    }
    if (xn.requires_grad) xn.accumulate(gx);
    if (wn.requires_grad) wn.accumulate(gw);
    if (gbias.size()) bn->accumulate(gbias);
  });
}

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                   bool training, const BatchNormOptions& opt) {
  if (x.rank() != 3) throw std::invalid_argument("batchnorm1d: expected (b, c, T)");
  const Eigen::Index nb = x.dim(0), nc = x.dim(1), len = x.dim(2);
  if (gamma.numel() != nc || beta.numel() != nc || stats.mean.numel() != nc || stats.var.numel() != nc) {
    throw std::invalid_argument("batchnorm1d: parameter size does not match channel count");
  }
  const Eigen::Index count = nb * len;
  if (training && count < 2) {
    throw std::invalid_argument("batchnorm1d: training mode needs more than one value per channel");
  }
  Eigen::ArrayXd mu(nc), inv_std(nc);
  const double* xv = x.value().data();
  if (training) {
    Eigen::ArrayXd var(nc);
    for (Eigen::Index c = 0; c < nc; ++c) {
      double s = 0.0;
      for (Eigen::Index bi = 0; bi < nb; ++bi) {
        s += Eigen::Map<const Eigen::ArrayXd>(xv + (bi * nc + c) * len, len).sum();
      }
      mu[c] = s / static_cast<double>(count);
      double ss = 0.0;
      for (Eigen::Index bi = 0; bi < nb; ++bi) {
        ss += (Eigen::Map<const Eigen::ArrayXd>(xv + (bi * nc + c) * len, len) - mu[c]).square().sum();
      }
      var[c] = ss / static_cast<double>(count);
    }
    inv_std = (var + opt.eps).rsqrt();
    const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
    stats.mean.value() = (1.0 - opt.momentum) * stats.mean.value() + opt.momentum * mu;
    stats.var.value() = (1.0 - opt.momentum) * stats.var.value() + opt.momentum * var * unbias;
  } else {
    mu = stats.mean.value();
    inv_std = (stats.var.value() + opt.eps).rsqrt();
  }

  Eigen::ArrayXd xhat(x.numel());
  Eigen::ArrayXd out(x.numel());
  for (Eigen::Index bi = 0; bi < nb; ++bi) {
    for (Eigen::Index c = 0; c < nc; ++c) {
      const Eigen::Index off = (bi * nc + c) * len;
      xhat.segment(off, len) = (Eigen::Map<const Eigen::ArrayXd>(xv + off, len) - mu[c]) * inv_std[c];
      out.segment(off, len) = xhat.segment(off, len) * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result("batchnorm1d", x.shape(), std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat)](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    Eigen::ArrayXd sum_g = Eigen::ArrayXd::Zero(nc), sum_gx = Eigen::ArrayXd::Zero(nc);
    for (Eigen::Index bi = 0; bi < nb; ++bi) {
      for (Eigen::Index c = 0; c < nc; ++c) {
        const Eigen::Index off = (bi * nc + c) * len;
        sum_g[c] += self.grad.segment(off, len).sum();
        sum_gx[c] += (self.grad.segment(off, len) * xhat.segment(off, len)).sum();
      }
    }
    if (gn.requires_grad) gn.accumulate(sum_gx);
    if (bn.requires_grad) bn.accumulate(sum_g);
    if (!xn.requires_grad) return;
    Eigen::ArrayXd gx(self.grad.size());
    const double nrm = static_cast<double>(count);
    for (Eigen::Index bi = 0; bi < nb; ++bi) {
      for (Eigen::Index c = 0; c < nc; ++c) {
        const Eigen::Index off = (bi * nc + c) * len;
        const double k = gn.value[c] * inv_std[c];
        if (training) {
          gx.segment(off, len) =
              k * (self.grad.segment(off, len) - sum_g[c] / nrm - xhat.segment(off, len) * sum_gx[c] / nrm);
        } else {
          gx.segment(off, len) = k * self.grad.segment(off, len);
        }
      }
    }
    xn.accumulate(gx);
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Eigen::Index d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layernorm: parameter size does not match last axis");
  }
  const Eigen::Index rows = x.numel() / d;
  MapColC X(x.value().data(), d, rows);
  Eigen::ArrayXd xhat_store(x.numel());
  MapCol Xh(xhat_store.data(), d, rows);
  Eigen::ArrayXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = X.col(r).mean();
    const double var = (X.col(r) - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    Xh.col(r) = (X.col(r) - mu) * inv_std[r];
  }
  Eigen::ArrayXd out(x.numel());
  MapCol(out.data(), d, rows) = (Xh.colwise() * gamma.value()).colwise() + beta.value();
  return make_result("layernorm", x.shape(), std::move(out), {x, gamma, beta},
                     [d, rows, inv_std, xhat = std::move(xhat_store)](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    MapColC G(self.grad.data(), d, rows);
    MapColC Xh(xhat.data(), d, rows);
    if (gn.requires_grad) gn.accumulate((G * Xh).rowwise().sum());
    if (bn.requires_grad) bn.accumulate(G.rowwise().sum());
    if (!xn.requires_grad) return;
    Eigen::ArrayXd gx(self.grad.size());
    MapCol GX(gx.data(), d, rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::ArrayXd gh = G.col(r) * gn.value;
      GX.col(r) = inv_std[r] * (gh - gh.mean() - Xh.col(r) * (gh * Xh.col(r)).mean());
    }
    xn.accumulate(gx);
  });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Eigen::ArrayXd mask(x.numel());
  const double s = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? s : 0.0;
  Eigen::ArrayXd out = x.value() * mask;
  return make_result("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    Node& xn = *self.parents[0];
    if (xn.requires_grad) xn.accumulate(self.grad * mask);
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const Eigen::VectorXd& class_weights) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be (b, K)");
  const Eigen::Index nb = logits.dim(0), nk = logits.dim(1);
  if (static_cast<Eigen::Index>(labels.size()) != nb) {
    throw std::invalid_argument("cross_entropy: label count does not match batch");
  }
  if (class_weights.size() != 0 && class_weights.size() != nk) {
    throw std::invalid_argument("cross_entropy: class weight count does not match logits");
  }
  MapColC Z(logits.value().data(), nk, nb);
  Eigen::ArrayXXd probs(nk, nb);
  Eigen::ArrayXd w(nb);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < nb; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= nk) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " out of range");
    const double mx = Z.col(i).maxCoeff();
    probs.col(i) = (Z.col(i) - mx).exp();
    const double z = probs.col(i).sum();
    probs.col(i) /= z;
    w[i] = class_weights.size() ? class_weights[y] : 1.0;
    loss += w[i] * (std::log(z) + mx - Z(y, i));
  }
  const double total = w.sum();
  if (!(total > 0.0)) throw std::invalid_argument("cross_entropy: total sample weight must be positive");
  return make_result("cross_entropy", {}, Eigen::ArrayXd::Constant(1, loss / total), {logits},
                     [=, probs = std::move(probs)](Node& self) {
    Node& zn = *self.parents[0];
    if (!zn.requires_grad) return;
    Eigen::ArrayXd g(nk * nb);
    MapCol Gm(g.data(), nk, nb);
    Gm = probs;
    for (Eigen::Index i = 0; i < nb; ++i) {
      Gm(labels[static_cast<std::size_t>(i)], i) -= 1.0;
      Gm.col(i) *= w[i] * self.grad[0] / total;
    }
    zn.accumulate(g);
  });
}

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B,
                      const Tensor& C) {
  if (u.rank() != 3 || u.shape() != delta.shape() || A.rank() != 2 || B.rank() != 3 ||
      B.shape() != C.shape()) {
    throw std::invalid_argument("selective_scan: expected u, delta (b,T,D), A (D,N), B, C (b,T,N)");
  }
  const Eigen::Index nb = u.dim(0), len = u.dim(1), nd = u.dim(2), ns = A.dim(1);
  if (A.dim(0) != nd || B.dim(0) != nb || B.dim(1) != len || B.dim(2) != ns) {
    throw std::invalid_argument("selective_scan: shapes " + shape_string(u.shape()) + ", " +
                                shape_string(A.shape()) + ", " + shape_string(B.shape()) + " disagree");
  }
  const double* uv = u.value().data();
  const double* dv = delta.value().data();
  const double* av = A.value().data();
  const double* bv = B.value().data();
  const double* cv = C.value().data();
  auto states = std::make_shared<Eigen::ArrayXd>(nb * len * nd * ns);
  Eigen::ArrayXd y(nb * len * nd);
  for (Eigen::Index bi = 0; bi < nb; ++bi) {
    for (Eigen::Index t = 0; t < len; ++t) {
      const Eigen::Index row = bi * len + t;
      double* h = states->data() + row * nd * ns;
      const double* hp = t > 0 ? h - nd * ns : nullptr;
      for (Eigen::Index d = 0; d < nd; ++d) {
        const double dt = dv[row * nd + d];
        const double xu = dt * uv[row * nd + d];
        double acc = 0.0;
        for (Eigen::Index n = 0; n < ns; ++n) {
          const double prev = hp ? hp[d * ns + n] : 0.0;
          const double hn = std::exp(dt * av[d * ns + n]) * prev + xu * bv[row * ns + n];
          h[d * ns + n] = hn;
          acc += cv[row * ns + n] * hn;
        }
        y[row * nd + d] = acc;
      }
    }
  }
  return make_result("selective_scan", u.shape(), std::move(y), {u, delta, A, B, C},
                     [nb, len, nd, ns, states](Node& self) {
    Node& un = *self.parents[0];
    Node& dn = *self.parents[1];
    Node& an = *self.parents[2];
    Node& bn = *self.parents[3];
    Node& cn = *self.parents[4];
    const double* uv = un.value.data();
    const double* dv = dn.value.data();
    const double* av = an.value.data();
    const double* bv = bn.value.data();
    const double* cv = cn.value.data();
    const double* gy = self.grad.data();
    Eigen::ArrayXd gu = Eigen::ArrayXd::Zero(un.value.size());
    Eigen::ArrayXd gd = Eigen::ArrayXd::Zero(dn.value.size());
    Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(an.value.size());
    Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(bn.value.size());
    Eigen::ArrayXd gc = Eigen::ArrayXd::Zero(cn.value.size());
    Eigen::ArrayXd gh(nd * ns);
    for (Eigen::Index bi = 0; bi < nb; ++bi) {
      gh.setZero();
      for (Eigen::Index t = len - 1; t >= 0; --t) {
        const Eigen::Index row = bi * len + t;
        const double* h = states->data() + row * nd * ns;
        const double* hp = t > 0 ? h - nd * ns : nullptr;
        for (Eigen::Index d = 0; d < nd; ++d) {
          const double g_out = gy[row * nd + d];
          const double dt = dv[row * nd + d];
          const double ut = uv[row * nd + d];
          double g_dt = 0.0, g_u = 0.0;
          for (Eigen::Index n = 0; n < ns; ++n) {
            const Eigen::Index dn_ = d * ns + n;
            const double c = cv[row * ns + n];
            const double b = bv[row * ns + n];
            gc[row * ns + n] += g_out * h[dn_];
            const double g = gh[dn_] + g_out * c;
            const double decay = std::exp(dt * av[dn_]);
            const double prev = hp ? hp[dn_] : 0.0;
            const double g_decay = g * prev * decay;
            g_dt += g_decay * av[dn_] + g * b * ut;
            ga[dn_] += g_decay * dt;
            gb[row * ns + n] += g * dt * ut;
            g_u += g * dt * b;
            gh[dn_] = g * decay;
          }
          gd[row * nd + d] += g_dt;
          gu[row * nd + d] += g_u;
        }
      }
    }
    if (un.requires_grad) un.accumulate(gu);
    if (dn.requires_grad) dn.accumulate(gd);
    if (an.requires_grad) an.accumulate(ga);
    if (bn.requires_grad) bn.accumulate(gb);
    if (cn.requires_grad) cn.accumulate(gc);
  });
}

}  // namespace modeforge
