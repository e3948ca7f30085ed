#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "modeforge/ops.hpp"
#include "modeforge/tensor.hpp"
#include "oracles.hpp"

namespace oracle {

using modeforge::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, modeforge::Shape shape, double scale = 1.0,
                            bool requires_grad = true) {
  std::normal_distribution<double> nd(0.0, scale);
  const Eigen::Index n = modeforge::shape_numel(shape);
  Eigen::ArrayXd v(n);
  for (auto& x : v) x = nd(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Fixed random projection so the checked scalar depends on every output.
inline Tensor project(const Tensor& out, std::mt19937_64& rng) {
  Tensor r = random_tensor(rng, out.shape(), 1.0, false);
  return modeforge::sum(modeforge::mul(out, r));
}

/// Largest relative error between the tape gradient and central differences
/// over every input, each measured against that input's gradient scale. The
/// scale is floored at 1e-3 of the largest scale over all inputs: tensors whose
/// exact gradient is zero (a bias feeding batch norm) would otherwise compare
/// finite-difference noise against 1e-8.
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                        const std::vector<Tensor>& inputs, double h = 1e-5) {
  for (Tensor t : inputs) t.zero_grad();
  modeforge::backward(f(inputs));
  std::vector<Eigen::VectorXd> analytic, numeric;
  double global = 0.0;
  for (Tensor t : inputs) {
    analytic.push_back(t.has_grad() ? Eigen::VectorXd(t.grad().matrix()) : Eigen::VectorXd::Zero(t.numel()));
    Eigen::VectorXd x0 = t.value().matrix();
    auto eval = [&](const Eigen::VectorXd& x) {
      t.value() = x.array();
      modeforge::NoGradGuard guard;
      return f(inputs).item();
    };
    numeric.push_back(numeric_gradient(eval, x0, h));
    t.value() = x0.array();
    if (numeric.back().size() > 0) global = std::max(global, numeric.back().cwiseAbs().maxCoeff());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (numeric[i].size() == 0) continue;
    const double scale = std::max({1e-8, 1e-3 * global, numeric[i].cwiseAbs().maxCoeff()});
    worst = std::max(worst, (analytic[i] - numeric[i]).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

}  // namespace oracle
