#ifndef DOMPAT_OPTIM_HPP
#define DOMPAT_OPTIM_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dompat/tensor.hpp"

namespace dompat {

/// Adam with bias correction. step() returns a descent-signed update: the
/// caller applies `param + update` and the loss decreases. Defaults are the
/// optimizer's standard constants; only the learning rate is configurable
/// per run.
template <typename T = float>
class adam_state {
 public:
  adam_state(std::vector<std::size_t> shape, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
             T eps = T(1e-8))
      : m_(shape), v_(std::move(shape)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= T(0)) throw std::invalid_argument("adam: lr must be positive");
  }

  tensor<T> step(const tensor<T>& g) {
    if (g.shape() != m_.shape()) throw std::invalid_argument("adam: gradient shape mismatch");
    ++t_;
    auto gv = g.data();
    auto mv = m_.data();
    auto vv = v_.data();
    tensor<T> update(g.shape());
    auto uv = update.data();
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < g.size(); ++i) {
      mv[i] = beta1_ * mv[i] + (T(1) - beta1_) * gv[i];
      vv[i] = beta2_ * vv[i] + (T(1) - beta2_) * gv[i] * gv[i];
      const T mhat = mv[i] / bc1;
      const T vhat = vv[i] / bc2;
      uv[i] = -lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    return update;
  }

  std::size_t step_count() const { return t_; }
  T lr() const { return lr_; }

 private:
  tensor<T> m_;
  tensor<T> v_;
  std::size_t t_ = 0;
  T lr_;
  T beta1_;
  T beta2_;
  T eps_;
};

/// Elementwise clamp of delta to the l-infinity ball of radius xi.
template <typename T>
tensor<T> project_linf(const tensor<T>& delta, T xi) {
  if (xi <= T(0)) throw std::invalid_argument("project_linf: xi must be positive");
  return clamp(delta, -xi, xi);
}

/// param - lr * g.
template <typename T>
tensor<T> sgd_step(const tensor<T>& param, const tensor<T>& g, T lr) {
  if (param.shape() != g.shape()) throw std::invalid_argument("sgd: shape mismatch");
  tensor<T> out(param.shape());
  auto pv = param.data();
  auto gv = g.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < param.size(); ++i) ov[i] = pv[i] - lr * gv[i];
  return out;
}

}  // namespace dompat

#endif  // DOMPAT_OPTIM_HPP
