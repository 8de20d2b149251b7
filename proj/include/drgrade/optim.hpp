#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "drgrade/tensor.hpp"

namespace drgrade {

// SGD with Nesterov momentum and L2 weight decay folded into the gradient:
//   g' = g + wd * w;  v <- m v - lr g';  w <- w + m v - lr g'
template <typename T>
class SgdNesterov {
 public:
  SgdNesterov(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, double lr);

  std::vector<Tensor<T>>& velocity() { return velocity_; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam; weight decay is added to the gradient before the
// moment updates.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : s_(settings) {}

  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, double lr);

  std::vector<Tensor<T>>& first_moment() { return m_; }
  std::vector<Tensor<T>>& second_moment() { return v_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  const AdamSettings& settings() const { return s_; }

 private:
  AdamSettings s_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace drgrade
