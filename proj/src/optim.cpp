#include "drgrade/optim.hpp"

#include <cmath>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

template <typename T>
void check_step_inputs(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads) {
  if (params.size() != grads.size()) throw UsageError("optimizer: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape())
      throw UsageError("optimizer: gradient " + std::to_string(i) + " shape " + shape_str(grads[i].shape()) +
                       " != parameter shape " + shape_str(params[i]->shape()));
    if (!grads[i].all_finite()) throw TrainingError("optimizer: non-finite gradient in parameter " + std::to_string(i));
  }
}

template <typename T>
void ensure_slots(std::vector<Tensor<T>>& slots, std::span<Tensor<T>* const> params) {
  if (slots.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (slots[i].shape() != params[i]->shape()) throw UsageError("optimizer: slot shape does not match parameter");
    return;
  }
  if (!slots.empty()) throw UsageError("optimizer: parameter count changed between steps");
  for (auto* p : params) slots.emplace_back(p->shape());
}

}  // namespace

template <typename T>
void SgdNesterov<T>::step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, double lr) {
  check_step_inputs(params, grads);
  ensure_slots(velocity_, params);
  const T m = T(momentum_), wd = T(weight_decay_), eta = T(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i];
    Tensor<T>& v = velocity_[i];
    const Tensor<T>& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T geff = g[j] + wd * w[j];
      v[j] = m * v[j] - eta * geff;
      w[j] = w[j] + m * v[j] - eta * geff;
    }
  }
}

template <typename T>
void Adam<T>::step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, double lr) {
  check_step_inputs(params, grads);
  ensure_slots(m_, params);
  ensure_slots(v_, params);
  ++t_;
  const double c1 = 1.0 - std::pow(s_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(s_.beta2, double(t_));
  const T b1 = T(s_.beta1), b2 = T(s_.beta2), wd = T(s_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i];
    const Tensor<T>& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T geff = g[j] + wd * w[j];
      m_[i][j] = b1 * m_[i][j] + (T(1) - b1) * geff;
      v_[i][j] = b2 * v_[i][j] + (T(1) - b2) * geff * geff;
      const double mhat = double(m_[i][j]) / c1;
      const double vhat = double(v_[i][j]) / c2;
      w[j] = T(double(w[j]) - lr * mhat / (std::sqrt(vhat) + s_.eps));
    }
  }
}

template class SgdNesterov<float>;
template class SgdNesterov<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace drgrade
