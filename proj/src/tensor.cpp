#include "drgrade/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "drgrade/errors.hpp"

namespace drgrade {

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size())
    throw ConfigError("tensor shape " + shape_str(shape_) + " does not match " +
                      std::to_string(data_.size()) + " values");
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> samples) {
  if (samples.empty()) throw UsageError("stack: no samples");
  const Shape& inner = samples.front()->shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<T> out(shape);
  const std::size_t stride = samples.front()->size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->shape() != inner)
      throw ConfigError("stack: sample " + std::to_string(i) + " has shape " +
                        shape_str(samples[i]->shape()) + ", expected " + shape_str(inner));
    std::copy_n(samples[i]->data(), stride, out.data() + i * stride);
  }
  return out;
}

template <typename T>
Tensor<T> slice_sample(const Tensor<T>& batch, std::size_t n) {
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t stride = shape_product(inner);
  std::vector<T> data(batch.data() + n * stride, batch.data() + (n + 1) * stride);
  return Tensor<T>(std::move(inner), std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> stack(std::span<const Tensor<float>* const>);
template Tensor<double> stack(std::span<const Tensor<double>* const>);
template Tensor<float> slice_sample(const Tensor<float>&, std::size_t);
template Tensor<double> slice_sample(const Tensor<double>&, std::size_t);

}  // namespace drgrade
