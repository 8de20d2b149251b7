#include "drgrade/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "drgrade/errors.hpp"
#include "drgrade/parallel.hpp"

namespace drgrade {
namespace {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t k = 0;
      for (; k + 4 <= K; k += 4) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
      }
      for (; k < K; ++k) s0 += a[k] * b[k];
      C[i * N + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[k * M + i];
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvGeometry {
  std::size_t C, H, W, F, k, stride, pad, OH, OW;
  std::size_t patch() const { return C * k * k; }
  std::size_t positions() const { return OH * OW; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                           std::size_t padding) {
  if (input.rank() != 4) throw ConfigError("conv2d: input must be (N, C, H, W), got " + shape_str(input.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
    throw ConfigError("conv2d: weight must be (F, C, k, k), got " + shape_str(weight.shape()));
  if (weight.dim(1) != input.dim(1))
    throw ConfigError("conv2d: input has " + std::to_string(input.dim(1)) + " channels but weight expects " +
                      std::to_string(weight.dim(1)));
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  g.OH = window_out_extent(g.H, g.k, stride, padding);
  g.OW = window_out_extent(g.W, g.k, stride, padding);
  return g;
}

// Patch matrix for one sample: rows (c, ki, kj), columns output positions.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.OH; ++oh) {
          const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.stride + ki) - std::ptrdiff_t(g.pad);
          T* dst = row + oh * g.OW;
          if (ih < 0 || ih >= std::ptrdiff_t(g.H)) {
            std::fill_n(dst, g.OW, T(0));
            continue;
          }
          const T* src = in + (c * g.H + std::size_t(ih)) * g.W;
          for (std::size_t ow = 0; ow < g.OW; ++ow) {
            const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.stride + kj) - std::ptrdiff_t(g.pad);
            dst[ow] = (iw < 0 || iw >= std::ptrdiff_t(g.W)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* in) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * P;
        for (std::size_t oh = 0; oh < g.OH; ++oh) {
          const std::ptrdiff_t ih = std::ptrdiff_t(oh * g.stride + ki) - std::ptrdiff_t(g.pad);
          if (ih < 0 || ih >= std::ptrdiff_t(g.H)) continue;
          T* dst = in + (c * g.H + std::size_t(ih)) * g.W;
          for (std::size_t ow = 0; ow < g.OW; ++ow) {
            const std::ptrdiff_t iw = std::ptrdiff_t(ow * g.stride + kj) - std::ptrdiff_t(g.pad);
            if (iw >= 0 && iw < std::ptrdiff_t(g.W)) dst[iw] += row[oh * g.OW + ow];
          }
        }
      }
}

}  // namespace

std::size_t window_out_extent(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("stride must be >= 1");
  if (window == 0 || in + 2 * padding < window)
    throw ConfigError("window " + std::to_string(window) + " does not fit extent " + std::to_string(in) +
                      " with padding " + std::to_string(padding));
  return (in + 2 * padding - window) / stride + 1;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, weight, stride, padding);
  if (bias.size() != g.F) throw ConfigError("conv2d: bias must have one entry per output feature map");
  const std::size_t N = input.dim(0);
  const std::size_t P = g.positions();
  Tensor<T> out({N, g.F, g.OH, g.OW});
  parallel_chunks(N, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<T> cols(g.patch() * P);
    for (std::size_t n = begin; n < end; ++n) {
      im2col(input.data() + n * g.C * g.H * g.W, g, cols.data());
      T* o = out.data() + n * g.F * P;
      for (std::size_t f = 0; f < g.F; ++f) std::fill_n(o + f * P, P, bias[f]);
      gemm_nn(g.F, P, g.patch(), weight.data(), cols.data(), o);
    }
  });
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, const Tensor<T>& weight,
                             std::size_t stride, std::size_t padding) {
  if (cached_input.empty()) throw UsageError("conv2d_backward: no cached forward input");
  const ConvGeometry g = conv_geometry(cached_input, weight, stride, padding);
  const std::size_t N = cached_input.dim(0);
  const Shape expected{N, g.F, g.OH, g.OW};
  if (grad_out.shape() != expected)
    throw UsageError("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) + " != forward output " +
                     shape_str(expected));
  const std::size_t P = g.positions();

  ConvGrads<T> grads{Tensor<T>(cached_input.shape()), Tensor<T>(weight.shape()), Tensor<T>({g.F})};
  const std::size_t chunks = chunk_count(N);
  std::vector<Tensor<T>> w_part(chunks, Tensor<T>(weight.shape()));
  std::vector<Tensor<T>> b_part(chunks, Tensor<T>({g.F}));

  parallel_chunks(N, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    std::vector<T> cols(g.patch() * P);
    std::vector<T> gcols(g.patch() * P);
    for (std::size_t n = begin; n < end; ++n) {
      const T* go = grad_out.data() + n * g.F * P;
      im2col(cached_input.data() + n * g.C * g.H * g.W, g, cols.data());
      gemm_nt(g.F, g.patch(), P, go, cols.data(), w_part[chunk].data());
      for (std::size_t f = 0; f < g.F; ++f) {
        T s = 0;
        for (std::size_t p = 0; p < P; ++p) s += go[f * P + p];
        b_part[chunk][f] += s;
      }
      std::fill(gcols.begin(), gcols.end(), T(0));
      gemm_tn(g.patch(), P, g.F, weight.data(), go, gcols.data());
      col2im_add(gcols.data(), g, grads.input.data() + n * g.C * g.H * g.W);
    }
  });
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t i = 0; i < grads.weight.size(); ++i) grads.weight[i] += w_part[c][i];
    for (std::size_t f = 0; f < g.F; ++f) grads.bias[f] += b_part[c][f];
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& input, std::size_t window, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4) throw ConfigError("maxpool: input must be (N, C, H, W), got " + shape_str(input.shape()));
  if (padding >= window) throw ConfigError("maxpool: padding must be smaller than the window");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OH = window_out_extent(H, window, stride, padding);
  const std::size_t OW = window_out_extent(W, window, stride, padding);
  PoolResult<T> r{Tensor<T>({N, C, OH, OW}), std::vector<std::size_t>(N * C * OH * OW)};
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      const std::ptrdiff_t h0 = std::ptrdiff_t(oh * stride) - std::ptrdiff_t(padding);
      const std::size_t hb = std::size_t(std::max<std::ptrdiff_t>(h0, 0));
      const std::size_t he = std::size_t(std::min<std::ptrdiff_t>(h0 + std::ptrdiff_t(window), std::ptrdiff_t(H)));
      for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
        const std::ptrdiff_t w0 = std::ptrdiff_t(ow * stride) - std::ptrdiff_t(padding);
        const std::size_t wb = std::size_t(std::max<std::ptrdiff_t>(w0, 0));
        const std::size_t we = std::size_t(std::min<std::ptrdiff_t>(w0 + std::ptrdiff_t(window), std::ptrdiff_t(W)));
        std::size_t best = base + hb * W + wb;
        for (std::size_t h = hb; h < he; ++h)
          for (std::size_t w = wb; w < we; ++w) {
            const std::size_t idx = base + h * W + w;
            if (input[idx] > input[best]) best = idx;
          }
        r.output[o] = input[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax,
                           const Shape& input_shape) {
  if (argmax.size() != grad_out.size()) throw UsageError("maxpool_backward: no matching forward cache");
  Tensor<T> grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += grad_out[i];
  return grad;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] >= T(0) ? input[i] : slope * input[i];
  return out;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, T slope) {
  if (cached_input.shape() != grad_out.shape()) throw UsageError("leaky_relu_backward: no matching forward cache");
  Tensor<T> grad(grad_out.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = cached_input[i] >= T(0) ? grad_out[i] : slope * grad_out[i];
  return grad;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 2) throw ConfigError("dense: input must be (N, D), got " + shape_str(input.shape()));
  if (weight.rank() != 2 || weight.dim(1) != input.dim(1))
    throw ConfigError("dense: input width " + std::to_string(input.dim(1)) + " does not match weight " +
                      shape_str(weight.shape()));
  const std::size_t N = input.dim(0), D = input.dim(1), U = weight.dim(0);
  if (bias.size() != U) throw ConfigError("dense: bias must have one entry per unit");
  Tensor<T> out({N, U});
  for (std::size_t n = 0; n < N; ++n) std::copy_n(bias.data(), U, out.data() + n * U);
  gemm_nt(N, U, D, input.data(), weight.data(), out.data());
  return out;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& cached_input, const Tensor<T>& weight) {
  if (cached_input.empty()) throw UsageError("dense_backward: no cached forward input");
  const std::size_t N = cached_input.dim(0), D = cached_input.dim(1), U = weight.dim(0);
  if (grad_out.shape() != Shape{N, U}) throw UsageError("dense_backward: grad_out shape mismatch");
  DenseGrads<T> g{Tensor<T>({N, D}), Tensor<T>({U, D}), Tensor<T>({U})};
  gemm_tn(U, D, N, grad_out.data(), cached_input.data(), g.weight.data());
  gemm_nn(N, D, U, grad_out.data(), weight.data(), g.input.data());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t u = 0; u < U; ++u) g.bias[u] += grad_out[n * U + u];
  return g;
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must be in [0, 1)");
  if (mode == Mode::infer || p == 0.0) return {input, Tensor<T>()};
  DropoutResult<T> r{Tensor<T>(input.shape()), Tensor<T>(input.shape())};
  const T scale = T(1.0 / (1.0 - p));
  std::bernoulli_distribution keep(1.0 - p);
  for (std::size_t i = 0; i < input.size(); ++i) {
    r.mask[i] = keep(rng) ? scale : T(0);
    r.output[i] = input[i] * r.mask[i];
  }
  return r;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const Tensor<T>& mask) {
  if (mask.empty()) return grad_out;
  if (mask.shape() != grad_out.shape()) throw UsageError("dropout_backward: mask shape mismatch");
  Tensor<T> grad(grad_out.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = grad_out[i] * mask[i];
  return grad;
}

template <typename T>
MaxoutResult<T> maxout(const Tensor<T>& input, std::size_t group) {
  if (input.rank() != 2) throw ConfigError("maxout: input must be (N, U), got " + shape_str(input.shape()));
  const std::size_t N = input.dim(0), U = input.dim(1);
  if (group == 0 || U % group != 0)
    throw ConfigError("maxout: width " + std::to_string(U) + " is not divisible by group " + std::to_string(group));
  const std::size_t V = U / group;
  MaxoutResult<T> r{Tensor<T>({N, V}), std::vector<std::size_t>(N * V)};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t first = n * U + v * group;
      std::size_t best = first;
      for (std::size_t j = 1; j < group; ++j)
        if (input[first + j] > input[best]) best = first + j;
      r.output[n * V + v] = input[best];
      r.argmax[n * V + v] = best;
    }
  return r;
}

template <typename T>
Tensor<T> maxout_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax,
                          const Shape& input_shape) {
  if (argmax.size() != grad_out.size()) throw UsageError("maxout_backward: no matching forward cache");
  Tensor<T> grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += grad_out[i];
  return grad;
}

template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ConfigError("mse_loss: prediction shape " + shape_str(pred.shape()) + " != target shape " +
                      shape_str(target.shape()));
  if (pred.empty()) throw UsageError("mse_loss: empty batch");
  const T n = T(pred.size());
  LossResult<T> r{T(0), Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    r.loss += d * d;
    r.grad[i] = T(2) * d / n;
  }
  r.loss /= n;
  return r;
}

template <typename T>
Tensor<T> orthogonal_init(const Shape& shape, Rng& rng) {
  if (shape.size() < 2) throw ConfigError("orthogonal_init: need at least a 2-d shape");
  const std::size_t rows = shape[0];
  const std::size_t cols = shape_product(shape) / rows;
  const bool wide = rows <= cols;
  // QR of a tall Gaussian matrix; Q columns are orthonormal.
  const Eigen::Index m = Eigen::Index(wide ? cols : rows);
  const Eigen::Index n = Eigen::Index(wide ? rows : cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(m, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < m; ++i) a(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
  // Sign correction makes the distribution uniform (Haar).
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;

  Tensor<T> out(shape);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = T(wide ? q(Eigen::Index(j), Eigen::Index(i)) : q(Eigen::Index(i), Eigen::Index(j)));
  return out;
}

#define DRGRADE_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                    std::size_t);                                                               \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                        std::size_t);                                                           \
  template PoolResult<T> maxpool_forward(const Tensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> maxpool_backward(const Tensor<T>&, const std::vector<std::size_t>&, const Shape&);        \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                           \
  template Tensor<T> leaky_relu_backward(const Tensor<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template DenseGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template DropoutResult<T> dropout(const Tensor<T>&, double, Mode, Rng&);                                      \
  template Tensor<T> dropout_backward(const Tensor<T>&, const Tensor<T>&);                                      \
  template MaxoutResult<T> maxout(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> maxout_backward(const Tensor<T>&, const std::vector<std::size_t>&, const Shape&);         \
  template LossResult<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> orthogonal_init(const Shape&, Rng&);

DRGRADE_INSTANTIATE_OPS(float)
DRGRADE_INSTANTIATE_OPS(double)

}  // namespace drgrade
