#pragma once

// Independent reference implementations used by the tests. Nothing here
// calls into the library's own kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "drgrade/network.hpp"
#include "drgrade/tensor.hpp"

namespace oracle {

using drgrade::Tensor;

// Direct 7-loop convolution with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<T> out({N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = double(b[f]);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const auto y = std::ptrdiff_t(i * stride + u) - std::ptrdiff_t(pad);
                const auto z = std::ptrdiff_t(j * stride + v) - std::ptrdiff_t(pad);
                if (y < 0 || z < 0 || y >= std::ptrdiff_t(H) || z >= std::ptrdiff_t(W)) continue;
                acc += double(x.at(n, c, std::size_t(y), std::size_t(z))) * double(w.at(f, c, u, v));
              }
          out.at(n, f, i, j) = T(acc);
        }
  return out;
}

// Max over each window, padded cells excluded.
template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, std::size_t win, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = (H + 2 * pad - win) / stride + 1, Wo = (W + 2 * pad - win) / stride + 1;
  Tensor<T> out({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          T best = -std::numeric_limits<T>::infinity();
          for (std::size_t u = 0; u < win; ++u)
            for (std::size_t v = 0; v < win; ++v) {
              const auto y = std::ptrdiff_t(i * stride + u) - std::ptrdiff_t(pad);
              const auto z = std::ptrdiff_t(j * stride + v) - std::ptrdiff_t(pad);
              if (y < 0 || z < 0 || y >= std::ptrdiff_t(H) || z >= std::ptrdiff_t(W)) continue;
              best = std::max(best, x.at(n, c, std::size_t(y), std::size_t(z)));
            }
          out.at(n, c, i, j) = best;
        }
  return out;
}

// out = x W^T + b with a plain triple loop.
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t N = x.dim(0), D = x.dim(1), U = w.dim(0);
  Tensor<T> out({N, U});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t u = 0; u < U; ++u) {
      double acc = double(b[u]);
      for (std::size_t d = 0; d < D; ++d) acc += double(x.at(n, d)) * double(w.at(u, d));
      out.at(n, u) = T(acc);
    }
  return out;
}

// Quadratic weighted kappa straight from the contingency-table definition:
// O observed counts, E = outer(hist_true, hist_pred) / N, w_ij = (i-j)^2/16.
inline double qwk(std::span<const int> a, std::span<const int> b) {
  const int K = 5;
  double O[5][5] = {}, ha[5] = {}, hb[5] = {};
  for (std::size_t i = 0; i < a.size(); ++i) {
    O[a[i]][b[i]] += 1;
    ha[a[i]] += 1;
    hb[b[i]] += 1;
  }
  const double N = double(a.size());
  double num = 0, den = 0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      const double w = double((i - j) * (i - j)) / double((K - 1) * (K - 1));
      num += w * O[i][j];
      den += w * ha[i] * hb[j] / N;
    }
  return 1.0 - num / den;
}

// P(score_pos > score_neg) + 0.5 P(tie) over all pairs.
inline double auc_pairwise(std::span<const double> s, std::span<const int> y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// gradient is zero from turning round-off into huge relative errors.
inline double rel_error(double a, double n, double floor = 1e-7) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central difference of f at x[i].
inline double central_difference(const std::function<double()>& f, double& xi, double eps) {
  const double keep = xi;
  xi = keep + eps;
  const double up = f();
  xi = keep - eps;
  const double down = f();
  xi = keep;
  return (up - down) / (2 * eps);
}

// Everything a piecewise-linear network's local linearization depends on:
// activation sign patterns and pooling / maxout winners.
inline std::vector<std::uint64_t> kink_signature(const drgrade::Network<double>& net,
                                                 const drgrade::Network<double>::Tape& tape) {
  std::vector<std::uint64_t> sig;
  for (std::size_t l = 0; l < tape.caches.size(); ++l) {
    const auto kind = net.layers()[l].kind;
    const auto& c = tape.caches[l];
    if (kind == drgrade::LayerKind::leaky_relu || kind == drgrade::LayerKind::relu) {
      for (double v : c.input.values()) sig.push_back(v > 0 ? 1 : 0);
    } else if (kind == drgrade::LayerKind::maxpool || kind == drgrade::LayerKind::maxout) {
      sig.insert(sig.end(), c.argmax.begin(), c.argmax.end());
    }
  }
  return sig;
}

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::string worst;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

// Checks up to `per_tensor` coordinates of every parameter tensor (all of
// them when the tensor is smaller) against central differences of the MSE
// loss. Dropout masks are pinned by re-seeding the RNG for every evaluation.
// Coordinates whose +-eps perturbation crosses a kink are skipped.
inline GradCheckResult check_network_gradients(drgrade::Network<double>& net, const Tensor<double>& x,
                                               const Tensor<double>& y, std::size_t per_tensor, double eps,
                                               std::uint64_t seed) {
  using Net = drgrade::Network<double>;
  auto run = [&](Net::Tape* tape) {
    drgrade::Rng rng(seed);
    const auto out = net.forward(x, drgrade::Mode::train, &rng, tape);
    double loss = 0;
    for (std::size_t i = 0; i < out.size(); ++i) loss += (out[i] - y[i]) * (out[i] - y[i]);
    return std::pair{out, loss / double(out.size())};
  };

  Net::Tape tape;
  const auto [out, base_loss] = run(&tape);
  (void)base_loss;
  Tensor<double> grad_out(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) grad_out[i] = 2.0 * (out[i] - y[i]) / double(out.size());
  const auto grads = net.backward(grad_out, tape);
  const auto base_sig = kink_signature(net, tape);

  GradCheckResult res;
  auto params = net.parameters();
  const auto names = net.parameter_names();
  drgrade::Rng pick(seed ^ 0x5eedULL);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t n = params[p]->size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > per_tensor) {
      std::shuffle(coords.begin(), coords.end(), pick);
      coords.resize(per_tensor);
    }
    for (std::size_t i : coords) {
      double& w = (*params[p])[i];
      const double keep = w;
      bool kink = false;
      for (double d : {eps, -eps}) {
        w = keep + d;
        Net::Tape t;
        run(&t);
        if (kink_signature(net, t) != base_sig) kink = true;
      }
      w = keep;
      if (kink) {
        ++res.skipped_kinks;
        continue;
      }
      const double numeric = central_difference([&] { return run(nullptr).second; }, w, eps);
      const double err = rel_error(grads[p][i], numeric);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = names[p] + "[" + std::to_string(i) + "]";
        res.worst_analytic = grads[p][i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace oracle
