// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "matml/rng.hpp"
#include "matml/tensor.hpp"

namespace matml::testing {

inline bool close(double a, double b, double rtol, double atol) {
  return std::fabs(a - b) <= atol + rtol * std::max(std::fabs(a), std::fabs(b));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

inline bool all_close(const Tensor& a, const Tensor& b, double rtol, double atol) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (!close(a.data[i], b.data[i], rtol, atol)) return false;
  return true;
}

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Keeps |v| >= margin so ReLU/abs kinks and division poles stay away from the
// finite-difference probes.
inline Tensor random_tensor_away_from_zero(Rng& rng, std::vector<std::size_t> shape,
                                           double margin = 0.2) {
  Tensor t = random_tensor(rng, std::move(shape), margin, 1.0);
  for (double& v : t.data)
    if (rng.uniform() < 0.5) v = -v;
  return t;
}

// Random proper rotation (3x3, det +1) via Gram-Schmidt on random vectors.
inline Tensor random_rotation(Rng& rng) {
  std::array<std::array<double, 3>, 3> b;
  auto dot = [](const auto& u, const auto& v) {
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
  };
  for (int attempt = 0;; ++attempt) {
    for (auto& row : b)
      for (double& v : row) v = rng.uniform(-1, 1);
    bool ok = true;
    for (int i = 0; i < 3 && ok; ++i) {
      for (int j = 0; j < i; ++j) {
        const double c = dot(b[i], b[j]);
        for (int k = 0; k < 3; ++k) b[i][k] -= c * b[j][k];
      }
      const double n = std::sqrt(dot(b[i], b[i]));
      if (n < 1e-6) {
        ok = false;
        break;
      }
      for (double& v : b[i]) v /= n;
    }
    if (!ok) continue;
    // force det = +1
    const double det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) -
                       b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0]) +
                       b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    if (det < 0)
      for (int k = 0; k < 3; ++k) b[2][k] = -b[2][k];
    Tensor r = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) r.data[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(k)] = b[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    return r;
  }
}

// Compares grad() against finite_difference for a scalar-valued tensor
// function of several inputs. `f` must accept both taped and tape-free inputs.
inline bool gradients_match_fd(const std::function<Tensor(std::span<const Tensor>)>& f,
                               const std::vector<Tensor>& inputs, double rtol, double atol,
                               double h = 1e-6) {
  Tape tape;
  std::vector<Tensor> attached;
  attached.reserve(inputs.size());
  for (const Tensor& t : inputs) attached.push_back(tape.leaf(t));
  Tensor out = f(attached);
  std::vector<Tensor> analytic = grad(out, std::span<const Tensor>(attached));

  for (std::size_t j = 0; j < inputs.size(); ++j) {
    auto partial = [&](const Tensor& x) {
      std::vector<Tensor> probe = inputs;
      probe[j] = x;
      return f(probe).item();
    };
    Tensor fd = finite_difference(partial, inputs[j], h);
    if (!all_close(analytic[j], fd, rtol, atol)) return false;
  }
  return true;
}

}  // namespace matml::testing
