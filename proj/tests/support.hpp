#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cdkt/random.hpp"
#include "cdkt/tensor.hpp"

namespace cdkt::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline Tensor random_probs(Index rows, Index cols, Rng& rng) {
  Tensor t({rows, cols});
  auto m = t.matrix();
  for (Index r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (Index c = 0; c < cols; ++c) sum += m(r, c) = 0.05 + rng.uniform();
    m.row(r) /= sum;
  }
  return t;
}

inline std::vector<int> random_labels(Index n, Index classes, Rng& rng) {
  std::vector<int> y;
  for (Index i = 0; i < n; ++i) y.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  return y;
}

// Central differences of a scalar function of `x`, one coordinate at a time.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + h;
    const double up = f(probe);
    probe[i] = keep - h;
    const double down = f(probe);
    probe[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, tiny)
inline double rel_err(const Tensor& a, const Tensor& b) {
  const double scale = std::max({a.data().norm(), b.data().norm(), 1e-12});
  return (a.data() - b.data()).norm() / scale;
}

}  // namespace cdkt::test
