#pragma once

// Dense kernels shared by the graph evaluator and the policy's direct forward
// path. Both paths call these, so sampled log-probabilities and re-scored
// log-probabilities agree bit for bit.

#include <cmath>
#include <cstddef>

namespace dvrp::detail {

inline void matVec(const double* m, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* mr = m + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += mr[c] * x[c];
    y[r] = acc;
  }
}

inline double maxOf(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

inline void softmax(const double* x, std::size_t n, double* y) {
  const double m = maxOf(x, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    total += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= total;
}

inline void logSoftmax(const double* x, std::size_t n, double* y) {
  const double m = maxOf(x, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::exp(x[i] - m);
  const double logTotal = std::log(total);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - m - logTotal;
}

}  // namespace dvrp::detail
