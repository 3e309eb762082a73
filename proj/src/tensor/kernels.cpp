#include "gcnforge/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gcnforge::kernels {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  // Four rows of C share each row of B. Every element still accumulates over
  // p in ascending order, so results do not depend on the blocking.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = c + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                 double* c) {
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    const double* a0 = a + p * m;
    const double* __restrict b0 = b + p * n;
    const double* __restrict b1 = b0 + n;
    const double* __restrict b2 = b1 + n;
    const double* __restrict b3 = b2 + n;
    for (std::size_t i = 0; i < m; ++i) {
      const double v0 = a0[i], v1 = a0[m + i], v2 = a0[2 * m + i], v3 = a0[3 * m + i];
      double* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        double x = crow[j];
        x += v0 * b0[j];
        x += v1 * b1[j];
        x += v2 * b2[j];
        x += v3 * b3[j];
        crow[j] = x;
      }
    }
  }
  for (; p < k; ++p) {
    const double* arow = a + p * m;
    const double* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const double* in, double* out) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
      }
    }
  }
}

void attend_row(const double* q, const double* keys, const double* values, std::size_t stride,
                std::size_t n, std::size_t hd, double scale, double* probs, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const double* kr = keys + j * stride;
    double s = 0.0;
    for (std::size_t t = 0; t < hd; ++t) s += q[t] * kr[t];
    s *= scale;
    probs[j] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    z += probs[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < n; ++j) probs[j] *= inv;
  std::fill(out, out + hd, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double pj = probs[j];
    const double* vr = values + j * stride;
    for (std::size_t t = 0; t < hd; ++t) out[t] += pj * vr[t];
  }
}

double log_sum_exp(const double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  return mx + std::log(z);
}

}  // namespace gcnforge::kernels
