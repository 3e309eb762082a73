#pragma once

#include <cstddef>

// Raw loops shared by the tape ops and the incremental decoder. Keeping a
// single out-of-line definition for each guarantees that both paths produce
// bit-identical rows for the same inputs.
namespace gcnforge::kernels {

// c[m,n] (+)= a[m,k] * b[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c, bool accumulate);
// c[m,n] += a[k,m]^T * b[k,n]
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                 double* c);
// out[cols,rows] = in[rows,cols]^T
void transpose(std::size_t rows, std::size_t cols, const double* in, double* out);

// One query row attending over n keys/values laid out with a row stride.
// Writes the attention weights to probs[0..n) and the mixed value to out[0..hd).
void attend_row(const double* q, const double* keys, const double* values, std::size_t stride,
                std::size_t n, std::size_t hd, double scale, double* probs, double* out);

// Numerically stable log-sum-exp of x[0..n).
double log_sum_exp(const double* x, std::size_t n);

}  // namespace gcnforge::kernels
