#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gcnforge/rng.hpp"
#include "gcnforge/tensor.hpp"

namespace gcnforge {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Bias-corrected Adam update; zeroes the gradients afterwards. Moment buffers
// are created on the first call and must keep matching the parameter list.
void adam_step(std::span<Tensor> params, AdamState& state);

double global_grad_norm(std::span<const Tensor> params);

// Rescales all gradients by max_norm / g when the global L2 norm g exceeds
// max_norm. Returns the applied factor (1 when untouched).
double clip_grad_norm(std::span<Tensor> params, double max_norm);

void zero_grads(std::span<Tensor> params);

std::size_t sample_categorical(std::span<const double> probs, Rng& rng);

}  // namespace gcnforge
