#include "ach/normalization.hpp"

#include "ach/common.hpp"

namespace ach {

MomentPair cross_hadamard_moments(double mu_i, double var_i, double mu_j,
                                  double var_j) {
  detail::require(var_i >= 0.0 && var_j >= 0.0,
                  "cross_hadamard_moments: negative variance");
  MomentPair out;
  out.mean = mu_i * mu_j;
  out.var = mu_i * mu_i * var_j + mu_j * mu_j * var_i + var_i * var_j;
  return out;
}

MomentPair self_hadamard_moments(double mu, double var) {
  detail::require(var >= 0.0, "self_hadamard_moments: negative variance");
  MomentPair out;
  out.mean = mu * mu + var;
  out.var = 2.0 * var * (2.0 * mu * mu + var);
  return out;
}

MomentPair linear_map_moments(double mu, double var,
                              double frobenius_sq_over_rows,
                              double weight_sum_over_rows, double bias_mean) {
  detail::require(var >= 0.0, "linear_map_moments: negative variance");
  detail::require(frobenius_sq_over_rows >= 0.0,
                  "linear_map_moments: negative Frobenius value");
  MomentPair out;
  out.mean = mu * weight_sum_over_rows + bias_mean;
  out.var = var * frobenius_sq_over_rows;
  return out;
}

}  // namespace ach
