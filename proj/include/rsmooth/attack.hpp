#pragma once

#include <vector>

#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"

namespace rsmooth {

struct AttackConfig {
  double epsilon = 1.0;    // L2 ball radius around the clean point
  int steps = 2;           // PGD iterations
  double step_size = 0.0;  // 0 selects the default 2 * epsilon / steps
  int mc_samples = 8;      // Monte Carlo draws per gradient estimate
  bool noise_reuse = true; // common random numbers across steps

  double resolved_step() const;
  void validate() const;
};

/// Euclidean projection of x onto the closed ball of radius eps around
/// center. Points inside are returned unchanged.
std::vector<double> project_l2_ball(const std::vector<double>& x,
                                    const std::vector<double>& center, double eps);

/// Projected gradient ascent on the smoothed cross-entropy
/// -log z_hat(x')_y, with per-row normalized gradient steps and
/// projection onto the per-row epsilon ball. Gradients flow only into
/// the input; the parameters are frozen for the duration of the attack.
/// With epsilon = 0 or steps = 0 the input is returned unchanged. A row
/// whose gradient estimate is exactly zero stays where it is.
Tensor smooth_pgd(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& attack, const SmoothingConfig& smoothing,
                  RngStream stream);

}  // namespace rsmooth
