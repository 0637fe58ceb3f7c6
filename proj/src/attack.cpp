#include "rsmooth/attack.hpp"

#include <cmath>
#include <stdexcept>

namespace rsmooth {

double AttackConfig::resolved_step() const {
  if (step_size > 0.0) return step_size;
  return steps > 0 ? 2.0 * epsilon / static_cast<double>(steps) : 0.0;
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("attack config: epsilon must be >= 0");
  if (steps < 0) throw std::invalid_argument("attack config: steps must be >= 0");
  if (step_size < 0.0) throw std::invalid_argument("attack config: step_size must be >= 0");
  if (mc_samples < 1) throw std::invalid_argument("attack config: mc_samples must be >= 1");
}

std::vector<double> project_l2_ball(const std::vector<double>& x,
                                    const std::vector<double>& center, double eps) {
  if (x.size() != center.size()) {
    throw std::invalid_argument("project_l2_ball: dimension mismatch");
  }
  if (eps < 0.0) throw std::invalid_argument("project_l2_ball: eps must be >= 0");
  double norm2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - center[i];
    norm2 += d * d;
  }
  const double norm = std::sqrt(norm2);
  if (norm <= eps) return x;
  const double scale = eps / norm;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = center[i] + scale * (x[i] - center[i]);
  }
  return out;
}

Tensor smooth_pgd(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& attack, const SmoothingConfig& smoothing,
                  RngStream stream) {
  attack.validate();
  smoothing.validate();
  const bool single = x.rank() == 1;
  const Tensor x0 = single ? reshape(x.detach(), {1, x.numel()}) : x.detach();
  if (attack.epsilon == 0.0 || attack.steps == 0) {
    return single ? reshape(x0, {x.numel()}) : x0;
  }
  const std::size_t b = x0.shape()[0];
  const std::size_t d = x0.shape()[1];
  if (y.size() != b) throw std::invalid_argument("smooth_pgd: one label per row required");

  ModelParams frozen = detached(params);
  const double step = attack.resolved_step();
  RngStream noise_stream = stream.child(stream_path::kAttack);

  auto draw_noise = [&](RngStream s) {
    std::vector<Tensor> noise;
    noise.reserve(static_cast<std::size_t>(attack.mc_samples));
    for (int k = 0; k < attack.mc_samples; ++k) {
      noise.push_back(sample_gaussian(s, {b, d}, smoothing.sigma));
    }
    return noise;
  };

  std::vector<Tensor> noise;
  if (attack.noise_reuse) noise = draw_noise(noise_stream);

  const std::vector<double>& origin = x0.values();
  std::vector<double> cur = origin;
  for (int t = 0; t < attack.steps; ++t) {
    if (!attack.noise_reuse) {
      noise = draw_noise(noise_stream.child(static_cast<std::uint64_t>(t)));
    }
    Tensor xt = Tensor::from_values({b, d}, cur, true);
    Tensor z = z_hat_given(frozen, xt, noise);
    Tensor ce = neg(sum(log(clamp_prob(gather_class(z, y)))));
    backward(ce);
    const std::vector<double>& g = xt.grad();
    for (std::size_t i = 0; i < b; ++i) {
      double norm2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double gij = g[i * d + j];
        norm2 += gij * gij;
      }
      const double norm = std::sqrt(norm2);
      if (norm > 0.0) {
        const double scale = step / norm;
        for (std::size_t j = 0; j < d; ++j) cur[i * d + j] += scale * g[i * d + j];
      }
      // project the row back onto the ball around its clean point
      double dist2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = cur[i * d + j] - origin[i * d + j];
        dist2 += diff * diff;
      }
      const double dist = std::sqrt(dist2);
      if (dist > attack.epsilon) {
        const double shrink = attack.epsilon / dist;
        for (std::size_t j = 0; j < d; ++j) {
          cur[i * d + j] =
              origin[i * d + j] + shrink * (cur[i * d + j] - origin[i * d + j]);
        }
      }
    }
  }
  Tensor out = Tensor::from_values({b, d}, std::move(cur));
  return single ? reshape(out, {d}) : out;
}

}  // namespace rsmooth
