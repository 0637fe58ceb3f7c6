#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rsmooth/attack.hpp"
#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/tensor.hpp"

namespace rsmooth {

enum class TrainMethod { kAdvMacer, kMacer, kSmoothAdv, kGaussianAug };

std::string train_method_name(TrainMethod m);
TrainMethod parse_train_method(const std::string& name);

struct LabeledData {
  Tensor features;  // [n, d]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.shape()[1] : 0; }
  std::size_t num_classes() const;
  void validate() const;
};

struct TrainConfig {
  TrainMethod method = TrainMethod::kAdvMacer;
  double lambda = 12.0;  // weight of the radius hinge term
  double gamma = 8.0;    // hinge margin on the quantile gap
  int epochs = 50;
  std::size_t batch_size = 32;
  double lr_init = 0.1;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 50;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  AttackConfig attack;
  SmoothingConfig smoothing;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::kRelu;
  double beta = 16.0;
  // The per-batch shift applied before the loss estimate: one shared
  // Gaussian draw across the batch by default, or per-sample draws.
  bool shared_shift = true;
  // Reuse the mask-stage noise for the shifted estimate instead of
  // drawing fresh samples (fresh draws are the default behaviour).
  bool reuse_shift_noise = false;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 disables
  std::string checkpoint_dir;

  void validate() const;
  double lr_at_epoch(int epoch) const;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_ce = 0.0;
  double mean_lr_term = 0.0;        // radius hinge contribution before lambda
  double correct_fraction = 0.0;    // share of samples the estimator got right
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

void write_report_jsonl(const TrainReport& report, const std::string& path);

/// Per-sample radius hinge: (sigma / 2) * max{gamma - xi_hat(z, y), 0}
/// for rows whose estimate ranks the label first, exactly 0 otherwise.
/// The indicator enters as a constant 0/1 mask, so no gradient ever
/// flows through it.
Tensor loss_lr_batch(const Tensor& z, const std::vector<int>& y, double sigma, double gamma);
Tensor loss_lr(const Tensor& z, int y, double sigma, double gamma);

/// Cross-entropy of the Monte Carlo smoothed estimate at x_hat plus
/// lambda times the mean radius hinge, as one differentiable scalar.
Tensor advmacer_objective(const ModelParams& params, const Tensor& x_hat,
                          const std::vector<int>& y, const TrainConfig& cfg,
                          RngStream stream);

/// Objective evaluated at the attacked points produced by smooth_pgd.
Tensor loss_advmacer(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                     const TrainConfig& cfg, RngStream stream);

/// Objective evaluated at the clean points (no attack).
Tensor loss_macer(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                  const TrainConfig& cfg, RngStream stream);

/// SGD with momentum over the configured objective. Per batch: attack
/// (for the adversarial methods), estimate the correctness mask, shift
/// every point by a fresh Gaussian draw, and take one step on the
/// combined cross-entropy and hinge objective at the shifted points.
/// Aborts with epoch/batch context if the loss turns non-finite.
std::pair<ModelParams, TrainReport> train(const LabeledData& data, const TrainConfig& cfg);

}  // namespace rsmooth
