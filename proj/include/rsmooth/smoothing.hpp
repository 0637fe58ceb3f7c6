#pragma once

#include <functional>
#include <vector>

#include "rsmooth/model.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"

namespace rsmooth {

constexpr int kAbstain = -1;

struct SmoothingConfig {
  double sigma = 0.5;
  int m = 8;                    // Monte Carlo draws for soft estimates
  long long n0 = 100;           // class selection draws
  long long n = 10000;          // estimation draws
  double alpha = 0.001;         // certification failure probability
  long long batch_size = 1000;  // draws evaluated per forward pass

  void validate() const;
};

struct CertificationResult {
  int prediction = kAbstain;
  double radius = 0.0;
  double pa_lower = 0.0;
  std::vector<long long> counts;  // per-class tallies over the n estimation draws
  double elapsed = 0.0;           // seconds

  bool abstain() const { return prediction == kAbstain; }
};

struct PredictResult {
  int prediction = kAbstain;
  std::vector<long long> counts;

  bool abstain() const { return prediction == kAbstain; }
};

/// A hard classifier the smoothing machinery can query in batches. The
/// callable fills out[0..rows) with class indices for rows of dim-wide
/// points stored contiguously.
struct BaseClassifier {
  std::size_t input_dim = 0;
  int num_classes = 0;
  std::function<void(const double* batch, std::size_t rows, int* out)> predict;
};

BaseClassifier as_base_classifier(const ModelParams& params);

/// Monte Carlo estimate of the smoothed soft output: the mean of
/// forward_soft over cfg.m Gaussian perturbations of each row of x.
/// Differentiable in both x and the parameters.
Tensor z_hat(const ModelParams& params, const Tensor& x, const SmoothingConfig& cfg,
             RngStream stream);

/// Same estimator with caller-supplied noise tensors (one per draw),
/// which is how common random numbers are reused across attack steps.
Tensor z_hat_given(const ModelParams& params, const Tensor& x,
                   const std::vector<Tensor>& noise);

/// Difference of normal quantiles between the label entry and the best
/// other entry of each probability row; rows are clamped before the
/// quantile. y supplies one label per row.
Tensor xi_hat(const Tensor& z, const std::vector<int>& y);
Tensor xi_hat(const Tensor& z, int y);

/// (sigma / 2) * (icdf(pa) - icdf(pb)). Requires 0 < pb <= pa < 1.
double certified_radius(double pa, double pb, double sigma);

/// Two-phase Monte Carlo certification: pick the top class from n0
/// selection draws, lower-bound its probability from n fresh estimation
/// draws with a Clopper-Pearson bound, and certify radius
/// sigma * icdf(bound) when the bound clears 1/2, abstaining otherwise.
/// Selection and estimation use disjoint child streams of point_stream.
CertificationResult certify(const BaseClassifier& clf, const std::vector<double>& x,
                            const SmoothingConfig& cfg, const RngStream& point_stream);
CertificationResult certify(const ModelParams& params, const std::vector<double>& x,
                            const SmoothingConfig& cfg, const RngStream& point_stream);

/// Prediction with abstention: top class from n draws if an exact
/// two-sided binomial test between the top two counts rejects p = 1/2 at
/// level alpha. Shares the estimation stream path with certify.
PredictResult predict(const BaseClassifier& clf, const std::vector<double>& x,
                      const SmoothingConfig& cfg, const RngStream& point_stream);
PredictResult predict(const ModelParams& params, const std::vector<double>& x,
                      const SmoothingConfig& cfg, const RngStream& point_stream);

}  // namespace rsmooth
