#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"

namespace rsmooth {

/// A weighted soft-voting ensemble over base models that share input
/// dimension and class count. Weights are nonnegative and sum to 1.
struct EnsembleSpec {
  std::vector<ModelParams> components;
  std::vector<double> weights;

  void validate() const;
};

/// Normalize nonnegative raw weights to the simplex.
std::vector<double> normalized_weights(const std::vector<double>& raw);

/// Weighted mean of the component soft outputs.
Tensor ensemble_soft(const EnsembleSpec& ens, const Tensor& x);

/// Argmax of ensemble_soft per row, ties to the lowest class index.
std::vector<int> ensemble_predict_hard(const EnsembleSpec& ens, const Tensor& x);

BaseClassifier as_base_classifier(const EnsembleSpec& ens);

/// certify() run with the hard ensemble vote as the base classifier.
CertificationResult ensemble_certify(const EnsembleSpec& ens, const std::vector<double>& x,
                                     const SmoothingConfig& cfg,
                                     const RngStream& point_stream);

/// Per-class variance of the weighted sum: sum_l w_l^2 var_l plus twice
/// the weighted covariances over unordered component pairs. var_l holds
/// one per-class vector per component; cov one vector per pair {l, m}.
std::vector<double> variance_of_ensemble(
    const std::vector<std::vector<double>>& var_l,
    const std::map<std::pair<std::size_t, std::size_t>, std::vector<double>>& cov_lm,
    const std::vector<double>& weights);

/// Chebyshev-style lower bound on the top-class probability:
/// 1 - sum_{i >= 1} varbar_i / e_i^2, where index 0 is the top class and
/// is excluded from the sum. All e_i must be positive. The bound may be
/// negative; a vacuous bound is returned as-is.
double p1_lower_bound(const std::vector<double>& varbar, const std::vector<double>& e);

/// Independently for every scalar parameter: with probability t, add
/// N(0, sigma_tilde^2) noise. The input is left untouched.
ModelParams perturb_model(const ModelParams& params, double t, double sigma_tilde,
                          RngStream stream);

/// Moment estimates of the per-class margins F(x)_y - F(x)_i of two
/// models under input noise and parameter perturbation.
struct MarginStats {
  std::vector<double> mean1;  // mean margins of model 1, per class
  std::vector<double> mean2;
  std::vector<double> b;  // variance of model 1 margins
  std::vector<double> c;  // twice the cross covariance
  std::vector<double> d;  // variance of model 2 margins
  std::vector<double> a;  // inverse squared floored min-mean margins
  int label = 0;
  long long m = 0;  // perturbed copies per model
  long long n = 0;  // noisy inputs

  void validate() const;
};

/// Moments from raw margin samples, one [m*n, classes] matrix per model.
MarginStats margin_stats_from_samples(const Tensor& z1, const Tensor& z2, int label,
                                      long long m, long long n);

/// Sample n noisy inputs from N(x, sigma^2 I), evaluate m perturbed
/// copies of each model on all of them, and reduce the margins to
/// moment estimates.
MarginStats estimate_margin_stats(const ModelParams& f1, const ModelParams& f2,
                                  const std::vector<double>& x, int label, long long m,
                                  long long n, double t, double sigma, double sigma_tilde,
                                  RngStream stream);

struct WeightChoice {
  double w1 = 0.0;
  double w2 = 1.0;
};

/// Minimizer over [0, 1] of q(w) = A w^2 + B w + C: the interior vertex
/// when A > 0 and it lands inside, otherwise the better endpoint.
WeightChoice solve_weight_quadratic(double A, double B);

/// Two-model weight choice minimizing the variance proxy built from the
/// margin moments, summed over classes other than the label.
WeightChoice compute_weight(const MarginStats& stats);

/// On-disk ensemble description.
struct EnsembleSpecFile {
  std::string version = "v1";
  std::vector<std::string> components;  // checkpoint paths
  std::vector<double> weights;
  std::string weight_mode = "fixed";  // "fixed" or "per_point"
  long long alg_m = 10;
  long long alg_n = 10;
  double alg_t = 0.3;
  double alg_sigma = 0.5;
  double alg_sigma_tilde = 0.01;

  void validate() const;
};

void save_ensemble_spec(const EnsembleSpecFile& file, const std::string& path);
EnsembleSpecFile load_ensemble_spec(const std::string& path);

/// Load every component checkpoint; relative paths resolve against the
/// directory containing the spec file.
EnsembleSpec resolve_ensemble(const EnsembleSpecFile& file, const std::string& spec_path);

}  // namespace rsmooth
