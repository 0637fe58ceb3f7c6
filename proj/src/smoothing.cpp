#include "rsmooth/smoothing.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace rsmooth {

namespace {

std::vector<long long> count_noisy_predictions(const BaseClassifier& clf,
                                               const std::vector<double>& x, long long num,
                                               double sigma, long long batch_size,
                                               RngStream& stream) {
  std::vector<long long> counts(static_cast<std::size_t>(clf.num_classes), 0);
  const std::size_t d = clf.input_dim;
  std::vector<double> buf;
  std::vector<int> preds;
  long long left = num;
  while (left > 0) {
    const long long bs = std::min(left, batch_size);
    buf.resize(static_cast<std::size_t>(bs) * d);
    for (long long i = 0; i < bs; ++i) {
      double* row = buf.data() + static_cast<std::size_t>(i) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = x[j] + sigma * stream.next_gaussian();
    }
    preds.resize(static_cast<std::size_t>(bs));
    clf.predict(buf.data(), static_cast<std::size_t>(bs), preds.data());
    for (int c : preds) {
      if (c < 0 || c >= clf.num_classes) {
        throw std::runtime_error("certify: base classifier returned an invalid class");
      }
      ++counts[static_cast<std::size_t>(c)];
    }
    left -= bs;
  }
  return counts;
}

std::size_t top_class(const std::vector<long long>& counts) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < counts.size(); ++i) {
    if (counts[i] > counts[best]) best = i;
  }
  return best;
}

}  // namespace

void SmoothingConfig::validate() const {
  if (!(sigma > 0.0)) throw std::invalid_argument("smoothing config: sigma must be positive");
  if (m < 1) throw std::invalid_argument("smoothing config: m must be >= 1");
  if (n0 < 1) throw std::invalid_argument("smoothing config: n0 must be >= 1");
  if (n < n0) throw std::invalid_argument("smoothing config: n must be >= n0");
  if (!(alpha > 0.0) || !(alpha < 1.0)) {
    throw std::invalid_argument("smoothing config: alpha must lie in (0, 1)");
  }
  if (batch_size < 1) throw std::invalid_argument("smoothing config: batch_size must be >= 1");
}

BaseClassifier as_base_classifier(const ModelParams& params) {
  params.validate();
  BaseClassifier clf;
  clf.input_dim = params.spec.input_dim();
  clf.num_classes = static_cast<int>(params.spec.num_classes());
  ModelParams frozen = detached(params);
  clf.predict = [frozen](const double* batch, std::size_t rows, int* out) {
    const std::size_t d = frozen.spec.input_dim();
    Tensor xb = Tensor::from_values({rows, d},
                                    std::vector<double>(batch, batch + rows * d));
    const std::vector<int> preds = predict_hard_batch(frozen, xb);
    std::copy(preds.begin(), preds.end(), out);
  };
  return clf;
}

Tensor z_hat_given(const ModelParams& params, const Tensor& x,
                   const std::vector<Tensor>& noise) {
  if (noise.empty()) throw std::invalid_argument("z_hat: need at least one noise draw");
  Tensor acc;
  for (std::size_t k = 0; k < noise.size(); ++k) {
    Tensor probs = forward_soft(params, add(x, noise[k]));
    acc = k == 0 ? probs : add(acc, probs);
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(noise.size()));
}

Tensor z_hat(const ModelParams& params, const Tensor& x, const SmoothingConfig& cfg,
             RngStream stream) {
  cfg.validate();
  std::vector<Tensor> noise;
  noise.reserve(static_cast<std::size_t>(cfg.m));
  for (int k = 0; k < cfg.m; ++k) {
    noise.push_back(sample_gaussian(stream, x.shape(), cfg.sigma));
  }
  return z_hat_given(params, x, noise);
}

Tensor xi_hat(const Tensor& z, const std::vector<int>& y) {
  const Tensor zz = z.rank() == 1 ? reshape(z, {1, z.numel()}) : z;
  const std::size_t b = zz.shape()[0];
  const std::size_t c = zz.shape()[1];
  if (y.size() != b) throw std::invalid_argument("xi_hat: one label per row required");
  std::vector<int> runner(b);
  const auto& v = zz.values();
  for (std::size_t i = 0; i < b; ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= c) {
      throw std::invalid_argument("xi_hat: label out of range");
    }
    int best = -1;
    const double* row = v.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      if (static_cast<int>(j) == y[i]) continue;
      if (best < 0 || row[j] > row[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(j);
      }
    }
    runner[i] = best;
  }
  Tensor zc = clamp_prob(zz);
  Tensor out = sub(norm_icdf(gather_class(zc, y)), norm_icdf(gather_class(zc, runner)));
  if (z.rank() == 1) return reshape(out, Shape{});
  return out;
}

Tensor xi_hat(const Tensor& z, int y) {
  if (z.rank() != 1) throw std::invalid_argument("xi_hat: single-label form needs a row");
  return xi_hat(z, std::vector<int>{y});
}

double certified_radius(double pa, double pb, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("certified_radius: sigma must be positive");
  if (!(pb > 0.0) || !(pa < 1.0) || pa < pb) {
    throw std::invalid_argument("certified_radius: need 0 < pb <= pa < 1");
  }
  return 0.5 * sigma * (norm_icdf(pa) - norm_icdf(pb));
}

CertificationResult certify(const BaseClassifier& clf, const std::vector<double>& x,
                            const SmoothingConfig& cfg, const RngStream& point_stream) {
  cfg.validate();
  if (x.size() != clf.input_dim) throw std::invalid_argument("certify: input dim mismatch");
  const auto start = std::chrono::steady_clock::now();

  RngStream selection = point_stream.child(stream_path::kSelection);
  const std::vector<long long> counts0 =
      count_noisy_predictions(clf, x, cfg.n0, cfg.sigma, cfg.batch_size, selection);
  const std::size_t c_hat = top_class(counts0);

  RngStream estimation = point_stream.child(stream_path::kEstimation);
  std::vector<long long> counts =
      count_noisy_predictions(clf, x, cfg.n, cfg.sigma, cfg.batch_size, estimation);
  const long long k = counts[c_hat];

  CertificationResult result;
  result.counts = std::move(counts);
  result.pa_lower = clopper_pearson_lower(k, cfg.n, cfg.alpha);
  if (result.pa_lower > 0.5) {
    result.prediction = static_cast<int>(c_hat);
    result.radius = cfg.sigma * norm_icdf(result.pa_lower);
  }
  result.elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

CertificationResult certify(const ModelParams& params, const std::vector<double>& x,
                            const SmoothingConfig& cfg, const RngStream& point_stream) {
  return certify(as_base_classifier(params), x, cfg, point_stream);
}

PredictResult predict(const BaseClassifier& clf, const std::vector<double>& x,
                      const SmoothingConfig& cfg, const RngStream& point_stream) {
  cfg.validate();
  if (x.size() != clf.input_dim) throw std::invalid_argument("predict: input dim mismatch");
  RngStream estimation = point_stream.child(stream_path::kEstimation);
  std::vector<long long> counts =
      count_noisy_predictions(clf, x, cfg.n, cfg.sigma, cfg.batch_size, estimation);

  const std::size_t c1 = top_class(counts);
  std::size_t c2 = c1 == 0 ? 1 : 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (i != c1 && counts[i] > counts[c2]) c2 = i;
  }
  const long long na = counts[c1];
  const long long nb = counts[c2];
  PredictResult result;
  result.counts = std::move(counts);
  if (na + nb > 0) {
    const double pval = std::min(1.0, 2.0 * binomial_tail(na, na + nb, 0.5));
    if (pval <= cfg.alpha) result.prediction = static_cast<int>(c1);
  }
  return result;
}

PredictResult predict(const ModelParams& params, const std::vector<double>& x,
                      const SmoothingConfig& cfg, const RngStream& point_stream) {
  return predict(as_base_classifier(params), x, cfg, point_stream);
}

}  // namespace rsmooth
