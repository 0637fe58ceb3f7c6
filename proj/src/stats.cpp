#include "rsmooth/stats.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace rsmooth {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
constexpr double kTwoPi = 6.283185307179586;
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double log_add_exp(double a, double b) {
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

}  // namespace

double norm_cdf(double x) { return 0.5 * std::erfc(-x / kSqrt2); }

double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

double norm_icdf(double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    throw std::domain_error("norm_icdf: p must lie strictly inside (0, 1), got " +
                            std::to_string(p));
  }
  // Rational approximation (Acklam), then two Newton corrections.
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double dens = norm_pdf(x);
    if (dens < 1e-280) break;  // far tail: the guess is already as good as Phi can resolve
    x -= (norm_cdf(x) - p) / dens;
  }
  return x;
}

double binomial_tail(long long k, long long n, double p) {
  if (n < 1 || k < 0 || k > n) {
    throw std::invalid_argument("binomial_tail: need 0 <= k <= n, n >= 1");
  }
  if (k == 0) return 1.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double logp = std::log(p);
  const double logq = std::log1p(-p);
  double logterm = std::lgamma(static_cast<double>(n) + 1.0) -
                   std::lgamma(static_cast<double>(k) + 1.0) -
                   std::lgamma(static_cast<double>(n - k) + 1.0) +
                   static_cast<double>(k) * logp + static_cast<double>(n - k) * logq;
  double logsum = logterm;
  const double mode = (static_cast<double>(n) + 1.0) * p;
  for (long long j = k + 1; j <= n; ++j) {
    // term ratio: C(n,j)/C(n,j-1) * p/q = (n-j+1)/j * p/q
    logterm += std::log(static_cast<double>(n - j + 1)) - std::log(static_cast<double>(j)) +
               logp - logq;
    logsum = log_add_exp(logsum, logterm);
    // Past the mode terms decay geometrically; once a term is below
    // sum * e^-60 the rest of the tail (at most n terms) is negligible.
    if (static_cast<double>(j) > mode && logterm < logsum - 60.0) break;
  }
  return std::exp(std::min(logsum, 0.0));
}

double clopper_pearson_lower(long long k, long long n, double alpha) {
  if (n < 1) throw std::invalid_argument("clopper_pearson_lower: trials must be >= 1");
  if (k < 0 || k > n) {
    throw std::invalid_argument("clopper_pearson_lower: successes must lie in [0, trials]");
  }
  if (!(alpha > 0.0) || !(alpha < 1.0)) {
    throw std::invalid_argument("clopper_pearson_lower: alpha must lie in (0, 1)");
  }
  if (k == 0) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_tail(k, n, mid) > alpha) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return 0.5 * (lo + hi);
}

RngStream::RngStream(std::uint64_t root_seed)
    : root_seed_(root_seed), seed_(mix64(root_seed + kGolden)), state_(seed_) {}

RngStream RngStream::child(std::uint64_t key) const {
  RngStream c(*this);
  c.path_.push_back(key);
  c.seed_ = mix64(seed_ ^ (mix64(key + kGolden) + kGolden));
  c.state_ = c.seed_;
  c.has_cached_ = false;
  c.cached_ = 0.0;
  return c;
}

std::uint64_t RngStream::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double RngStream::next_uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  const double u1 = next_uniform();
  const double u2 = next_uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = kTwoPi * u2;
  cached_ = r * std::sin(t);
  has_cached_ = true;
  return r * std::cos(t);
}

}  // namespace rsmooth
