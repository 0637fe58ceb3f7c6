#pragma once

#include <cstdint>
#include <vector>

namespace rsmooth {

/// Standard normal CDF, absolute error below 1e-12.
double norm_cdf(double x);

/// Standard normal density.
double norm_pdf(double x);

/// Standard normal quantile. Rational initial guess polished with two
/// Newton steps on norm_cdf, so |norm_cdf(norm_icdf(p)) - p| < 1e-10.
/// Throws std::domain_error for p outside (0, 1).
double norm_icdf(double p);

/// P(X >= k) for X ~ Binomial(n, p), accumulated in log space.
double binomial_tail(long long k, long long n, double p);

/// Exact one-sided lower confidence bound for a binomial proportion:
/// the p solving P(Bin(n, p) >= k) = alpha, found by bisection on the
/// exact tail. Returns 0 when k == 0. Throws std::invalid_argument for
/// k < 0, k > n, n < 1, or alpha outside (0, 1).
double clopper_pearson_lower(long long k, long long n, double alpha);

/// Well-known integer keys for deriving child streams, so independent
/// consumers of randomness can never collide or interfere.
namespace stream_path {
constexpr std::uint64_t kSelection = 1;
constexpr std::uint64_t kEstimation = 2;
constexpr std::uint64_t kAttack = 3;
constexpr std::uint64_t kObjective = 4;
constexpr std::uint64_t kZhatMask = 5;
constexpr std::uint64_t kShiftDelta = 6;
constexpr std::uint64_t kShiftZhat = 7;
constexpr std::uint64_t kShuffle = 8;
constexpr std::uint64_t kInit = 9;
constexpr std::uint64_t kData = 10;
constexpr std::uint64_t kPerturbModel = 11;
constexpr std::uint64_t kNoisyInputs = 12;
constexpr std::uint64_t kCertifyPoint = 13;
constexpr std::uint64_t kTrainBatch = 14;
constexpr std::uint64_t kWeightDesign = 15;
constexpr std::uint64_t kSplitTrain = 16;
constexpr std::uint64_t kSplitTest = 17;
}  // namespace stream_path

/// Counter-based deterministic random stream. A stream is fully
/// determined by (root seed, path); child(key) derives an independent
/// stream whose draws never overlap the parent's. Draw order is part of
/// the reproducibility contract: the same (seed, path) always yields the
/// same sequence, bit for bit, on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t root_seed);

  RngStream child(std::uint64_t key) const;

  std::uint64_t root_seed() const { return root_seed_; }
  const std::vector<std::uint64_t>& path() const { return path_; }

  std::uint64_t next_u64();
  /// Uniform draw in the open interval (0, 1).
  double next_uniform();
  /// Standard normal draw (explicit Box-Muller, so the sequence does not
  /// depend on any library's distribution implementation).
  double next_gaussian();

 private:
  std::uint64_t root_seed_ = 0;
  std::vector<std::uint64_t> path_;
  std::uint64_t seed_ = 0;
  std::uint64_t state_ = 0;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace rsmooth
