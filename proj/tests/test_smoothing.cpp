#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"

using rsmooth::BaseClassifier;
using rsmooth::CertificationResult;
using rsmooth::ModelParams;
using rsmooth::RngStream;
using rsmooth::SmoothingConfig;
using rsmooth::Tensor;

namespace {

// Exact halfspace v.x + b realized as an MLP: the hidden pair
// (relu(u), relu(-u)) recombines to logits (u, -u), so the hard
// prediction is class 0 iff v.x + b > 0 and the smoothed class-0
// probability has the closed form Phi((v.x + b) / (sigma * ||v||)).
ModelParams halfspace_model(double v0, double v1, double b) {
  ModelParams p;
  p.spec = rsmooth::MlpSpec{{2, 2, 2}, rsmooth::Activation::kRelu, 1.0};
  p.weights = {Tensor::from_values({2, 2}, {v0, -v0, v1, -v1}),
               Tensor::from_values({2, 2}, {1.0, -1.0, -1.0, 1.0})};
  p.biases = {Tensor::from_values({2}, {b, -b}), Tensor::zeros({2})};
  p.validate();
  return p;
}

// All-zero weights: logits vanish, so the soft output is uniform and the
// hard prediction is always class 0.
ModelParams constant_model(std::size_t classes) {
  ModelParams p;
  p.spec = rsmooth::MlpSpec{{2, 3, classes}, rsmooth::Activation::kRelu, 16.0};
  p.weights = {Tensor::zeros({2, 3}), Tensor::zeros({3, classes})};
  p.biases = {Tensor::zeros({3}), Tensor::zeros({classes})};
  p.validate();
  return p;
}

BaseClassifier always(int label, int classes) {
  BaseClassifier clf;
  clf.input_dim = 2;
  clf.num_classes = classes;
  clf.predict = [label](const double*, std::size_t rows, int* out) {
    for (std::size_t i = 0; i < rows; ++i) out[i] = label;
  };
  return clf;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("config validation rejects each out-of-range field") {
  SmoothingConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto broken = [](auto&& fix) {
    SmoothingConfig c;
    fix(c);
    return c;
  };
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.sigma = 0.0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.m = 0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.n0 = 0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.n = 50; }).validate(),
                  std::invalid_argument);  // n < n0
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.alpha = 1.0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.alpha = 0.0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](SmoothingConfig& c) { c.batch_size = 0; }).validate(),
                  std::invalid_argument);
}

TEST_CASE("certified radius closed forms and monotonicity grid") {
  CHECK(rsmooth::certified_radius(0.5, 0.5, 1.0) == 0.0);
  CHECK(rsmooth::certified_radius(0.8, 0.2, 1.0) ==
        doctest::Approx(0.8416212335729143).epsilon(1e-12));

  // Doubling sigma doubles the radius.
  const double r1 = rsmooth::certified_radius(0.77, 0.11, 0.5);
  const double r2 = rsmooth::certified_radius(0.77, 0.11, 1.0);
  CHECK(r2 == doctest::Approx(2.0 * r1).epsilon(1e-15));

  for (double sigma : {0.25, 0.5, 1.0}) {
    double prev_pa = -1.0;
    for (int i = 0; i < 20; ++i) {
      const double pa = 0.02 + 0.96 * i / 19.0;
      double prev_pb = -1.0;
      for (int j = 0; j <= i; ++j) {
        const double pb = 0.02 + 0.96 * j / 19.0;
        const double r = rsmooth::certified_radius(pa, pb, sigma);
        const double want =
            0.5 * sigma * (oracles::norm_icdf(pa) - oracles::norm_icdf(pb));
        CHECK(std::abs(r - want) <= 1e-9);
        CHECK(r >= 0.0);
        if (prev_pb >= 0.0) {
          CHECK(r < rsmooth::certified_radius(pa, prev_pb, sigma));  // decreasing in pb
        }
        prev_pb = pb;
      }
      if (prev_pa >= 0.0 && i >= 1) {
        CHECK(rsmooth::certified_radius(pa, 0.02, sigma) >
              rsmooth::certified_radius(prev_pa, 0.02, sigma));  // increasing in pa
      }
      prev_pa = pa;
    }
  }

  CHECK_THROWS_AS(rsmooth::certified_radius(0.2, 0.8, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::certified_radius(1.0, 0.5, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::certified_radius(0.5, 0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::certified_radius(0.8, 0.2, 0.0), std::invalid_argument);
}

TEST_CASE("quantile margin examples") {
  Tensor z = Tensor::from_values({2}, {0.9, 0.1});
  const double xi = rsmooth::xi_hat(z, 0).item();
  CHECK(xi == doctest::Approx(2.5631031310892007).epsilon(1e-9));
  CHECK(xi == doctest::Approx(2.0 * oracles::norm_icdf(0.9)).epsilon(1e-12));

  // Antisymmetry for two classes.
  CHECK(rsmooth::xi_hat(z, 1).item() == -xi);

  Tensor u = Tensor::from_values({3}, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  CHECK(rsmooth::xi_hat(u, 1).item() == 0.0);

  // The competitor is the best entry outside the label.
  Tensor w = Tensor::from_values({3}, {0.5, 0.2, 0.3});
  CHECK(rsmooth::xi_hat(w, 0).item() ==
        doctest::Approx(rsmooth::norm_icdf(0.5) - rsmooth::norm_icdf(0.3))
            .epsilon(1e-15));

  Tensor rows = Tensor::from_values({2, 3}, {0.7, 0.2, 0.1, 0.1, 0.3, 0.6});
  Tensor out = rsmooth::xi_hat(rows, std::vector<int>{0, 2});
  REQUIRE(out.numel() == 2);
  CHECK(out.values()[0] ==
        doctest::Approx(rsmooth::norm_icdf(0.7) - rsmooth::norm_icdf(0.2)).epsilon(1e-15));
  CHECK(out.values()[1] ==
        doctest::Approx(rsmooth::norm_icdf(0.6) - rsmooth::norm_icdf(0.3)).epsilon(1e-15));

  CHECK_THROWS_AS(rsmooth::xi_hat(rows, std::vector<int>{0}), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::xi_hat(z, 5), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::xi_hat(rows, 0), std::invalid_argument);
}

TEST_CASE("soft smoothing collapses to the plain forward pass as sigma vanishes") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.25);
  Tensor x = Tensor::from_values({2}, {0.4, -0.2});
  SmoothingConfig cfg;
  cfg.sigma = 1e-12;
  cfg.m = 5;
  Tensor z = rsmooth::z_hat(p, x, cfg, RngStream(11));
  Tensor direct = rsmooth::forward_soft(p, x);
  REQUIRE(z.numel() == direct.numel());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    CHECK(z.values()[i] == doctest::Approx(direct.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("soft smoothing of a constant classifier is that constant") {
  ModelParams p = constant_model(3);
  SmoothingConfig cfg;
  cfg.sigma = 0.7;
  cfg.m = 32;
  Tensor x = Tensor::from_values({2, 2}, {0.1, 0.2, -1.0, 3.0});
  Tensor z = rsmooth::z_hat(p, x, cfg, RngStream(12));
  for (double v : z.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += z.values()[r * 3 + c];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("soft smoothing matches the analytic gaussian expectation at large m") {
  // Batch replication turns rows x draws into one large iid sample.
  ModelParams p = halfspace_model(0.6, -0.8, 0.0);
  const double sigma = 0.5;
  const std::vector<double> x0 = {0.3, 0.1};
  const double margin = 0.6 * x0[0] - 0.8 * x0[1];  // v.x, ||v|| = 1

  const std::size_t rows = 2000;
  std::vector<double> flat(rows * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    flat[2 * r] = x0[0];
    flat[2 * r + 1] = x0[1];
  }
  SmoothingConfig cfg;
  cfg.sigma = sigma;
  cfg.m = 500;
  Tensor z = rsmooth::z_hat(p, Tensor::from_values({rows, 2}, std::move(flat)), cfg,
                            RngStream(13));
  double mean = 0.0;
  for (std::size_t r = 0; r < rows; ++r) mean += z.values()[r * 2];
  mean /= static_cast<double>(rows);

  // p(delta) = logistic(2 (margin + sigma t)) under t ~ N(0,1).
  auto prob = [&](double t) {
    return 1.0 / (1.0 + std::exp(-2.0 * (margin + sigma * t)));
  };
  const double e1 = oracles::gauss_expect(prob);
  const double e2 = oracles::gauss_expect([&](double t) {
    const double q = prob(t);
    return q * q;
  });
  const double se = std::sqrt((e2 - e1 * e1) / (500.0 * static_cast<double>(rows)));
  CHECK(std::abs(mean - e1) <= 3.0 * se + 1e-6);
}

TEST_CASE("smoothing with caller noise reproduces the stream draws bit-exactly") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.25);
  Tensor x = Tensor::from_values({2}, {0.4, -0.2});
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.m = 7;

  RngStream s(14);
  Tensor via_stream = rsmooth::z_hat(p, x, cfg, s);

  RngStream t(14);
  std::vector<Tensor> noise;
  for (int k = 0; k < cfg.m; ++k) {
    noise.push_back(rsmooth::sample_gaussian(t, x.shape(), cfg.sigma));
  }
  Tensor via_noise = rsmooth::z_hat_given(p, x, noise);
  CHECK(bitwise_equal(via_stream.values(), via_noise.values()));
  CHECK_THROWS_AS(rsmooth::z_hat_given(p, x, {}), std::invalid_argument);
}

TEST_CASE("smoothed margin is differentiable in the input") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.1);
  SmoothingConfig cfg;
  cfg.sigma = 0.4;
  cfg.m = 6;
  // The stream is taken by value, so every call resamples the same noise
  // and the function below is deterministic in x.
  auto f = [&](const Tensor& x) {
    Tensor z = rsmooth::z_hat(p, x, cfg, RngStream(15));
    return rsmooth::xi_hat(reshape(z, {2}), 0);
  };
  Tensor x = Tensor::from_values({2}, {0.3, 0.2}, true);
  CHECK(rsmooth::grad_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("certifying a constant classifier hits the all-success closed form") {
  SmoothingConfig cfg;
  cfg.sigma = 1.0;
  cfg.n0 = 100;
  cfg.n = 100;
  cfg.alpha = 0.001;
  CertificationResult res =
      rsmooth::certify(always(2, 4), {0.0, 0.0}, cfg, RngStream(16).child(1));
  CHECK(res.prediction == 2);
  CHECK_FALSE(res.abstain());
  CHECK(res.pa_lower == doctest::Approx(0.933254).epsilon(1e-6));
  CHECK(res.pa_lower ==
        doctest::Approx(oracles::clopper_pearson_lower(100, 100, 0.001)).epsilon(1e-9));
  CHECK(res.radius == doctest::Approx(1.5004750241206364).epsilon(1e-9));
  REQUIRE(res.counts.size() == 4);
  CHECK(res.counts[2] == 100);
  CHECK(res.counts[0] + res.counts[1] + res.counts[3] == 0);
  CHECK(res.elapsed >= 0.0);
}

TEST_CASE("a zero-margin point abstains") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.0);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 50;
  cfg.n = 1000;
  cfg.batch_size = 200;
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    CertificationResult res = rsmooth::certify(p, {0.0, 0.0}, cfg, RngStream(seed));
    CHECK(res.abstain());
    CHECK(res.prediction == rsmooth::kAbstain);
    CHECK(res.radius == 0.0);
    CHECK(res.pa_lower <= 0.5);
  }
}

TEST_CASE("certification is deterministic and batch-size invariant") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.4);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 64;
  cfg.n = 1500;
  cfg.batch_size = 1500;
  const std::vector<double> x = {0.5, -0.1};
  const RngStream point = RngStream(21).child(3);

  CertificationResult a = rsmooth::certify(p, x, cfg, point);
  CertificationResult b = rsmooth::certify(p, x, cfg, point);
  SmoothingConfig small = cfg;
  small.batch_size = 17;
  CertificationResult c = rsmooth::certify(p, x, small, point);

  CHECK(a.prediction == b.prediction);
  CHECK(a.radius == b.radius);
  CHECK(a.counts == b.counts);
  CHECK(a.prediction == c.prediction);
  CHECK(a.radius == c.radius);
  CHECK(a.counts == c.counts);

  long long total = 0;
  for (long long k : a.counts) total += k;
  CHECK(total == cfg.n);

  // The params overload is the BaseClassifier overload in disguise.
  CertificationResult d = rsmooth::certify(rsmooth::as_base_classifier(p), x, cfg, point);
  CHECK(a.prediction == d.prediction);
  CHECK(a.radius == d.radius);
  CHECK(a.counts == d.counts);
}

TEST_CASE("certified radii are sound against the halfspace distance oracle") {
  const double v0 = 0.6, v1 = -0.8, b = 0.25;
  ModelParams p = halfspace_model(v0, v1, b);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 50;
  cfg.n = 2000;
  cfg.batch_size = 500;
  cfg.alpha = 0.001;

  RngStream root(22);
  RngStream points = root.child(1);
  int unsound = 0;
  int certified = 0;
  for (int i = 0; i < 300; ++i) {
    RngStream pt = points.child(static_cast<std::uint64_t>(i) + 1);
    const std::vector<double> x = {2.0 * pt.next_uniform() - 1.0,
                                   2.0 * pt.next_uniform() - 1.0};
    CertificationResult res = rsmooth::certify(p, x, cfg, pt.child(100));
    if (res.abstain()) continue;
    ++certified;
    const double dist = oracles::halfspace_distance({v0, v1}, b, x);
    const int true_class = v0 * x[0] + v1 * x[1] + b > 0.0 ? 0 : 1;
    if (res.prediction != true_class || res.radius > dist) ++unsound;
  }
  CHECK(certified > 100);
  // Failure probability per point is alpha; allow generous slack.
  CHECK(unsound <= 3);
}

TEST_CASE("perturbations inside the certified ball never flip the smoothed class") {
  const double v0 = 0.6, v1 = -0.8, b = 0.25;
  ModelParams p = halfspace_model(v0, v1, b);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 100;
  cfg.n = 4000;
  cfg.batch_size = 1000;
  const std::vector<double> x = {0.8, -0.3};

  CertificationResult res = rsmooth::certify(p, x, cfg, RngStream(23).child(7));
  REQUIRE_FALSE(res.abstain());
  REQUIRE(res.radius <= oracles::halfspace_distance({v0, v1}, b, x));

  RngStream noise(24);
  int flips = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    double d0 = noise.next_gaussian();
    double d1 = noise.next_gaussian();
    const double norm = std::sqrt(d0 * d0 + d1 * d1);
    d0 *= 0.99 * res.radius / norm;
    d1 *= 0.99 * res.radius / norm;
    // Analytic smoothed prediction at the shifted point.
    const double pa =
        oracles::halfspace_smoothed_prob({v0, v1}, b, {x[0] + d0, x[1] + d1}, cfg.sigma);
    const int smoothed = pa > 0.5 ? 0 : 1;
    if (smoothed != res.prediction) ++flips;
  }
  CHECK(flips == 0);
}

TEST_CASE("prediction rejects the coin only past the exact binomial threshold") {
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.alpha = 0.001;
  cfg.n0 = 1;

  // 2 * 0.5^11 <= 0.001 < 2 * 0.5^10.
  cfg.n = 11;
  rsmooth::PredictResult hit = rsmooth::predict(always(1, 3), {0.0, 0.0}, cfg, RngStream(25));
  CHECK(hit.prediction == 1);

  cfg.n = 10;
  rsmooth::PredictResult miss = rsmooth::predict(always(1, 3), {0.0, 0.0}, cfg, RngStream(25));
  CHECK(miss.abstain());

  long long total = 0;
  for (long long k : hit.counts) total += k;
  CHECK(total == 11);
}

TEST_CASE("prediction abstains on a balanced coin at the test size") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.0);
  BaseClassifier clf = rsmooth::as_base_classifier(p);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 1;
  cfg.n = 200;
  cfg.batch_size = 200;
  RngStream root(26);
  int decided = 0;
  for (int i = 0; i < 1000; ++i) {
    rsmooth::PredictResult res =
        rsmooth::predict(clf, {0.0, 0.0}, cfg, root.child(static_cast<std::uint64_t>(i) + 1));
    if (!res.abstain()) ++decided;
  }
  CHECK(decided <= 11);  // (alpha + 0.01) * 1000
}

TEST_CASE("prediction agrees with certification on the shared stream") {
  ModelParams p = halfspace_model(0.6, -0.8, 0.3);
  BaseClassifier clf = rsmooth::as_base_classifier(p);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 50;
  cfg.n = 1000;
  cfg.batch_size = 250;
  RngStream root(27);
  int compared = 0;
  for (int i = 0; i < 25; ++i) {
    RngStream pt = root.child(static_cast<std::uint64_t>(i) + 1);
    RngStream coords = pt.child(1);
    const std::vector<double> x = {2.0 * coords.next_uniform() - 1.0,
                                   2.0 * coords.next_uniform() - 1.0};
    const RngStream shared = pt.child(2);
    CertificationResult cert = rsmooth::certify(clf, x, cfg, shared);
    rsmooth::PredictResult pred = rsmooth::predict(clf, x, cfg, shared);
    // Both consume the same estimation draws, so the tallies coincide.
    CHECK(cert.counts == pred.counts);
    if (!cert.abstain() && !pred.abstain()) {
      CHECK(cert.prediction == pred.prediction);
      ++compared;
    }
  }
  CHECK(compared > 0);
}

TEST_CASE("certify rejects malformed inputs and classifiers") {
  SmoothingConfig cfg;
  CHECK_THROWS_AS(rsmooth::certify(always(0, 3), {1.0, 2.0, 3.0}, cfg, RngStream(1)),
                  std::invalid_argument);  // dim mismatch

  BaseClassifier bad = always(0, 3);
  bad.predict = [](const double*, std::size_t rows, int* out) {
    for (std::size_t i = 0; i < rows; ++i) out[i] = 99;
  };
  SmoothingConfig tiny;
  tiny.n0 = 4;
  tiny.n = 8;
  CHECK_THROWS_AS(rsmooth::certify(bad, {0.0, 0.0}, tiny, RngStream(2)),
                  std::runtime_error);
}
