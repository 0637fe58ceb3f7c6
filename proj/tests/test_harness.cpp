#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "oracles.hpp"
#include "rsmooth/harness.hpp"
#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"
#include "rsmooth/train.hpp"

using rsmooth::Dataset;
using rsmooth::EvalRecord;
using rsmooth::ModelParams;
using rsmooth::RngStream;
using rsmooth::SmoothingConfig;
using rsmooth::Tensor;

namespace {

namespace fs = std::filesystem;

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Exact halfspace v.x + b as an MLP (see test_smoothing): predicts class 0
// when v.x + b > 0, and the smoothed class-0 probability is
// norm_cdf((v.x + b) / (sigma * ||v||)).
ModelParams halfspace_model(double v0, double v1, double b) {
  ModelParams p;
  p.spec = rsmooth::MlpSpec{{2, 2, 2}, rsmooth::Activation::kRelu, 1.0};
  p.weights = {Tensor::from_values({2, 2}, {v0, -v0, v1, -v1}),
               Tensor::from_values({2, 2}, {1.0, -1.0, -1.0, 1.0})};
  p.biases = {Tensor::from_values({2}, {b, -b}), Tensor::zeros({2})};
  p.validate();
  return p;
}

EvalRecord record_of(std::size_t index, bool correct, bool abstain, double radius) {
  EvalRecord r;
  r.index = index;
  r.label = 0;
  r.prediction = abstain ? rsmooth::kAbstain : (correct ? 0 : 1);
  r.abstain = abstain;
  r.correct = correct;
  r.radius = radius;
  return r;
}

std::string temp_dir(const std::string& name) {
  const std::string dir = "/tmp/rsmooth_harness_" + name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelParams quick_model(const std::string& method, std::uint64_t seed) {
  rsmooth::TrainConfig cfg;
  cfg.method = rsmooth::parse_train_method(method);
  cfg.lambda = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr_init = 0.05;
  cfg.hidden = {8};
  cfg.beta = 4.0;
  cfg.seed = seed;
  cfg.smoothing.sigma = 0.5;
  cfg.smoothing.m = 2;
  const Dataset train =
      rsmooth::make_two_gaussians(64, 2, 2.0, 0.5, 5, "train");
  return rsmooth::train(rsmooth::to_labeled(train), cfg).first;
}

}  // namespace

TEST_CASE("two gaussians dataset has the advertised geometry") {
  const Dataset ds = rsmooth::make_two_gaussians(1000, 2, 2.0, 0.5, 11, "test");
  CHECK(ds.size() == 1000);
  CHECK(ds.dim() == 2);
  CHECK(ds.num_classes() == 2);
  CHECK(ds.split == "test");
  CHECK(ds.name == "two_gaussians");

  double mean0 = 0.0, mean1 = 0.0, off_axis = 0.0;
  std::size_t wrong_side = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds.labels[i] == static_cast<int>(i % 2));
    const std::vector<double> x = ds.row(i);
    (ds.labels[i] == 0 ? mean0 : mean1) += x[0];
    off_axis += x[1];
    // Bayes boundary is x0 = 0 by symmetry.
    if ((ds.labels[i] == 0) != (x[0] > 0.0)) ++wrong_side;
  }
  CHECK(mean0 / 500.0 == doctest::Approx(2.0).epsilon(0.05));
  CHECK(mean1 / 500.0 == doctest::Approx(-2.0).epsilon(0.05));
  CHECK(std::abs(off_axis / 1000.0) < 0.1);
  CHECK(wrong_side <= 2);

  // row() slices the feature matrix exactly.
  const std::vector<double>& flat = ds.features.values();
  const std::vector<double> r7 = ds.row(7);
  CHECK(r7[0] == flat[14]);
  CHECK(r7[1] == flat[15]);

  const Dataset again = rsmooth::make_two_gaussians(1000, 2, 2.0, 0.5, 11, "test");
  CHECK(bitwise_equal(ds.features.values(), again.features.values()));
  CHECK(ds.labels == again.labels);

  const Dataset other_seed = rsmooth::make_two_gaussians(1000, 2, 2.0, 0.5, 12, "test");
  CHECK_FALSE(bitwise_equal(ds.features.values(), other_seed.features.values()));
  const Dataset train_split = rsmooth::make_two_gaussians(1000, 2, 2.0, 0.5, 11, "train");
  CHECK_FALSE(bitwise_equal(ds.features.values(), train_split.features.values()));

  CHECK_THROWS_AS(rsmooth::make_two_gaussians(0, 2, 2.0, 0.5, 1, "test"),
                  std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::make_two_gaussians(10, 0, 2.0, 0.5, 1, "test"),
                  std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::make_two_gaussians(10, 2, 2.0, -0.5, 1, "test"),
                  std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::make_two_gaussians(10, 2, 2.0, 0.5, 1, "validation"),
                  std::invalid_argument);
}

TEST_CASE("four blobs and rings generators") {
  const Dataset blobs = rsmooth::make_four_blobs(1000, 3, 1.5, 0.4, 21, "train");
  CHECK(blobs.num_classes() == 4);
  CHECK(blobs.dim() == 3);
  static const double centers[4][2] = {{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}};
  double mean[4][3] = {};
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    CHECK(blobs.labels[i] == static_cast<int>(i % 4));
    const std::vector<double> x = blobs.row(i);
    for (int k = 0; k < 3; ++k) mean[i % 4][k] += x[k] / 250.0;
  }
  for (int c = 0; c < 4; ++c) {
    CHECK(mean[c][0] == doctest::Approx(1.5 * centers[c][0]).epsilon(0.1));
    CHECK(mean[c][1] == doctest::Approx(1.5 * centers[c][1]).epsilon(0.1));
    CHECK(std::abs(mean[c][2]) < 0.15);
  }
  CHECK_THROWS_AS(rsmooth::make_four_blobs(10, 1, 1.5, 0.4, 1, "train"),
                  std::invalid_argument);

  const Dataset rings = rsmooth::make_rings(600, 1.0, 2.0, 0.05, 31, "test");
  CHECK(rings.dim() == 2);
  CHECK(rings.num_classes() == 2);
  double rad[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < rings.size(); ++i) {
    const std::vector<double> x = rings.row(i);
    rad[rings.labels[i]] += std::hypot(x[0], x[1]) / 300.0;
  }
  CHECK(rad[0] == doctest::Approx(1.0).epsilon(0.05));
  CHECK(rad[1] == doctest::Approx(2.0).epsilon(0.05));
  CHECK_THROWS_AS(rsmooth::make_rings(10, 2.0, 1.0, 0.05, 1, "test"), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::make_rings(10, 1.0, 2.0, -0.1, 1, "test"), std::invalid_argument);

  // to_labeled hands the same matrix and labels to the trainer.
  rsmooth::LabeledData lab = rsmooth::to_labeled(rings);
  CHECK(bitwise_equal(lab.features.values(), rings.features.values()));
  CHECK(lab.labels == rings.labels);
}

TEST_CASE("dataset validation") {
  Dataset ok;
  ok.name = "x";
  ok.features = Tensor::from_values({2, 1}, {0.0, 1.0});
  ok.labels = {0, 1};
  ok.split = "train";
  CHECK_NOTHROW(ok.validate());

  Dataset bad = ok;
  bad.labels = {};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.labels = {0, 1, 2};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.labels = {0, -1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.split = "dev";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.features = Tensor::from_values({2}, {0.0, 1.0});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("csv export and import round-trip exactly") {
  const std::string dir = temp_dir("csv");
  const Dataset ds = rsmooth::make_two_gaussians(50, 3, 2.0, 0.5, 41, "train");
  const std::string path = dir + "/data.csv";
  rsmooth::export_csv(ds, path);

  const std::string text = read_file(path);
  CHECK(text.rfind("f0,f1,f2,label\n", 0) == 0);

  const Dataset back = rsmooth::load_csv(path, "roundtrip", "train");
  CHECK(back.name == "roundtrip");
  CHECK(back.split == "train");
  CHECK(back.labels == ds.labels);
  CHECK(bitwise_equal(back.features.values(), ds.features.values()));

  // Windows line endings and blank lines are tolerated.
  write_file(dir + "/crlf.csv", "a,b,label\r\n1.5,2,0\r\n\r\n-3,0.25,1\r\n");
  const Dataset crlf = rsmooth::load_csv(dir + "/crlf.csv", "crlf", "test");
  CHECK(crlf.size() == 2);
  CHECK(crlf.features.values() == std::vector<double>{1.5, 2.0, -3.0, 0.25});
  CHECK(crlf.labels == std::vector<int>{0, 1});

  fs::remove_all(dir);
}

TEST_CASE("csv parse failures name the line") {
  const std::string dir = temp_dir("csvbad");
  auto expect_error = [&](const std::string& body, const std::string& needle) {
    const std::string path = dir + "/bad.csv";
    write_file(path, body);
    try {
      rsmooth::load_csv(path, "bad", "train");
      FAIL_CHECK("expected a parse error for: " << needle);
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find(needle) != std::string::npos);
      CHECK(msg.find("bad.csv:") != std::string::npos);
    }
  };

  expect_error("", "missing header row");
  expect_error("a,b,label\n1,2\n", "expected 3 fields, got 2");
  expect_error("a,b,label\n1,2,0\nx,2,1\n", "invalid number 'x'");
  expect_error("a,b,label\n1,2,1.5\n", "invalid label '1.5'");
  expect_error("a,b,label\n1,2,-3\n", "invalid label '-3'");
  expect_error("a,b,label\n", "no data rows");
  expect_error("justone\n1\n", "header needs at least one feature column");

  // Wrong line numbers would make the messages useless; pin one exactly.
  write_file(dir + "/lineno.csv", "a,label\n1,0\n2,0\nbogus,0,9\n");
  try {
    rsmooth::load_csv(dir + "/lineno.csv", "bad", "train");
    FAIL_CHECK("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":4:") != std::string::npos);
  }

  CHECK_THROWS_AS(rsmooth::load_csv(dir + "/absent.csv", "x", "train"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("acr arithmetic follows the zero-radius convention") {
  std::vector<EvalRecord> recs = {record_of(0, false, false, 0.0),
                                  record_of(1, true, false, 1.0),
                                  record_of(2, true, false, 2.0)};
  rsmooth::AcrSummary s = rsmooth::evaluate_acr(recs);
  CHECK(s.acr == 1.0);
  CHECK(s.clean_accuracy == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  std::vector<EvalRecord> abstains = {record_of(0, false, true, 0.0),
                                      record_of(1, false, true, 0.0)};
  rsmooth::AcrSummary sa = rsmooth::evaluate_acr(abstains);
  CHECK(sa.acr == 0.0);
  CHECK(sa.clean_accuracy == 0.0);

  // ACR is bounded by the largest radius and vanishes only when all do.
  double max_radius = 0.0;
  for (const EvalRecord& r : recs) max_radius = std::max(max_radius, r.radius);
  CHECK(s.acr <= max_radius);
  CHECK(s.acr > 0.0);

  CHECK_THROWS_AS(rsmooth::evaluate_acr({}), std::invalid_argument);
}

TEST_CASE("certified accuracy table") {
  std::vector<EvalRecord> recs = {record_of(0, true, false, 0.3),
                                  record_of(1, true, false, 0.7),
                                  record_of(2, false, true, 0.0),
                                  record_of(3, false, false, 0.0)};
  const auto table =
      rsmooth::certified_accuracy_table(recs, {0.0, 0.25, 0.5, 1.0});
  REQUIRE(table.size() == 4);
  CHECK(table[0].second == 0.5);  // certified (correct, non-abstaining) accuracy
  CHECK(table[1].second == 0.5);
  CHECK(table[2].second == 0.25);
  CHECK(table[3].second == 0.0);  // beyond the largest radius
  for (std::size_t i = 1; i < table.size(); ++i)
    CHECK(table[i].second <= table[i - 1].second);

  CHECK_THROWS_AS(rsmooth::certified_accuracy_table(recs, {0.5, 0.25}),
                  std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::certified_accuracy_table(recs, {}), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::certified_accuracy_table({}, {0.0}), std::invalid_argument);

  const std::vector<double> grid = rsmooth::default_radius_grid();
  REQUIRE(grid.size() == 9);
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(grid[i] == doctest::Approx(0.25 * static_cast<double>(i)).epsilon(1e-12));
}

TEST_CASE("radius grid parsing") {
  CHECK(rsmooth::parse_radius_grid("0:2:0.25") == rsmooth::default_radius_grid());
  CHECK(rsmooth::parse_radius_grid("1:1:0.5") == std::vector<double>{1.0});
  const std::vector<double> g = rsmooth::parse_radius_grid("0:1:0.4");
  REQUIRE(g.size() == 3);
  CHECK(g[2] == doctest::Approx(0.8).epsilon(1e-12));

  CHECK_THROWS_AS(rsmooth::parse_radius_grid("0:1"), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::parse_radius_grid("x:1:1"), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::parse_radius_grid("0:1:0"), std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::parse_radius_grid("1:0:0.5"), std::invalid_argument);
}

TEST_CASE("measured acr matches the analytic expectation on the linear oracle") {
  // Halfspace x0 > 0 on two_gaussians: every certification outcome is a
  // deterministic function of x0 and the sampled counts, so the expected
  // ACR reduces to a one-dimensional integral over the class-conditional
  // density, with the count replaced by its expectation.
  const double offset = 2.0, sigma_data = 0.5, sigma = 0.5, alpha = 0.001;
  const long long N = 10000;

  const Dataset ds = rsmooth::make_two_gaussians(300, 2, offset, sigma_data, 51, "test");
  ModelParams model = halfspace_model(1.0, 0.0, 0.0);
  SmoothingConfig cfg;
  cfg.sigma = sigma;
  cfg.n0 = 100;
  cfg.n = N;
  cfg.alpha = alpha;
  cfg.batch_size = 1000;
  const std::vector<EvalRecord> recs = rsmooth::certify_dataset(model, ds, cfg, 52, 2);
  const double measured = rsmooth::evaluate_acr(recs).acr;

  std::map<long long, double> cp_cache;
  auto radius_at = [&](double x0) {
    const double p = oracles::norm_cdf(x0 / sigma);
    if (p <= 0.5) return 0.0;  // misclassified: counts as zero
    const long long k = std::llround(p * static_cast<double>(N));
    auto it = cp_cache.find(k);
    if (it == cp_cache.end())
      it = cp_cache.emplace(k, oracles::clopper_pearson_lower(k, N, alpha)).first;
    const double pa = it->second;
    if (pa <= 0.5) return 0.0;  // abstained
    return sigma * oracles::norm_icdf(pa);
  };
  auto integrand = [&](double t) {
    const double z = (t - offset) / sigma_data;
    return radius_at(t) * std::exp(-0.5 * z * z) /
           (sigma_data * std::sqrt(2.0 * M_PI));
  };
  // Both classes contribute the same integral by symmetry.
  const double expected = oracles::simpson(integrand, offset - 8.0 * sigma_data,
                                           offset + 8.0 * sigma_data, 600);

  CHECK(measured == doctest::Approx(expected).epsilon(0.03));
}

TEST_CASE("worker pools produce index-ordered, count-independent records") {
  const Dataset ds = rsmooth::make_two_gaussians(12, 2, 2.0, 0.5, 61, "test");
  ModelParams model = halfspace_model(0.8, 0.6, 0.1);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 20;
  cfg.n = 300;
  cfg.batch_size = 150;

  const std::vector<EvalRecord> one = rsmooth::certify_dataset(model, ds, cfg, 62, 1);
  const std::vector<EvalRecord> four = rsmooth::certify_dataset(model, ds, cfg, 62, 4);
  REQUIRE(one.size() == 12);
  REQUIRE(four.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(one[i].index == i);
    CHECK(four[i].index == i);
    CHECK(one[i].prediction == four[i].prediction);
    CHECK(one[i].radius == four[i].radius);
    CHECK(one[i].counts == four[i].counts);
    CHECK(one[i].label == ds.labels[i]);
  }

  // Each point draws from its own child stream, so a truncated run is a
  // prefix of the full one, and record 0 matches a direct certification.
  const std::vector<EvalRecord> part = rsmooth::certify_dataset(model, ds, cfg, 62, 2, 5);
  REQUIRE(part.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(part[i].radius == one[i].radius);
    CHECK(part[i].counts == one[i].counts);
  }
  const rsmooth::CertificationResult direct = rsmooth::certify(
      model, ds.row(0), cfg,
      RngStream(62).child(rsmooth::stream_path::kCertifyPoint).child(0));
  CHECK(one[0].prediction == direct.prediction);
  CHECK(one[0].counts == direct.counts);

  CHECK_THROWS_AS(rsmooth::certify_dataset(model, ds, cfg, 62, 0), std::invalid_argument);
  const Dataset wide = rsmooth::make_two_gaussians(4, 3, 2.0, 0.5, 61, "test");
  CHECK_THROWS_AS(rsmooth::certify_dataset(model, wide, cfg, 62, 1), std::invalid_argument);

  // A worker failure surfaces as the original exception.
  std::atomic<int> calls{0};
  auto boom = [&](std::size_t i, const std::vector<double>&) -> rsmooth::CertificationResult {
    calls.fetch_add(1);
    if (i == 3) throw std::runtime_error("boom at 3");
    return rsmooth::CertificationResult{};
  };
  CHECK_THROWS_AS(rsmooth::certify_points(boom, ds, 3), std::runtime_error);
}

TEST_CASE("per-point weight design on identical components splits evenly") {
  ModelParams m = rsmooth::init_params(
      rsmooth::MlpSpec{{2, 6, 2}, rsmooth::Activation::kTanh, 4.0}, RngStream(71));
  const Dataset ds = rsmooth::make_two_gaussians(8, 2, 2.0, 0.5, 72, "test");
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 20;
  cfg.n = 200;
  cfg.batch_size = 100;

  // t = 0 and sigma_tilde = 0 make both sampled models bitwise equal, so
  // the margins coincide and the quadratic's vertex sits at 1/2.
  rsmooth::Alg2Params alg{3, 5, 0.0, 0.5, 0.0};
  std::vector<rsmooth::WeightChoice> weights;
  const std::vector<EvalRecord> recs =
      rsmooth::certify_dataset_per_point(m, m, alg, ds, cfg, 73, 2, 0, &weights);
  REQUIRE(weights.size() == 8);
  for (const rsmooth::WeightChoice& w : weights) {
    CHECK(w.w1 == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(w.w1 + w.w2 == doctest::Approx(1.0).epsilon(1e-12));
  }

  // The certification itself must then agree with the plain ensemble at
  // weights (w1, w2) per point; spot-check point 0.
  rsmooth::EnsembleSpec ens{{m, m}, {weights[0].w1, weights[0].w2}};
  const rsmooth::CertificationResult direct = rsmooth::ensemble_certify(
      ens, ds.row(0), cfg,
      RngStream(73).child(rsmooth::stream_path::kCertifyPoint).child(0));
  CHECK(recs[0].prediction == direct.prediction);
  CHECK(recs[0].counts == direct.counts);

  rsmooth::Alg2Params bad = alg;
  bad.m = 0;
  CHECK_THROWS_AS(rsmooth::certify_dataset_per_point(m, m, bad, ds, cfg, 73, 1),
                  std::invalid_argument);
  bad = alg;
  bad.sigma = 0.0;
  CHECK_THROWS_AS(rsmooth::certify_dataset_per_point(m, m, bad, ds, cfg, 73, 1),
                  std::invalid_argument);
}

TEST_CASE("records jsonl format is stable and round-trips") {
  const Dataset ds = rsmooth::make_two_gaussians(6, 2, 2.0, 0.5, 81, "test");
  ModelParams model = halfspace_model(1.0, 0.0, 0.0);
  SmoothingConfig cfg;
  cfg.sigma = 0.5;
  cfg.n0 = 20;
  cfg.n = 200;
  cfg.batch_size = 100;
  std::vector<EvalRecord> recs = rsmooth::certify_dataset(model, ds, cfg, 82, 2);

  const std::string dir = temp_dir("jsonl");
  const std::string path = dir + "/records.jsonl";
  rsmooth::write_records_jsonl(recs, path);

  // Fixed key order, one object per line, seconds pinned to zero so that
  // byte comparison is meaningful across reruns and worker counts.
  const std::string text = read_file(path);
  std::istringstream lines(text);
  std::string line;
  const std::regex shape(
      R"(\{"index":\d+,"label":\d+,"prediction":-?\d+,"radius":[-+.eE0-9]+,)"
      R"("abstain":(?:true|false),"counts":\[[\d,]*\],"seconds":0\})");
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    CHECK(std::regex_match(line, shape));
    ++count;
  }
  CHECK(count == 6);

  std::vector<EvalRecord> back = rsmooth::read_records_jsonl(path);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].index == i);
    CHECK(back[i].label == recs[i].label);
    CHECK(back[i].prediction == recs[i].prediction);
    CHECK(back[i].radius == recs[i].radius);  // 17 digits survive the trip
    CHECK(back[i].abstain == recs[i].abstain);
    CHECK(back[i].correct == recs[i].correct);
    CHECK(back[i].counts == recs[i].counts);
    CHECK(back[i].seconds == 0.0);
  }

  // Rewriting the parsed records reproduces the bytes.
  rsmooth::write_records_jsonl(back, dir + "/again.jsonl");
  CHECK(read_file(dir + "/again.jsonl") == text);

  write_file(dir + "/bad.jsonl", "{\"index\":0}\nnot json\n");
  try {
    rsmooth::read_records_jsonl(dir + "/bad.jsonl");
    FAIL_CHECK("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:1") != std::string::npos);
  }
  CHECK_THROWS_AS(rsmooth::read_records_jsonl(dir + "/absent.jsonl"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("table writers") {
  const std::string dir = temp_dir("writers");
  const std::vector<std::pair<double, double>> table = {{0.0, 1.0}, {0.25, 0.5}};
  rsmooth::write_certified_accuracy_csv(table, dir + "/t.csv");
  CHECK(read_file(dir + "/t.csv") == "radius,certified_accuracy\n0,1\n0.25,0.5\n");

  rsmooth::write_certified_accuracy_svg(table, dir + "/t.svg");
  const std::string svg = read_file(dir + "/t.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("certified accuracy") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK_THROWS_AS(rsmooth::write_certified_accuracy_svg({}, dir + "/e.svg"),
                  std::invalid_argument);
  CHECK_THROWS_AS(rsmooth::write_certified_accuracy_csv(table, dir + "/no/such/t.csv"),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("experiment run emits all artifacts and reruns byte-identically") {
  const std::string dir = temp_dir("exp");
  nlohmann::json cfg = {
      {"out_dir", dir + "/run_a"},
      {"seed", 7},
      {"workers", 2},
      {"dataset",
       {{"kind", "two_gaussians"}, {"n_train", 64}, {"n_test", 24}, {"dim", 2},
        {"offset", 2.0}, {"sigma_data", 0.5}, {"seed", 3}}},
      {"train",
       {{"method", "gaussian_aug"}, {"epochs", 3}, {"batch_size", 16}, {"lr_init", 0.05},
        {"hidden", {8}}, {"beta", 4.0}, {"smoothing", {{"sigma", 0.5}, {"m", 2}}}}},
      {"certify",
       {{"sigma", 0.5}, {"n0", 20}, {"n", 200}, {"alpha", 0.001}, {"batch_size", 100}}}};
  write_file(dir + "/config.json", cfg.dump(2));
  rsmooth::run_experiment_file(dir + "/config.json");

  for (const char* name : {"records.jsonl", "summary.json", "certified_accuracy.csv",
                           "certified_accuracy.svg", "model.json", "train_report.jsonl"}) {
    CHECK(fs::exists(dir + "/run_a/" + name));
  }

  const std::vector<EvalRecord> recs =
      rsmooth::read_records_jsonl(dir + "/run_a/records.jsonl");
  REQUIRE(recs.size() == 24);
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].index == i);

  // The summary restates the record-level aggregates and the provenance.
  nlohmann::json summary = nlohmann::json::parse(read_file(dir + "/run_a/summary.json"));
  const rsmooth::AcrSummary acr = rsmooth::evaluate_acr(recs);
  CHECK(summary.at("acr").get<double>() == acr.acr);
  CHECK(summary.at("clean_accuracy").get<double>() == acr.clean_accuracy);
  CHECK(summary.at("n_points").get<std::size_t>() == 24);
  CHECK(summary.at("train_seconds").get<double>() >= 0.0);
  CHECK(summary.at("certify_seconds").get<double>() >= 0.0);
  REQUIRE(summary.at("components").size() == 1);
  CHECK(summary.at("components")[0].at("method") == "gaussian_aug");
  CHECK(summary.at("components")[0].at("sigma").get<double>() == 0.5);
  CHECK(summary.at("components")[0].at("path") == "model.json");

  const std::string csv = read_file(dir + "/run_a/certified_accuracy.csv");
  CHECK(csv.rfind("radius,certified_accuracy\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);  // header + 9 grid rows

  // Same config, different out_dir and worker count: identical records.
  cfg["out_dir"] = dir + "/run_b";
  cfg["workers"] = 4;
  write_file(dir + "/config_b.json", cfg.dump(2));
  rsmooth::run_experiment_file(dir + "/config_b.json");
  CHECK(read_file(dir + "/run_b/records.jsonl") == read_file(dir + "/run_a/records.jsonl"));

  // max_points caps the evaluated slice.
  cfg["out_dir"] = dir + "/run_c";
  cfg["max_points"] = 5;
  write_file(dir + "/config_c.json", cfg.dump(2));
  rsmooth::run_experiment_file(dir + "/config_c.json");
  CHECK(rsmooth::read_records_jsonl(dir + "/run_c/records.jsonl").size() == 5);

  fs::remove_all(dir);
}

TEST_CASE("checkpoint ensembles certify with recorded provenance") {
  const std::string dir = temp_dir("ens");
  const char* methods[3] = {"gaussian_aug", "advmacer", "smoothadv"};
  for (int i = 0; i < 3; ++i)
    rsmooth::save_params(quick_model(methods[i], 90 + static_cast<std::uint64_t>(i)),
                         dir + "/ck" + std::to_string(i) + ".json");

  nlohmann::json cfg = {
      {"out_dir", dir + "/out"},
      {"seed", 9},
      {"workers", 2},
      {"max_points", 10},
      {"dataset",
       {{"kind", "two_gaussians"}, {"n_train", 16}, {"n_test", 16}, {"dim", 2}, {"seed", 3}}},
      {"checkpoints", {"ck0.json", "ck1.json", "ck2.json"}},
      {"certify",
       {{"sigma", 0.5}, {"n0", 20}, {"n", 200}, {"alpha", 0.001}, {"batch_size", 100}}}};
  write_file(dir + "/config.json", cfg.dump(2));
  rsmooth::run_experiment_file(dir + "/config.json");

  nlohmann::json summary = nlohmann::json::parse(read_file(dir + "/out/summary.json"));
  REQUIRE(summary.at("components").size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK(summary.at("components")[i].at("method") == methods[i]);
  CHECK(summary.at("weight_mode") == "fixed");
  const std::vector<double> w = summary.at("weights").get<std::vector<double>>();
  REQUIRE(w.size() == 3);
  for (double v : w) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // Per-point mode on two checkpoints reports the mean designed weight.
  nlohmann::json cfg2 = cfg;
  cfg2["out_dir"] = dir + "/out2";
  cfg2["checkpoints"] = {"ck0.json", "ck1.json"};
  cfg2["ensemble"] = {{"weight_mode", "per_point"},
                      {"alg2", {{"m", 3}, {"n", 5}, {"t", 0.3}, {"sigma", 0.5},
                                {"sigma_tilde", 0.01}}}};
  write_file(dir + "/config2.json", cfg2.dump(2));
  rsmooth::run_experiment_file(dir + "/config2.json");
  nlohmann::json summary2 = nlohmann::json::parse(read_file(dir + "/out2/summary.json"));
  CHECK(summary2.at("weight_mode") == "per_point");
  const std::vector<double> w2 = summary2.at("weights").get<std::vector<double>>();
  REQUIRE(w2.size() == 2);
  CHECK(w2[0] >= 0.0);
  CHECK(w2[0] <= 1.0);
  CHECK(w2[0] + w2[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rsmooth::read_records_jsonl(dir + "/out2/records.jsonl").size() == 10);

  fs::remove_all(dir);
}

TEST_CASE("config violations carry field paths and abort before any work") {
  const std::string dir = temp_dir("cfgerr");
  auto expect = [&](const nlohmann::json& cfg, const std::string& needle) {
    const std::string path = dir + "/c.json";
    write_file(path, cfg.dump());
    try {
      rsmooth::load_experiment_config(path);
      FAIL_CHECK("expected a config error mentioning: " << needle);
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find(needle) != std::string::npos);
      CHECK(msg.rfind("config:", 0) == 0);
    }
  };

  const nlohmann::json dataset = {{"kind", "two_gaussians"}, {"n_train", 8}, {"n_test", 8},
                                  {"dim", 2}};
  const nlohmann::json certify = {{"sigma", 0.5}, {"n0", 10}, {"n", 50}};
  const nlohmann::json train = {{"method", "gaussian_aug"}, {"epochs", 1}, {"batch_size", 8}};

  expect({{"dataset", dataset}}, "exactly one of train or checkpoints");
  expect({{"dataset", dataset}, {"train", train}, {"checkpoints", {"a.json"}}},
         "exactly one of train or checkpoints");
  expect({{"dataset", {{"kind", "pinwheel"}}}, {"train", train}}, "dataset.kind");
  expect({{"dataset", dataset}, {"train", {{"method", "adversarial"}}}}, "train.method");
  expect({{"dataset", dataset}, {"train", train}, {"certify", {{"sigma", -1.0}}}}, "certify");
  expect({{"dataset", dataset}, {"train", train}, {"workers", 0}}, "workers");
  expect({{"dataset", dataset}, {"train", train}, {"frobnicate", 1}}, "frobnicate");
  expect({{"dataset", dataset}, {"train", train}, {"certify", {{"sugma", 0.5}}}},
         "certify.sugma");
  expect({{"dataset", dataset},
          {"checkpoints", {"a.json", "b.json", "c.json"}},
          {"ensemble", {{"weight_mode", "per_point"}}}},
         "per_point requires exactly 2 checkpoints");
  expect({{"dataset", dataset},
          {"checkpoints", {"a.json", "b.json"}},
          {"ensemble", {{"weights", {1.0}}}}},
         "ensemble.weights");
  expect({{"dataset", dataset}, {"train", train},
          {"ensemble", {{"alg2", {{"t", 2.0}}}}}},
         "ensemble.alg2.t");

  CHECK_THROWS_AS(rsmooth::load_experiment_config(dir + "/missing.json"),
                  std::invalid_argument);
  write_file(dir + "/garbled.json", "{nope");
  CHECK_THROWS_AS(rsmooth::load_experiment_config(dir + "/garbled.json"),
                  std::invalid_argument);
  fs::remove_all(dir);
}
