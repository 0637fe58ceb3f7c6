#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rsmooth/ensemble.hpp"
#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/tensor.hpp"
#include "rsmooth/train.hpp"

namespace rsmooth {

struct Dataset {
  std::string name;
  Tensor features;  // [n, d]
  std::vector<int> labels;
  std::string split;  // "train" or "test"
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.shape()[1] : 0; }
  std::size_t num_classes() const;
  std::vector<double> row(std::size_t i) const;
  void validate() const;
};

LabeledData to_labeled(const Dataset& data);

/// Two isotropic Gaussian blobs with means +-(offset, 0, ..., 0), labels
/// alternating 0, 1. The Bayes-optimal boundary is the hyperplane x0 = 0.
Dataset make_two_gaussians(std::size_t n, std::size_t dim, double offset, double sigma_data,
                           std::uint64_t seed, const std::string& split);

/// Four blobs at (+-offset, +-offset) in the first two coordinates,
/// labels 0..3 counterclockwise from (+, +).
Dataset make_four_blobs(std::size_t n, std::size_t dim, double offset, double sigma_data,
                        std::uint64_t seed, const std::string& split);

/// Two concentric noisy circles in the plane; label 0 is the inner ring.
Dataset make_rings(std::size_t n, double r_inner, double r_outer, double radial_noise,
                   std::uint64_t seed, const std::string& split);

/// CSV with a header row and a trailing integer label column. Parse
/// failures report the 1-based line number.
Dataset load_csv(const std::string& path, const std::string& name, const std::string& split);

void export_csv(const Dataset& data, const std::string& path);

/// Declarative dataset description, as it appears in config files.
struct DatasetSpec {
  std::string kind = "two_gaussians";
  std::size_t n_train = 256;
  std::size_t n_test = 128;
  std::size_t dim = 2;
  double offset = 2.0;
  double sigma_data = 0.5;
  double r_inner = 1.0;     // rings only
  double r_outer = 2.0;     // rings only
  double ring_noise = 0.1;  // rings only
  std::string train_csv;    // csv kind only
  std::string test_csv;     // csv kind only
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset make_dataset(const DatasetSpec& spec, const std::string& split);
DatasetSpec dataset_spec_from_json_file(const std::string& path);

/// One certification outcome under the evaluation protocol: radius is
/// zeroed whenever the point was abstained or misclassified.
struct EvalRecord {
  std::size_t index = 0;
  int label = 0;
  int prediction = kAbstain;
  bool abstain = true;
  double radius = 0.0;
  bool correct = false;
  double seconds = 0.0;
  std::vector<long long> counts;
};

struct AcrSummary {
  double acr = 0.0;
  double clean_accuracy = 0.0;
};

/// Mean radius over ALL records (zeros included) and the fraction with a
/// correct non-abstaining prediction.
AcrSummary evaluate_acr(const std::vector<EvalRecord>& records);

/// For each grid radius r: the fraction of records that are correct and
/// certify at least r. Columns are monotone nonincreasing.
std::vector<std::pair<double, double>> certified_accuracy_table(
    const std::vector<EvalRecord>& records, const std::vector<double>& grid);

std::vector<double> default_radius_grid();  // 0, 0.25, ..., 2.0

/// "start:stop:step" -> inclusive ascending grid.
std::vector<double> parse_radius_grid(const std::string& text);

/// Certify the first max_points rows (0 = all) with a worker pool.
/// point_fn must be pure; results land in index order regardless of the
/// worker count.
std::vector<EvalRecord> certify_points(
    const std::function<CertificationResult(std::size_t index, const std::vector<double>& x)>&
        point_fn,
    const Dataset& data, std::size_t workers, std::size_t max_points = 0);

std::vector<EvalRecord> certify_dataset(const ModelParams& params, const Dataset& data,
                                        const SmoothingConfig& cfg, std::uint64_t seed,
                                        std::size_t workers = 1, std::size_t max_points = 0);
std::vector<EvalRecord> certify_dataset(const EnsembleSpec& ens, const Dataset& data,
                                        const SmoothingConfig& cfg, std::uint64_t seed,
                                        std::size_t workers = 1, std::size_t max_points = 0);

struct Alg2Params {
  long long m = 10;
  long long n = 10;
  double t = 0.3;
  double sigma = 0.5;
  double sigma_tilde = 0.01;
};

/// Two-model certification with a fresh weight design per point: margin
/// statistics are estimated at the point (relative to its label), the
/// quadratic is solved, and the reweighted ensemble is certified.
std::vector<EvalRecord> certify_dataset_per_point(
    const ModelParams& f1, const ModelParams& f2, const Alg2Params& alg, const Dataset& data,
    const SmoothingConfig& cfg, std::uint64_t seed, std::size_t workers = 1,
    std::size_t max_points = 0, std::vector<WeightChoice>* weights_out = nullptr);

/// One line per record, fixed key order, radius printed with 17
/// significant digits. The seconds field is reserved and pinned to 0 so
/// that reruns and different worker counts produce identical bytes; wall
/// times live in the experiment summary instead.
void write_records_jsonl(const std::vector<EvalRecord>& records, const std::string& path);
std::vector<EvalRecord> read_records_jsonl(const std::string& path);

void write_certified_accuracy_csv(const std::vector<std::pair<double, double>>& table,
                                  const std::string& path);
void write_certified_accuracy_svg(const std::vector<std::pair<double, double>>& table,
                                  const std::string& path);

/// Everything run_experiment needs, mirroring the config file schema.
struct ExperimentConfig {
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t max_points = 0;
  DatasetSpec dataset;
  bool has_train = false;
  TrainConfig train;
  std::vector<std::string> checkpoints;  // alternative to training
  std::vector<double> ensemble_weights;  // empty = uniform
  std::string weight_mode = "fixed";
  Alg2Params alg2;
  SmoothingConfig certify;

  void validate() const;
};

/// Parse and fully validate a config file; violations carry the offending
/// field path. No work happens until the whole config checks out.
ExperimentConfig load_experiment_config(const std::string& path);

/// Train (or load checkpoints), certify the test split, and write
/// records.jsonl, summary.json, certified_accuracy.csv, and
/// certified_accuracy.svg into out_dir.
void run_experiment(const ExperimentConfig& cfg);
void run_experiment_file(const std::string& config_path);

}  // namespace rsmooth
