#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rsmooth/attack.hpp"
#include "rsmooth/ensemble.hpp"
#include "rsmooth/harness.hpp"
#include "rsmooth/model.hpp"
#include "rsmooth/smoothing.hpp"
#include "rsmooth/stats.hpp"
#include "rsmooth/train.hpp"

namespace {

using namespace rsmooth;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void run_train(const std::string& config_path, const std::string& out_path) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  if (!cfg.has_train)
    throw std::invalid_argument("config: train: required by the train subcommand");
  const Dataset data = make_dataset(cfg.dataset, "train");
  auto [params, report] = train(to_labeled(data), cfg.train);
  save_params(params, out_path);
  write_report_jsonl(report, out_path + ".report.jsonl");
  double seconds = 0.0;
  for (const EpochRecord& e : report.epochs) seconds += e.seconds;
  std::cout << "trained " << train_method_name(cfg.train.method) << " for "
            << cfg.train.epochs << " epochs on " << data.size() << " points in "
            << fmt17(seconds) << " s -> " << out_path << "\n";
}

void run_attack(const std::string& model_path, const std::string& dataset_path, double eps,
                int steps, double step_size, int mc_samples, bool no_reuse, double sigma_opt,
                std::uint64_t seed, std::size_t max_points, const std::string& out_path) {
  const ModelParams params = load_params(model_path);
  const DatasetSpec dspec = dataset_spec_from_json_file(dataset_path);
  const Dataset data = make_dataset(dspec, "test");
  if (params.spec.input_dim() != data.dim())
    throw std::invalid_argument("attack: model input dim does not match dataset");

  AttackConfig acfg;
  acfg.epsilon = eps;
  acfg.steps = steps;
  acfg.step_size = step_size;
  acfg.mc_samples = mc_samples;
  acfg.noise_reuse = !no_reuse;
  acfg.validate();
  SmoothingConfig scfg;
  scfg.sigma = sigma_opt >= 0.0
                   ? sigma_opt
                   : (params.provenance.sigma > 0.0 ? params.provenance.sigma : 0.5);
  scfg.m = mc_samples;
  scfg.validate();

  const std::size_t n = max_points == 0 ? data.size() : std::min(max_points, data.size());
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("attack: cannot open " + out_path);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> x = data.row(i);
    const int y = data.labels[i];
    RngStream stream = RngStream(seed).child(stream_path::kAttack).child(i);
    const Tensor adv = smooth_pgd(params, Tensor::from_values({x.size()}, x),
                                  std::vector<int>{y}, acfg, scfg, stream);
    const std::vector<double>& av = adv.values();
    double dist2 = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) dist2 += (av[k] - x[k]) * (av[k] - x[k]);
    const double dist = std::sqrt(dist2);
    if (dist > 0.0) ++moved;
    out << "{\"index\":" << i << ",\"label\":" << y
        << ",\"prediction\":" << predict_hard(params, av) << ",\"l2\":" << fmt17(dist)
        << ",\"x_adv\":[";
    for (std::size_t k = 0; k < av.size(); ++k) {
      if (k) out << ",";
      out << fmt17(av[k]);
    }
    out << "]}\n";
  }
  if (!out) throw std::runtime_error("attack: write failed for " + out_path);
  std::cout << "attacked " << n << " points (" << moved << " moved, eps=" << fmt17(eps)
            << ", sigma=" << fmt17(scfg.sigma) << ") -> " << out_path << "\n";
}

void write_certify_artifacts(const std::vector<EvalRecord>& records,
                             const std::string& out_dir, double certify_seconds,
                             const std::vector<std::pair<std::string, Provenance>>& components,
                             const std::string& weight_mode,
                             const std::vector<double>& weights) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  write_records_jsonl(records, (out / "records.jsonl").string());
  const auto table = certified_accuracy_table(records, default_radius_grid());
  write_certified_accuracy_csv(table, (out / "certified_accuracy.csv").string());
  write_certified_accuracy_svg(table, (out / "certified_accuracy.svg").string());

  const AcrSummary acr = evaluate_acr(records);
  nlohmann::ordered_json summary;
  summary["acr"] = acr.acr;
  summary["clean_accuracy"] = acr.clean_accuracy;
  summary["n_points"] = records.size();
  summary["train_seconds"] = 0.0;
  summary["certify_seconds"] = certify_seconds;
  if (!weight_mode.empty()) {
    summary["weight_mode"] = weight_mode;
    summary["weights"] = weights;
  }
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (const auto& [path, prov] : components) {
    nlohmann::ordered_json c;
    c["path"] = path;
    c["method"] = prov.method;
    c["sigma"] = prov.sigma;
    c["seed"] = prov.seed;
    comps.push_back(std::move(c));
  }
  summary["components"] = std::move(comps);
  std::ofstream sout((out / "summary.json").string(), std::ios::binary);
  if (!sout) throw std::runtime_error("certify: cannot open summary.json");
  sout << summary.dump(2) << "\n";

  std::cout << "certified " << records.size() << " points: acr=" << fmt17(acr.acr)
            << ", clean_accuracy=" << fmt17(acr.clean_accuracy) << " -> " << out_dir << "\n";
}

void run_certify(const std::string& model_path, const std::string& ensemble_path,
                 const std::string& dataset_path, const SmoothingConfig& cfg,
                 std::uint64_t seed, std::size_t workers, std::size_t max_points,
                 const std::string& out_dir) {
  if (model_path.empty() == ensemble_path.empty())
    throw std::invalid_argument("certify: pass exactly one of --model or --ensemble");
  cfg.validate();
  const DatasetSpec dspec = dataset_spec_from_json_file(dataset_path);
  const Dataset data = make_dataset(dspec, "test");

  const double t0 = std::chrono::duration<double>(
                        std::chrono::steady_clock::now().time_since_epoch())
                        .count();
  std::vector<EvalRecord> records;
  std::vector<std::pair<std::string, Provenance>> components;
  std::string weight_mode;
  std::vector<double> weights;

  if (!model_path.empty()) {
    const ModelParams params = load_params(model_path);
    records = certify_dataset(params, data, cfg, seed, workers, max_points);
    components.emplace_back(model_path, params.provenance);
  } else {
    const EnsembleSpecFile file = load_ensemble_spec(ensemble_path);
    const EnsembleSpec ens = resolve_ensemble(file, ensemble_path);
    for (std::size_t i = 0; i < ens.components.size(); ++i)
      components.emplace_back(file.components[i], ens.components[i].provenance);
    if (file.weight_mode == "fixed") {
      records = certify_dataset(ens, data, cfg, seed, workers, max_points);
      weight_mode = "fixed";
      weights = ens.weights;
    } else {
      Alg2Params alg{file.alg_m, file.alg_n, file.alg_t, file.alg_sigma,
                     file.alg_sigma_tilde};
      std::vector<WeightChoice> choices;
      records = certify_dataset_per_point(ens.components[0], ens.components[1], alg, data,
                                          cfg, seed, workers, max_points, &choices);
      double mean_w1 = 0.0;
      for (const WeightChoice& w : choices) mean_w1 += w.w1;
      if (!choices.empty()) mean_w1 /= static_cast<double>(choices.size());
      weight_mode = "per_point";
      weights = {mean_w1, 1.0 - mean_w1};
    }
  }
  const double seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now().time_since_epoch())
                             .count() -
                         t0;
  write_certify_artifacts(records, out_dir, seconds, components, weight_mode, weights);
}

void run_ensemble_weights(const std::string& model1, const std::string& model2,
                          const std::string& dataset_path, long long m, long long n, double t,
                          double sigma, double sigma_tilde, std::uint64_t seed,
                          std::size_t max_points, const std::string& out_path) {
  const ModelParams f1 = load_params(model1);
  const ModelParams f2 = load_params(model2);
  const DatasetSpec dspec = dataset_spec_from_json_file(dataset_path);
  const Dataset data = make_dataset(dspec, "test");
  if (f1.spec.input_dim() != data.dim() || f2.spec.input_dim() != data.dim())
    throw std::invalid_argument("ensemble-weights: model input dim does not match dataset");

  const std::size_t count =
      max_points == 0 ? data.size() : std::min(max_points, data.size());
  double mean_w1 = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const MarginStats stats = estimate_margin_stats(
        f1, f2, data.row(i), data.labels[i], m, n, t, sigma, sigma_tilde,
        RngStream(seed).child(stream_path::kWeightDesign).child(i));
    mean_w1 += compute_weight(stats).w1;
  }
  mean_w1 /= static_cast<double>(count);

  EnsembleSpecFile file;
  file.components = {std::filesystem::absolute(model1).string(),
                     std::filesystem::absolute(model2).string()};
  file.weights = {mean_w1, 1.0 - mean_w1};
  file.weight_mode = "fixed";
  file.alg_m = m;
  file.alg_n = n;
  file.alg_t = t;
  file.alg_sigma = sigma;
  file.alg_sigma_tilde = sigma_tilde;
  save_ensemble_spec(file, out_path);
  std::cout << "designed weights [" << fmt17(mean_w1) << ", " << fmt17(1.0 - mean_w1)
            << "] over " << count << " points -> " << out_path << "\n";
}

void run_report(const std::string& in_dir, const std::string& grid_text,
                const std::string& out_dir) {
  const std::vector<EvalRecord> records =
      read_records_jsonl((std::filesystem::path(in_dir) / "records.jsonl").string());
  if (records.empty()) throw std::runtime_error("report: no records in " + in_dir);
  const std::vector<double> grid = parse_radius_grid(grid_text);
  const auto table = certified_accuracy_table(records, grid);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  write_certified_accuracy_csv(table, (out / "certified_accuracy.csv").string());
  write_certified_accuracy_svg(table, (out / "certified_accuracy.svg").string());
  const AcrSummary acr = evaluate_acr(records);
  std::cout << "report over " << records.size() << " records: acr=" << fmt17(acr.acr)
            << ", clean_accuracy=" << fmt17(acr.clean_accuracy) << " -> " << out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"randomized-smoothing certification toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  CLI::App* cmd_train = app.add_subcommand("train", "train a model from a config file");
  cmd_train->add_option("--config", config_path, "experiment config JSON")->required();
  cmd_train->add_option("--out", out_path, "checkpoint path to write")->required();

  std::string atk_model, atk_dataset, atk_out;
  double atk_eps = 1.0, atk_step = 0.0, atk_sigma = -1.0;
  int atk_steps = 2, atk_m = 8;
  bool atk_no_reuse = false;
  std::uint64_t atk_seed = 0;
  std::size_t atk_max = 0;
  CLI::App* cmd_attack = app.add_subcommand("attack", "projected-gradient attack on a model");
  cmd_attack->add_option("--model", atk_model, "model checkpoint")->required();
  cmd_attack->add_option("--dataset", atk_dataset, "dataset spec JSON")->required();
  cmd_attack->add_option("--eps", atk_eps, "L2 ball radius")->required();
  cmd_attack->add_option("--steps", atk_steps, "attack steps")->required();
  cmd_attack->add_option("--out", atk_out, "adversarial examples JSONL")->required();
  cmd_attack->add_option("--step-size", atk_step, "step size (0 = 2*eps/steps)");
  cmd_attack->add_option("--m", atk_m, "Monte Carlo draws per gradient");
  cmd_attack->add_option("--sigma", atk_sigma, "noise level (default: model provenance)");
  cmd_attack->add_option("--seed", atk_seed, "random seed");
  cmd_attack->add_option("--max-points", atk_max, "limit points (0 = all)");
  cmd_attack->add_flag("--no-reuse", atk_no_reuse, "fresh noise each step");

  std::string cert_model, cert_ensemble, cert_dataset, cert_out;
  SmoothingConfig cert_cfg;
  std::uint64_t cert_seed = 0;
  std::size_t cert_workers = 1, cert_max = 0;
  CLI::App* cmd_certify = app.add_subcommand("certify", "certify a model or ensemble");
  cmd_certify->add_option("--model", cert_model, "model checkpoint");
  cmd_certify->add_option("--ensemble", cert_ensemble, "ensemble spec JSON");
  cmd_certify->add_option("--dataset", cert_dataset, "dataset spec JSON")->required();
  cmd_certify->add_option("--sigma", cert_cfg.sigma, "smoothing noise level");
  cmd_certify->add_option("--n0", cert_cfg.n0, "selection draws");
  cmd_certify->add_option("--n", cert_cfg.n, "estimation draws");
  cmd_certify->add_option("--alpha", cert_cfg.alpha, "failure probability");
  cmd_certify->add_option("--batch-size", cert_cfg.batch_size, "draws per forward pass");
  cmd_certify->add_option("--seed", cert_seed, "random seed");
  cmd_certify->add_option("--workers", cert_workers, "worker threads");
  cmd_certify->add_option("--max-points", cert_max, "limit points (0 = all)");
  cmd_certify->add_option("--out", cert_out, "output directory")->required();

  std::string ew_model1, ew_model2, ew_dataset, ew_out;
  long long ew_m = 10, ew_n = 10;
  double ew_t = 0.3, ew_sigma = 0.5, ew_sigma_tilde = 0.01;
  std::uint64_t ew_seed = 0;
  std::size_t ew_max = 0;
  CLI::App* cmd_ew =
      app.add_subcommand("ensemble-weights", "design two-model ensemble weights");
  cmd_ew->add_option("--model1", ew_model1, "first checkpoint")->required();
  cmd_ew->add_option("--model2", ew_model2, "second checkpoint")->required();
  cmd_ew->add_option("--dataset", ew_dataset, "dataset spec JSON")->required();
  cmd_ew->add_option("--m", ew_m, "perturbed copies per model");
  cmd_ew->add_option("--n", ew_n, "noisy inputs per point");
  cmd_ew->add_option("--t", ew_t, "perturbation fraction");
  cmd_ew->add_option("--sigma", ew_sigma, "input noise level");
  cmd_ew->add_option("--sigma-tilde", ew_sigma_tilde, "parameter noise level");
  cmd_ew->add_option("--seed", ew_seed, "random seed");
  cmd_ew->add_option("--max-points", ew_max, "limit points (0 = all)");
  cmd_ew->add_option("--out", ew_out, "ensemble spec path to write")->required();

  std::string rep_in, rep_out, rep_grid = "0:2:0.25";
  CLI::App* cmd_report = app.add_subcommand("report", "rebuild tables from records.jsonl");
  cmd_report->add_option("--in", rep_in, "directory holding records.jsonl")->required();
  cmd_report->add_option("--grid", rep_grid, "radius grid start:stop:step");
  cmd_report->add_option("--out", rep_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (cmd_train->parsed()) {
      run_train(config_path, out_path);
    } else if (cmd_attack->parsed()) {
      run_attack(atk_model, atk_dataset, atk_eps, atk_steps, atk_step, atk_m, atk_no_reuse,
                 atk_sigma, atk_seed, atk_max, atk_out);
    } else if (cmd_certify->parsed()) {
      run_certify(cert_model, cert_ensemble, cert_dataset, cert_cfg, cert_seed, cert_workers,
                  cert_max, cert_out);
    } else if (cmd_ew->parsed()) {
      run_ensemble_weights(ew_model1, ew_model2, ew_dataset, ew_m, ew_n, ew_t, ew_sigma,
                           ew_sigma_tilde, ew_seed, ew_max, ew_out);
    } else if (cmd_report->parsed()) {
      run_report(rep_in, rep_grid, rep_out);
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
