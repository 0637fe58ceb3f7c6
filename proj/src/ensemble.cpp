#include "rsmooth/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace rsmooth {

void EnsembleSpec::validate() const {
  if (components.empty()) throw std::invalid_argument("EnsembleSpec: no components");
  if (weights.size() != components.size())
    throw std::invalid_argument("EnsembleSpec: weight count does not match component count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("EnsembleSpec: weights must be nonnegative");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw std::invalid_argument("EnsembleSpec: weights must sum to 1");
  const int dim = components.front().spec.input_dim();
  const int classes = components.front().spec.num_classes();
  for (const ModelParams& c : components) {
    c.spec.validate();
    if (c.spec.input_dim() != dim || c.spec.num_classes() != classes)
      throw std::invalid_argument("EnsembleSpec: components disagree on input or class dimensions");
  }
}

std::vector<double> normalized_weights(const std::vector<double>& raw) {
  if (raw.empty()) throw std::invalid_argument("normalized_weights: empty");
  double total = 0.0;
  for (double w : raw) {
    if (!(w >= 0.0)) throw std::invalid_argument("normalized_weights: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("normalized_weights: weights sum to zero");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / total;
  return out;
}

Tensor ensemble_soft(const EnsembleSpec& ens, const Tensor& x) {
  ens.validate();
  Tensor acc = mul_scalar(forward_soft(ens.components[0], x), ens.weights[0]);
  for (std::size_t l = 1; l < ens.components.size(); ++l)
    acc = add(acc, mul_scalar(forward_soft(ens.components[l], x), ens.weights[l]));
  return acc;
}

std::vector<int> ensemble_predict_hard(const EnsembleSpec& ens, const Tensor& x) {
  Tensor soft = ensemble_soft(ens, x);
  const Tensor batch = soft.rank() == 1 ? reshape(soft, {1, soft.numel()}) : soft;
  const std::size_t rows = batch.rows();
  const std::size_t cols = batch.cols();
  const std::vector<double>& v = batch.values();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = argmax_lowest(v.data() + r * cols, cols);
  return out;
}

BaseClassifier as_base_classifier(const EnsembleSpec& ens) {
  ens.validate();
  BaseClassifier clf;
  clf.input_dim = ens.components.front().spec.input_dim();
  clf.num_classes = ens.components.front().spec.num_classes();
  const std::size_t dim = static_cast<std::size_t>(clf.input_dim);
  clf.predict = [ens, dim](const double* batch, std::size_t rows, int* out) {
    Tensor x = Tensor::from_values({rows, dim}, std::vector<double>(batch, batch + rows * dim));
    std::vector<int> labels = ensemble_predict_hard(ens, x);
    std::copy(labels.begin(), labels.end(), out);
  };
  return clf;
}

CertificationResult ensemble_certify(const EnsembleSpec& ens, const std::vector<double>& x,
                                     const SmoothingConfig& cfg,
                                     const RngStream& point_stream) {
  return certify(as_base_classifier(ens), x, cfg, point_stream);
}

std::vector<double> variance_of_ensemble(
    const std::vector<std::vector<double>>& var_l,
    const std::map<std::pair<std::size_t, std::size_t>, std::vector<double>>& cov_lm,
    const std::vector<double>& weights) {
  const std::size_t k = var_l.size();
  if (k == 0) throw std::invalid_argument("variance_of_ensemble: no components");
  if (weights.size() != k)
    throw std::invalid_argument("variance_of_ensemble: weight count mismatch");
  const std::size_t classes = var_l.front().size();
  for (const auto& v : var_l)
    if (v.size() != classes)
      throw std::invalid_argument("variance_of_ensemble: variance length mismatch");

  std::vector<double> out(classes, 0.0);
  for (std::size_t l = 0; l < k; ++l)
    for (std::size_t j = 0; j < classes; ++j) out[j] += weights[l] * weights[l] * var_l[l][j];
  for (std::size_t l = 0; l < k; ++l) {
    for (std::size_t m = l + 1; m < k; ++m) {
      auto it = cov_lm.find({l, m});
      if (it == cov_lm.end()) it = cov_lm.find({m, l});
      if (it == cov_lm.end()) {
        std::ostringstream msg;
        msg << "variance_of_ensemble: missing covariance for pair (" << l << ", " << m << ")";
        throw std::invalid_argument(msg.str());
      }
      if (it->second.size() != classes)
        throw std::invalid_argument("variance_of_ensemble: covariance length mismatch");
      for (std::size_t j = 0; j < classes; ++j)
        out[j] += 2.0 * weights[l] * weights[m] * it->second[j];
    }
  }
  return out;
}

double p1_lower_bound(const std::vector<double>& varbar, const std::vector<double>& e) {
  if (varbar.empty() || varbar.size() != e.size())
    throw std::invalid_argument("p1_lower_bound: length mismatch");
  for (double ei : e)
    if (!(ei > 0.0)) throw std::invalid_argument("p1_lower_bound: e entries must be positive");
  double total = 0.0;
  for (std::size_t i = 1; i < varbar.size(); ++i) total += varbar[i] / (e[i] * e[i]);
  return 1.0 - total;
}

ModelParams perturb_model(const ModelParams& params, double t, double sigma_tilde,
                          RngStream stream) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("perturb_model: t outside [0, 1]");
  if (!(sigma_tilde >= 0.0))
    throw std::invalid_argument("perturb_model: sigma_tilde must be nonnegative");
  auto jitter = [&](const Tensor& src) {
    std::vector<double> v = src.values();
    for (double& s : v)
      if (stream.next_uniform() < t) s += sigma_tilde * stream.next_gaussian();
    return Tensor::from_values(src.shape(), std::move(v));
  };
  ModelParams out;
  out.spec = params.spec;
  out.provenance = params.provenance;
  out.weights.reserve(params.weights.size());
  out.biases.reserve(params.biases.size());
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    out.weights.push_back(jitter(params.weights[l]));
    out.biases.push_back(jitter(params.biases[l]));
  }
  return out;
}

void MarginStats::validate() const {
  const std::size_t classes = mean1.size();
  if (classes == 0) throw std::invalid_argument("MarginStats: empty");
  if (mean2.size() != classes || b.size() != classes || c.size() != classes ||
      d.size() != classes || a.size() != classes)
    throw std::invalid_argument("MarginStats: field length mismatch");
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw std::invalid_argument("MarginStats: label out of range");
  if (m < 1 || n < 1) throw std::invalid_argument("MarginStats: m and n must be at least 1");
  for (std::size_t i = 0; i < classes; ++i) {
    if (!(b[i] >= 0.0) || !(d[i] >= 0.0))
      throw std::invalid_argument("MarginStats: negative variance");
    if (std::fabs(c[i]) > 2.0 * std::sqrt(b[i] * d[i]) + 1e-9)
      throw std::invalid_argument("MarginStats: cross covariance violates Cauchy-Schwarz");
    if (!(a[i] > 0.0)) throw std::invalid_argument("MarginStats: a entries must be positive");
  }
}

MarginStats margin_stats_from_samples(const Tensor& z1, const Tensor& z2, int label,
                                      long long m, long long n) {
  if (m < 1 || n < 1)
    throw std::invalid_argument("margin_stats_from_samples: m and n must be at least 1");
  if (z1.rank() != 2 || z2.rank() != 2 || z1.rows() != z2.rows() || z1.cols() != z2.cols())
    throw std::invalid_argument("margin_stats_from_samples: sample shapes must match");
  const std::size_t rows = z1.rows();
  const std::size_t classes = z1.cols();
  if (rows != static_cast<std::size_t>(m) * static_cast<std::size_t>(n))
    throw std::invalid_argument("margin_stats_from_samples: row count is not m*n");
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw std::invalid_argument("margin_stats_from_samples: label out of range");

  const std::vector<double>& v1 = z1.values();
  const std::vector<double>& v2 = z2.values();
  auto margin = [classes, label](const std::vector<double>& v, std::size_t r, std::size_t i) {
    return v[r * classes + static_cast<std::size_t>(label)] - v[r * classes + i];
  };

  MarginStats st;
  st.label = label;
  st.m = m;
  st.n = n;
  st.mean1.assign(classes, 0.0);
  st.mean2.assign(classes, 0.0);
  st.b.assign(classes, 0.0);
  st.c.assign(classes, 0.0);
  st.d.assign(classes, 0.0);
  st.a.assign(classes, 0.0);

  // Welford running moments: exact zeros when every sample is identical,
  // which the two-pass sums cannot guarantee.
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double nr = static_cast<double>(r + 1);
    for (std::size_t i = 0; i < classes; ++i) {
      const double x1 = margin(v1, r, i);
      const double x2 = margin(v2, r, i);
      const double g1 = x1 - st.mean1[i];
      const double g2 = x2 - st.mean2[i];
      st.mean1[i] += g1 / nr;
      st.mean2[i] += g2 / nr;
      st.b[i] += g1 * (x1 - st.mean1[i]);
      st.c[i] += g1 * (x2 - st.mean2[i]);
      st.d[i] += g2 * (x2 - st.mean2[i]);
    }
  }
  for (std::size_t i = 0; i < classes; ++i) {
    st.b[i] *= inv;
    st.c[i] *= 2.0 * inv;
    st.d[i] *= inv;
    const double e = std::max(std::min(st.mean1[i], st.mean2[i]), 1e-3);
    st.a[i] = 1.0 / (e * e);
  }
  st.validate();
  return st;
}

MarginStats estimate_margin_stats(const ModelParams& f1, const ModelParams& f2,
                                  const std::vector<double>& x, int label, long long m,
                                  long long n, double t, double sigma, double sigma_tilde,
                                  RngStream stream) {
  f1.spec.validate();
  f2.spec.validate();
  if (f1.spec.input_dim() != f2.spec.input_dim() ||
      f1.spec.num_classes() != f2.spec.num_classes())
    throw std::invalid_argument("estimate_margin_stats: models disagree on dimensions");
  const std::size_t dim = static_cast<std::size_t>(f1.spec.input_dim());
  const std::size_t classes = static_cast<std::size_t>(f1.spec.num_classes());
  if (x.size() != dim) throw std::invalid_argument("estimate_margin_stats: input size mismatch");
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw std::invalid_argument("estimate_margin_stats: label out of range");
  if (m < 1 || n < 1)
    throw std::invalid_argument("estimate_margin_stats: m and n must be at least 1");
  if (!(sigma >= 0.0)) throw std::invalid_argument("estimate_margin_stats: sigma negative");

  const std::size_t nn = static_cast<std::size_t>(n);
  RngStream noise = stream.child(stream_path::kNoisyInputs);
  std::vector<double> noisy(nn * dim);
  for (std::size_t j = 0; j < nn; ++j)
    for (std::size_t k = 0; k < dim; ++k)
      noisy[j * dim + k] = x[k] + sigma * noise.next_gaussian();
  Tensor noisy_x = Tensor::from_values({nn, dim}, std::move(noisy));

  // Row (i*n + j) of a sample matrix holds perturbed copy i on noisy input j.
  auto sample_model = [&](const ModelParams& f, std::uint64_t key) {
    RngStream perturb = stream.child(stream_path::kPerturbModel).child(key);
    std::vector<double> z(static_cast<std::size_t>(m) * nn * classes);
    for (long long i = 0; i < m; ++i) {
      ModelParams copy =
          perturb_model(f, t, sigma_tilde, perturb.child(static_cast<std::uint64_t>(i)));
      const Tensor soft = forward_soft(copy, noisy_x);
      std::copy(soft.values().begin(), soft.values().end(),
                z.begin() + static_cast<std::size_t>(i) * nn * classes);
    }
    return Tensor::from_values({static_cast<std::size_t>(m) * nn, classes}, std::move(z));
  };
  Tensor z1 = sample_model(f1, 1);
  Tensor z2 = sample_model(f2, 2);
  return margin_stats_from_samples(z1, z2, label, m, n);
}

WeightChoice solve_weight_quadratic(double A, double B) {
  if (A > 0.0) {
    const double vertex = -B / (2.0 * A);
    if (vertex >= 0.0 && vertex <= 1.0) return {vertex, 1.0 - vertex};
  }
  if (A + B > 0.0) return {0.0, 1.0};
  return {1.0, 0.0};
}

WeightChoice compute_weight(const MarginStats& stats) {
  stats.validate();
  double A = 0.0;
  double B = 0.0;
  for (std::size_t i = 0; i < stats.a.size(); ++i) {
    if (static_cast<int>(i) == stats.label) continue;
    A += stats.a[i] * (stats.b[i] + stats.c[i] + stats.d[i]);
    B += -stats.a[i] * (stats.c[i] + 2.0 * stats.d[i]);
  }
  return solve_weight_quadratic(A, B);
}

void EnsembleSpecFile::validate() const {
  if (version != "v1") throw std::invalid_argument("EnsembleSpecFile: unsupported version");
  if (components.empty()) throw std::invalid_argument("EnsembleSpecFile: no components");
  if (weights.size() != components.size())
    throw std::invalid_argument("EnsembleSpecFile: weight count does not match component count");
  for (double w : weights)
    if (!(w >= 0.0)) throw std::invalid_argument("EnsembleSpecFile: weights must be nonnegative");
  if (weight_mode != "fixed" && weight_mode != "per_point")
    throw std::invalid_argument("EnsembleSpecFile: weight_mode must be fixed or per_point");
  if (weight_mode == "per_point" && components.size() != 2)
    throw std::invalid_argument("EnsembleSpecFile: per_point mode requires exactly 2 components");
  if (alg_m < 1 || alg_n < 1)
    throw std::invalid_argument("EnsembleSpecFile: alg2 m and n must be at least 1");
  if (!(alg_t >= 0.0 && alg_t <= 1.0))
    throw std::invalid_argument("EnsembleSpecFile: alg2 t outside [0, 1]");
  if (!(alg_sigma > 0.0)) throw std::invalid_argument("EnsembleSpecFile: alg2 sigma must be positive");
  if (!(alg_sigma_tilde >= 0.0))
    throw std::invalid_argument("EnsembleSpecFile: alg2 sigma_tilde must be nonnegative");
}

void save_ensemble_spec(const EnsembleSpecFile& file, const std::string& path) {
  file.validate();
  nlohmann::ordered_json j;
  j["version"] = file.version;
  j["components"] = file.components;
  j["weights"] = file.weights;
  j["weight_mode"] = file.weight_mode;
  j["alg2"] = {{"m", file.alg_m},
               {"n", file.alg_n},
               {"t", file.alg_t},
               {"sigma", file.alg_sigma},
               {"sigma_tilde", file.alg_sigma_tilde}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_ensemble_spec: cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_ensemble_spec: write failed for " + path);
}

EnsembleSpecFile load_ensemble_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_ensemble_spec: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_ensemble_spec: " + path + " is not valid JSON: " + e.what());
  }
  EnsembleSpecFile file;
  try {
    file.version = j.at("version").get<std::string>();
    if (file.version != "v1")
      throw std::runtime_error("load_ensemble_spec: unsupported version '" + file.version + "'");
    file.components = j.at("components").get<std::vector<std::string>>();
    file.weights = j.at("weights").get<std::vector<double>>();
    if (j.contains("weight_mode")) file.weight_mode = j.at("weight_mode").get<std::string>();
    if (j.contains("alg2")) {
      const nlohmann::json& a = j.at("alg2");
      if (a.contains("m")) file.alg_m = a.at("m").get<long long>();
      if (a.contains("n")) file.alg_n = a.at("n").get<long long>();
      if (a.contains("t")) file.alg_t = a.at("t").get<double>();
      if (a.contains("sigma")) file.alg_sigma = a.at("sigma").get<double>();
      if (a.contains("sigma_tilde"))
        file.alg_sigma_tilde = a.at("sigma_tilde").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_ensemble_spec: " + path + " has missing or malformed fields: " +
                             e.what());
  }
  file.validate();
  return file;
}

EnsembleSpec resolve_ensemble(const EnsembleSpecFile& file, const std::string& spec_path) {
  file.validate();
  const std::filesystem::path base = std::filesystem::path(spec_path).parent_path();
  EnsembleSpec ens;
  ens.components.reserve(file.components.size());
  for (const std::string& rel : file.components)
    ens.components.push_back(load_params((base / rel).string()));
  ens.weights = normalized_weights(file.weights);
  ens.validate();
  return ens;
}

}  // namespace rsmooth
