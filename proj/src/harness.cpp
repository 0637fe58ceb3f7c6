#include "rsmooth/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace rsmooth {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::uint64_t split_key(const std::string& split) {
  if (split == "train") return stream_path::kSplitTrain;
  if (split == "test") return stream_path::kSplitTest;
  throw std::invalid_argument("make_dataset: split must be 'train' or 'test', got '" + split +
                              "'");
}

std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::size_t Dataset::num_classes() const {
  int top = -1;
  for (int c : labels) top = std::max(top, c);
  return static_cast<std::size_t>(top + 1);
}

std::vector<double> Dataset::row(std::size_t i) const {
  const std::size_t d = dim();
  const std::vector<double>& v = features.values();
  return std::vector<double>(v.begin() + i * d, v.begin() + (i + 1) * d);
}

void Dataset::validate() const {
  if (features.rank() != 2) throw std::invalid_argument("Dataset: features must be rank 2");
  if (labels.empty()) throw std::invalid_argument("Dataset: empty split");
  if (features.rows() != labels.size())
    throw std::invalid_argument("Dataset: row count does not match label count");
  if (split != "train" && split != "test")
    throw std::invalid_argument("Dataset: split must be 'train' or 'test'");
  for (int c : labels)
    if (c < 0) throw std::invalid_argument("Dataset: negative label");
}

LabeledData to_labeled(const Dataset& data) {
  data.validate();
  return LabeledData{data.features, data.labels};
}

Dataset make_two_gaussians(std::size_t n, std::size_t dim, double offset, double sigma_data,
                           std::uint64_t seed, const std::string& split) {
  if (n == 0) throw std::invalid_argument("make_two_gaussians: n must be positive");
  if (dim == 0) throw std::invalid_argument("make_two_gaussians: dim must be positive");
  if (!(sigma_data >= 0.0) || !std::isfinite(offset))
    throw std::invalid_argument("make_two_gaussians: bad offset or sigma_data");
  RngStream s = RngStream(seed).child(stream_path::kData).child(split_key(split));
  std::vector<double> f(n * dim);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    labels[i] = label;
    const double mean0 = label == 0 ? offset : -offset;
    for (std::size_t k = 0; k < dim; ++k)
      f[i * dim + k] = (k == 0 ? mean0 : 0.0) + sigma_data * s.next_gaussian();
  }
  Dataset out{"two_gaussians", Tensor::from_values({n, dim}, std::move(f)), std::move(labels),
              split, seed};
  out.validate();
  return out;
}

Dataset make_four_blobs(std::size_t n, std::size_t dim, double offset, double sigma_data,
                        std::uint64_t seed, const std::string& split) {
  if (n == 0) throw std::invalid_argument("make_four_blobs: n must be positive");
  if (dim < 2) throw std::invalid_argument("make_four_blobs: dim must be at least 2");
  if (!(sigma_data >= 0.0) || !std::isfinite(offset))
    throw std::invalid_argument("make_four_blobs: bad offset or sigma_data");
  static const double kCenters[4][2] = {{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}};
  RngStream s = RngStream(seed).child(stream_path::kData).child(split_key(split));
  std::vector<double> f(n * dim);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    labels[i] = label;
    for (std::size_t k = 0; k < dim; ++k) {
      const double mean = k < 2 ? offset * kCenters[label][k] : 0.0;
      f[i * dim + k] = mean + sigma_data * s.next_gaussian();
    }
  }
  Dataset out{"four_blobs", Tensor::from_values({n, dim}, std::move(f)), std::move(labels),
              split, seed};
  out.validate();
  return out;
}

Dataset make_rings(std::size_t n, double r_inner, double r_outer, double radial_noise,
                   std::uint64_t seed, const std::string& split) {
  if (n == 0) throw std::invalid_argument("make_rings: n must be positive");
  if (!(r_inner >= 0.0) || !(r_outer > r_inner))
    throw std::invalid_argument("make_rings: need 0 <= r_inner < r_outer");
  if (!(radial_noise >= 0.0)) throw std::invalid_argument("make_rings: negative noise");
  RngStream s = RngStream(seed).child(stream_path::kData).child(split_key(split));
  std::vector<double> f(n * 2);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    labels[i] = label;
    const double theta = 2.0 * M_PI * s.next_uniform();
    const double r = (label == 0 ? r_inner : r_outer) + radial_noise * s.next_gaussian();
    f[i * 2] = r * std::cos(theta);
    f[i * 2 + 1] = r * std::sin(theta);
  }
  Dataset out{"rings", Tensor::from_values({n, 2}, std::move(f)), std::move(labels), split,
              seed};
  out.validate();
  return out;
}

Dataset load_csv(const std::string& path, const std::string& name, const std::string& split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    std::ostringstream os;
    os << "load_csv: " << path << ":" << lineno << ": " << msg;
    throw std::runtime_error(os.str());
  };

  if (!std::getline(in, line)) {
    lineno = 1;
    fail("missing header row");
  }
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::size_t ncol = split_on(line, ',').size();
  if (ncol < 2) fail("header needs at least one feature column and the label column");
  const std::size_t d = ncol - 1;

  std::vector<double> f;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_on(line, ',');
    if (cells.size() != ncol) {
      std::ostringstream os;
      os << "expected " << ncol << " fields, got " << cells.size();
      fail(os.str());
    }
    for (std::size_t k = 0; k < d; ++k) {
      const char* text = cells[k].c_str();
      char* end = nullptr;
      const double v = std::strtod(text, &end);
      if (end == text || *end != '\0' || !std::isfinite(v))
        fail("invalid number '" + cells[k] + "'");
      f.push_back(v);
    }
    const char* text = cells[d].c_str();
    char* end = nullptr;
    const long v = std::strtol(text, &end, 10);
    if (end == text || *end != '\0' || v < 0 || v > 1000000)
      fail("invalid label '" + cells[d] + "'");
    labels.push_back(static_cast<int>(v));
  }
  if (labels.empty()) {
    lineno = 1;
    fail("no data rows");
  }
  Dataset out{name, Tensor::from_values({labels.size(), d}, std::move(f)), std::move(labels),
              split, 0};
  out.validate();
  return out;
}

void export_csv(const Dataset& data, const std::string& path) {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("export_csv: cannot open " + path);
  const std::size_t d = data.dim();
  for (std::size_t k = 0; k < d; ++k) out << "f" << k << ",";
  out << "label\n";
  const std::vector<double>& v = data.features.values();
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) out << fmt17(v[i * d + k]) << ",";
    out << data.labels[i] << "\n";
  }
  if (!out) throw std::runtime_error("export_csv: write failed for " + path);
}

void DatasetSpec::validate() const {
  if (kind != "two_gaussians" && kind != "four_blobs" && kind != "rings" && kind != "csv")
    throw std::invalid_argument("dataset.kind: unknown kind '" + kind + "'");
  if (kind == "csv") {
    if (train_csv.empty()) throw std::invalid_argument("dataset.train_csv: required for csv");
    if (test_csv.empty()) throw std::invalid_argument("dataset.test_csv: required for csv");
    return;
  }
  if (n_train == 0) throw std::invalid_argument("dataset.n_train: must be positive");
  if (n_test == 0) throw std::invalid_argument("dataset.n_test: must be positive");
  if (kind == "rings") {
    if (!(r_inner >= 0.0) || !(r_outer > r_inner))
      throw std::invalid_argument("dataset.r_inner/r_outer: need 0 <= r_inner < r_outer");
    if (!(ring_noise >= 0.0)) throw std::invalid_argument("dataset.ring_noise: negative");
    return;
  }
  const std::size_t min_dim = kind == "four_blobs" ? 2 : 1;
  if (dim < min_dim) throw std::invalid_argument("dataset.dim: too small for kind " + kind);
  if (!std::isfinite(offset)) throw std::invalid_argument("dataset.offset: not finite");
  if (!(sigma_data >= 0.0)) throw std::invalid_argument("dataset.sigma_data: negative");
}

Dataset make_dataset(const DatasetSpec& spec, const std::string& split) {
  spec.validate();
  split_key(split);
  const std::size_t n = split == "train" ? spec.n_train : spec.n_test;
  if (spec.kind == "two_gaussians")
    return make_two_gaussians(n, spec.dim, spec.offset, spec.sigma_data, spec.seed, split);
  if (spec.kind == "four_blobs")
    return make_four_blobs(n, spec.dim, spec.offset, spec.sigma_data, spec.seed, split);
  if (spec.kind == "rings")
    return make_rings(n, spec.r_inner, spec.r_outer, spec.ring_noise, spec.seed, split);
  const std::string& path = split == "train" ? spec.train_csv : spec.test_csv;
  const std::string stem = std::filesystem::path(path).stem().string();
  return load_csv(path, stem.empty() ? "csv" : stem, split);
}

AcrSummary evaluate_acr(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("evaluate_acr: no records");
  double radius_sum = 0.0;
  double correct_sum = 0.0;
  for (const EvalRecord& r : records) {
    radius_sum += r.radius;
    if (r.correct) correct_sum += 1.0;
  }
  const double n = static_cast<double>(records.size());
  return AcrSummary{radius_sum / n, correct_sum / n};
}

std::vector<std::pair<double, double>> certified_accuracy_table(
    const std::vector<EvalRecord>& records, const std::vector<double>& grid) {
  if (records.empty()) throw std::invalid_argument("certified_accuracy_table: no records");
  if (grid.empty()) throw std::invalid_argument("certified_accuracy_table: empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] < grid[i - 1])
      throw std::invalid_argument("certified_accuracy_table: grid must be sorted ascending");
  std::vector<std::pair<double, double>> out;
  out.reserve(grid.size());
  const double n = static_cast<double>(records.size());
  for (double r : grid) {
    double hits = 0.0;
    for (const EvalRecord& rec : records)
      if (rec.correct && rec.radius >= r) hits += 1.0;
    out.emplace_back(r, hits / n);
  }
  return out;
}

std::vector<double> default_radius_grid() { return parse_radius_grid("0:2:0.25"); }

std::vector<double> parse_radius_grid(const std::string& text) {
  const std::vector<std::string> parts = split_on(text, ':');
  if (parts.size() != 3)
    throw std::invalid_argument("parse_radius_grid: expected start:stop:step, got '" + text +
                                "'");
  double v[3];
  for (int i = 0; i < 3; ++i) {
    const char* s = parts[i].c_str();
    char* end = nullptr;
    v[i] = std::strtod(s, &end);
    if (end == s || *end != '\0' || !std::isfinite(v[i]))
      throw std::invalid_argument("parse_radius_grid: invalid number '" + parts[i] + "'");
  }
  const double start = v[0], stop = v[1], step = v[2];
  if (!(step > 0.0)) throw std::invalid_argument("parse_radius_grid: step must be positive");
  if (stop < start) throw std::invalid_argument("parse_radius_grid: stop before start");
  std::vector<double> grid;
  for (std::size_t k = 0;; ++k) {
    const double r = start + static_cast<double>(k) * step;
    if (r > stop + 1e-9 * step) break;
    grid.push_back(r);
  }
  return grid;
}

std::vector<EvalRecord> certify_points(
    const std::function<CertificationResult(std::size_t, const std::vector<double>&)>& point_fn,
    const Dataset& data, std::size_t workers, std::size_t max_points) {
  data.validate();
  if (workers == 0) throw std::invalid_argument("certify_points: workers must be at least 1");
  const std::size_t n =
      max_points == 0 ? data.size() : std::min(max_points, data.size());
  std::vector<EvalRecord> out(n);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;

  auto body = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      const std::vector<double> x = data.row(i);
      const CertificationResult res = point_fn(i, x);
      EvalRecord rec;
      rec.index = i;
      rec.label = data.labels[i];
      rec.prediction = res.prediction;
      rec.abstain = res.abstain();
      rec.correct = !rec.abstain && res.prediction == rec.label;
      rec.radius = rec.correct ? res.radius : 0.0;
      rec.seconds = res.elapsed;
      rec.counts = res.counts;
      out[i] = std::move(rec);
    }
  };
  auto guarded = [&]() {
    try {
      body();
    } catch (...) {
      {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
      next.store(n);  // stop the other workers promptly
    }
  };

  if (workers == 1) {
    guarded();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(guarded);
    for (std::thread& t : pool) t.join();
  }
  if (err) std::rethrow_exception(err);
  return out;
}

std::vector<EvalRecord> certify_dataset(const ModelParams& params, const Dataset& data,
                                        const SmoothingConfig& cfg, std::uint64_t seed,
                                        std::size_t workers, std::size_t max_points) {
  if (params.spec.input_dim() != data.dim())
    throw std::invalid_argument("certify_dataset: model input dim does not match dataset");
  const BaseClassifier clf = as_base_classifier(params);
  auto point_fn = [clf, cfg, seed](std::size_t i, const std::vector<double>& x) {
    return certify(clf, x, cfg, RngStream(seed).child(stream_path::kCertifyPoint).child(i));
  };
  return certify_points(point_fn, data, workers, max_points);
}

std::vector<EvalRecord> certify_dataset(const EnsembleSpec& ens, const Dataset& data,
                                        const SmoothingConfig& cfg, std::uint64_t seed,
                                        std::size_t workers, std::size_t max_points) {
  ens.validate();
  if (ens.components.front().spec.input_dim() != data.dim())
    throw std::invalid_argument("certify_dataset: ensemble input dim does not match dataset");
  const BaseClassifier clf = as_base_classifier(ens);
  auto point_fn = [clf, cfg, seed](std::size_t i, const std::vector<double>& x) {
    return certify(clf, x, cfg, RngStream(seed).child(stream_path::kCertifyPoint).child(i));
  };
  return certify_points(point_fn, data, workers, max_points);
}

std::vector<EvalRecord> certify_dataset_per_point(
    const ModelParams& f1, const ModelParams& f2, const Alg2Params& alg, const Dataset& data,
    const SmoothingConfig& cfg, std::uint64_t seed, std::size_t workers,
    std::size_t max_points, std::vector<WeightChoice>* weights_out) {
  if (f1.spec.input_dim() != data.dim() || f2.spec.input_dim() != data.dim())
    throw std::invalid_argument("certify_dataset_per_point: model input dim mismatch");
  if (alg.m < 1 || alg.n < 1)
    throw std::invalid_argument("certify_dataset_per_point: alg2 m and n must be at least 1");
  if (!(alg.sigma > 0.0))
    throw std::invalid_argument("certify_dataset_per_point: alg2 sigma must be positive");
  const std::size_t n =
      max_points == 0 ? data.size() : std::min(max_points, data.size());
  if (weights_out) weights_out->assign(n, WeightChoice{});
  const std::vector<int>* labels = &data.labels;
  auto point_fn = [f1, f2, alg, cfg, seed, labels, weights_out](std::size_t i,
                                                                const std::vector<double>& x) {
    const MarginStats stats = estimate_margin_stats(
        f1, f2, x, (*labels)[i], alg.m, alg.n, alg.t, alg.sigma, alg.sigma_tilde,
        RngStream(seed).child(stream_path::kWeightDesign).child(i));
    const WeightChoice w = compute_weight(stats);
    if (weights_out) (*weights_out)[i] = w;
    EnsembleSpec ens{{f1, f2}, {w.w1, w.w2}};
    return ensemble_certify(ens, x, cfg,
                            RngStream(seed).child(stream_path::kCertifyPoint).child(i));
  };
  return certify_points(point_fn, data, workers, max_points);
}

void write_records_jsonl(const std::vector<EvalRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_records_jsonl: cannot open " + path);
  for (const EvalRecord& r : records) {
    out << "{\"index\":" << r.index << ",\"label\":" << r.label
        << ",\"prediction\":" << r.prediction << ",\"radius\":" << fmt17(r.radius)
        << ",\"abstain\":" << (r.abstain ? "true" : "false") << ",\"counts\":[";
    for (std::size_t i = 0; i < r.counts.size(); ++i) {
      if (i) out << ",";
      out << r.counts[i];
    }
    // Reserved field: pinned to 0 so identical runs produce identical
    // bytes. Wall times are reported in summary.json.
    out << "],\"seconds\":0}\n";
  }
  if (!out) throw std::runtime_error("write_records_jsonl: write failed for " + path);
}

std::vector<EvalRecord> read_records_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_records_jsonl: cannot open " + path);
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      EvalRecord r;
      r.index = j.at("index").get<std::size_t>();
      r.label = j.at("label").get<int>();
      r.prediction = j.at("prediction").get<int>();
      r.radius = j.at("radius").get<double>();
      r.abstain = j.at("abstain").get<bool>();
      r.counts = j.at("counts").get<std::vector<long long>>();
      r.seconds = j.at("seconds").get<double>();
      r.correct = !r.abstain && r.prediction == r.label;
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      std::ostringstream os;
      os << "read_records_jsonl: " << path << ":" << lineno << ": " << e.what();
      throw std::runtime_error(os.str());
    }
  }
  return out;
}

void write_certified_accuracy_csv(const std::vector<std::pair<double, double>>& table,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_certified_accuracy_csv: cannot open " + path);
  out << "radius,certified_accuracy\n";
  for (const auto& [r, acc] : table) out << fmt17(r) << "," << fmt17(acc) << "\n";
  if (!out) throw std::runtime_error("write_certified_accuracy_csv: write failed for " + path);
}

void write_certified_accuracy_svg(const std::vector<std::pair<double, double>>& table,
                                  const std::string& path) {
  if (table.empty()) throw std::invalid_argument("write_certified_accuracy_svg: empty table");
  const double left = 60.0, right = 620.0, top = 20.0, bottom = 350.0;
  const double x0 = table.front().first;
  double x1 = table.back().first;
  if (!(x1 > x0)) x1 = x0 + 1.0;
  auto sx = [&](double v) { return left + (v - x0) / (x1 - x0) * (right - left); };
  auto sy = [&](double a) { return bottom - a * (bottom - top); };
  auto f2 = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_certified_accuracy_svg: cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
         "viewBox=\"0 0 640 400\">\n";
  out << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double a = 0.25 * k;
    const std::string y = f2(sy(a));
    out << "<line x1=\"60\" y1=\"" << y << "\" x2=\"620\" y2=\"" << y
        << "\" stroke=\"#dddddd\"/>\n";
    out << "<text x=\"52\" y=\"" << y
        << "\" text-anchor=\"end\" dominant-baseline=\"middle\" font-size=\"12\" "
           "font-family=\"sans-serif\">"
        << f2(a) << "</text>\n";
  }
  out << "<line x1=\"60\" y1=\"350\" x2=\"620\" y2=\"350\" stroke=\"black\"/>\n";
  out << "<line x1=\"60\" y1=\"20\" x2=\"60\" y2=\"350\" stroke=\"black\"/>\n";
  for (const auto& [r, acc] : table) {
    (void)acc;
    const std::string x = f2(sx(r));
    out << "<line x1=\"" << x << "\" y1=\"350\" x2=\"" << x
        << "\" y2=\"355\" stroke=\"black\"/>\n";
    out << "<text x=\"" << x
        << "\" y=\"370\" text-anchor=\"middle\" font-size=\"12\" "
           "font-family=\"sans-serif\">"
        << f2(r) << "</text>\n";
  }
  out << "<polyline fill=\"none\" stroke=\"#4682b4\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (i) out << " ";
    out << f2(sx(table[i].first)) << "," << f2(sy(table[i].second));
  }
  out << "\"/>\n";
  for (const auto& [r, acc] : table)
    out << "<circle cx=\"" << f2(sx(r)) << "\" cy=\"" << f2(sy(acc))
        << "\" r=\"3\" fill=\"#4682b4\"/>\n";
  out << "<text x=\"340\" y=\"392\" text-anchor=\"middle\" font-size=\"13\" "
         "font-family=\"sans-serif\">radius</text>\n";
  out << "<text x=\"14\" y=\"185\" transform=\"rotate(-90 14 185)\" text-anchor=\"middle\" "
         "font-size=\"13\" font-family=\"sans-serif\">certified accuracy</text>\n";
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write_certified_accuracy_svg: write failed for " + path);
}

namespace {

using nlohmann::json;

[[noreturn]] void config_fail(const std::string& path, const std::string& msg) {
  throw std::invalid_argument("config: " + path + ": " + msg);
}

void check_known_keys(const json& obj, const std::string& path,
                      const std::vector<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      config_fail(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }
}

const json* find_key(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

double get_double(const json& obj, const std::string& path, const std::string& key,
                  double fallback) {
  const json* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) config_fail(path + key, "expected a number");
  return v->get<double>();
}

long long get_ll(const json& obj, const std::string& path, const std::string& key,
                 long long fallback) {
  const json* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) config_fail(path + key, "expected an integer");
  return v->get<long long>();
}

std::uint64_t get_u64(const json& obj, const std::string& path, const std::string& key,
                      std::uint64_t fallback) {
  const json* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
    config_fail(path + key, "expected a nonnegative integer");
  return v->get<std::uint64_t>();
}

bool get_bool(const json& obj, const std::string& path, const std::string& key, bool fallback) {
  const json* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) config_fail(path + key, "expected true or false");
  return v->get<bool>();
}

std::string get_string(const json& obj, const std::string& path, const std::string& key,
                       const std::string& fallback) {
  const json* v = find_key(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) config_fail(path + key, "expected a string");
  return v->get<std::string>();
}

DatasetSpec parse_dataset_spec(const json& obj, const std::string& path) {
  if (!obj.is_object()) config_fail(path.empty() ? "dataset" : path, "expected an object");
  const std::string p = path.empty() ? "" : path + ".";
  check_known_keys(obj, path,
                   {"kind", "n_train", "n_test", "dim", "offset", "sigma_data", "r_inner",
                    "r_outer", "ring_noise", "train_csv", "test_csv", "seed"});
  DatasetSpec spec;
  spec.kind = get_string(obj, p, "kind", spec.kind);
  spec.n_train = static_cast<std::size_t>(get_u64(obj, p, "n_train", spec.n_train));
  spec.n_test = static_cast<std::size_t>(get_u64(obj, p, "n_test", spec.n_test));
  spec.dim = static_cast<std::size_t>(get_u64(obj, p, "dim", spec.dim));
  spec.offset = get_double(obj, p, "offset", spec.offset);
  spec.sigma_data = get_double(obj, p, "sigma_data", spec.sigma_data);
  spec.r_inner = get_double(obj, p, "r_inner", spec.r_inner);
  spec.r_outer = get_double(obj, p, "r_outer", spec.r_outer);
  spec.ring_noise = get_double(obj, p, "ring_noise", spec.ring_noise);
  spec.train_csv = get_string(obj, p, "train_csv", spec.train_csv);
  spec.test_csv = get_string(obj, p, "test_csv", spec.test_csv);
  spec.seed = get_u64(obj, p, "seed", spec.seed);
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config: " + std::string(e.what()));
  }
  return spec;
}

SmoothingConfig parse_smoothing(const json& obj, const std::string& path,
                                const SmoothingConfig& base) {
  if (!obj.is_object()) config_fail(path, "expected an object");
  const std::string p = path + ".";
  check_known_keys(obj, path, {"sigma", "m", "n0", "n", "alpha", "batch_size"});
  SmoothingConfig cfg = base;
  cfg.sigma = get_double(obj, p, "sigma", cfg.sigma);
  cfg.m = static_cast<int>(get_ll(obj, p, "m", cfg.m));
  cfg.n0 = get_ll(obj, p, "n0", cfg.n0);
  cfg.n = get_ll(obj, p, "n", cfg.n);
  cfg.alpha = get_double(obj, p, "alpha", cfg.alpha);
  cfg.batch_size = get_ll(obj, p, "batch_size", cfg.batch_size);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    config_fail(path, e.what());
  }
  return cfg;
}

AttackConfig parse_attack(const json& obj, const std::string& path, const AttackConfig& base) {
  if (!obj.is_object()) config_fail(path, "expected an object");
  const std::string p = path + ".";
  check_known_keys(obj, path, {"epsilon", "steps", "step_size", "mc_samples", "noise_reuse"});
  AttackConfig cfg = base;
  cfg.epsilon = get_double(obj, p, "epsilon", cfg.epsilon);
  cfg.steps = static_cast<int>(get_ll(obj, p, "steps", cfg.steps));
  cfg.step_size = get_double(obj, p, "step_size", cfg.step_size);
  cfg.mc_samples = static_cast<int>(get_ll(obj, p, "mc_samples", cfg.mc_samples));
  cfg.noise_reuse = get_bool(obj, p, "noise_reuse", cfg.noise_reuse);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    config_fail(path, e.what());
  }
  return cfg;
}

TrainConfig parse_train_config(const json& obj, const std::string& path,
                               std::uint64_t default_seed) {
  if (!obj.is_object()) config_fail(path, "expected an object");
  const std::string p = path + ".";
  check_known_keys(obj, path,
                   {"method", "lambda", "gamma", "epochs", "batch_size", "lr_init",
                    "lr_decay_factor", "lr_decay_every", "momentum", "seed", "hidden",
                    "activation", "beta", "shared_shift", "reuse_shift_noise",
                    "checkpoint_every", "checkpoint_dir", "attack", "smoothing"});
  TrainConfig cfg;
  cfg.seed = default_seed;
  const std::string method = get_string(obj, p, "method", "advmacer");
  try {
    cfg.method = parse_train_method(method);
  } catch (const std::invalid_argument& e) {
    config_fail(p + "method", e.what());
  }
  cfg.lambda = get_double(obj, p, "lambda", cfg.lambda);
  cfg.gamma = get_double(obj, p, "gamma", cfg.gamma);
  cfg.epochs = static_cast<int>(get_ll(obj, p, "epochs", cfg.epochs));
  cfg.batch_size = static_cast<std::size_t>(get_u64(obj, p, "batch_size", cfg.batch_size));
  cfg.lr_init = get_double(obj, p, "lr_init", cfg.lr_init);
  cfg.lr_decay_factor = get_double(obj, p, "lr_decay_factor", cfg.lr_decay_factor);
  cfg.lr_decay_every = static_cast<int>(get_ll(obj, p, "lr_decay_every", cfg.lr_decay_every));
  cfg.momentum = get_double(obj, p, "momentum", cfg.momentum);
  cfg.seed = get_u64(obj, p, "seed", cfg.seed);
  if (const json* hidden = find_key(obj, "hidden")) {
    if (!hidden->is_array()) config_fail(p + "hidden", "expected an array of widths");
    cfg.hidden.clear();
    for (const json& w : *hidden) {
      if (!w.is_number_unsigned() && !(w.is_number_integer() && w.get<long long>() > 0))
        config_fail(p + "hidden", "widths must be positive integers");
      cfg.hidden.push_back(w.get<std::size_t>());
    }
  }
  const std::string act = get_string(obj, p, "activation", "relu");
  try {
    cfg.activation = parse_activation(act);
  } catch (const std::invalid_argument& e) {
    config_fail(p + "activation", e.what());
  }
  cfg.beta = get_double(obj, p, "beta", cfg.beta);
  cfg.shared_shift = get_bool(obj, p, "shared_shift", cfg.shared_shift);
  cfg.reuse_shift_noise = get_bool(obj, p, "reuse_shift_noise", cfg.reuse_shift_noise);
  cfg.checkpoint_every = static_cast<int>(get_ll(obj, p, "checkpoint_every", 0));
  cfg.checkpoint_dir = get_string(obj, p, "checkpoint_dir", "");
  if (const json* attack = find_key(obj, "attack"))
    cfg.attack = parse_attack(*attack, p + "attack", cfg.attack);
  if (const json* smoothing = find_key(obj, "smoothing"))
    cfg.smoothing = parse_smoothing(*smoothing, p + "smoothing", cfg.smoothing);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    config_fail(path, e.what());
  }
  return cfg;
}

std::string resolve_against(const std::filesystem::path& base, const std::string& p) {
  return (base / p).string();
}

}  // namespace

DatasetSpec dataset_spec_from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("dataset spec: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("dataset spec: " + path + " is not valid JSON: " + e.what());
  }
  DatasetSpec spec = parse_dataset_spec(j, "dataset");
  if (spec.kind == "csv") {
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    spec.train_csv = resolve_against(base, spec.train_csv);
    spec.test_csv = resolve_against(base, spec.test_csv);
  }
  return spec;
}

// out_dir is checked by run_experiment, not here: configs are also used
// by the train subcommand, which writes to its own --out path.
void ExperimentConfig::validate() const {
  if (workers == 0) throw std::invalid_argument("config: workers: must be at least 1");
  dataset.validate();
  if (has_train == !checkpoints.empty())
    throw std::invalid_argument("config: provide exactly one of train or checkpoints");
  if (has_train) train.validate();
  certify.validate();
  if (weight_mode != "fixed" && weight_mode != "per_point")
    throw std::invalid_argument("config: ensemble.weight_mode: must be fixed or per_point");
  if (weight_mode == "per_point" && checkpoints.size() != 2)
    throw std::invalid_argument(
        "config: ensemble.weight_mode: per_point requires exactly 2 checkpoints");
  if (!ensemble_weights.empty()) {
    if (ensemble_weights.size() != checkpoints.size())
      throw std::invalid_argument(
          "config: ensemble.weights: length must match checkpoints");
    double total = 0.0;
    for (double w : ensemble_weights) {
      if (!(w >= 0.0))
        throw std::invalid_argument("config: ensemble.weights: must be nonnegative");
      total += w;
    }
    if (!(total > 0.0))
      throw std::invalid_argument("config: ensemble.weights: must not sum to zero");
  }
  if (alg2.m < 1 || alg2.n < 1)
    throw std::invalid_argument("config: ensemble.alg2: m and n must be at least 1");
  if (!(alg2.t >= 0.0 && alg2.t <= 1.0))
    throw std::invalid_argument("config: ensemble.alg2.t: outside [0, 1]");
  if (!(alg2.sigma > 0.0))
    throw std::invalid_argument("config: ensemble.alg2.sigma: must be positive");
  if (!(alg2.sigma_tilde >= 0.0))
    throw std::invalid_argument("config: ensemble.alg2.sigma_tilde: must be nonnegative");
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  check_known_keys(j, "",
                   {"out_dir", "seed", "workers", "max_points", "dataset", "train",
                    "checkpoints", "ensemble", "certify"});

  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  ExperimentConfig cfg;
  cfg.out_dir = get_string(j, "", "out_dir", "");
  cfg.seed = get_u64(j, "", "seed", 0);
  cfg.workers = static_cast<std::size_t>(get_u64(j, "", "workers", 1));
  cfg.max_points = static_cast<std::size_t>(get_u64(j, "", "max_points", 0));

  const json* dataset = find_key(j, "dataset");
  if (!dataset) throw std::invalid_argument("config: dataset: required");
  cfg.dataset = parse_dataset_spec(*dataset, "dataset");
  if (cfg.dataset.kind == "csv") {
    cfg.dataset.train_csv = resolve_against(base, cfg.dataset.train_csv);
    cfg.dataset.test_csv = resolve_against(base, cfg.dataset.test_csv);
  }

  if (const json* train = find_key(j, "train")) {
    cfg.has_train = true;
    cfg.train = parse_train_config(*train, "train", cfg.seed);
  }
  if (const json* ckpts = find_key(j, "checkpoints")) {
    if (!ckpts->is_array()) throw std::invalid_argument("config: checkpoints: expected an array");
    for (const json& c : *ckpts) {
      if (!c.is_string())
        throw std::invalid_argument("config: checkpoints: entries must be paths");
      cfg.checkpoints.push_back(resolve_against(base, c.get<std::string>()));
    }
  }
  if (const json* ens = find_key(j, "ensemble")) {
    if (!ens->is_object()) throw std::invalid_argument("config: ensemble: expected an object");
    check_known_keys(*ens, "ensemble", {"weights", "weight_mode", "alg2"});
    if (const json* w = find_key(*ens, "weights")) {
      if (!w->is_array()) config_fail("ensemble.weights", "expected an array");
      for (const json& v : *w) {
        if (!v.is_number()) config_fail("ensemble.weights", "expected numbers");
        cfg.ensemble_weights.push_back(v.get<double>());
      }
    }
    cfg.weight_mode = get_string(*ens, "ensemble.", "weight_mode", cfg.weight_mode);
    if (const json* alg = find_key(*ens, "alg2")) {
      if (!alg->is_object()) config_fail("ensemble.alg2", "expected an object");
      check_known_keys(*alg, "ensemble.alg2", {"m", "n", "t", "sigma", "sigma_tilde"});
      cfg.alg2.m = get_ll(*alg, "ensemble.alg2.", "m", cfg.alg2.m);
      cfg.alg2.n = get_ll(*alg, "ensemble.alg2.", "n", cfg.alg2.n);
      cfg.alg2.t = get_double(*alg, "ensemble.alg2.", "t", cfg.alg2.t);
      cfg.alg2.sigma = get_double(*alg, "ensemble.alg2.", "sigma", cfg.alg2.sigma);
      cfg.alg2.sigma_tilde =
          get_double(*alg, "ensemble.alg2.", "sigma_tilde", cfg.alg2.sigma_tilde);
    }
  }
  if (const json* certify = find_key(j, "certify"))
    cfg.certify = parse_smoothing(*certify, "certify", cfg.certify);
  cfg.validate();
  return cfg;
}

void run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw std::invalid_argument("config: out_dir: required");
  std::filesystem::create_directories(cfg.out_dir);
  const std::filesystem::path out(cfg.out_dir);

  double train_seconds = 0.0;
  std::vector<ModelParams> components;
  std::vector<std::string> component_paths;

  if (cfg.has_train) {
    const double t0 = now_seconds();
    const Dataset train_ds = make_dataset(cfg.dataset, "train");
    auto [params, report] = train(to_labeled(train_ds), cfg.train);
    train_seconds = now_seconds() - t0;
    save_params(params, (out / "model.json").string());
    write_report_jsonl(report, (out / "train_report.jsonl").string());
    components.push_back(std::move(params));
    component_paths.push_back("model.json");
  } else {
    for (const std::string& path : cfg.checkpoints) {
      components.push_back(load_params(path));
      component_paths.push_back(path);
    }
  }

  const Dataset test_ds = make_dataset(cfg.dataset, "test");
  const double t1 = now_seconds();
  std::vector<EvalRecord> records;
  std::vector<double> used_weights;
  std::string used_mode;

  if (components.size() == 1) {
    records = certify_dataset(components.front(), test_ds, cfg.certify, cfg.seed, cfg.workers,
                              cfg.max_points);
  } else if (cfg.weight_mode == "fixed") {
    EnsembleSpec ens;
    ens.components = components;
    ens.weights = normalized_weights(cfg.ensemble_weights.empty()
                                         ? std::vector<double>(components.size(), 1.0)
                                         : cfg.ensemble_weights);
    records =
        certify_dataset(ens, test_ds, cfg.certify, cfg.seed, cfg.workers, cfg.max_points);
    used_weights = ens.weights;
    used_mode = "fixed";
  } else {
    std::vector<WeightChoice> choices;
    records = certify_dataset_per_point(components[0], components[1], cfg.alg2, test_ds,
                                        cfg.certify, cfg.seed, cfg.workers, cfg.max_points,
                                        &choices);
    double mean_w1 = 0.0;
    for (const WeightChoice& w : choices) mean_w1 += w.w1;
    if (!choices.empty()) mean_w1 /= static_cast<double>(choices.size());
    used_weights = {mean_w1, 1.0 - mean_w1};
    used_mode = "per_point";
  }
  const double certify_seconds = now_seconds() - t1;

  write_records_jsonl(records, (out / "records.jsonl").string());
  const auto table = certified_accuracy_table(records, default_radius_grid());
  write_certified_accuracy_csv(table, (out / "certified_accuracy.csv").string());
  write_certified_accuracy_svg(table, (out / "certified_accuracy.svg").string());

  const AcrSummary acr = evaluate_acr(records);
  nlohmann::ordered_json summary;
  summary["acr"] = acr.acr;
  summary["clean_accuracy"] = acr.clean_accuracy;
  summary["n_points"] = records.size();
  summary["train_seconds"] = train_seconds;
  summary["certify_seconds"] = certify_seconds;
  if (!used_mode.empty()) {
    summary["weight_mode"] = used_mode;
    summary["weights"] = used_weights;
  }
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < components.size(); ++i) {
    nlohmann::ordered_json c;
    c["path"] = component_paths[i];
    c["method"] = components[i].provenance.method;
    c["sigma"] = components[i].provenance.sigma;
    c["seed"] = components[i].provenance.seed;
    comps.push_back(std::move(c));
  }
  summary["components"] = std::move(comps);
  std::ofstream sout((out / "summary.json").string(), std::ios::binary);
  if (!sout) throw std::runtime_error("run_experiment: cannot open summary.json");
  sout << summary.dump(2) << "\n";
  if (!sout) throw std::runtime_error("run_experiment: write failed for summary.json");
}

void run_experiment_file(const std::string& config_path) {
  run_experiment(load_experiment_config(config_path));
}

}  // namespace rsmooth
