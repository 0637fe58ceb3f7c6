#include "rsmooth/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace rsmooth {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_double_array(std::ostream& out, const std::vector<double>& v, std::size_t begin,
                        std::size_t count) {
  out << '[';
  for (std::size_t i = 0; i < count; ++i) {
    if (i) out << ',';
    out << fmt17(v[begin + i]);
  }
  out << ']';
}

}  // namespace

std::string activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "tanh";
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation: " + name);
}

void MlpSpec::validate() const {
  if (widths.size() < 3) {
    throw std::invalid_argument("model spec: need at least one hidden layer");
  }
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("model spec: zero layer width");
  }
  if (num_classes() < 2) throw std::invalid_argument("model spec: need at least 2 classes");
  if (!(beta > 0.0)) throw std::invalid_argument("model spec: beta must be positive");
}

bool valid_provenance_method(const std::string& method) {
  return method == "advmacer" || method == "macer" || method == "smoothadv" ||
         method == "gaussian_aug" || method == "untrained";
}

void ModelParams::validate() const {
  spec.validate();
  if (!valid_provenance_method(provenance.method)) {
    throw std::invalid_argument("model params: unknown provenance method '" +
                                provenance.method + "'");
  }
  const std::size_t layers = spec.widths.size() - 1;
  if (weights.size() != layers || biases.size() != layers) {
    throw std::invalid_argument("model params: layer count mismatch");
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const Shape expect_w{spec.widths[l], spec.widths[l + 1]};
    if (weights[l].shape() != expect_w || biases[l].shape() != Shape{spec.widths[l + 1]}) {
      throw std::invalid_argument("model params: layer shape mismatch");
    }
  }
}

ModelParams init_params(const MlpSpec& spec, RngStream stream) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  p.provenance = Provenance{"untrained", 0.0, stream.root_seed()};
  const std::size_t layers = spec.widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t fan_in = spec.widths[l];
    const std::size_t fan_out = spec.widths[l + 1];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(fan_in * fan_out);
    for (double& v : w) v = stddev * stream.next_gaussian();
    p.weights.push_back(Tensor::from_values({fan_in, fan_out}, std::move(w)));
    p.biases.push_back(Tensor::zeros({fan_out}));
  }
  return p;
}

ModelParams with_requires_grad(const ModelParams& params, bool requires_grad) {
  ModelParams out;
  out.spec = params.spec;
  out.provenance = params.provenance;
  for (const Tensor& w : params.weights) {
    out.weights.push_back(Tensor::from_values(w.shape(), w.values(), requires_grad));
  }
  for (const Tensor& b : params.biases) {
    out.biases.push_back(Tensor::from_values(b.shape(), b.values(), requires_grad));
  }
  return out;
}

ModelParams detached(const ModelParams& params) { return with_requires_grad(params, false); }

Tensor forward_logits(const ModelParams& params, const Tensor& x) {
  params.validate();
  const bool single = x.rank() == 1;
  Tensor h = single ? reshape(x, {1, x.numel()}) : x;
  if (h.rank() != 2 || h.shape()[1] != params.spec.input_dim()) {
    throw std::invalid_argument("forward: input dimension mismatch");
  }
  const std::size_t layers = params.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    h = add(matmul(h, params.weights[l]), params.biases[l]);
    if (l + 1 < layers) {
      h = params.spec.activation == Activation::kRelu ? relu(h) : tanh(h);
    }
  }
  if (single) return reshape(h, {params.spec.num_classes()});
  return h;
}

Tensor forward_soft(const ModelParams& params, const Tensor& x) {
  return softmax_beta(forward_logits(params, x), params.spec.beta);
}

std::size_t argmax_lowest(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

std::size_t argmax_lowest(const std::vector<double>& row) {
  return argmax_lowest(row.data(), row.size());
}

std::vector<int> predict_hard_batch(const ModelParams& params, const Tensor& x) {
  const Tensor probs = forward_soft(params, x);
  const std::size_t b = probs.rows();
  const std::size_t c = probs.cols();
  const auto& v = probs.values();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = static_cast<int>(argmax_lowest(v.data() + i * c, c));
  }
  return out;
}

int predict_hard(const ModelParams& params, const std::vector<double>& x) {
  Tensor row = Tensor::from_values({x.size()}, x);
  return predict_hard_batch(params, row)[0];
}

void save_params(const ModelParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_params: cannot open '" + path + "' for writing");
  out << "{\"version\":\"v1\",\"spec\":{\"widths\":[";
  for (std::size_t i = 0; i < params.spec.widths.size(); ++i) {
    if (i) out << ',';
    out << params.spec.widths[i];
  }
  out << "],\"activation\":\"" << activation_name(params.spec.activation) << "\",\"beta\":"
      << fmt17(params.spec.beta) << "},";
  out << "\"provenance\":{\"method\":\"" << params.provenance.method
      << "\",\"sigma\":" << fmt17(params.provenance.sigma)
      << ",\"seed\":" << params.provenance.seed << "},";
  out << "\"layers\":[";
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    if (l) out << ',';
    const std::size_t fan_in = params.spec.widths[l];
    const std::size_t fan_out = params.spec.widths[l + 1];
    out << "{\"w\":[";
    for (std::size_t r = 0; r < fan_in; ++r) {
      if (r) out << ',';
      write_double_array(out, params.weights[l].values(), r * fan_out, fan_out);
    }
    out << "],\"b\":";
    write_double_array(out, params.biases[l].values(), 0, fan_out);
    out << '}';
  }
  out << "]}\n";
  if (!out) throw std::runtime_error("save_params: write failed for '" + path + "'");
}

ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_params: cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_params: '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    const std::string version = doc.at("version").get<std::string>();
    if (version != "v1") {
      throw std::runtime_error("load_params: unsupported checkpoint version '" + version +
                               "'");
    }
    ModelParams p;
    const auto& spec = doc.at("spec");
    p.spec.widths = spec.at("widths").get<std::vector<std::size_t>>();
    p.spec.activation = parse_activation(spec.at("activation").get<std::string>());
    p.spec.beta = spec.at("beta").get<double>();
    const auto& prov = doc.at("provenance");
    p.provenance.method = prov.at("method").get<std::string>();
    p.provenance.sigma = prov.at("sigma").get<double>();
    p.provenance.seed = prov.at("seed").get<std::uint64_t>();
    const auto& layers = doc.at("layers");
    if (!layers.is_array() || layers.size() + 1 != p.spec.widths.size()) {
      throw std::runtime_error("load_params: layer count does not match widths");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t fan_in = p.spec.widths[l];
      const std::size_t fan_out = p.spec.widths[l + 1];
      const auto& wj = layers[l].at("w");
      if (!wj.is_array() || wj.size() != fan_in) {
        throw std::runtime_error("load_params: weight row count mismatch in layer " +
                                 std::to_string(l));
      }
      std::vector<double> w;
      w.reserve(fan_in * fan_out);
      for (const auto& rowj : wj) {
        if (!rowj.is_array() || rowj.size() != fan_out) {
          throw std::runtime_error("load_params: weight column count mismatch in layer " +
                                   std::to_string(l));
        }
        for (const auto& x : rowj) w.push_back(x.get<double>());
      }
      const auto bv = layers[l].at("b").get<std::vector<double>>();
      if (bv.size() != fan_out) {
        throw std::runtime_error("load_params: bias length mismatch in layer " +
                                 std::to_string(l));
      }
      p.weights.push_back(Tensor::from_values({fan_in, fan_out}, std::move(w)));
      p.biases.push_back(Tensor::from_values({fan_out}, bv));
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_params: malformed checkpoint '" + path + "': " + e.what());
  }
}

}  // namespace rsmooth
