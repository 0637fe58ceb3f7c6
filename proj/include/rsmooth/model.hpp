#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsmooth/stats.hpp"
#include "rsmooth/tensor.hpp"

namespace rsmooth {

enum class Activation { kRelu, kTanh };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

/// Layer widths [input, hidden..., classes] with at least one hidden
/// layer, plus the activation and the softmax inverse temperature.
struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::kRelu;
  double beta = 16.0;

  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_classes() const { return widths.back(); }
  void validate() const;
};

/// Where a set of parameters came from.
struct Provenance {
  std::string method = "untrained";
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

bool valid_provenance_method(const std::string& method);

struct ModelParams {
  MlpSpec spec;
  Provenance provenance;
  std::vector<Tensor> weights;  // one [in, out] matrix per layer
  std::vector<Tensor> biases;   // one [out] vector per layer

  void validate() const;
};

/// He-style init: weights ~ N(0, 2 / fan_in), zero biases. Deterministic
/// in the stream.
ModelParams init_params(const MlpSpec& spec, RngStream stream);

/// Copies with requires_grad set on every weight and bias (or cleared).
ModelParams with_requires_grad(const ModelParams& params, bool requires_grad);
ModelParams detached(const ModelParams& params);

/// Pre-softmax outputs; x is [batch, d] or a single [d] row.
Tensor forward_logits(const ModelParams& params, const Tensor& x);
/// softmax(beta * logits) rows; each row sums to 1 within 1e-9.
Tensor forward_soft(const ModelParams& params, const Tensor& x);

/// Argmax of the soft output per row; ties go to the lowest class index.
std::vector<int> predict_hard_batch(const ModelParams& params, const Tensor& x);
int predict_hard(const ModelParams& params, const std::vector<double>& x);

/// Argmax with ties to the lowest index, shared by every decision rule.
std::size_t argmax_lowest(const double* row, std::size_t n);
std::size_t argmax_lowest(const std::vector<double>& row);
template <typename T>
std::size_t argmax_lowest_of(const std::vector<T>& row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

/// JSON checkpoint, version "v1". Numbers are written with 17 significant
/// digits, so save followed by load reproduces parameters bit-exactly.
void save_params(const ModelParams& params, const std::string& path);
ModelParams load_params(const std::string& path);

}  // namespace rsmooth
