#include "rsmooth/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace rsmooth {

namespace {

std::vector<double> correctness_mask(const Tensor& z, const std::vector<int>& y) {
  const std::size_t b = z.rows();
  const std::size_t c = z.cols();
  const auto& v = z.values();
  std::vector<double> mask(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (static_cast<int>(argmax_lowest(v.data() + i * c, c)) == y[i]) mask[i] = 1.0;
  }
  return mask;
}

Tensor cross_entropy(const Tensor& z, const std::vector<int>& y) {
  return neg(mean(log(clamp_prob(gather_class(z, y)))));
}

bool uses_attack(TrainMethod m) {
  return m == TrainMethod::kAdvMacer || m == TrainMethod::kSmoothAdv;
}

bool uses_hinge(TrainMethod m) {
  return m == TrainMethod::kAdvMacer || m == TrainMethod::kMacer;
}

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

void sgd_step(ModelParams& params, SgdState& state, double lr, double momentum) {
  std::vector<Tensor*> tensors;
  for (Tensor& w : params.weights) tensors.push_back(&w);
  for (Tensor& b : params.biases) tensors.push_back(&b);
  if (state.velocity.empty()) {
    for (Tensor* t : tensors) state.velocity.emplace_back(t->numel(), 0.0);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& t = *tensors[i];
    std::vector<double> next = t.values();
    std::vector<double>& vel = state.velocity[i];
    if (t.has_grad()) {
      const auto& g = t.grad();
      for (std::size_t j = 0; j < next.size(); ++j) {
        vel[j] = momentum * vel[j] + g[j];
        next[j] -= lr * vel[j];
      }
    } else {
      for (std::size_t j = 0; j < next.size(); ++j) {
        vel[j] = momentum * vel[j];
        next[j] -= lr * vel[j];
      }
    }
    t = Tensor::from_values(t.shape(), std::move(next), true);
  }
}

}  // namespace

std::string train_method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::kAdvMacer: return "advmacer";
    case TrainMethod::kMacer: return "macer";
    case TrainMethod::kSmoothAdv: return "smoothadv";
    case TrainMethod::kGaussianAug: return "gaussian_aug";
  }
  throw std::logic_error("train_method_name: bad enum");
}

TrainMethod parse_train_method(const std::string& name) {
  if (name == "advmacer") return TrainMethod::kAdvMacer;
  if (name == "macer") return TrainMethod::kMacer;
  if (name == "smoothadv") return TrainMethod::kSmoothAdv;
  if (name == "gaussian_aug") return TrainMethod::kGaussianAug;
  throw std::invalid_argument("unknown training method: " + name);
}

std::size_t LabeledData::num_classes() const {
  int mx = -1;
  for (int l : labels) mx = std::max(mx, l);
  return static_cast<std::size_t>(mx + 1);
}

void LabeledData::validate() const {
  if (!features.defined() || features.rank() != 2) {
    throw std::invalid_argument("labeled data: features must be [n, d]");
  }
  if (labels.empty() || labels.size() != features.shape()[0]) {
    throw std::invalid_argument("labeled data: one label per feature row required");
  }
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("labeled data: labels must be >= 0");
  }
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("train config: lambda must be >= 0");
  if (!(gamma > 0.0)) throw std::invalid_argument("train config: gamma must be positive");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(lr_init > 0.0)) throw std::invalid_argument("train config: lr_init must be positive");
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) {
    throw std::invalid_argument("train config: lr_decay_factor must lie in (0, 1]");
  }
  if (lr_decay_every < 1) {
    throw std::invalid_argument("train config: lr_decay_every must be >= 1");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("train config: momentum must lie in [0, 1)");
  }
  if (checkpoint_every < 0) {
    throw std::invalid_argument("train config: checkpoint_every must be >= 0");
  }
  if (!(beta > 0.0)) throw std::invalid_argument("train config: beta must be positive");
  if (hidden.empty()) throw std::invalid_argument("train config: need hidden layer widths");
  attack.validate();
  smoothing.validate();
}

double TrainConfig::lr_at_epoch(int epoch) const {
  return lr_init * std::pow(lr_decay_factor, epoch / lr_decay_every);
}

void write_report_jsonl(const TrainReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report_jsonl: cannot open '" + path + "'");
  char buf[64];
  for (const EpochRecord& r : report.epochs) {
    out << "{\"epoch\":" << r.epoch;
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_loss);
    out << ",\"mean_loss\":" << buf;
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_ce);
    out << ",\"mean_ce\":" << buf;
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_lr_term);
    out << ",\"mean_lr_term\":" << buf;
    std::snprintf(buf, sizeof(buf), "%.17g", r.correct_fraction);
    out << ",\"correct_fraction\":" << buf;
    std::snprintf(buf, sizeof(buf), "%.6f", r.seconds);
    out << ",\"seconds\":" << buf << "}\n";
  }
}

Tensor loss_lr_batch(const Tensor& z, const std::vector<int>& y, double sigma, double gamma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("loss_lr: sigma must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("loss_lr: gamma must be positive");
  const Tensor zz = z.rank() == 1 ? reshape(z, {1, z.numel()}) : z;
  Tensor xi = xi_hat(zz, y);
  Tensor hinge = max_with_zero(add_scalar(neg(xi), gamma));
  Tensor mask = Tensor::from_values({zz.shape()[0]}, correctness_mask(zz, y));
  return mul_scalar(mul(hinge, mask), 0.5 * sigma);
}

Tensor loss_lr(const Tensor& z, int y, double sigma, double gamma) {
  if (z.rank() != 1) throw std::invalid_argument("loss_lr: single-label form needs a row");
  return sum(loss_lr_batch(z, std::vector<int>{y}, sigma, gamma));
}

Tensor advmacer_objective(const ModelParams& params, const Tensor& x_hat,
                          const std::vector<int>& y, const TrainConfig& cfg,
                          RngStream stream) {
  const Tensor xb = x_hat.rank() == 1 ? reshape(x_hat, {1, x_hat.numel()}) : x_hat;
  Tensor z = z_hat(params, xb, cfg.smoothing, stream.child(stream_path::kObjective));
  Tensor ce = cross_entropy(z, y);
  if (cfg.lambda == 0.0) return ce;
  Tensor hinge = loss_lr_batch(z, y, cfg.smoothing.sigma, cfg.gamma);
  return add(ce, mul_scalar(mean(hinge), cfg.lambda));
}

Tensor loss_advmacer(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                     const TrainConfig& cfg, RngStream stream) {
  Tensor x_hat = smooth_pgd(params, x, y, cfg.attack, cfg.smoothing, stream);
  return advmacer_objective(params, x_hat, y, cfg, stream);
}

Tensor loss_macer(const ModelParams& params, const Tensor& x, const std::vector<int>& y,
                  const TrainConfig& cfg, RngStream stream) {
  return advmacer_objective(params, x.detach(), y, cfg, stream);
}

std::pair<ModelParams, TrainReport> train(const LabeledData& data, const TrainConfig& cfg) {
  data.validate();
  cfg.validate();
  const std::size_t n = data.size();
  const std::size_t d = data.dim();
  const std::size_t c = data.num_classes();
  if (c < 2) throw std::invalid_argument("train: need at least 2 classes");

  MlpSpec spec;
  spec.widths.push_back(d);
  for (std::size_t h : cfg.hidden) spec.widths.push_back(h);
  spec.widths.push_back(c);
  spec.activation = cfg.activation;
  spec.beta = cfg.beta;

  RngStream root(cfg.seed);
  ModelParams params =
      with_requires_grad(init_params(spec, root.child(stream_path::kInit)), true);
  SgdState sgd;
  TrainReport report;

  const bool hinge_on = uses_hinge(cfg.method) && cfg.lambda > 0.0;
  const auto& feats = data.features.values();
  std::vector<std::size_t> order(n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at_epoch(epoch);

    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream shuffle =
        root.child(stream_path::kShuffle).child(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle.next_u64() % i);
      std::swap(order[i - 1], order[j]);
    }

    double sum_loss = 0.0;
    double sum_ce = 0.0;
    double sum_lr_term = 0.0;
    double sum_correct = 0.0;
    std::size_t batches = 0;

    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, n - begin);
      std::vector<double> xv(nb * d);
      std::vector<int> yv(nb);
      for (std::size_t i = 0; i < nb; ++i) {
        const std::size_t src = order[begin + i];
        std::copy(feats.begin() + static_cast<std::ptrdiff_t>(src * d),
                  feats.begin() + static_cast<std::ptrdiff_t>((src + 1) * d),
                  xv.begin() + static_cast<std::ptrdiff_t>(i * d));
        yv[i] = data.labels[src];
      }
      Tensor xb = Tensor::from_values({nb, d}, std::move(xv));

      RngStream bstream = root.child(stream_path::kTrainBatch)
                              .child(static_cast<std::uint64_t>(epoch))
                              .child(begin / cfg.batch_size);

      Tensor x_hat = xb;
      if (uses_attack(cfg.method) && cfg.attack.epsilon > 0.0 && cfg.attack.steps > 0) {
        x_hat = smooth_pgd(params, xb, yv, cfg.attack, cfg.smoothing,
                           bstream.child(stream_path::kAttack));
      }

      // Correctness mask from the un-shifted estimate; values only, so
      // no stream or gradient interaction with the loss below.
      std::vector<double> mask;
      std::vector<Tensor> mask_noise;
      if (hinge_on || cfg.reuse_shift_noise) {
        RngStream mstream = bstream.child(stream_path::kZhatMask);
        mask_noise.reserve(static_cast<std::size_t>(cfg.smoothing.m));
        for (int k = 0; k < cfg.smoothing.m; ++k) {
          mask_noise.push_back(sample_gaussian(mstream, {nb, d}, cfg.smoothing.sigma));
        }
        if (hinge_on) {
          Tensor zm = z_hat_given(detached(params), x_hat, mask_noise);
          mask = correctness_mask(zm, yv);
        }
      }

      RngStream dstream = bstream.child(stream_path::kShiftDelta);
      Tensor delta = cfg.shared_shift ? sample_gaussian(dstream, {d}, cfg.smoothing.sigma)
                                      : sample_gaussian(dstream, {nb, d}, cfg.smoothing.sigma);
      Tensor x_shift = add(x_hat, delta);

      Tensor z = cfg.reuse_shift_noise
                     ? z_hat_given(params, x_shift, mask_noise)
                     : z_hat(params, x_shift, cfg.smoothing,
                             bstream.child(stream_path::kShiftZhat));
      Tensor ce = cross_entropy(z, yv);
      Tensor loss = ce;
      double lr_term_value = 0.0;
      if (hinge_on) {
        Tensor xi = xi_hat(z, yv);
        Tensor hinge = max_with_zero(add_scalar(neg(xi), cfg.gamma));
        Tensor masked = mul(hinge, Tensor::from_values({nb}, mask));
        Tensor lr_term = mul_scalar(mean(masked), 0.5 * cfg.smoothing.sigma);
        lr_term_value = lr_term.item();
        loss = add(ce, mul_scalar(lr_term, cfg.lambda));
      }

      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(begin / cfg.batch_size));
      }
      backward(loss);
      sgd_step(params, sgd, lr, cfg.momentum);

      if (!hinge_on) mask = correctness_mask(z, yv);
      double correct = 0.0;
      for (double v : mask) correct += v;

      sum_loss += loss_value;
      sum_ce += ce.item();
      sum_lr_term += lr_term_value;
      sum_correct += correct / static_cast<double>(nb);
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = sum_loss / static_cast<double>(batches);
    rec.mean_ce = sum_ce / static_cast<double>(batches);
    rec.mean_lr_term = sum_lr_term / static_cast<double>(batches);
    rec.correct_fraction = sum_correct / static_cast<double>(batches);
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    report.epochs.push_back(rec);

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      ModelParams snap = detached(params);
      snap.provenance =
          Provenance{train_method_name(cfg.method), cfg.smoothing.sigma, cfg.seed};
      save_params(snap, cfg.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".json");
    }
  }

  ModelParams final_params = detached(params);
  final_params.provenance =
      Provenance{train_method_name(cfg.method), cfg.smoothing.sigma, cfg.seed};
  return {final_params, report};
}

}  // namespace rsmooth
