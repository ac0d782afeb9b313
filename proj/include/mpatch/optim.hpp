#pragma once

// Training configuration, warmup + cosine learning-rate schedule, and AdamW
// with decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpatch/checkpoint.hpp"
#include "mpatch/rng.hpp"
#include "mpatch/tensor.hpp"

namespace mpatch {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 3;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 50;
  double weight_decay = 0.5;
  std::uint64_t seed = 0;
  double lambda = 0.05;  // alignment only
  bool augment = false;

  void validate() const {
    if (batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch size must be positive");
    if (!(peak_lr >= 0.0)) throw Error(ErrorKind::InvalidArgument, "learning rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidArgument, "weight decay must be >= 0");
    if (!(lambda >= 0.0)) throw Error(ErrorKind::InvalidArgument, "lambda must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size}, {"epochs", epochs},
            {"peak_lr", peak_lr},       {"warmup_steps", warmup_steps},
            {"weight_decay", weight_decay}, {"seed", seed},
            {"lambda", lambda},         {"augment", augment}};
  }
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base) {
    base.batch_size = j.value("batch_size", base.batch_size);
    base.epochs = j.value("epochs", base.epochs);
    base.peak_lr = j.value("peak_lr", base.peak_lr);
    base.warmup_steps = j.value("warmup_steps", base.warmup_steps);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    base.seed = j.value("seed", base.seed);
    base.lambda = j.value("lambda", base.lambda);
    base.augment = j.value("augment", base.augment);
    base.validate();
    return base;
  }
};

// Linear warmup from 0 to peak over `warmup_steps`, then half-cosine decay
// to 0 at `total_steps`.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  const std::size_t warmup = cfg.warmup_steps;
  if (warmup > 0 && step < warmup) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps <= warmup) return cfg.peak_lr;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

// Batching plan shared by every loop: incomplete trailing batches are
// dropped, and a split smaller than one batch trains as a single batch.
struct BatchPlan {
  std::size_t batch = 0;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  std::size_t warmup = 0;

  static BatchPlan make(std::size_t n, const TrainConfig& cfg) {
    BatchPlan p;
    p.batch = std::min(cfg.batch_size, n);
    p.steps_per_epoch = p.batch ? n / p.batch : 0;
    p.total_steps = p.steps_per_epoch * cfg.epochs;
    // Warmup never spans more than half of a short run.
    p.warmup = std::min(cfg.warmup_steps, p.total_steps / 2);
    return p;
  }

  // Learning rate for optimizer step `t` (0-based).
  double lr(std::size_t t, const TrainConfig& cfg) const {
    TrainConfig c = cfg;
    c.warmup_steps = warmup;
    return lr_at(t + 1, total_steps, c);
  }
};

inline std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& rows,
                                            std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order = rows;
  CounterRng rng = CounterRng(seed).stream("epoch", epoch);
  shuffle(order, rng);
  return order;
}

class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit AdamW(double weight_decay) : weight_decay_(weight_decay) {}

  // Biases, layer-norm parameters and other rank-1 tensors are not decayed.
  static bool decays(const Tensor& t) { return t.rank() >= 2; }

  // Applies one update to every tensor of `params` named in `grads`.
  void step(Checkpoint& params, const std::map<std::string, Tensor>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& w = params.mutable_tensor(name);
      if (g.shape() != w.shape()) {
        throw Error(ErrorKind::ShapeMismatch, "gradient shape mismatch for '" + name + "'");
      }
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      const double decay = decays(w) ? lr * weight_decay_ : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        st.m[i] = kBeta1 * st.m[i] + (1.0 - kBeta1) * gi;
        st.v[i] = kBeta2 * st.v[i] + (1.0 - kBeta2) * gi * gi;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        double wi = w[i];
        wi -= decay * wi;
        wi -= lr * mhat / (std::sqrt(vhat) + kEps);
        w[i] = static_cast<float>(wi);
      }
      if (!w.all_finite()) {
        throw Error(ErrorKind::NonFinite, "parameter '" + name + "' became non-finite");
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double weight_decay_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Strips a graph prefix from gradient names so they address a checkpoint.
inline std::map<std::string, Tensor> grads_with_prefix(
    const std::map<std::string, Tensor>& grads, const std::string& prefix) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, g] : grads) {
    if (name.compare(0, prefix.size(), prefix) == 0) {
      out.emplace(name.substr(prefix.size()), g);
    }
  }
  return out;
}

}  // namespace mpatch
