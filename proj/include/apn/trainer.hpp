#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "apn/data.hpp"
#include "apn/model.hpp"

namespace apn {

struct TrainConfig {
  long max_iters = 5000;
  int batch = 64;
  int context = 256;
  double peak_lr = 1e-3;
  long warmup = 100;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  long eval_interval = 250;
  int eval_batches = 8;
  std::uint64_t seed = 1;

  void validate() const {
    if (peak_lr <= 0.0) throw std::runtime_error("TrainConfig: peak_lr must be > 0");
    if (warmup < 0) throw std::runtime_error("TrainConfig: warmup must be >= 0");
    if (max_iters > 0 && warmup >= max_iters)
      throw std::runtime_error("TrainConfig: warmup must be < max_iters");
    if (batch < 1 || context < 1) throw std::runtime_error("TrainConfig: bad batch shape");
  }
};

// Linear warmup to the peak, then cosine decay to peak/10 at max_iters.
inline double lr_at(long step, const TrainConfig& cfg) {
  if (step < 0) throw std::runtime_error("lr_at: negative step");
  if (cfg.warmup > 0 && step < cfg.warmup)
    return cfg.peak_lr * double(step) / double(cfg.warmup);
  const double floor = cfg.peak_lr / 10.0;
  if (step >= cfg.max_iters) return floor;
  const double progress = double(step - cfg.warmup) / double(cfg.max_iters - cfg.warmup);
  return floor + 0.5 * (cfg.peak_lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Per-parameter trainability, aligned with ModelState::parameters() order.
// An empty rows vector means every row of a per-patch tensor is trainable.
struct MaskEntry {
  bool trainable = true;
  std::vector<std::uint8_t> rows;
};

struct UpdateMask {
  std::vector<MaskEntry> entries;  // empty mask = everything trainable

  bool param_trainable(std::size_t i) const {
    return entries.empty() || entries[i].trainable;
  }
  bool row_trainable(std::size_t i, int row) const {
    if (entries.empty() || entries[i].rows.empty()) return param_trainable(i);
    return entries[i].trainable && entries[i].rows[row] != 0;
  }
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct StepOptions {
  double lr = 1e-3;
  double grad_clip = 0.0;          // global norm, 0 disables
  const UpdateMask* mask = nullptr;
  double gain = 1.0;               // alpha, scales every applied delta
  double patch_cap = 0.0;          // kappa, per-patch norm cap, 0 disables
};

// Adaptive-moment optimizer with decoupled weight decay. Frozen blocks and
// frozen patch rows are untouched bitwise, moments included; the per-patch
// gain and cap implement the clipped localized update.
template <class S>
struct Optimizer {
  OptimizerConfig cfg;
  long step_count = 0;
  std::vector<std::vector<S>> m, v;

  explicit Optimizer(const std::vector<ParamRef<S>>& params, OptimizerConfig c = {})
      : cfg(c) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), S(0));
      v.emplace_back(p.tensor.numel(), S(0));
    }
  }

  void step(const std::vector<ParamRef<S>>& params, const StepOptions& opt) {
    if (params.size() != m.size())
      throw std::runtime_error("Optimizer: parameter list size changed");
    if (opt.mask && !opt.mask->entries.empty() && opt.mask->entries.size() != params.size())
      throw std::runtime_error("Optimizer: mask size mismatch");
    ++step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_count));

    double clip_scale = 1.0;
    if (opt.grad_clip > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (opt.mask && !opt.mask->param_trainable(i)) continue;
        const auto& t = params[i].tensor;
        if (!t.grad) continue;
        const int rows = params[i].patch_rows;
        const std::size_t row_sz = rows > 0 ? t.numel() / rows : t.numel();
        for (std::size_t c = 0; c < t.numel(); ++c) {
          if (rows > 0 && opt.mask &&
              !opt.mask->row_trainable(i, static_cast<int>(c / row_sz)))
            continue;
          const double g = (*t.grad)[c];
          sq += g * g;
        }
      }
      const double norm = std::sqrt(sq);
      if (norm > opt.grad_clip) clip_scale = opt.grad_clip / norm;
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
      if (opt.mask && !opt.mask->param_trainable(i)) continue;
      auto& p = params[i];
      if (!p.tensor.grad) continue;
      const int rows = p.patch_rows;
      const std::size_t row_sz = rows > 0 ? p.tensor.numel() / rows : p.tensor.numel();
      const double wd = p.decay ? cfg.weight_decay : 0.0;
      const bool patchwise = rows > 0;

      // Proposed deltas first; the per-patch cap needs whole-row norms
      // before anything is applied.
      std::vector<double> delta(p.tensor.numel(), 0.0);
      for (std::size_t c = 0; c < p.tensor.numel(); ++c) {
        if (patchwise && opt.mask &&
            !opt.mask->row_trainable(i, static_cast<int>(c / row_sz)))
          continue;
        const double g = double((*p.tensor.grad)[c]) * clip_scale;
        m[i][c] = static_cast<S>(cfg.beta1 * double(m[i][c]) + (1.0 - cfg.beta1) * g);
        v[i][c] = static_cast<S>(cfg.beta2 * double(v[i][c]) + (1.0 - cfg.beta2) * g * g);
        const double mh = double(m[i][c]) / bc1;
        const double vh = double(v[i][c]) / bc2;
        double d = -opt.lr * mh / (std::sqrt(vh) + cfg.eps);
        if (wd > 0.0) d -= opt.lr * wd * double(p.tensor.at(c));
        delta[c] = opt.gain * d;
      }
      if (patchwise && opt.patch_cap > 0.0) {
        for (int r = 0; r < rows; ++r) {
          double sq = 0.0;
          for (std::size_t c = r * row_sz; c < (r + 1) * row_sz; ++c) sq += delta[c] * delta[c];
          const double norm = std::sqrt(sq);
          if (norm > opt.patch_cap) {
            const double s = opt.patch_cap / norm;
            for (std::size_t c = r * row_sz; c < (r + 1) * row_sz; ++c) delta[c] *= s;
          }
        }
      }
      for (std::size_t c = 0; c < p.tensor.numel(); ++c) {
        if (patchwise && opt.mask &&
            !opt.mask->row_trainable(i, static_cast<int>(c / row_sz)))
          continue;
        p.tensor.at(c) = static_cast<S>(double(p.tensor.at(c)) + delta[c]);
      }
    }
  }
};

template <class S>
std::vector<std::vector<S>> snapshot_weights(const ModelState<S>& m) {
  std::vector<std::vector<S>> out;
  for (const auto& p : m.parameters()) out.push_back(*p.tensor.data);
  return out;
}

template <class S>
void restore_weights(ModelState<S>& m, const std::vector<std::vector<S>>& snap) {
  auto params = m.parameters();
  if (snap.size() != params.size())
    throw std::runtime_error("restore_weights: snapshot size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (snap[i].size() != params[i].tensor.numel())
      throw std::runtime_error("restore_weights: shape mismatch at " + params[i].name);
    *params[i].tensor.data = snap[i];
  }
}

template <class S>
double evaluate_ppl(const ModelState<S>& model, const std::vector<std::uint16_t>& tokens,
                    int n_batches, int batch, int context, std::uint64_t seed) {
  NoGrad ng;
  Rng rng(seed);
  Rng drop(0);
  double total = 0.0;
  for (int i = 0; i < n_batches; ++i) {
    auto b = sample_batch(tokens, batch, context, rng);
    auto res = lm_loss(model, b.inputs, b.targets, batch, context, false, drop);
    total += res.ce;
  }
  return std::exp(total / n_batches);
}

struct HistoryRecord {
  long step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double val_ppl = 0.0;
  bool has_val = false;
};

template <class S>
struct TrainResult {
  std::vector<HistoryRecord> history;
  double best_val_ppl = 0.0;
  long best_step = -1;
  std::vector<std::vector<S>> best_weights;
};

// Offline pretraining loop: sample, loss (with the APN regularizers),
// backward, masked optimizer step; periodic validation with best-state
// snapshotting. Fully reproducible from the seed.
template <class S>
TrainResult<S> train_offline(ModelState<S>& model, const DomainSplit& data,
                             const TrainConfig& cfg,
                             const UpdateMask* mask = nullptr) {
  cfg.validate();
  TrainResult<S> res;
  if (cfg.max_iters == 0) return res;

  auto params = model.parameters();
  Optimizer<S> opt(params, OptimizerConfig{0.9, 0.99, 1e-8, cfg.weight_decay});
  Rng data_rng(cfg.seed);
  Rng drop_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  for (long step = 0; step < cfg.max_iters; ++step) {
    const double lr = lr_at(step, cfg);
    auto batch = sample_batch(data.train, cfg.batch, cfg.context, data_rng);
    for (auto& p : params) {
      p.tensor.ensure_grad();
      p.tensor.zero_grad();
    }
    const double warm = model.cfg.apn.gamma_warmup_steps > 0
                            ? std::min(1.0, double(step) / model.cfg.apn.gamma_warmup_steps)
                            : 1.0;
    Tape tape;
    LmForwardResult<S> fwd;
    {
      Recording rec(tape);
      fwd = lm_loss(model, batch.inputs, batch.targets, cfg.batch, cfg.context, true,
                    drop_rng, warm);
    }
    const double loss_val = double(fwd.loss.item());
    if (!std::isfinite(loss_val)) {
      std::string diag = "train_offline: non-finite loss at step " + std::to_string(step) +
                         " (lr " + std::to_string(lr) + ")";
      for (std::size_t l = 0; l < fwd.deltas.size(); ++l) {
        double sq = 0.0;
        for (std::size_t c = 0; c < fwd.deltas[l].numel(); ++c) {
          const double x = double(fwd.deltas[l].at(c));
          sq += x * x;
        }
        diag += "; layer " + std::to_string(l) + " |delta| " + std::to_string(std::sqrt(sq));
      }
      throw std::runtime_error(diag);
    }
    backward(fwd.loss, tape);
    StepOptions so;
    so.lr = lr;
    so.grad_clip = cfg.grad_clip;
    so.mask = mask;
    opt.step(params, so);
    ++model.step;

    HistoryRecord rec{step, loss_val, lr, 0.0, false};
    const bool last = step + 1 == cfg.max_iters;
    if ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) || last) {
      rec.val_ppl = evaluate_ppl(model, data.val, cfg.eval_batches, cfg.batch,
                                 std::min<int>(cfg.context,
                                               static_cast<int>(data.val.size()) - 1),
                                 cfg.seed + 777);
      rec.has_val = true;
      if (res.best_step < 0 || rec.val_ppl < res.best_val_ppl) {
        res.best_val_ppl = rec.val_ppl;
        res.best_step = step;
        res.best_weights = snapshot_weights(model);
      }
    }
    res.history.push_back(rec);
  }
  return res;
}

}  // namespace apn
