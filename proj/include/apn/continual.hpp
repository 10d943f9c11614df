#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "apn/trainer.hpp"

namespace apn {

enum class UpdateRule { Global, PatchLocal };

inline std::string update_rule_name(UpdateRule r) {
  return r == UpdateRule::Global ? "global" : "patch-local";
}

struct AdaptConfig {
  long adapt_iters = 500;
  double adapt_lr = 1e-4;
  int adapt_batch = 32;
  int context = 128;
  UpdateRule rule = UpdateRule::PatchLocal;
  long update_budget = 1;   // B: steps between applied updates
  double update_gain = 1.0; // alpha
  double norm_cap = 0.0;    // kappa, 0 disables
  std::optional<double> confidence_threshold;
  std::optional<std::pair<double, double>> entropy_band;  // low, high
  double proto_ema = 0.0;   // rho, 0 disables
  bool allocation = false;
  double novelty_threshold = 0.0;
  int novelty_window = 10;  // W: consecutive low-confidence update steps
  double usage_ema_rate = 0.01;
  long cooldown = 200;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (adapt_lr <= 0.0) throw std::runtime_error("AdaptConfig: adapt_lr must be > 0");
    if (update_budget < 1) throw std::runtime_error("AdaptConfig: update_budget must be >= 1");
    if (adapt_batch < 1 || context < 1) throw std::runtime_error("AdaptConfig: bad batch shape");
    if (entropy_band && entropy_band->first > entropy_band->second)
      throw std::runtime_error("AdaptConfig: entropy band low > high");
    if (confidence_threshold && !std::isfinite(*confidence_threshold))
      throw std::runtime_error("AdaptConfig: confidence threshold must be finite");
  }
};

// Trainable set per rule. Global: everything. Patch-local: per APN layer,
// the shared V and prototypes plus only the patch rows of U/a/b that were
// active somewhere in the batch; attention, embeddings, the tied head,
// layer norms, and gamma stay frozen.
template <class S>
UpdateMask build_update_mask(UpdateRule rule, const ModelState<S>& model,
                             const std::vector<RoutingDecision<S>>& decisions) {
  UpdateMask mask;
  if (rule == UpdateRule::Global) return mask;
  if (model.cfg.ffn_kind == FfnKind::Apn &&
      decisions.size() != static_cast<std::size_t>(model.cfg.n_layers))
    throw std::runtime_error("build_update_mask: one decision per APN layer required");

  std::vector<std::vector<std::uint8_t>> active_rows;
  for (const auto& dec : decisions) {
    std::vector<std::uint8_t> rows(dec.n_patches, 0);
    for (int idx : dec.indices) rows[idx] = 1;
    active_rows.push_back(std::move(rows));
  }
  for (const auto& p : model.parameters()) {
    MaskEntry e;
    switch (p.group) {
      case ParamGroup::ApnShared:
        e.trainable = true;
        break;
      case ParamGroup::ApnPatch:
        e.trainable = true;
        e.rows = active_rows[p.layer];
        break;
      default:
        e.trainable = false;
    }
    mask.entries.push_back(std::move(e));
  }
  return mask;
}

// Mean entropy of the model's next-token distribution, from raw logits.
template <class S>
double prediction_entropy(const Tensor<S>& logits) {
  const int v = logits.dim(static_cast<int>(logits.shape.size()) - 1);
  const int n = static_cast<int>(logits.numel()) / v;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int j = 0; j < v; ++j)
      mx = std::max(mx, double(logits.at(std::size_t(i) * v + j)));
    double z = 0.0;
    for (int j = 0; j < v; ++j)
      z += std::exp(double(logits.at(std::size_t(i) * v + j)) - mx);
    double h = 0.0;
    for (int j = 0; j < v; ++j) {
      const double p = std::exp(double(logits.at(std::size_t(i) * v + j)) - mx) / z;
      h -= p * std::log(p + 1e-12);
    }
    total += h;
  }
  return total / n;
}

// True iff every enabled gate passes: mean routing confidence over all
// layers vs the threshold, and mean prediction entropy inside the band.
template <class S>
bool confidence_gate(const std::vector<RoutingDecision<S>>& decisions,
                     double pred_entropy, const AdaptConfig& cfg) {
  cfg.validate();
  if (cfg.confidence_threshold) {
    double sum = 0.0;
    long n = 0;
    for (const auto& dec : decisions)
      for (S c : dec.confidence) {
        sum += double(c);
        ++n;
      }
    if (n == 0) throw std::runtime_error("confidence_gate: no routing decisions");
    if (sum / n < *cfg.confidence_threshold) return false;
  }
  if (cfg.entropy_band &&
      (pred_entropy < cfg.entropy_band->first || pred_entropy > cfg.entropy_band->second))
    return false;
  return true;
}

struct AllocationEvent {
  long step = 0;
  int layer = 0;
  int patch = -1;
  std::string note;
};

// Per-layer bookkeeping for usage-based replacement.
struct AllocationState {
  std::vector<double> usage_ema;
  std::vector<long> cooldown_until;
  int low_confidence_streak = 0;

  explicit AllocationState(int patches = 0)
      : usage_ema(patches, 1.0 / std::max(patches, 1)), cooldown_until(patches, 0) {}
};

// Replace the lowest-EMA-usage patch outside cooldown: prototype = unit z,
// decoder zeroed, gates reset, so its first contribution is a zero residual.
template <class S>
std::optional<AllocationEvent> allocate_on_novelty(APNParams<S>& params,
                                                   const std::vector<double>& z_mean,
                                                   const AdaptConfig& cfg,
                                                   AllocationState& state, long step,
                                                   int layer) {
  const int k_patches = static_cast<int>(state.usage_ema.size());
  int victim = -1;
  for (int i = 0; i < k_patches; ++i) {
    if (state.cooldown_until[i] > step) continue;
    if (victim < 0 || state.usage_ema[i] < state.usage_ema[victim]) victim = i;
  }
  if (victim < 0) return std::nullopt;

  const int d = params.dim();
  if (static_cast<int>(z_mean.size()) != d)
    throw std::runtime_error("allocate_on_novelty: representation dimension mismatch");
  double norm = 0.0;
  for (double v : z_mean) norm += v * v;
  norm = std::sqrt(norm);
  if (norm < 1e-12) throw std::runtime_error("allocate_on_novelty: zero representation");
  for (int j = 0; j < d; ++j)
    params.prototypes.at(std::size_t(victim) * d + j) = static_cast<S>(z_mean[j] / norm);
  const int r = static_cast<int>(params.decoders.numel()) / (k_patches * d);
  for (std::size_t c = std::size_t(victim) * d * r; c < std::size_t(victim + 1) * d * r; ++c)
    params.decoders.at(c) = S(0);
  const std::size_t gd = params.gate_slope.numel() / k_patches;
  for (std::size_t c = std::size_t(victim) * gd; c < std::size_t(victim + 1) * gd; ++c) {
    params.gate_slope.at(c) = S(1);
    params.gate_offset.at(c) = S(0);
  }
  state.cooldown_until[victim] = step + cfg.cooldown;
  state.usage_ema[victim] = 1.0 / k_patches;
  state.low_confidence_streak = 0;
  return AllocationEvent{step, layer, victim, "reallocated lowest-usage patch"};
}

// Optional prototype pull p_i <- (1-rho) p_i + rho zbar_i, where zbar_i is
// the unit-normalized batch mean of representations routed to patch i.
template <class S>
void prototype_ema_update(APNParams<S>& params, const RoutingDecision<S>& dec,
                          const Tensor<S>& z, double rho) {
  const int d = params.dim();
  std::vector<int> counts(dec.n_patches, 0);
  std::vector<std::vector<double>> acc(dec.n_patches);
  for (int t = 0; t < dec.n_tokens; ++t)
    for (int s = 0; s < dec.active; ++s) {
      const int i = dec.active_set(t)[s];
      if (acc[i].empty()) acc[i].assign(d, 0.0);
      for (int j = 0; j < d; ++j) acc[i][j] += double(z.at(std::size_t(t) * d + j));
      ++counts[i];
    }
  for (int i = 0; i < dec.n_patches; ++i) {
    if (counts[i] == 0) continue;
    double norm = 0.0;
    for (int j = 0; j < d; ++j) {
      acc[i][j] /= counts[i];
      norm += acc[i][j] * acc[i][j];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (int j = 0; j < d; ++j)
      params.prototypes.at(std::size_t(i) * d + j) = static_cast<S>(
          (1.0 - rho) * double(params.prototypes.at(std::size_t(i) * d + j)) +
          rho * acc[i][j] / norm);
  }
}

struct AdaptRecord {
  long step = 0;
  double loss = 0.0;
  bool applied = false;
  std::string note;
};

struct AdaptTrace {
  std::vector<AdaptRecord> records;
  long updates_applied = 0;
  long updates_gated = 0;
  long skipped_nonfinite = 0;
  std::vector<AllocationEvent> allocations;
  std::vector<std::set<int>> ever_active;  // per APN layer
  long updated_param_count = 0;
};

namespace continual_detail {

// Parameters ever touched under the arm's rule: for patch-local, shared
// APN tensors plus the rows of the patches that were active at least once.
template <class S>
long count_updated_params(const ModelState<S>& model, UpdateRule rule,
                          const std::vector<std::set<int>>& ever_active) {
  long n = 0;
  for (const auto& p : model.parameters()) {
    if (rule == UpdateRule::Global) {
      n += static_cast<long>(p.tensor.numel());
      continue;
    }
    if (p.group == ParamGroup::ApnShared) {
      n += static_cast<long>(p.tensor.numel());
    } else if (p.group == ParamGroup::ApnPatch) {
      const std::size_t row = p.tensor.numel() / p.patch_rows;
      n += static_cast<long>(row * ever_active[p.layer].size());
    }
  }
  return n;
}

}  // namespace continual_detail

// Algorithm: stream batches from Domain B; every B steps build the mask
// from the batch's routing, gate, and apply a gain-scaled, per-patch-capped
// optimizer step. Dropout stays off during adaptation; a non-finite loss
// skips the update and the stream continues.
template <class S>
AdaptTrace adapt_online(ModelState<S>& model, const DomainSplit& stream,
                        const AdaptConfig& cfg) {
  cfg.validate();
  AdaptTrace trace;
  const bool is_apn = model.cfg.ffn_kind == FfnKind::Apn;
  const int n_apn_layers = is_apn ? model.cfg.n_layers : 0;
  trace.ever_active.resize(n_apn_layers);
  std::vector<AllocationState> alloc(n_apn_layers,
                                     AllocationState(model.cfg.apn.patches));

  auto params = model.parameters();
  Optimizer<S> opt(params, OptimizerConfig{0.9, 0.99, 1e-8, cfg.weight_decay});
  Rng data_rng(cfg.seed);

  for (long step = 0; step < cfg.adapt_iters; ++step) {
    auto batch = sample_batch(stream.train, cfg.adapt_batch, cfg.context, data_rng);
    for (auto& p : params) {
      p.tensor.ensure_grad();
      p.tensor.zero_grad();
    }
    Rng no_drop(0);
    Tape tape;
    LmForwardResult<S> fwd;
    {
      Recording rec(tape);
      fwd = lm_loss(model, batch.inputs, batch.targets, cfg.adapt_batch, cfg.context,
                    false, no_drop);
    }
    AdaptRecord rec{step, double(fwd.loss.item()), false, ""};
    if (!std::isfinite(rec.loss)) {
      rec.note = "non-finite loss, update skipped";
      ++trace.skipped_nonfinite;
      trace.records.push_back(rec);
      continue;
    }

    for (int l = 0; l < n_apn_layers; ++l) {
      const auto& dec = fwd.decisions[l];
      auto q = usage_frequencies(dec);
      for (int i = 0; i < dec.n_patches; ++i)
        alloc[l].usage_ema[i] =
            (1.0 - cfg.usage_ema_rate) * alloc[l].usage_ema[i] + cfg.usage_ema_rate * q[i];
      for (int idx : dec.indices) trace.ever_active[l].insert(idx);
    }

    if ((step + 1) % cfg.update_budget == 0) {
      const bool apply = confidence_gate(fwd.decisions, prediction_entropy(fwd.logits), cfg);
      if (!apply) {
        rec.note = "gated";
        ++trace.updates_gated;
      } else {
        backward(fwd.loss, tape);
        auto mask = build_update_mask(cfg.rule, model, fwd.decisions);
        StepOptions so;
        so.lr = cfg.adapt_lr;
        so.grad_clip = cfg.grad_clip;
        so.mask = &mask;
        so.gain = cfg.update_gain;
        so.patch_cap = cfg.norm_cap;
        opt.step(params, so);
        rec.applied = true;
        ++trace.updates_applied;

        if (cfg.proto_ema > 0.0 && is_apn) {
          NoGrad ng;
          for (int l = 0; l < n_apn_layers; ++l)
            prototype_ema_update(model.blocks[l].apn, fwd.decisions[l], fwd.zs[l],
                                 cfg.proto_ema);
        }
      }

      if (cfg.allocation && is_apn) {
        for (int l = 0; l < n_apn_layers; ++l) {
          const auto& dec = fwd.decisions[l];
          double mean_conf = 0.0;
          for (S c : dec.confidence) mean_conf += double(c);
          mean_conf /= dec.n_tokens;
          if (mean_conf < cfg.novelty_threshold) {
            if (++alloc[l].low_confidence_streak >= cfg.novelty_window) {
              const int d = model.cfg.dim;
              std::vector<double> z_mean(d, 0.0);
              for (int t = 0; t < dec.n_tokens; ++t)
                for (int j = 0; j < d; ++j)
                  z_mean[j] += double(fwd.zs[l].at(std::size_t(t) * d + j));
              for (double& v : z_mean) v /= dec.n_tokens;
              auto ev = allocate_on_novelty(model.blocks[l].apn, z_mean, cfg, alloc[l],
                                            step, l);
              if (ev)
                trace.allocations.push_back(*ev);
              else
                rec.note += (rec.note.empty() ? "" : "; ") +
                            std::string("allocation skipped: all patches in cooldown");
            }
          } else {
            alloc[l].low_confidence_streak = 0;
          }
        }
      }
    }
    trace.records.push_back(rec);
    ++model.step;
  }
  trace.updated_param_count =
      continual_detail::count_updated_params(model, cfg.rule, trace.ever_active);
  return trace;
}

struct OverlapStats {
  double mean = 0.0;
  bool normalized = false;
  long pairs = 0;
  std::vector<long> histogram;  // indexed by raw overlap 0..k
};

// Pairwise |K(h) ∩ K(h')| over cross-domain token pairs, exhaustive up to
// max_pairs and uniformly subsampled beyond it.
template <class S>
OverlapStats overlap_score(const RoutingDecision<S>& a, const RoutingDecision<S>& b,
                           bool normalize, long max_pairs = 100000,
                           std::uint64_t seed = 17) {
  if (a.active != b.active || a.n_patches != b.n_patches)
    throw std::runtime_error("overlap_score: mismatched routing configurations");
  const int k = a.active;
  OverlapStats st;
  st.normalized = normalize;
  st.histogram.assign(k + 1, 0);
  const long total = static_cast<long>(a.n_tokens) * b.n_tokens;
  Rng rng(seed);
  double sum = 0.0;
  auto accumulate = [&](int ta, int tb) {
    const int* sa = a.active_set(ta);
    const int* sb = b.active_set(tb);
    int inter = 0;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) inter += sa[i] == sb[j] ? 1 : 0;
    ++st.histogram[inter];
    sum += normalize ? double(inter) / k : double(inter);
    ++st.pairs;
  };
  if (total <= max_pairs) {
    for (int i = 0; i < a.n_tokens; ++i)
      for (int j = 0; j < b.n_tokens; ++j) accumulate(i, j);
  } else {
    for (long p = 0; p < max_pairs; ++p)
      accumulate(rng.uniform_int(a.n_tokens), rng.uniform_int(b.n_tokens));
  }
  st.mean = sum / st.pairs;
  return st;
}

struct ArmReport {
  std::string name;
  UpdateRule rule = UpdateRule::Global;
  double pre_a_ppl = 0.0;
  double pre_b_ppl = 0.0;
  double retention_ppl = 0.0;
  double adaptation_ppl = 0.0;
  long updated_params = 0;
  long total_params = 0;
};

struct ProtocolReport {
  ArmReport dense;
  ArmReport apn;
  OverlapStats overlap_normalized;
  OverlapStats overlap_raw;
};

template <class S>
struct ProtocolArm {
  std::string name;
  ModelConfig model_cfg;
  AdaptConfig adapt_cfg;
};

namespace continual_detail {

template <class S>
ArmReport run_arm(const ProtocolArm<S>& arm, const DomainSplit& a, const DomainSplit& b,
                  const TrainConfig& tcfg, int eval_batches,
                  RoutingDecision<S>* out_dec_a, RoutingDecision<S>* out_dec_b) {
  ModelState<S> model = ModelState<S>::init(arm.model_cfg, tcfg.seed);
  auto tres = train_offline(model, a, tcfg);
  if (tres.best_step >= 0) restore_weights(model, tres.best_weights);

  ArmReport rep;
  rep.name = arm.name;
  rep.rule = arm.adapt_cfg.rule;
  rep.total_params = model.param_count();
  const int ctx = arm.adapt_cfg.context;
  const int bsz = arm.adapt_cfg.adapt_batch;
  rep.pre_a_ppl = evaluate_ppl(model, a.val, eval_batches, bsz, ctx, tcfg.seed + 101);
  rep.pre_b_ppl = evaluate_ppl(model, b.val, eval_batches, bsz, ctx, tcfg.seed + 102);

  if (model.cfg.ffn_kind == FfnKind::Apn && out_dec_a && out_dec_b) {
    NoGrad ng;
    Rng ra(tcfg.seed + 201), rb(tcfg.seed + 202), drop(0);
    auto ba = sample_batch(a.val, bsz, ctx, ra);
    auto bb = sample_batch(b.val, bsz, ctx, rb);
    *out_dec_a = lm_loss(model, ba.inputs, ba.targets, bsz, ctx, false, drop)
                     .decisions.front();
    *out_dec_b = lm_loss(model, bb.inputs, bb.targets, bsz, ctx, false, drop)
                     .decisions.front();
  }

  auto trace = adapt_online(model, b, arm.adapt_cfg);
  rep.updated_params = trace.updated_param_count;
  rep.retention_ppl = evaluate_ppl(model, a.val, eval_batches, bsz, ctx, tcfg.seed + 101);
  rep.adaptation_ppl = evaluate_ppl(model, b.val, eval_batches, bsz, ctx, tcfg.seed + 102);
  return rep;
}

}  // namespace continual_detail

// Both arms from matched seeds: pretrain on A, evaluate, adapt on B,
// re-evaluate A (retention) and B (adaptation).
template <class S>
ProtocolReport run_protocol(const DomainSplit& a, const DomainSplit& b,
                            const ProtocolArm<S>& dense_arm, const ProtocolArm<S>& apn_arm,
                            const TrainConfig& tcfg, int eval_batches = 8) {
  ProtocolReport rep;
  rep.dense = continual_detail::run_arm<S>(dense_arm, a, b, tcfg, eval_batches,
                                           nullptr, nullptr);
  RoutingDecision<S> dec_a, dec_b;
  rep.apn = continual_detail::run_arm<S>(apn_arm, a, b, tcfg, eval_batches, &dec_a, &dec_b);
  if (dec_a.n_tokens > 0 && dec_b.n_tokens > 0) {
    rep.overlap_normalized = overlap_score(dec_a, dec_b, true);
    rep.overlap_raw = overlap_score(dec_a, dec_b, false);
  }
  return rep;
}

}  // namespace apn
