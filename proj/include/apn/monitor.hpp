#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "apn/model.hpp"
#include "apn/trainer.hpp"

namespace apn {

struct UsageReport {
  std::vector<double> q;  // active-set frequency per patch, sums to 1
  double entropy = 0.0;   // H(q) = -sum q_i log(q_i + eps)
};

template <class S>
UsageReport usage_entropy(const RoutingDecision<S>& dec) {
  UsageReport rep;
  rep.q = usage_frequencies(dec);
  for (double v : rep.q) rep.entropy -= v * std::log(v + 1e-12);
  return rep;
}

struct ConfidenceSummary {
  double mean = 0.0;
  double min = 0.0;
  double p5 = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
};

namespace monitor_detail {

inline double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::runtime_error("quantile: empty sample");
  const auto idx = static_cast<std::size_t>(
      std::llround(p * double(sorted.size() - 1)));
  return sorted[idx];
}

}  // namespace monitor_detail

template <class S>
ConfidenceSummary confidence_stats(const RoutingDecision<S>& dec) {
  if (dec.n_tokens == 0) throw std::runtime_error("confidence_stats: empty batch");
  std::vector<double> c(dec.confidence.begin(), dec.confidence.end());
  std::sort(c.begin(), c.end());
  ConfidenceSummary s;
  for (double v : c) s.mean += v;
  s.mean /= double(c.size());
  s.min = c.front();
  s.p5 = monitor_detail::quantile(c, 0.05);
  s.p50 = monitor_detail::quantile(c, 0.50);
  s.p95 = monitor_detail::quantile(c, 0.95);
  return s;
}

struct ResidualSummary {
  std::vector<double> delta_norms;      // per token
  std::vector<double> ratios;           // per token with nonzero |h|
  std::vector<int> spike_tokens;        // ratio above the threshold
  int absent_ratios = 0;                // tokens with |h| = 0
  double norm_p50 = 0.0, norm_p95 = 0.0;
  double ratio_p50 = 0.0, ratio_p95 = 0.0;
};

// Per-token |Delta| and |Delta|/|h| over a flattened (N, d) batch.
template <class S>
ResidualSummary residual_stats(const Tensor<S>& h, const Tensor<S>& delta,
                               double spike_threshold = 1.0) {
  if (h.shape != delta.shape) shape_error("residual_stats", h.shape, delta.shape);
  const int d = h.dim(static_cast<int>(h.shape.size()) - 1);
  const int n = static_cast<int>(h.numel()) / d;
  ResidualSummary s;
  for (int t = 0; t < n; ++t) {
    double hn = 0.0, dn = 0.0;
    for (int j = 0; j < d; ++j) {
      const double hv = double(h.at(std::size_t(t) * d + j));
      const double dv = double(delta.at(std::size_t(t) * d + j));
      hn += hv * hv;
      dn += dv * dv;
    }
    hn = std::sqrt(hn);
    dn = std::sqrt(dn);
    s.delta_norms.push_back(dn);
    if (hn == 0.0) {
      ++s.absent_ratios;
    } else {
      const double ratio = dn / hn;
      s.ratios.push_back(ratio);
      if (ratio > spike_threshold) s.spike_tokens.push_back(t);
    }
  }
  auto sorted_norms = s.delta_norms;
  std::sort(sorted_norms.begin(), sorted_norms.end());
  s.norm_p50 = monitor_detail::quantile(sorted_norms, 0.50);
  s.norm_p95 = monitor_detail::quantile(sorted_norms, 0.95);
  if (!s.ratios.empty()) {
    auto sorted_ratios = s.ratios;
    std::sort(sorted_ratios.begin(), sorted_ratios.end());
    s.ratio_p50 = monitor_detail::quantile(sorted_ratios, 0.50);
    s.ratio_p95 = monitor_detail::quantile(sorted_ratios, 0.95);
  }
  return s;
}

struct PatchLossEstimate {
  double probability = 0.0;  // Pr[I(h) = i]
  double mean_loss = 0.0;    // E[loss | I(h) = i], 0 when never assigned
  long count = 0;
};

struct LossDecomposition {
  std::vector<PatchLossEstimate> per_patch;
  double overall_loss = 0.0;
  double reconstructed = 0.0;  // sum_i Pr[I=i] E[loss|I=i]
};

// Empirical form of the loss decomposition: tokens are assigned top-1 to
// the highest-scoring patch of the chosen APN layer.
template <class S>
LossDecomposition conditional_loss_decomposition(const ModelState<S>& model,
                                                 const std::vector<std::uint16_t>& tokens,
                                                 int n_batches, int batch, int context,
                                                 std::uint64_t seed, int layer = 0) {
  if (model.cfg.ffn_kind != FfnKind::Apn)
    throw std::runtime_error("conditional_loss_decomposition: model has no APN layers");
  if (layer < 0 || layer >= model.cfg.n_layers)
    throw std::runtime_error("conditional_loss_decomposition: bad layer index");
  NoGrad ng;
  Rng rng(seed);
  Rng drop(0);
  const int k_patches = model.cfg.apn.patches;
  std::vector<double> sums(k_patches, 0.0);
  std::vector<long> counts(k_patches, 0);
  long total_tokens = 0;
  double total_loss = 0.0;
  for (int i = 0; i < n_batches; ++i) {
    auto b = sample_batch(tokens, batch, context, rng);
    auto res = lm_loss(model, b.inputs, b.targets, batch, context, false, drop);
    const auto& dec = res.decisions[layer];
    for (int t = 0; t < dec.n_tokens; ++t) {
      int best = 0;
      for (int j = 1; j < k_patches; ++j)
        if (dec.raw_scores[std::size_t(t) * k_patches + j] >
            dec.raw_scores[std::size_t(t) * k_patches + best])
          best = j;
      const double loss = double(res.per_token_loss[t]);
      sums[best] += loss;
      ++counts[best];
      total_loss += loss;
      ++total_tokens;
    }
  }
  LossDecomposition out;
  out.overall_loss = total_loss / double(total_tokens);
  for (int i = 0; i < k_patches; ++i) {
    PatchLossEstimate e;
    e.count = counts[i];
    e.probability = double(counts[i]) / double(total_tokens);
    e.mean_loss = counts[i] > 0 ? sums[i] / double(counts[i]) : 0.0;
    out.reconstructed += e.probability * e.mean_loss;
    out.per_patch.push_back(e);
  }
  return out;
}

struct LayerMonitor {
  UsageReport usage;
  ConfidenceSummary confidence;
  ResidualSummary residual;
};

struct MonitorReport {
  std::vector<LayerMonitor> layers;
  LossDecomposition decomposition;
  double ppl = 0.0;
};

// One evaluation pass collecting every monitoring metric. Pure: no model
// state or training rng stream is touched.
template <class S>
MonitorReport monitor_model(const ModelState<S>& model,
                            const std::vector<std::uint16_t>& tokens, int n_batches,
                            int batch, int context, std::uint64_t seed) {
  if (model.cfg.ffn_kind != FfnKind::Apn)
    throw std::runtime_error("monitor_model: model has no APN layers");
  MonitorReport rep;
  {
    NoGrad ng;
    Rng rng(seed);
    Rng drop(0);
    auto b = sample_batch(tokens, batch, context, rng);
    auto res = lm_loss(model, b.inputs, b.targets, batch, context, false, drop);
    for (int l = 0; l < model.cfg.n_layers; ++l) {
      LayerMonitor lm;
      lm.usage = usage_entropy(res.decisions[l]);
      lm.confidence = confidence_stats(res.decisions[l]);
      const int d = model.cfg.dim;
      auto flat_h = reshape(res.sublayer_inputs[l], {batch * context, d});
      lm.residual = residual_stats(flat_h, res.deltas[l]);
      rep.layers.push_back(std::move(lm));
    }
  }
  rep.decomposition =
      conditional_loss_decomposition(model, tokens, n_batches, batch, context, seed);
  rep.ppl = evaluate_ppl(model, tokens, n_batches, batch, context, seed);
  return rep;
}

}  // namespace apn
