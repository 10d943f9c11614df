#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apn/tensor.hpp"

namespace apn {

enum class GatingMode { PerDimension, Scalar };

// Hyperparameters of one attractor-patch sublayer.
struct APNConfig {
  int patches = 64;             // K
  int active = 4;               // k, patches mixed per token
  int code_dim = 16;            // r
  double temperature = 0.07;    // tau
  double residual_scale = 1.0;  // gamma
  bool gamma_trainable = false;
  long gamma_warmup_steps = 0;  // linear 0 -> gamma over this many steps
  double patch_dropout_p = 0.0;
  double balance_weight = 0.0;
  double entropy_weight = 0.0;
  GatingMode gating = GatingMode::PerDimension;

  void validate() const {
    if (active < 1 || active > patches)
      throw std::runtime_error("APNConfig: need 1 <= k <= K");
    if (code_dim < 1) throw std::runtime_error("APNConfig: code_dim must be >= 1");
    if (temperature <= 0.0) throw std::runtime_error("APNConfig: temperature must be > 0");
    if (patch_dropout_p < 0.0 || patch_dropout_p >= 1.0)
      throw std::runtime_error("APNConfig: patch_dropout_p must be in [0,1)");
    if (balance_weight < 0.0 || entropy_weight < 0.0)
      throw std::runtime_error("APNConfig: regularizer weights must be >= 0");
  }

  int gate_dim() const { return gating == GatingMode::Scalar ? 1 : code_dim; }
};

// Learnable parameters of one attractor-patch sublayer.
template <class S>
struct APNParams {
  Tensor<S> prototypes;   // (K, d)
  Tensor<S> code_proj;    // (d, r)
  Tensor<S> decoders;     // (K, d, r)
  Tensor<S> gate_slope;   // (K, r) or (K, 1)
  Tensor<S> gate_offset;  // (K, r) or (K, 1)
  Tensor<S> ln_gain;      // (d)
  Tensor<S> ln_bias;      // (d)
  Tensor<S> gamma;        // scalar

  // Prototypes start uniform on the unit sphere; decoders start at zero so
  // the sublayer is the identity at initialization.
  static APNParams init(int d, const APNConfig& cfg, Rng& rng) {
    cfg.validate();
    APNParams p;
    p.prototypes = Tensor<S>::randn({cfg.patches, d}, rng, S(1), true);
    for (int i = 0; i < cfg.patches; ++i) {
      S n = S(0);
      for (int j = 0; j < d; ++j) n += p.prototypes.at(i * d + j) * p.prototypes.at(i * d + j);
      n = std::sqrt(n);
      for (int j = 0; j < d; ++j) p.prototypes.at(i * d + j) /= n;
    }
    p.code_proj = Tensor<S>::randn({d, cfg.code_dim}, rng,
                                   static_cast<S>(1.0 / std::sqrt(double(d))), true);
    p.decoders = Tensor<S>::zeros({cfg.patches, d, cfg.code_dim}, true);
    p.gate_slope = Tensor<S>::full({cfg.patches, cfg.gate_dim()}, S(1), true);
    p.gate_offset = Tensor<S>::zeros({cfg.patches, cfg.gate_dim()}, true);
    p.ln_gain = Tensor<S>::full({d}, S(1), true);
    p.ln_bias = Tensor<S>::zeros({d}, true);
    p.gamma = Tensor<S>::scalar(static_cast<S>(cfg.residual_scale), cfg.gamma_trainable);
    return p;
  }

  int dim() const { return prototypes.dim(1); }
  int patch_count() const { return prototypes.dim(0); }
};

// Learnable parameter count Kd + dr + Kdr + 2K*gate_dim, excluding the
// sublayer's LN affine pair (2d) which is reported separately.
inline long apn_param_count(int d, const APNConfig& cfg) {
  return static_cast<long>(cfg.patches) * d + static_cast<long>(d) * cfg.code_dim +
         static_cast<long>(cfg.patches) * d * cfg.code_dim +
         2L * cfg.patches * cfg.gate_dim();
}

// Per-token routing outcome for a batch of token representations.
template <class S>
struct RoutingDecision {
  int n_tokens = 0;
  int n_patches = 0;  // K
  int active = 0;     // k
  std::vector<int> indices;   // (n_tokens * k), distinct per token
  Tensor<S> weights;          // (n_tokens, k), rows on the simplex
  std::vector<S> raw_scores;  // (n_tokens * K) host copy
  std::vector<S> confidence;  // (n_tokens), max raw score

  const int* active_set(int token) const { return indices.data() + std::size_t(token) * active; }
};

// Cosine-similarity routing over temperature: scores from unit-normalized z
// against unit-normalized prototypes, then top-k restricted softmax.
template <class S>
RoutingDecision<S> route(const Tensor<S>& z, const APNParams<S>& params,
                         const APNConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(z.numel()) / params.dim();
  auto z2 = reshape(z, {n, params.dim()});
  auto zn = row_l2_normalize(z2, static_cast<S>(1e-8));
  auto pn = row_l2_normalize(params.prototypes, static_cast<S>(1e-8));
  auto scores = scale(matmul_nt(zn, pn), static_cast<S>(1.0 / cfg.temperature));
  for (std::size_t i = 0; i < scores.numel(); ++i)
    if (!std::isfinite(static_cast<double>(scores.at(i))))
      throw std::runtime_error("route: non-finite routing score");

  auto topk = softmax_topk(scores, cfg.active);
  RoutingDecision<S> dec;
  dec.n_tokens = n;
  dec.n_patches = cfg.patches;
  dec.active = cfg.active;
  dec.indices = std::move(topk.indices);
  dec.weights = topk.weights;
  dec.raw_scores.assign(scores.ptr(), scores.ptr() + scores.numel());
  dec.confidence.resize(n);
  for (int i = 0; i < n; ++i) {
    S c = scores.at(std::size_t(i) * cfg.patches);
    for (int j = 1; j < cfg.patches; ++j)
      c = std::max(c, scores.at(std::size_t(i) * cfg.patches + j));
    dec.confidence[i] = c;
  }
  return dec;
}

// Compact code u = V^T z, batched as z (N, d) @ V (d, r).
template <class S>
Tensor<S> encode(const Tensor<S>& z, const Tensor<S>& code_proj) {
  return matmul(z, code_proj);
}

// Gated regressor phi_i = u * sigmoid(a_i * u + b_i) for one patch.
// a_row/b_row are (1, r) in per-dimension mode or (1, 1) in scalar mode
// (one gate value broadcast over all code coordinates).
template <class S>
Tensor<S> patch_feature(const Tensor<S>& u, const Tensor<S>& a_row,
                        const Tensor<S>& b_row) {
  auto gate = sigmoid(add_bc(mul_bc(u, a_row), b_row));
  return mul(u, gate);
}

template <class S>
struct APNForwardResult {
  Tensor<S> output;    // (N, d): h + gamma * Delta
  Tensor<S> delta;     // (N, d): the mixed residual before gamma
  Tensor<S> z;         // (N, d): normalized representation (for EMA/allocation)
  RoutingDecision<S> decision;
};

// Full sublayer forward pass for token representations h (N, d).
// gamma_warmup in [0,1] scales the residual during warmup (1 = no warmup).
template <class S>
APNForwardResult<S> apn_forward(const Tensor<S>& h, const APNParams<S>& params,
                                const APNConfig& cfg, bool training,
                                Rng* patch_dropout_rng = nullptr,
                                double gamma_warmup = 1.0) {
  const int d = params.dim();
  const int n = static_cast<int>(h.numel()) / d;
  const int k = cfg.active;
  auto h2 = reshape(h, {n, d});

  APNForwardResult<S> res;
  res.z = layer_norm(h2, params.ln_gain, params.ln_bias, static_cast<S>(1e-5));
  res.decision = route(res.z, params, cfg);
  auto code = encode(res.z, params.code_proj);

  // Patch dropout: with probability p a token drops one uniformly chosen
  // selected patch and renormalizes the surviving weights. Only meaningful
  // for k > 1 (a token cannot renormalize an empty active set).
  Tensor<S> weights = res.decision.weights;
  std::vector<uint8_t> dropped(std::size_t(n) * k, 0);
  if (training && cfg.patch_dropout_p > 0.0 && k > 1) {
    if (!patch_dropout_rng)
      throw std::runtime_error("apn_forward: patch dropout requires an rng");
    bool any = false;
    auto mask = Tensor<S>::full({n, k}, S(1));
    for (int i = 0; i < n; ++i)
      if (patch_dropout_rng->uniform() < cfg.patch_dropout_p) {
        const int slot = patch_dropout_rng->uniform_int(k);
        mask.at(std::size_t(i) * k + slot) = S(0);
        dropped[std::size_t(i) * k + slot] = 1;
        any = true;
      }
    if (any) {
      auto survived = mul(weights, mask);
      weights = div_col(survived, row_sum(survived));
    }
  }

  // Group (token, slot) pairs by patch so each active patch runs as one
  // small batched gemm.
  std::map<int, std::vector<std::pair<int, int>>> groups;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      if (!dropped[std::size_t(i) * k + j])
        groups[res.decision.indices[std::size_t(i) * k + j]].push_back({i, j});

  auto dec2d = reshape(params.decoders, {cfg.patches, d * cfg.code_dim});
  std::vector<ScatterPiece<S>> pieces;
  pieces.reserve(groups.size());
  for (const auto& [patch, members] : groups) {
    std::vector<int> rows;
    std::vector<std::size_t> weight_idx;
    rows.reserve(members.size());
    for (const auto& [tok, slot] : members) {
      rows.push_back(tok);
      weight_idx.push_back(std::size_t(tok) * k + slot);
    }
    auto u_g = gather_rows(code, rows);
    auto a_row = gather_rows(params.gate_slope, {patch});
    auto b_row = gather_rows(params.gate_offset, {patch});
    auto phi = patch_feature(u_g, a_row, b_row);
    auto u_i = reshape(gather_rows(dec2d, {patch}), {d, cfg.code_dim});
    auto contrib = matmul_nt(phi, u_i);  // (M, d) = phi @ U_i^T
    for (std::size_t i = 0; i < contrib.numel(); ++i)
      if (!std::isfinite(static_cast<double>(contrib.at(i))))
        throw std::runtime_error("apn_forward: non-finite residual from patch " +
                                 std::to_string(patch));
    auto w_col = gather_elems(weights, weight_idx);
    pieces.push_back({mul_col(contrib, w_col), std::move(rows)});
  }
  res.delta = scatter_add_rows(n, d, pieces);

  Tensor<S> scaled;
  if (cfg.gamma_trainable) {
    scaled = mul_scalar(res.delta, params.gamma);
    if (gamma_warmup < 1.0) scaled = scale(scaled, static_cast<S>(gamma_warmup));
  } else {
    scaled = scale(res.delta, static_cast<S>(params.gamma.item() * gamma_warmup));
  }
  res.output = add(h2, scaled);
  res.decision.weights = weights;
  return res;
}

// Batch usage frequencies: how often each patch appears in active sets,
// normalized to sum to 1.
template <class S>
std::vector<double> usage_frequencies(const RoutingDecision<S>& dec) {
  if (dec.n_tokens == 0) throw std::runtime_error("usage_frequencies: empty batch");
  std::vector<double> q(dec.n_patches, 0.0);
  for (int idx : dec.indices) q[idx] += 1.0;
  const double total = static_cast<double>(dec.indices.size());
  for (double& v : q) v /= total;
  return q;
}

template <class S>
struct AuxLosses {
  Tensor<S> balance;  // sum_i (u_i - 1/K)^2, constant w.r.t. parameters
  Tensor<S> entropy;  // -H(mean routing weights); gradients flow through w
};

// Balance and entropy regularizers for one decision batch. Values are
// unweighted; the caller applies the config coefficients.
template <class S>
AuxLosses<S> auxiliary_losses(const RoutingDecision<S>& dec, const APNConfig& cfg) {
  if (dec.n_tokens == 0) throw std::runtime_error("auxiliary_losses: empty batch");
  auto q = usage_frequencies(dec);
  double bal = 0.0;
  const double uniform = 1.0 / cfg.patches;
  for (double v : q) bal += (v - uniform) * (v - uniform);

  // Mean full routing-weight vector: weights scattered back to K slots.
  auto w_flat = reshape(dec.weights, {dec.n_tokens * dec.active, 1});
  std::vector<ScatterPiece<S>> pieces{{w_flat, dec.indices}};
  auto w_bar = scale(scatter_add_rows(cfg.patches, 1, pieces),
                     static_cast<S>(1.0 / dec.n_tokens));
  auto neg_entropy = sum(mul(w_bar, log_shift(w_bar, static_cast<S>(1e-12))));

  return {Tensor<S>::scalar(static_cast<S>(bal)), neg_entropy};
}

// Project each decoder U_i back into the Frobenius ball of radius cap.
template <class S>
void apply_norm_cap(APNParams<S>& params, double cap) {
  if (cap <= 0.0) throw std::runtime_error("apply_norm_cap: cap must be > 0");
  const int k_patches = params.patch_count();
  const std::size_t block = params.decoders.numel() / k_patches;
  for (int i = 0; i < k_patches; ++i) {
    S* u = params.decoders.ptr() + std::size_t(i) * block;
    double n2 = 0.0;
    for (std::size_t j = 0; j < block; ++j) n2 += double(u[j]) * double(u[j]);
    const double norm = std::sqrt(n2);
    if (norm > cap) {
      const S f = static_cast<S>(cap / norm);
      for (std::size_t j = 0; j < block; ++j) u[j] *= f;
    }
  }
}

}  // namespace apn
