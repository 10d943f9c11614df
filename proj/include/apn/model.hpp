#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "apn/layer.hpp"
#include "apn/tensor.hpp"

namespace apn {

enum class FfnKind { Dense, Apn, None };  // None: sublayer deleted (diagnostics)

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int dim = 128;
  int vocab_size = 65;
  int context_len = 128;
  double dropout = 0.0;
  FfnKind ffn_kind = FfnKind::Dense;
  double ffn_ratio = 4.0;  // d_ff = ffn_ratio * dim
  APNConfig apn;
  double ln_eps = 1e-5;

  int ffn_hidden() const { return static_cast<int>(ffn_ratio * dim); }

  void validate() const {
    if (dim % n_heads != 0)
      throw std::runtime_error("ModelConfig: dim must be divisible by n_heads");
    if (context_len < 1) throw std::runtime_error("ModelConfig: context_len must be >= 1");
    if (vocab_size < 2) throw std::runtime_error("ModelConfig: vocab_size must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::runtime_error("ModelConfig: dropout must be in [0,1)");
    if (ffn_kind == FfnKind::Apn) apn.validate();
  }
};

template <class S>
struct DenseFfnParams {
  Tensor<S> ln_gain, ln_bias;  // (d)
  Tensor<S> w1;                // (d, d_ff)
  Tensor<S> w2;                // (d_ff, d)
};

template <class S>
struct BlockParams {
  Tensor<S> ln1_gain, ln1_bias;  // (d)
  Tensor<S> w_qkv;               // (d, 3d)
  Tensor<S> w_proj;              // (d, d)
  DenseFfnParams<S> dense;       // when ffn_kind == Dense
  APNParams<S> apn;              // when ffn_kind == Apn
};

enum class ParamGroup {
  Embedding,
  Attention,
  LayerNorm,
  DenseFfn,
  ApnShared,  // V and prototypes P
  ApnPatch,   // U, a, b (leading dim indexes patches)
  ApnLayerNorm,
  ApnGamma,
};

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S> tensor;
  ParamGroup group;
  bool decay = false;   // decoupled weight decay applies
  int patch_rows = 0;   // K when the leading dim indexes patches, else 0
  int layer = -1;       // block index, -1 for global parameters
};

// Full transformer state: pre-norm causal blocks with a pluggable
// positionwise sublayer; output head tied to the token embedding.
template <class S>
struct ModelState {
  ModelConfig cfg;
  Tensor<S> tok_emb;   // (V, d), also the output head (tied)
  Tensor<S> pos_emb;   // (ctx, d)
  std::vector<BlockParams<S>> blocks;
  Tensor<S> lnf_gain, lnf_bias;  // final layer norm
  long step = 0;

  static ModelState init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelState m;
    m.cfg = cfg;
    Rng rng(seed);
    const int d = cfg.dim;
    const S w_std = S(0.02);
    const S proj_std = static_cast<S>(0.02 / std::sqrt(2.0 * cfg.n_layers));
    m.tok_emb = Tensor<S>::randn({cfg.vocab_size, d}, rng, w_std, true);
    m.pos_emb = Tensor<S>::randn({cfg.context_len, d}, rng, w_std, true);
    m.blocks.resize(cfg.n_layers);
    for (auto& b : m.blocks) {
      b.ln1_gain = Tensor<S>::full({d}, S(1), true);
      b.ln1_bias = Tensor<S>::zeros({d}, true);
      b.w_qkv = Tensor<S>::randn({d, 3 * d}, rng, w_std, true);
      b.w_proj = Tensor<S>::randn({d, d}, rng, proj_std, true);
      if (cfg.ffn_kind == FfnKind::Dense) {
        b.dense.ln_gain = Tensor<S>::full({d}, S(1), true);
        b.dense.ln_bias = Tensor<S>::zeros({d}, true);
        b.dense.w1 = Tensor<S>::randn({d, cfg.ffn_hidden()}, rng, w_std, true);
        b.dense.w2 = Tensor<S>::randn({cfg.ffn_hidden(), d}, rng, proj_std, true);
      } else if (cfg.ffn_kind == FfnKind::Apn) {
        b.apn = APNParams<S>::init(d, cfg.apn, rng);
      }
    }
    m.lnf_gain = Tensor<S>::full({d}, S(1), true);
    m.lnf_bias = Tensor<S>::zeros({d}, true);
    return m;
  }

  std::vector<ParamRef<S>> parameters() const {
    std::vector<ParamRef<S>> out;
    out.push_back({"tok_emb", tok_emb, ParamGroup::Embedding, true, 0, -1});
    out.push_back({"pos_emb", pos_emb, ParamGroup::Embedding, true, 0, -1});
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& b = blocks[l];
      const std::string p = "block" + std::to_string(l) + ".";
      out.push_back({p + "ln1.gain", b.ln1_gain, ParamGroup::LayerNorm, false, 0, l});
      out.push_back({p + "ln1.bias", b.ln1_bias, ParamGroup::LayerNorm, false, 0, l});
      out.push_back({p + "attn.wqkv", b.w_qkv, ParamGroup::Attention, true, 0, l});
      out.push_back({p + "attn.wproj", b.w_proj, ParamGroup::Attention, true, 0, l});
      if (cfg.ffn_kind == FfnKind::Dense) {
        out.push_back({p + "ffn.ln.gain", b.dense.ln_gain, ParamGroup::LayerNorm, false, 0, l});
        out.push_back({p + "ffn.ln.bias", b.dense.ln_bias, ParamGroup::LayerNorm, false, 0, l});
        out.push_back({p + "ffn.w1", b.dense.w1, ParamGroup::DenseFfn, true, 0, l});
        out.push_back({p + "ffn.w2", b.dense.w2, ParamGroup::DenseFfn, true, 0, l});
      } else if (cfg.ffn_kind == FfnKind::Apn) {
        const int k_patches = cfg.apn.patches;
        out.push_back({p + "apn.P", b.apn.prototypes, ParamGroup::ApnShared, false, 0, l});
        out.push_back({p + "apn.V", b.apn.code_proj, ParamGroup::ApnShared, true, 0, l});
        out.push_back({p + "apn.U", b.apn.decoders, ParamGroup::ApnPatch, true, k_patches, l});
        out.push_back({p + "apn.a", b.apn.gate_slope, ParamGroup::ApnPatch, false, k_patches, l});
        out.push_back({p + "apn.b", b.apn.gate_offset, ParamGroup::ApnPatch, false, k_patches, l});
        out.push_back({p + "apn.ln.gain", b.apn.ln_gain, ParamGroup::ApnLayerNorm, false, 0, l});
        out.push_back({p + "apn.ln.bias", b.apn.ln_bias, ParamGroup::ApnLayerNorm, false, 0, l});
        if (cfg.apn.gamma_trainable)
          out.push_back({p + "apn.gamma", b.apn.gamma, ParamGroup::ApnGamma, false, 0, l});
      }
    }
    out.push_back({"lnf.gain", lnf_gain, ParamGroup::LayerNorm, false, 0, -1});
    out.push_back({"lnf.bias", lnf_bias, ParamGroup::LayerNorm, false, 0, -1});
    return out;
  }

  long param_count() const {
    long n = 0;
    for (const auto& p : parameters()) n += static_cast<long>(p.tensor.numel());
    return n;
  }
};

// Standard multi-head causal attention with scaled dot product.
template <class S>
Tensor<S> attention_forward(const Tensor<S>& x, const BlockParams<S>& block,
                            const ModelConfig& cfg, bool training, Rng& rng) {
  const int bsz = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (t > cfg.context_len)
    throw std::runtime_error("attention_forward: sequence length " + std::to_string(t) +
                             " exceeds context length " + std::to_string(cfg.context_len));
  const int h = cfg.n_heads, hd = d / cfg.n_heads;

  auto qkv = matmul(x, block.w_qkv);  // (B, T, 3d)
  auto split = [&](int off) {
    return permute_0213(reshape(slice_cols(qkv, off * d, d), {bsz, t, h, hd}));
  };
  auto q = split(0), k = split(1), v = split(2);  // (B, H, T, hd)

  auto att = scale(bmm_nt(q, k), static_cast<S>(1.0 / std::sqrt(double(hd))));
  auto probs = dropout(causal_softmax(att), cfg.dropout, rng, training);
  auto mixed = bmm(probs, v);  // (B, H, T, hd)
  auto merged = reshape(permute_0213(mixed), {bsz, t, d});
  return dropout(matmul(merged, block.w_proj), cfg.dropout, rng, training);
}

template <class S>
struct BlockForwardResult {
  Tensor<S> output;
  // APN monitoring handles (empty when the sublayer is not APN).
  RoutingDecision<S> decision;
  Tensor<S> delta;
  Tensor<S> z;
  Tensor<S> sublayer_input;  // h' entering the positionwise sublayer
};

// Pre-norm block: h' = h + Attn(LN(h)); y = h' + Sublayer(h') where the
// sublayer owns its input LN.
template <class S>
BlockForwardResult<S> block_forward(const Tensor<S>& h, const BlockParams<S>& block,
                                    const ModelConfig& cfg, bool training, Rng& rng,
                                    double gamma_warmup = 1.0) {
  const int bsz = h.dim(0), t = h.dim(1), d = h.dim(2);
  auto ln1 = layer_norm(h, block.ln1_gain, block.ln1_bias, static_cast<S>(cfg.ln_eps));
  auto h_mid = add(h, attention_forward(ln1, block, cfg, training, rng));

  BlockForwardResult<S> res;
  res.sublayer_input = h_mid;
  switch (cfg.ffn_kind) {
    case FfnKind::Dense: {
      auto ln2 = layer_norm(h_mid, block.dense.ln_gain, block.dense.ln_bias,
                            static_cast<S>(cfg.ln_eps));
      auto hidden = gelu(matmul(ln2, block.dense.w1));
      auto ffn = dropout(matmul(hidden, block.dense.w2), cfg.dropout, rng, training);
      res.output = add(h_mid, ffn);
      break;
    }
    case FfnKind::Apn: {
      auto flat = reshape(h_mid, {bsz * t, d});
      auto apn_res = apn_forward(flat, block.apn, cfg.apn, training, &rng, gamma_warmup);
      res.output = reshape(apn_res.output, {bsz, t, d});
      res.decision = std::move(apn_res.decision);
      res.delta = apn_res.delta;
      res.z = apn_res.z;
      break;
    }
    case FfnKind::None:
      res.output = h_mid;
      break;
  }
  return res;
}

template <class S>
struct LmForwardResult {
  Tensor<S> loss;           // total: cross entropy + weighted regularizers
  Tensor<S> logits;         // (B*T, V)
  double ce = 0.0;          // cross-entropy component
  double balance = 0.0;     // summed raw balance loss over APN layers
  double neg_entropy = 0.0; // summed raw entropy loss over APN layers
  std::vector<S> per_token_loss;
  std::vector<RoutingDecision<S>> decisions;  // one per APN layer
  std::vector<Tensor<S>> deltas;
  std::vector<Tensor<S>> zs;
  std::vector<Tensor<S>> sublayer_inputs;
};

// Next-token cross entropy over all positions, plus the APN regularizers
// when their weights are nonzero.
template <class S>
LmForwardResult<S> lm_loss(const ModelState<S>& m, const std::vector<int>& inputs,
                           const std::vector<int>& targets, int bsz, int t,
                           bool training, Rng& rng, double gamma_warmup = 1.0) {
  if (inputs.size() != std::size_t(bsz) * t || targets.size() != inputs.size())
    throw std::runtime_error("lm_loss: batch shape mismatch");
  const int d = m.cfg.dim;
  for (int id : inputs)
    if (id < 0 || id >= m.cfg.vocab_size)
      throw std::runtime_error("lm_loss: token " + std::to_string(id) + " out of vocab");

  std::vector<int> pos_ids(t);
  for (int i = 0; i < t; ++i) pos_ids[i] = i;
  auto tok = reshape(gather_rows(m.tok_emb, inputs), {bsz, t, d});
  auto pos = gather_rows(m.pos_emb, pos_ids);
  auto x = dropout(add_bc(tok, pos), m.cfg.dropout, rng, training);

  LmForwardResult<S> res;
  for (const auto& block : m.blocks) {
    auto br = block_forward(x, block, m.cfg, training, rng, gamma_warmup);
    x = br.output;
    if (m.cfg.ffn_kind == FfnKind::Apn) {
      res.decisions.push_back(std::move(br.decision));
      res.deltas.push_back(br.delta);
      res.zs.push_back(br.z);
      res.sublayer_inputs.push_back(br.sublayer_input);
    }
  }
  auto final_ln = layer_norm(x, m.lnf_gain, m.lnf_bias, static_cast<S>(m.cfg.ln_eps));
  res.logits = matmul_nt(reshape(final_ln, {bsz * t, d}), m.tok_emb);
  auto ce = cross_entropy(res.logits, targets, &res.per_token_loss);
  res.ce = static_cast<double>(ce.item());

  res.loss = ce;
  for (const auto& dec : res.decisions) {
    auto aux = auxiliary_losses(dec, m.cfg.apn);
    res.balance += static_cast<double>(aux.balance.item());
    res.neg_entropy += static_cast<double>(aux.entropy.item());
    if (m.cfg.apn.balance_weight > 0.0)
      res.loss = add(res.loss, scale(aux.balance, static_cast<S>(m.cfg.apn.balance_weight)));
    if (m.cfg.apn.entropy_weight > 0.0)
      res.loss = add(res.loss, scale(aux.entropy, static_cast<S>(m.cfg.apn.entropy_weight)));
  }
  return res;
}

// Per-sublayer learnable parameter counts (LN affine 2d reported separately
// as part of the block's norm parameters).
inline long dense_sublayer_param_count(const ModelConfig& cfg) {
  return 2L * cfg.dim * cfg.ffn_hidden();
}
inline long sublayer_param_count(const ModelConfig& cfg) {
  switch (cfg.ffn_kind) {
    case FfnKind::Dense: return dense_sublayer_param_count(cfg);
    case FfnKind::Apn: return apn_param_count(cfg.dim, cfg.apn);
    case FfnKind::None: return 0;
  }
  return 0;
}

// Smoke-test sampler: temperature sampling from the model's next-token
// distribution, prompt continued for n_new tokens.
template <class S>
std::vector<int> generate(const ModelState<S>& m, std::vector<int> prompt,
                          int n_new, double temperature, Rng& rng) {
  if (prompt.empty()) throw std::runtime_error("generate: empty prompt");
  NoGrad ng;
  Rng dummy(0);
  for (int i = 0; i < n_new; ++i) {
    const int t = std::min<int>(static_cast<int>(prompt.size()), m.cfg.context_len);
    std::vector<int> window(prompt.end() - t, prompt.end());
    std::vector<int> dummy_targets(t, 0);
    auto res = lm_loss(m, window, dummy_targets, 1, t, false, dummy);
    const int v = m.cfg.vocab_size;
    std::vector<double> probs(v);
    double mx = -1e30;
    for (int j = 0; j < v; ++j)
      mx = std::max(mx, static_cast<double>(res.logits.at(std::size_t(t - 1) * v + j)));
    double z = 0;
    for (int j = 0; j < v; ++j) {
      probs[j] = std::exp((static_cast<double>(res.logits.at(std::size_t(t - 1) * v + j)) - mx) /
                          std::max(temperature, 1e-6));
      z += probs[j];
    }
    double pick = rng.uniform() * z, acc = 0;
    int chosen = v - 1;
    for (int j = 0; j < v; ++j) {
      acc += probs[j];
      if (pick <= acc) { chosen = j; break; }
    }
    prompt.push_back(chosen);
  }
  return prompt;
}

}  // namespace apn
