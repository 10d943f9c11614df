#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "apn/gradcheck.hpp"
#include "apn/model.hpp"

using apn::FfnKind;
using apn::ModelConfig;
using apn::ModelState;
using apn::Rng;
using apn::Tensor;

namespace {

ModelConfig tiny_cfg(FfnKind kind) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.dim = 8;
  cfg.vocab_size = 11;
  cfg.context_len = 5;
  cfg.dropout = 0.0;
  cfg.ffn_kind = kind;
  cfg.apn.patches = 6;
  cfg.apn.active = 2;
  cfg.apn.code_dim = 3;
  return cfg;
}

// Independent scalar reimplementation of multi-head causal attention with
// triple loops, no shared code with the tensor path.
std::vector<double> attention_oracle(const std::vector<double>& x, int bsz, int t, int d,
                                     int heads, const Tensor<double>& wqkv,
                                     const Tensor<double>& wproj) {
  const int hd = d / heads;
  std::vector<double> qkv(std::size_t(bsz) * t * 3 * d, 0.0);
  for (int b = 0; b < bsz; ++b)
    for (int i = 0; i < t; ++i)
      for (int c = 0; c < 3 * d; ++c) {
        double acc = 0;
        for (int j = 0; j < d; ++j)
          acc += x[(std::size_t(b) * t + i) * d + j] * wqkv.at(std::size_t(j) * 3 * d + c);
        qkv[(std::size_t(b) * t + i) * 3 * d + c] = acc;
      }
  std::vector<double> mixed(std::size_t(bsz) * t * d, 0.0);
  for (int b = 0; b < bsz; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < t; ++i) {
        std::vector<double> score(i + 1);
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) {
          double dot = 0;
          for (int c = 0; c < hd; ++c)
            dot += qkv[(std::size_t(b) * t + i) * 3 * d + h * hd + c] *
                   qkv[(std::size_t(b) * t + j) * 3 * d + d + h * hd + c];
          score[j] = dot / std::sqrt(double(hd));
          mx = std::max(mx, score[j]);
        }
        double z = 0;
        for (int j = 0; j <= i; ++j) z += std::exp(score[j] - mx);
        for (int j = 0; j <= i; ++j) {
          const double w = std::exp(score[j] - mx) / z;
          for (int c = 0; c < hd; ++c)
            mixed[(std::size_t(b) * t + i) * d + h * hd + c] +=
                w * qkv[(std::size_t(b) * t + j) * 3 * d + 2 * d + h * hd + c];
        }
      }
  std::vector<double> out(std::size_t(bsz) * t * d, 0.0);
  for (int b = 0; b < bsz; ++b)
    for (int i = 0; i < t; ++i)
      for (int c = 0; c < d; ++c) {
        double acc = 0;
        for (int j = 0; j < d; ++j)
          acc += mixed[(std::size_t(b) * t + i) * d + j] * wproj.at(std::size_t(j) * d + c);
        out[(std::size_t(b) * t + i) * d + c] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("attention matches a scalar oracle") {
  const int bsz = 2, t = 4, d = 8, heads = 2;
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  cfg.n_heads = heads;
  Rng rng(11);
  auto m = ModelState<double>::init(cfg, 11);
  auto x = Tensor<double>::randn({bsz, t, d}, rng);

  Rng drop(0);
  auto y = apn::attention_forward(x, m.blocks[0], cfg, false, drop);
  std::vector<double> xv(x.ptr(), x.ptr() + x.numel());
  auto expect = attention_oracle(xv, bsz, t, d, heads, m.blocks[0].w_qkv, m.blocks[0].w_proj);

  REQUIRE(y.numel() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(y.at(i) == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("attention rejects sequences longer than the context") {
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  auto m = ModelState<double>::init(cfg, 1);
  Rng rng(2), drop(0);
  auto x = Tensor<double>::randn({1, cfg.context_len + 1, cfg.dim}, rng);
  CHECK_THROWS_AS(apn::attention_forward(x, m.blocks[0], cfg, false, drop),
                  std::runtime_error);
}

TEST_CASE("attention over identical tokens reproduces the shared value row") {
  // When every position holds the same vector, the attention average is that
  // value vector regardless of the weights, so output = x wqkv_v wproj.
  const int t = 5, d = 8;
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  auto m = ModelState<double>::init(cfg, 3);
  Rng rng(4), drop(0);
  auto row = Tensor<double>::randn({d}, rng);
  auto x = Tensor<double>::zeros({1, t, d});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) x.at(std::size_t(i) * d + j) = row.at(j);

  auto y = apn::attention_forward(x, m.blocks[0], cfg, false, drop);
  for (int i = 1; i < t; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(y.at(std::size_t(i) * d + j) == doctest::Approx(y.at(j)).epsilon(1e-10));
}

TEST_CASE("lm_loss with zero embeddings gives ln(vocab)") {
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  auto m = ModelState<double>::init(cfg, 7);
  // Zero token embeddings: with the tied head, logits are exactly zero for
  // any input, so cross entropy is uniform.
  std::fill(m.tok_emb.data->begin(), m.tok_emb.data->end(), 0.0);
  std::vector<int> inputs = {1, 2, 3, 4, 0, 5, 6, 7, 8, 9};
  std::vector<int> targets = {2, 3, 4, 0, 5, 6, 7, 8, 9, 10};
  Rng drop(0);
  auto res = apn::lm_loss(m, inputs, targets, 2, 5, false, drop);
  CHECK(res.ce == doctest::Approx(std::log(11.0)).epsilon(1e-12));
}

TEST_CASE("lm_loss rejects malformed batches") {
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  auto m = ModelState<double>::init(cfg, 7);
  Rng drop(0);
  std::vector<int> ok(10, 1);
  std::vector<int> bad_vocab(10, 1);
  bad_vocab[3] = cfg.vocab_size;
  CHECK_THROWS_AS(apn::lm_loss(m, ok, std::vector<int>(9, 1), 2, 5, false, drop),
                  std::runtime_error);
  CHECK_THROWS_AS(apn::lm_loss(m, bad_vocab, ok, 2, 5, false, drop), std::runtime_error);
}

TEST_CASE("causality: a later token cannot affect earlier predictions") {
  ModelConfig cfg = tiny_cfg(FfnKind::Apn);
  auto m = ModelState<float>::init(cfg, 19);
  Rng rng(5);
  // Disturb the decoders so APN layers actually do something.
  for (auto& v : *m.blocks[0].apn.decoders.data) v = static_cast<float>(rng.normal()) * 0.1f;

  std::vector<int> targets = {1, 1, 1, 1, 1};
  std::vector<int> a = {3, 1, 4, 1, 5};
  std::vector<int> b = {3, 1, 4, 9, 2};  // differs only at positions 3 and 4
  Rng d1(0), d2(0);
  auto ra = apn::lm_loss(m, a, targets, 1, 5, false, d1);
  auto rb = apn::lm_loss(m, b, targets, 1, 5, false, d2);
  const int v = cfg.vocab_size;
  for (int pos = 0; pos < 3; ++pos)
    for (int j = 0; j < v; ++j)
      CHECK(ra.logits.at(std::size_t(pos) * v + j) ==
            doctest::Approx(rb.logits.at(std::size_t(pos) * v + j)).epsilon(1e-12));
  // And the perturbed tail must change something.
  double diff = 0;
  for (int j = 0; j < v; ++j)
    diff = std::max(diff, std::abs(double(ra.logits.at(std::size_t(4) * v + j)) -
                                   double(rb.logits.at(std::size_t(4) * v + j))));
  CHECK(diff > 1e-6);
}

TEST_CASE("zero decoders make the APN model match a sublayer-deleted model") {
  ModelConfig apn_cfg = tiny_cfg(FfnKind::Apn);
  auto m = ModelState<double>::init(apn_cfg, 23);  // decoders start at zero

  ModelConfig none_cfg = apn_cfg;
  none_cfg.ffn_kind = FfnKind::None;
  auto stripped = ModelState<double>::init(none_cfg, 23);
  stripped.tok_emb = m.tok_emb;
  stripped.pos_emb = m.pos_emb;
  stripped.lnf_gain = m.lnf_gain;
  stripped.lnf_bias = m.lnf_bias;
  for (int l = 0; l < apn_cfg.n_layers; ++l) {
    stripped.blocks[l].ln1_gain = m.blocks[l].ln1_gain;
    stripped.blocks[l].ln1_bias = m.blocks[l].ln1_bias;
    stripped.blocks[l].w_qkv = m.blocks[l].w_qkv;
    stripped.blocks[l].w_proj = m.blocks[l].w_proj;
  }

  std::vector<int> inputs = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> targets = {2, 3, 4, 5, 6, 7, 8, 9, 10, 0};
  Rng d1(0), d2(0);
  auto ra = apn::lm_loss(m, inputs, targets, 2, 5, false, d1);
  auto rb = apn::lm_loss(stripped, inputs, targets, 2, 5, false, d2);
  CHECK(std::abs(ra.ce - rb.ce) < 1e-10);
}

TEST_CASE("parameter registry covers every tensor with sane metadata") {
  ModelConfig cfg = tiny_cfg(FfnKind::Apn);
  cfg.n_layers = 2;
  cfg.apn.gamma_trainable = true;
  auto m = ModelState<double>::init(cfg, 31);
  auto params = m.parameters();

  std::vector<std::string> names;
  long total = 0;
  for (const auto& p : params) {
    names.push_back(p.name);
    total += static_cast<long>(p.tensor.numel());
    CHECK(p.tensor.requires_grad);
    if (p.group == apn::ParamGroup::ApnPatch) {
      CHECK(p.patch_rows == cfg.apn.patches);
      CHECK(p.tensor.dim(0) == cfg.apn.patches);
    } else {
      CHECK(p.patch_rows == 0);
    }
  }
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());

  // Closed-form count: embeddings + per block (attn 4d^2, two LN pairs,
  // APN sublayer, gamma) + final LN. The head is tied, so it adds nothing.
  const long d = cfg.dim;
  long expect = cfg.vocab_size * d + cfg.context_len * d + 2 * d;
  expect += cfg.n_layers * (4 * d * d + 2 * d + 2 * d +
                            apn::apn_param_count(cfg.dim, cfg.apn) + 1);
  CHECK(total == expect);
  CHECK(m.param_count() == expect);
}

TEST_CASE("dense and apn sublayer parameter counts follow the formulas") {
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  cfg.dim = 384;
  cfg.ffn_ratio = 4.0;
  CHECK(apn::sublayer_param_count(cfg) == 2L * 384 * 1536);
  cfg.ffn_kind = FfnKind::Apn;
  cfg.apn.patches = 256;
  cfg.apn.active = 4;
  cfg.apn.code_dim = 32;
  // K d + d r + K d r + 2 K r
  CHECK(apn::sublayer_param_count(cfg) ==
        256L * 384 + 384L * 32 + 256L * 384 * 32 + 2L * 256 * 32);
}

TEST_CASE("full model gradient check, APN variant") {
  ModelConfig cfg = tiny_cfg(FfnKind::Apn);
  cfg.apn.entropy_weight = 0.01;
  auto m = ModelState<double>::init(cfg, 41);
  Rng rng(42);
  for (auto& v : *m.blocks[0].apn.decoders.data) v = rng.normal() * 0.1;

  std::vector<int> inputs = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> targets = {2, 3, 4, 5, 6, 7, 8, 9, 10, 0};
  auto fn = apn::make_loss_fn([&]() {
    Rng drop(0);
    return apn::lm_loss(m, inputs, targets, 2, 5, false, drop).loss;
  });
  std::vector<apn::NamedParam<double>> named;
  for (const auto& p : m.parameters()) named.push_back({p.name, p.tensor});
  Rng coords(7);
  auto report = apn::grad_check(fn, named, 1e-5, 1e-4, 12, &coords);
  INFO(report.worst.param << "[" << report.worst.coord << "] analytic "
       << report.worst.analytic << " numeric " << report.worst.numeric);
  CHECK(report.passed);
}

TEST_CASE("full model gradient check, dense variant with dropout off") {
  ModelConfig cfg = tiny_cfg(FfnKind::Dense);
  auto m = ModelState<double>::init(cfg, 43);
  std::vector<int> inputs = {5, 4, 3, 2, 1};
  std::vector<int> targets = {4, 3, 2, 1, 0};
  auto fn = apn::make_loss_fn([&]() {
    Rng drop(0);
    return apn::lm_loss(m, inputs, targets, 1, 5, false, drop).loss;
  });
  std::vector<apn::NamedParam<double>> named;
  for (const auto& p : m.parameters()) named.push_back({p.name, p.tensor});
  Rng coords(9);
  auto report = apn::grad_check(fn, named, 1e-5, 1e-4, 12, &coords);
  INFO(report.worst.param << "[" << report.worst.coord << "] analytic "
       << report.worst.analytic << " numeric " << report.worst.numeric);
  CHECK(report.passed);
}

TEST_CASE("generate extends the prompt with in-vocab tokens, deterministically") {
  ModelConfig cfg = tiny_cfg(FfnKind::Apn);
  auto m = ModelState<float>::init(cfg, 51);
  Rng g1(123), g2(123);
  auto s1 = apn::generate(m, {1, 2, 3}, 8, 0.8, g1);
  auto s2 = apn::generate(m, {1, 2, 3}, 8, 0.8, g2);
  REQUIRE(s1.size() == 11);
  CHECK(s1 == s2);
  for (int tok : s1) {
    CHECK(tok >= 0);
    CHECK(tok < cfg.vocab_size);
  }
  CHECK_THROWS_AS(apn::generate(m, {}, 3, 1.0, g1), std::runtime_error);
}
