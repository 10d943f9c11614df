#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "apn/gradcheck.hpp"
#include "apn/layer.hpp"

using apn::APNConfig;
using apn::APNParams;
using apn::Tensor;

namespace {

APNConfig small_cfg(int patches, int active, int code_dim) {
  APNConfig cfg;
  cfg.patches = patches;
  cfg.active = active;
  cfg.code_dim = code_dim;
  cfg.temperature = 0.5;
  return cfg;
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Fully unrolled scalar version of the sublayer forward for one token:
// LN -> cosine routing -> top-k softmax -> code -> gated patches -> mixed
// residual. Independent of the tensor path.
std::vector<double> unrolled_forward(const std::vector<double>& h,
                                     const APNParams<double>& p,
                                     const APNConfig& cfg) {
  const int d = static_cast<int>(h.size());
  const int r = cfg.code_dim;
  // LN
  double mu = 0, var = 0;
  for (double v : h) mu += v;
  mu /= d;
  for (double v : h) var += (v - mu) * (v - mu);
  var /= d;
  std::vector<double> z(d);
  for (int j = 0; j < d; ++j)
    z[j] = p.ln_gain.at(j) * (h[j] - mu) / std::sqrt(var + 1e-5) + p.ln_bias.at(j);
  // cosine scores
  double zn = 0;
  for (double v : z) zn += v * v;
  zn = std::sqrt(zn);
  std::vector<double> s(cfg.patches);
  for (int i = 0; i < cfg.patches; ++i) {
    double pn = 0, dot = 0;
    for (int j = 0; j < d; ++j) pn += p.prototypes.at(i * d + j) * p.prototypes.at(i * d + j);
    pn = std::sqrt(pn);
    for (int j = 0; j < d; ++j) dot += (z[j] / zn) * (p.prototypes.at(i * d + j) / pn);
    s[i] = dot / cfg.temperature;
  }
  // top-k with lowest-index tie break
  std::vector<int> order(cfg.patches);
  for (int i = 0; i < cfg.patches; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return s[a] > s[b]; });
  order.resize(cfg.active);
  double zsum = 0;
  std::vector<double> w(cfg.active);
  for (int j = 0; j < cfg.active; ++j) zsum += std::exp(s[order[j]] - s[order[0]]);
  for (int j = 0; j < cfg.active; ++j) w[j] = std::exp(s[order[j]] - s[order[0]]) / zsum;
  // code
  std::vector<double> u(r, 0.0);
  for (int c = 0; c < r; ++c)
    for (int j = 0; j < d; ++j) u[c] += p.code_proj.at(j * r + c) * z[j];
  // mix
  std::vector<double> y(h);
  for (int j = 0; j < cfg.active; ++j) {
    const int i = order[j];
    for (int c = 0; c < r; ++c) {
      const double gate = sigmoid_scalar(p.gate_slope.at(i * r + c) * u[c] +
                                         p.gate_offset.at(i * r + c));
      const double phi = u[c] * gate;
      for (int row = 0; row < d; ++row)
        y[row] += p.gamma.item() * w[j] * p.decoders.at((i * d + row) * r + c) * phi;
    }
  }
  return y;
}

}  // namespace

TEST_CASE("route: perfect alignment routes to the matching prototype") {
  const int d = 4;
  auto cfg = small_cfg(5, 1, 2);
  apn::Rng rng(1);
  auto params = APNParams<double>::init(d, cfg, rng);
  // Orthogonal prototypes; z parallel to prototype 3.
  params.prototypes = Tensor<double>::zeros({5, d}, true);
  for (int i = 0; i < 4; ++i) params.prototypes.at(i * d + i) = 1.0;
  params.prototypes.at(4 * d + 0) = -1.0;
  auto z = Tensor<double>::from_values({1, d}, {0, 0, 0, 2.0});
  auto dec = apn::route(z, params, cfg);
  CHECK(dec.indices[0] == 3);
  CHECK(dec.weights.at(0) == 1.0);
  CHECK(dec.confidence[0] == doctest::Approx(1.0 / cfg.temperature).epsilon(1e-9));
}

TEST_CASE("route: identical prototypes tie-break to lowest indices") {
  const int d = 3;
  auto cfg = small_cfg(4, 2, 2);
  apn::Rng rng(2);
  auto params = APNParams<double>::init(d, cfg, rng);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < d; ++j) params.prototypes.at(i * d + j) = (j == 0) ? 1.0 : 0.0;
  auto z = Tensor<double>::from_values({1, d}, {1.0, 2.0, -0.5});
  auto dec = apn::route(z, params, cfg);
  CHECK(dec.indices[0] == 0);
  CHECK(dec.indices[1] == 1);
  CHECK(dec.weights.at(0) == 0.5);
  CHECK(dec.weights.at(1) == 0.5);
}

TEST_CASE("route matches a scalar normalize/exp oracle") {
  const int d = 4;
  auto cfg = small_cfg(3, 2, 2);
  apn::Rng rng(3);
  auto params = APNParams<double>::init(d, cfg, rng);
  auto z = Tensor<double>::from_values({1, d}, {0.3, -1.2, 0.8, 2.0});
  auto dec = apn::route(z, params, cfg);

  double zn = 0;
  for (int j = 0; j < d; ++j) zn += z.at(j) * z.at(j);
  zn = std::sqrt(zn);
  std::vector<double> s(3);
  for (int i = 0; i < 3; ++i) {
    double pn = 0, dot = 0;
    for (int j = 0; j < d; ++j)
      pn += params.prototypes.at(i * d + j) * params.prototypes.at(i * d + j);
    pn = std::sqrt(pn);
    for (int j = 0; j < d; ++j)
      dot += (z.at(j) / zn) * (params.prototypes.at(i * d + j) / pn);
    s[i] = dot / cfg.temperature;
  }
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(dec.raw_scores[i] - s[i]) < 1e-12);
  const int i0 = dec.indices[0], i1 = dec.indices[1];
  const double e0 = std::exp(s[i0]), e1 = std::exp(s[i1]);
  CHECK(std::abs(dec.weights.at(0) - e0 / (e0 + e1)) < 1e-12);
  CHECK(std::abs(dec.weights.at(1) - e1 / (e0 + e1)) < 1e-12);
}

TEST_CASE("route is exactly scale-invariant in z") {
  const int d = 6;
  auto cfg = small_cfg(8, 3, 2);
  apn::Rng rng(4);
  auto params = APNParams<double>::init(d, cfg, rng);
  auto z = Tensor<double>::randn({5, d}, rng);
  auto dec1 = apn::route(z, params, cfg);
  auto z_scaled = apn::scale(z, 7.25);
  auto dec2 = apn::route(z_scaled, params, cfg);
  CHECK(dec1.indices == dec2.indices);
  for (std::size_t i = 0; i < dec1.weights.numel(); ++i)
    CHECK(std::abs(dec1.weights.at(i) - dec2.weights.at(i)) < 1e-12);
}

TEST_CASE("routing weights stay on the simplex") {
  const int d = 8;
  auto cfg = small_cfg(16, 4, 3);
  apn::Rng rng(5);
  auto params = APNParams<double>::init(d, cfg, rng);
  auto z = Tensor<double>::randn({32, d}, rng);
  auto dec = apn::route(z, params, cfg);
  for (int t = 0; t < 32; ++t) {
    double s = 0;
    for (int j = 0; j < 4; ++j) {
      CHECK(dec.weights.at(t * 4 + j) >= 0.0);
      s += dec.weights.at(t * 4 + j);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
    // indices distinct per token
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        CHECK(dec.active_set(t)[a] != dec.active_set(t)[b]);
  }
}

TEST_CASE("encode: zero input, identity projection, matmul oracle") {
  apn::Rng rng(6);
  auto v = Tensor<double>::zeros({6, 2});
  for (int c = 0; c < 2; ++c) v.at(c * 2 + c) = 1.0;  // first-r columns of identity
  auto z0 = Tensor<double>::zeros({1, 6});
  auto u0 = apn::encode(z0, v);
  for (int c = 0; c < 2; ++c) CHECK(u0.at(c) == 0.0);

  auto z = Tensor<double>::from_values({1, 6}, {1, 2, 3, 4, 5, 6});
  auto u = apn::encode(z, v);
  CHECK(u.at(0) == 1.0);
  CHECK(u.at(1) == 2.0);

  auto vr = Tensor<double>::randn({6, 2}, rng);
  auto zr = Tensor<double>::randn({3, 6}, rng);
  auto ur = apn::encode(zr, vr);
  for (int t = 0; t < 3; ++t)
    for (int c = 0; c < 2; ++c) {
      double acc = 0;
      for (int j = 0; j < 6; ++j) acc += zr.at(t * 6 + j) * vr.at(j * 2 + c);
      CHECK(std::abs(ur.at(t * 2 + c) - acc) < 1e-12);
    }
}

TEST_CASE("patch_feature: zero code, neutral gate, scalar oracle") {
  auto a = Tensor<double>::from_values({1, 2}, {0.5, 1.0});
  auto b = Tensor<double>::from_values({1, 2}, {0.0, 1.0});

  auto u0 = Tensor<double>::zeros({3, 2});
  auto phi0 = apn::patch_feature(u0, a, b);
  for (std::size_t i = 0; i < phi0.numel(); ++i) CHECK(phi0.at(i) == 0.0);

  auto zero_gate = Tensor<double>::zeros({1, 2});
  auto u = Tensor<double>::from_values({1, 2}, {1.0, -2.0});
  auto phi_half = apn::patch_feature(u, zero_gate, zero_gate);
  CHECK(phi_half.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(phi_half.at(1) == doctest::Approx(-1.0).epsilon(1e-15));

  auto phi = apn::patch_feature(u, a, b);
  CHECK(std::abs(phi.at(0) - 1.0 * sigmoid_scalar(0.5 * 1.0 + 0.0)) < 1e-12);
  CHECK(std::abs(phi.at(1) - (-2.0) * sigmoid_scalar(1.0 * -2.0 + 1.0)) < 1e-12);

  // Scalar gating mode broadcasts one gate value over all coordinates.
  auto as = Tensor<double>::from_values({1, 1}, {2.0});
  auto bs = Tensor<double>::from_values({1, 1}, {-1.0});
  auto phis = apn::patch_feature(u, as, bs);
  CHECK(std::abs(phis.at(0) - 1.0 * sigmoid_scalar(2.0 * 1.0 - 1.0)) < 1e-12);
  CHECK(std::abs(phis.at(1) - (-2.0) * sigmoid_scalar(2.0 * -2.0 - 1.0)) < 1e-12);
}

TEST_CASE("apn_forward: zero decoders and zero gamma are the identity, bitwise") {
  const int d = 4;
  auto cfg = small_cfg(3, 2, 2);
  apn::Rng rng(7);
  auto params = APNParams<double>::init(d, cfg, rng);
  auto h = Tensor<double>::randn({6, d}, rng);

  auto res = apn::apn_forward(h, params, cfg, false);
  for (std::size_t i = 0; i < h.numel(); ++i) CHECK(res.output.at(i) == h.at(i));

  // Nonzero decoders but gamma = 0.
  for (auto& v : *params.decoders.data) v = 0.3;
  params.gamma.at(0) = 0.0;
  auto res2 = apn::apn_forward(h, params, cfg, false);
  for (std::size_t i = 0; i < h.numel(); ++i) CHECK(res2.output.at(i) == h.at(i));
}

TEST_CASE("apn_forward matches the unrolled scalar oracle") {
  const int d = 4;
  auto cfg = small_cfg(3, 2, 2);
  apn::Rng rng(8);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({3, d, 2}, rng, 0.7, true);
  params.gate_slope = Tensor<double>::randn({3, 2}, rng, 1.0, true);
  params.gate_offset = Tensor<double>::randn({3, 2}, rng, 0.5, true);
  params.gamma.at(0) = 0.8;

  auto h = Tensor<double>::randn({5, d}, rng);
  auto res = apn::apn_forward(h, params, cfg, false);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> row(h.ptr() + t * d, h.ptr() + (t + 1) * d);
    auto expect = unrolled_forward(row, params, cfg);
    for (int j = 0; j < d; ++j)
      CHECK(std::abs(res.output.at(t * d + j) - expect[j]) < 1e-12);
  }
}

TEST_CASE("span property: delta lies in the active decoders' column span") {
  const int d = 16;
  auto cfg = small_cfg(8, 3, 2);
  apn::Rng rng(9);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({8, d, 2}, rng, 1.0, true);
  auto h = Tensor<double>::randn({40, d}, rng);
  auto res = apn::apn_forward(h, params, cfg, false);

  for (int t = 0; t < 40; ++t) {
    // Orthonormal basis of [U_i1 ... U_ik] columns via Gram-Schmidt.
    std::vector<std::vector<double>> basis;
    for (int j = 0; j < cfg.active; ++j) {
      const int i = res.decision.active_set(t)[j];
      for (int c = 0; c < cfg.code_dim; ++c) {
        std::vector<double> col(d);
        for (int row = 0; row < d; ++row)
          col[row] = params.decoders.at((i * d + row) * cfg.code_dim + c);
        for (const auto& b : basis) {
          double dot = 0;
          for (int row = 0; row < d; ++row) dot += col[row] * b[row];
          for (int row = 0; row < d; ++row) col[row] -= dot * b[row];
        }
        double n = 0;
        for (double v : col) n += v * v;
        n = std::sqrt(n);
        if (n > 1e-10) {
          for (double& v : col) v /= n;
          basis.push_back(col);
        }
      }
    }
    std::vector<double> resid(res.delta.ptr() + t * d, res.delta.ptr() + (t + 1) * d);
    for (const auto& b : basis) {
      double dot = 0;
      for (int row = 0; row < d; ++row) dot += resid[row] * b[row];
      for (int row = 0; row < d; ++row) resid[row] -= dot * b[row];
    }
    double rn = 0;
    for (double v : resid) rn += v * v;
    CHECK(std::sqrt(rn) < 1e-8);
  }
}

TEST_CASE("patch dropout off at evaluation, renormalized when training") {
  const int d = 6;
  auto cfg = small_cfg(6, 3, 2);
  cfg.patch_dropout_p = 0.5;
  apn::Rng rng(10);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({6, d, 2}, rng, 0.5, true);
  auto h = Tensor<double>::randn({10, d}, rng);

  apn::Rng drop1(123), drop2(999);
  auto eval1 = apn::apn_forward(h, params, cfg, false, &drop1);
  auto eval2 = apn::apn_forward(h, params, cfg, false, &drop2);
  for (std::size_t i = 0; i < h.numel(); ++i)
    CHECK(eval1.output.at(i) == eval2.output.at(i));

  apn::Rng drop3(7);
  auto train = apn::apn_forward(h, params, cfg, true, &drop3);
  for (int t = 0; t < 10; ++t) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += train.decision.weights.at(t * 3 + j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("auxiliary losses: uniform usage, collapse, uniform weights") {
  APNConfig cfg = small_cfg(4, 1, 2);

  apn::RoutingDecision<double> uniform_dec;
  uniform_dec.n_tokens = 4;
  uniform_dec.n_patches = 4;
  uniform_dec.active = 1;
  uniform_dec.indices = {0, 1, 2, 3};
  uniform_dec.weights = Tensor<double>::full({4, 1}, 1.0);
  auto aux_u = apn::auxiliary_losses(uniform_dec, cfg);
  CHECK(aux_u.balance.item() == 0.0);
  // Uniform mean weights give the entropy minimum -ln K.
  CHECK(aux_u.entropy.item() ==
        doctest::Approx(-std::log(4.0)).epsilon(1e-9));

  apn::RoutingDecision<double> collapsed;
  collapsed.n_tokens = 4;
  collapsed.n_patches = 4;
  collapsed.active = 1;
  collapsed.indices = {2, 2, 2, 2};
  collapsed.weights = Tensor<double>::full({4, 1}, 1.0);
  auto aux_c = apn::auxiliary_losses(collapsed, cfg);
  // (1 - 1/4)^2 + 3 * (1/4)^2 = 0.75, by direct substitution.
  CHECK(aux_c.balance.item() == doctest::Approx(0.75).epsilon(1e-12));

  apn::RoutingDecision<double> empty;
  empty.n_patches = 4;
  CHECK_THROWS_AS(apn::auxiliary_losses(empty, cfg), std::runtime_error);
}

TEST_CASE("apply_norm_cap projects onto the Frobenius ball") {
  const int d = 5;
  auto cfg = small_cfg(4, 2, 3);
  apn::Rng rng(11);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({4, d, 3}, rng, 2.0, true);

  // Patch 0 scaled inside the ball: must be unchanged.
  const double kappa = 1.0;
  double n0 = 0;
  for (int j = 0; j < d * 3; ++j)
    n0 += params.decoders.at(j) * params.decoders.at(j);
  const double f = (kappa / 2.0) / std::sqrt(n0);
  for (int j = 0; j < d * 3; ++j) params.decoders.at(j) *= f;
  std::vector<double> before(params.decoders.ptr(), params.decoders.ptr() + d * 3);

  apn::apply_norm_cap(params, kappa);
  for (int j = 0; j < d * 3; ++j) CHECK(params.decoders.at(j) == before[j]);
  for (int i = 0; i < 4; ++i) {
    double n2 = 0;
    for (int j = 0; j < d * 3; ++j) {
      double v = params.decoders.at(i * d * 3 + j);
      n2 += v * v;
    }
    CHECK(std::sqrt(n2) <= kappa + 1e-12);
  }
  CHECK_THROWS_AS(apn::apply_norm_cap(params, 0.0), std::runtime_error);

  // Exact projection: 2*kappa times a unit-norm direction caps at kappa.
  auto params2 = APNParams<double>::init(d, cfg, rng);
  params2.decoders = Tensor<double>::randn({4, d, 3}, rng, 1.0, true);
  double n2 = 0;
  for (int j = 0; j < d * 3; ++j) n2 += params2.decoders.at(j) * params2.decoders.at(j);
  const double g = 2.0 * kappa / std::sqrt(n2);
  for (int j = 0; j < d * 3; ++j) params2.decoders.at(j) *= g;
  apn::apply_norm_cap(params2, kappa);
  double after = 0;
  for (int j = 0; j < d * 3; ++j) after += params2.decoders.at(j) * params2.decoders.at(j);
  CHECK(std::sqrt(after) == doctest::Approx(kappa).epsilon(1e-12));
}

TEST_CASE("gradient locality: inactive patches get exact zero gradients") {
  const int d = 6;
  auto cfg = small_cfg(5, 2, 2);
  apn::Rng rng(12);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({5, d, 2}, rng, 0.4, true);
  // Prototypes far apart; all tokens aligned with prototypes 0/1.
  params.prototypes = Tensor<double>::zeros({5, d}, true);
  for (int i = 0; i < 5; ++i) params.prototypes.at(i * d + i) = 1.0;
  auto h = Tensor<double>::zeros({4, d});
  for (int t = 0; t < 4; ++t) {
    h.at(t * d + 0) = 5.0 + t;
    h.at(t * d + 1) = 3.0;
    h.at(t * d + 2) = 0.1 * t;  // keep LN variance nonzero
  }

  apn::Tape tape;
  Tensor<double> loss;
  apn::RoutingDecision<double> dec;
  {
    apn::Recording rec(tape);
    auto res = apn::apn_forward(h, params, cfg, false);
    dec = res.decision;
    loss = apn::sum(apn::mul(res.output, res.output));
  }
  apn::backward(loss, tape);

  std::vector<bool> used(5, false);
  for (int idx : dec.indices) used[idx] = true;
  bool some_unused = false;
  for (int i = 0; i < 5; ++i) {
    if (used[i]) continue;
    some_unused = true;
    for (int j = 0; j < d * 2; ++j)
      CHECK((*params.decoders.grad)[i * d * 2 + j] == 0.0);
    for (int j = 0; j < 2; ++j) {
      CHECK((*params.gate_slope.grad)[i * 2 + j] == 0.0);
      CHECK((*params.gate_offset.grad)[i * 2 + j] == 0.0);
    }
  }
  CHECK(some_unused);
}

TEST_CASE("grad_check through the full sublayer") {
  const int d = 8;
  auto cfg = small_cfg(6, 2, 3);
  apn::Rng rng(13);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({6, d, 3}, rng, 0.3, true);
  auto h = Tensor<double>::randn({7, d}, rng);

  auto f = apn::make_loss_fn([=]() {
    auto res = apn::apn_forward(h, params, cfg, false);
    return apn::mean(apn::mul(res.output, res.output));
  });
  auto report = apn::grad_check(
      f,
      {{"P", params.prototypes},
       {"V", params.code_proj},
       {"U", params.decoders},
       {"a", params.gate_slope},
       {"b", params.gate_offset},
       {"ln_gain", params.ln_gain},
       {"ln_bias", params.ln_bias}},
      1e-5, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("trainable gamma receives gradient") {
  const int d = 4;
  auto cfg = small_cfg(3, 2, 2);
  cfg.gamma_trainable = true;
  apn::Rng rng(14);
  auto params = APNParams<double>::init(d, cfg, rng);
  params.decoders = Tensor<double>::randn({3, d, 2}, rng, 0.5, true);
  auto h = Tensor<double>::randn({4, d}, rng);
  auto f = apn::make_loss_fn([=]() {
    auto res = apn::apn_forward(h, params, cfg, false);
    return apn::mean(apn::mul(res.output, res.output));
  });
  CHECK(apn::grad_check(f, {{"gamma", params.gamma}}, 1e-6, 1e-6).passed);
}
