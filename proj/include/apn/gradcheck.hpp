#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "apn/tensor.hpp"

namespace apn {

template <class S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

struct GradCheckEntry {
  std::string param;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
  GradCheckEntry worst;
};

// Central finite-difference check of reverse-mode gradients.
//
// f must be a deterministic scalar function of the given parameters
// (dropout disabled, no rng consumption): two identical forward passes are
// required to agree bitwise, otherwise the harness refuses to proceed.
// Gradients are checked at 64-bit; use coords_per_param <= 0 to check every
// coordinate.
template <class F>
GradCheckReport grad_check(F&& f, std::vector<NamedParam<double>> params,
                           double step, double tol,
                           int coords_per_param = -1, Rng* coord_rng = nullptr) {
  const double f0 = f();
  if (f() != f0)
    throw std::runtime_error(
        "grad_check: non-determinism detected (two identical forward passes disagree)");

  for (auto& p : params) {
    p.tensor.ensure_grad();
    p.tensor.zero_grad();
  }
  Tape tape;
  Tensor<double> loss;
  {
    Recording rec(tape);
    loss = f.loss();
  }
  backward(loss, tape);

  GradCheckReport report;
  for (auto& p : params) {
    const std::size_t n = p.tensor.numel();
    std::vector<std::size_t> coords;
    if (coords_per_param <= 0 || static_cast<std::size_t>(coords_per_param) >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < coords_per_param; ++i)
        coords.push_back(coord_rng ? static_cast<std::size_t>(
                                         coord_rng->uniform_int(static_cast<int>(n)))
                                   : (i * n) / coords_per_param);
    }
    for (std::size_t c : coords) {
      const double saved = p.tensor.at(c);
      p.tensor.at(c) = saved + step;
      const double fp = f();
      p.tensor.at(c) = saved - step;
      const double fm = f();
      p.tensor.at(c) = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = (*p.tensor.grad)[c];
      // The absolute floor keeps near-zero gradients from amplifying
      // finite-difference roundoff (~1e-10 at 64-bit) into spurious failures.
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {p.name, c, analytic, numeric, rel};
      }
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

// Adapter turning a loss-building lambda into the callable grad_check wants:
// operator() evaluates the scalar without taping, loss() builds the taped graph.
template <class Fn>
struct LossFn {
  Fn build;
  double operator()() const {
    NoGrad ng;
    return build().item();
  }
  Tensor<double> loss() const { return build(); }
};
template <class Fn>
LossFn<Fn> make_loss_fn(Fn fn) {
  return LossFn<Fn>{std::move(fn)};
}

}  // namespace apn
