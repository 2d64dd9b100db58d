#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "canet/core/autograd.hpp"
#include "canet/core/rng.hpp"

namespace canet {

struct GradCheckOptions {
  double eps = 1e-3;
  // Coordinates probed per parameter tensor; 0 probes every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // A probe whose +eps or -eps evaluation takes a different branch of a
  // kinked op (relu, max) than the base point measures a secant across the
  // kink rather than the derivative. Such coordinates are replaced by fresh
  // draws (sampled mode) or skipped (exhaustive mode) and counted.
  bool skip_branch_crossings = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares the tape gradient of `loss_fn` against central differences.
/// `loss_fn` must rebuild the whole computation on the tape it is handed and
/// be deterministic (dropout masks re-seeded on every call).
inline GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&)>& loss_fn,
                                  const std::vector<Var<double>>& params, const GradCheckOptions& opt = {}) {
  for (const auto& p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }
  struct Probe {
    double loss;
    std::uint64_t branches;
  };
  auto eval = [&] {
    BranchTrace trace;
    BranchTraceScope scope(trace);
    Tape<double> tape(false);
    const double v = loss_fn(tape)->value[0];
    return Probe{v, trace.hash()};
  };
  const std::uint64_t base_branches = eval().branches;

  GradCheckResult result;
  Rng pick(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = *params[pi];
    const std::size_t n = p.value.size();
    const bool exhaustive = opt.max_coords_per_param == 0 || opt.max_coords_per_param >= n;
    const std::size_t want = exhaustive ? n : opt.max_coords_per_param;
    const std::size_t max_draws = exhaustive ? n : 4 * want;
    std::size_t accepted = 0;
    for (std::size_t draw = 0; draw < max_draws && accepted < want; ++draw) {
      const std::size_t i = exhaustive ? draw : pick.below(n);
      const double orig = p.value[i];
      p.value[i] = orig + opt.eps;
      const Probe fp = eval();
      p.value[i] = orig - opt.eps;
      const Probe fm = eval();
      p.value[i] = orig;
      if (opt.skip_branch_crossings && (fp.branches != base_branches || fm.branches != base_branches)) {
        ++result.coords_skipped;
        continue;
      }
      ++accepted;
      const double numeric = (fp.loss - fm.loss) / (2.0 * opt.eps);
      const double analytic = p.grad.empty() ? 0.0 : p.grad[i];
      const double err = relative_error(analytic, numeric);
      ++result.coords_checked;
      if (result.coords_checked == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace canet
