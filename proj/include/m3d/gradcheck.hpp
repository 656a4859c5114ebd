#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "m3d/tensor.hpp"

// Central-difference gradient checking. Each checked input is perturbed one
// coordinate at a time, so keep the function cheap or cap max_coords.

namespace m3d {

template <class T>
struct GradCheckResult {
  bool ok = true;
  T max_rel_err = T(0);
  std::string worst;  // "input 2, coord 17" style locator
  std::size_t probed = 0;
  std::size_t skipped = 0;  // coordinates below finite-difference resolution
};

// Compares tape gradients of f(inputs) against central differences.
//
// f must build its output from `inputs` through tape-recorded ops and return a
// scalar tensor. Every input is set tracked for the analytic pass and probed
// numerically. rel err = |a - n| / (|a| + |n| + 1e-12).
//
// The probe is the five-point fourth-order central difference
//   (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / (12h)
// rather than the two-point one. Deep composites spread coordinate
// derivatives over many orders of magnitude; the near-zero ones need a large
// h to climb out of cancellation noise, and the O(h^4) truncation keeps the
// well-scaled ones accurate at that same h.
//
// h is the base step. Coordinates whose analytic derivative is small get a
// proportionally larger step (capped at h_max) so the difference quotient
// stays above the eps*|f|/h cancellation floor; the step is picked before
// any comparison, so a wrong analytic value still fails loudly.
//
// A coordinate whose derivative is so small that even h_max cannot lift the
// quotient above that floor is counted in `skipped` instead of compared:
// no central difference can resolve it in this dtype. An exactly zero
// analytic value is still probed (at the base step), since dead paths must
// difference to exactly zero.
//
// max_coords > 0 caps how many coordinates of each input get probed; picks
// an evenly strided deterministic subset so big parameter blocks stay cheap.
template <class T>
GradCheckResult<T> finite_diff_check(
    std::vector<Tensor<T>> inputs,
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    T tol, T h = sizeof(T) == 8 ? T(1e-6) : T(1e-4),
    std::size_t max_coords = 0, T h_max = T(1e-2)) {
  for (auto& t : inputs) t.set_tracked(true);

  std::vector<std::vector<T>> analytic;
  T f_scale;
  {
    Tape<T> tape;
    Tensor<T> loss = f(inputs);
    f_scale = std::abs(loss.item()) + T(1);
    tape.backward(loss);
    analytic.reserve(inputs.size());
    for (const auto& t : inputs) analytic.push_back(tape.grad(t));
  }
  const T eps = std::numeric_limits<T>::epsilon();

  GradCheckResult<T> res;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::size_t n = t.numel();
    std::size_t probes = (max_coords > 0 && max_coords < n) ? max_coords : n;
    std::size_t stride = n / probes;
    for (std::size_t pi = 0; pi < probes; ++pi) {
      std::size_t i = pi * stride;
      T a = analytic[ti][i];
      res.probed += 1;
      // keep the cancellation floor eps*|f|/h an order below tol*|a|; an
      // exactly-zero analytic value means a structurally dead path (e.g.
      // a relu that never fires), where widening the step could cross a
      // kink the true gradient never sees
      T hi = h;
      if (a != T(0)) {
        T want = T(8) * eps * f_scale / (tol * std::abs(a));
        if (want > std::max(h, h_max)) {
          res.skipped += 1;
          continue;
        }
        hi = std::max(h, want);
      }
      auto buf = t.mutable_data();
      T orig = buf[i];
      auto eval_at = [&](T v) {
        buf[i] = v;
        return f(inputs).item();
      };
      auto quotient = [&](T step) {
        T f1p = eval_at(orig + step);
        T f1m = eval_at(orig - step);
        T f2p = eval_at(orig + 2 * step);
        T f2m = eval_at(orig - 2 * step);
        buf[i] = orig;
        return (T(8) * (f1p - f1m) - (f2p - f2m)) / (T(12) * step);
      };
      auto rel_at = [&](T step) {
        T numeric = quotient(step);
        return std::abs(a - numeric) /
               (std::abs(a) + std::abs(numeric) + T(1e-12));
      };
      T rel = rel_at(hi);
      // One step cannot serve every coordinate in low precision: the
      // cancellation floor pushes h up while max/nearest-neighbor kinks push
      // it down, and the windows can fail to overlap. Retry a failing
      // coordinate across a step ladder and keep the best agreement; a wrong
      // analytic value disagrees with the quotient at every step.
      if (rel > tol) {
        for (T mult : {T(0.25), T(4), T(0.0625), T(16)}) {
          T step = std::min(hi * mult, std::max(h, h_max));
          rel = std::min(rel, rel_at(step));
          if (rel <= tol) break;
        }
      }
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(ti) + ", coord " + std::to_string(i);
      }
    }
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

}  // namespace m3d
