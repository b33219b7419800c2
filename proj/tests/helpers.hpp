#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "chainflow/rng.hpp"
#include "chainflow/tensor.hpp"

namespace testutil {

using chainflow::Array;
using chainflow::ParamStore;
using chainflow::RngStream;
using chainflow::Tape;

inline bool close(double a, double b, double atol = 1e-9) {
  return std::abs(a - b) <= atol;
}

inline bool rel_close(double a, double b, double rtol, double atol = 1e-8) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

// Central finite-difference gradient check. `build` must construct the full
// forward pass from the current store values and return the scalar loss
// node. Every parameter coordinate (or a sampled subset when max_coords is
// set) is perturbed by +/- eps.
struct GradCheckResult {
  bool ok = true;
  std::string detail;
  double worst_rel = 0.0;
};

inline GradCheckResult gradcheck(
    ParamStore& ps, const std::function<Tape::Id(Tape&)>& build, double eps = 1e-4,
    double rtol = 1e-3, int max_coords_per_param = 0, std::uint64_t sample_seed = 1) {
  GradCheckResult res;
  ps.zero_grads();
  {
    Tape tape;
    Tape::Id loss = build(tape);
    tape.backward(loss);
  }
  RngStream pick(sample_seed);
  for (const auto& name : ps.names()) {
    auto& entry = ps.entry(name);
    std::vector<std::size_t> coords;
    const std::size_t n = entry.value.data.size();
    if (max_coords_per_param > 0 && n > static_cast<std::size_t>(max_coords_per_param)) {
      for (int k = 0; k < max_coords_per_param; ++k) {
        coords.push_back(static_cast<std::size_t>(pick.uniform_int(n)));
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    }
    for (std::size_t i : coords) {
      const double saved = entry.value.data[i];
      entry.value.data[i] = saved + eps;
      double up, down;
      {
        Tape t;
        up = t.scalar(build(t));
      }
      entry.value.data[i] = saved - eps;
      {
        Tape t;
        down = t.scalar(build(t));
      }
      entry.value.data[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = entry.grad.data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      const double rel = std::abs(fd - an) / denom;
      res.worst_rel = std::max(res.worst_rel, rel);
      if (std::abs(fd - an) > rtol * std::max(std::abs(fd), std::abs(an)) + 1e-7) {
        res.ok = false;
        res.detail = name + "[" + std::to_string(i) + "]: analytic " + std::to_string(an) +
                     " vs fd " + std::to_string(fd);
        return res;
      }
    }
  }
  return res;
}

}  // namespace testutil
