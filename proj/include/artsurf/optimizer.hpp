#pragma once

#include <cstdint>
#include <vector>

#include "artsurf/errors.hpp"

namespace artsurf {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

// First/second moment buffers; shapes mirror the parameter vector exactly.
struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;

  void resize(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    step = 0;
  }
};

// Standard bias-corrected Adam update, in place. The caller advances st.step
// once per optimizer step (shared across parameter groups).
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& st, double lr, const AdamParams& hp = {}) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw RuntimeFailure("adam_step: shape mismatch");
  st.step++;
  double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    st.m[i] = hp.beta1 * st.m[i] + (1 - hp.beta1) * g;
    st.v[i] = hp.beta2 * st.v[i] + (1 - hp.beta2) * g * g;
    double mhat = st.m[i] / c1;
    double vhat = st.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

// Exponential decay from lr0 to lr_final over total steps (3DGS-style schedule).
inline double lr_exp_decay(double lr0, double lr_final, int64_t step, int64_t total) {
  if (total <= 0 || lr0 <= 0) return lr0;
  double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return lr0 * std::pow(lr_final / lr0, t);
}

}  // namespace artsurf
