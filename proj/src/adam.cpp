// Copyright 2026 The pimforge authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pimforge/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pimforge {

AdamState AdamState::init(const std::vector<Tensor>& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p.size(), 0.0);
    st.v.emplace_back(p.size(), 0.0);
  }
  return st;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameter count");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != static_cast<size_t>(params[i].size())) {
      throw std::invalid_argument("adam_step: moment shape mismatch at parameter " + std::to_string(i));
    }
    const auto& g = params[i].grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw std::runtime_error("adam_step: non-finite gradient at parameter " + std::to_string(i) +
                                 "; step aborted");
      }
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    double* pd = p.data();
    for (size_t j = 0; j < m.size(); ++j) {
      double gj = g[j];
      if (!cfg.decoupled_weight_decay && cfg.weight_decay != 0.0) gj += cfg.weight_decay * pd[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pd[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (cfg.decoupled_weight_decay && cfg.weight_decay != 0.0) pd[j] -= cfg.lr * cfg.weight_decay * pd[j];
    }
  }
}

}  // namespace pimforge
