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

#ifndef PIMFORGE_ADAM_HPP_
#define PIMFORGE_ADAM_HPP_

#include <cstdint>
#include <vector>

#include "pimforge/tensor.hpp"

namespace pimforge {

struct AdamConfig {
  double lr = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
  // Decoupled decay applies p -= lr*wd*p outside the moment estimates;
  // coupled mode adds wd*p to the gradient before them.
  bool decoupled_weight_decay = true;
};

struct AdamState {
  int64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Allocates zero moments matching the parameter list.
  static AdamState init(const std::vector<Tensor>& params);
};

// One Adam update with bias correction, reading each parameter's grad slot.
// Throws on NaN/Inf gradients without touching any parameter.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

}  // namespace pimforge

#endif  // PIMFORGE_ADAM_HPP_
