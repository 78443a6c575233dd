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

#ifndef PIMFORGE_GRAD_CHECK_HPP_
#define PIMFORGE_GRAD_CHECK_HPP_

#include <functional>
#include <vector>

#include "pimforge/tensor.hpp"

namespace pimforge {

// Central finite-difference gradient verification.
//
// `f` must evaluate a scalar from the current contents of `inputs`; it is
// re-invoked after in-place perturbations, so it must read the tensors fresh
// each call. Returns the max over checked coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
//
// sample_per_tensor < 0 checks every coordinate; otherwise that many
// coordinates are sampled per tensor with the given seed.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                  int sample_per_tensor = -1, uint64_t seed = 0);

}  // namespace pimforge

#endif  // PIMFORGE_GRAD_CHECK_HPP_
