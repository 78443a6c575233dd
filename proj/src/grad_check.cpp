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

#include "pimforge/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pimforge/rng.hpp"

namespace pimforge {

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double h,
                  int sample_per_tensor, uint64_t seed) {
  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    for (const auto& t : inputs) const_cast<Tensor&>(t).zero_grad();
    Tape tape;
    Tensor loss = f();
    if (loss.size() != 1) throw std::invalid_argument("grad_check: function output is not scalar");
    tape.backward(loss);
    for (const auto& t : inputs) analytic.push_back(t.grad());
  }
  // Numeric pass, no tape active.
  Rng rng(seed);
  double max_rel = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = const_cast<Tensor&>(inputs[ti]);
    const int64_t n = t.size();
    std::vector<int64_t> coords;
    if (sample_per_tensor < 0 || sample_per_tensor >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int k = 0; k < sample_per_tensor; ++k) coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (int64_t ci : coords) {
      const double orig = t.data()[ci];
      t.data()[ci] = orig + h;
      const double fp = f().item();
      t.data()[ci] = orig - h;
      const double fm = f().item();
      t.data()[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][static_cast<size_t>(ci)];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace pimforge
