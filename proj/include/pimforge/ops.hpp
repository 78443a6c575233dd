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

#ifndef PIMFORGE_OPS_HPP_
#define PIMFORGE_OPS_HPP_

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pimforge/tensor.hpp"

namespace pimforge {

// All primitives return a fresh tensor and record a tape node when an active
// tape exists and any input requires grad. Inputs are never mutated.

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& x);                        // [m,n] -> [n,m]
Tensor reshape(const Tensor& x, Shape shape);             // same numel

// 2-D convolution over [Cin,H,W] with kernel [Cout,Cin,kh,kw].
// pad = -1 selects "same" padding (stride 1, odd kernels); bias may be an
// undefined Tensor.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int pad = -1);

Tensor softmax_lastdim(const Tensor& x);
// Row-masked softmax over a [T,T] logit matrix: disallowed positions act as
// -inf logits and produce exactly 0; fully masked rows produce all-zero rows
// (the empty-context convention).
Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& allow);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);

Tensor concat_dim0(const Tensor& a, const Tensor& b);  // trailing dims must match
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_const(const Tensor& x, double c);
Tensor mul_const(const Tensor& x, double c);

// x[C,H,W] scaled per channel by g[C] (broadcast over space).
Tensor scale_channels(const Tensor& x, const Tensor& g);

Tensor global_avg_pool(const Tensor& x);  // [C,H,W] -> [C]

// x may be [n_in] or [T,n_in]; w is [n_out,n_in]; bias [n_out] or undefined.
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor upsample_nearest2x(const Tensor& x);  // [C,H,W] -> [C,2H,2W]
Tensor avgpool2x2(const Tensor& x);          // [C,H,W] -> [C,H/2,W/2], even dims

// Elementwise binary cross-entropy map; target is not differentiated.
// Probabilities are clipped to [kBceClip, 1-kBceClip] before the logs.
inline constexpr double kBceClip = 1e-7;
Tensor bce_map(const Tensor& pred, const Tensor& target);

Tensor sum_all(const Tensor& x);   // -> scalar
Tensor mean_all(const Tensor& x);  // -> scalar
Tensor l1_sum(const Tensor& a, const Tensor& b);  // sum |a-b| -> scalar

// sum_i coeffs[i] * terms[i], each term scalar.
Tensor weighted_sum(const std::vector<double>& coeffs, const std::vector<Tensor>& terms);

// Token/grid layout transforms. tokens are [T,C] in raster order.
Tensor tokens_to_grid(const Tensor& tokens, int h, int w);  // -> [C,h,w]
Tensor grid_to_tokens(const Tensor& grid);                  // [C,h,w] -> [h*w,C]

// Per-token RMS normalization over the channel axis with learnable gain[C].
Tensor rms_norm(const Tensor& tokens, const Tensor& gain, double eps = 1e-5);

// Generic string-keyed entry point used by the grad-check harness. Unknown
// kinds raise an error naming the kind.
struct OpAttrs {
  int stride = 1;
  int pad = -1;
  std::vector<double> coeffs;
  Shape shape;
  int h = 0, w = 0;
};
Tensor forward_primitive(const std::string& op_kind, const std::vector<Tensor>& inputs,
                         const OpAttrs& attrs = {});

}  // namespace pimforge

#endif  // PIMFORGE_OPS_HPP_
