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

#include "pimforge/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pimforge {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive extent in shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match value count " +
                                std::to_string(values.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar, shape " + shape_str(shape()));
  return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("backward: tape already consumed; build a new tape per step");
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not participate in this tape (requires_grad is false)");
  }
  consumed_ = true;
  const_cast<Tensor&>(loss).grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

bool recording(const std::vector<const Tensor*>& inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void debug_check_finite(const Tensor& t, const char* op) {
#ifdef NDEBUG
  (void)t;
  (void)op;
#else
  for (double v : t.vec()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
  }
#endif
}

}  // namespace pimforge
