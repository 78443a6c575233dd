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

#ifndef PIMFORGE_TENSOR_HPP_
#define PIMFORGE_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pimforge {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense double-precision tensor. Data is row-major. The gradient slot is
// allocated lazily; it always matches the data shape once present.
// Values are treated as immutable once an op has consumed the tensor; the
// grad slot is the only thing backward mutates.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty or data.size()
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, double fill, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  double item() const;  // requires numel == 1

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient if absent.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Nodes are recorded in forward (topological) order and
// replayed once, in reverse, by backward(). Construction pushes the tape as
// the active recording target; destruction pops it. One tape per training
// step; tapes are never shared across threads.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
  // into each participating tensor's grad slot. Errors if loss is not a
  // recorded scalar or if this tape was already consumed.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// True when an op with any grad-requiring input should record a node.
bool recording(const std::vector<const Tensor*>& inputs);

// Debug-mode finiteness check; compiled out under NDEBUG.
void debug_check_finite(const Tensor& t, const char* op);

}  // namespace pimforge

#endif  // PIMFORGE_TENSOR_HPP_
