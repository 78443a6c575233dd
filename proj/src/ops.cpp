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

#include "pimforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pimforge {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

// Output grad may be absent when the value never reached the loss.
const std::vector<double>* out_grad(const ImplPtr& o) { return o->grad.empty() ? nullptr : &o->grad; }

std::vector<double>& acc_grad(const ImplPtr& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

void expect(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
         "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n}, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape::active()->record([ai, bi, oi, m, k, n, arg, brg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double* pg = g->data();
      if (arg) {
        auto& da = acc_grad(ai);
        const double* pb2 = bi->data.data();
        for (int i = 0; i < m; ++i) {
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = pb2 + kk * n;
            const double* grow = pg + i * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            da[i * k + kk] += s;
          }
        }
      }
      if (brg) {
        auto& db = acc_grad(bi);
        const double* pa2 = ai->data.data();
        for (int i = 0; i < m; ++i) {
          const double* grow = pg + i * n;
          for (int kk = 0; kk < k; ++kk) {
            const double av = pa2[i * k + kk];
            double* drow = db.data() + kk * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
        }
      }
    });
  }
  debug_check_finite(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& x) {
  expect(x.ndim() == 2, "transpose: expected 2-d tensor, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(Shape{n, m}, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, m, n]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dx[i * n + j] += (*g)[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  expect(shape_numel(shape) == x.size(),
         "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out(std::move(shape), x.vec());
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += (*g)[i];
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  expect(x.ndim() == 3 && w.ndim() == 4,
         "conv2d: shape mismatch input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  expect(w.dim(1) == cin,
         "conv2d: shape mismatch input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  expect(stride >= 1, "conv2d: stride must be >= 1");
  int ph, pw;
  if (pad < 0) {  // "same"
    expect(stride == 1 && kh % 2 == 1 && kw % 2 == 1,
           "conv2d: 'same' padding requires stride 1 and odd kernel");
    ph = (kh - 1) / 2;
    pw = (kw - 1) / 2;
  } else {
    ph = pw = pad;
  }
  const int oh = (h + 2 * ph - kh) / stride + 1;
  const int ow = (wd + 2 * pw - kw) / stride + 1;
  expect(oh >= 1 && ow >= 1, "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                                 shape_str(x.shape()));
  if (bias.defined()) {
    expect(bias.ndim() == 1 && bias.dim(0) == cout,
           "conv2d: bias shape " + shape_str(bias.shape()) + " does not match out channels");
  }
  Tensor out(Shape{cout, oh, ow}, 0.0);
  double* po = out.data();
  if (bias.defined()) {
    for (int oc = 0; oc < cout; ++oc) {
      const double bv = bias.data()[oc];
      std::fill(po + oc * oh * ow, po + (oc + 1) * oh * ow, bv);
    }
  }
  const double* px = x.data();
  const double* pw2 = w.data();
  for (int oc = 0; oc < cout; ++oc) {
    for (int ic = 0; ic < cin; ++ic) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = pw2[((oc * cin + ic) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          // oy range with 0 <= oy*stride + ky - ph < h
          int oy_lo = std::max(0, (ph - ky + stride - 1) / stride);
          int oy_hi = std::min(oh - 1, (h - 1 + ph - ky) / stride);
          int ox_lo = std::max(0, (pw - kx + stride - 1) / stride);
          int ox_hi = std::min(ow - 1, (wd - 1 + pw - kx) / stride);
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const int iy = oy * stride + ky - ph;
            const double* xrow = px + (ic * h + iy) * wd;
            double* orow = po + (oc * oh + oy) * ow;
            if (stride == 1) {
              const int off = kx - pw;
              for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * xrow[ox + off];
            } else {
              for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * xrow[ox * stride + kx - pw];
            }
          }
        }
      }
    }
  }
  if (recording({&x, &w, &bias})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), wi = w.impl(), oi = out.impl();
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    const bool xrg = x.requires_grad(), wrg = w.requires_grad();
    const bool brg = bias.defined() && bias.requires_grad();
    const int s = stride;
    Tape::active()->record([xi, wi, bi, oi, cin, h, wd, cout, kh, kw, oh, ow, ph, pw, s, xrg, wrg, brg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double* pg = g->data();
      if (brg) {
        auto& db = acc_grad(bi);
        for (int oc = 0; oc < cout; ++oc) {
          double sum = 0.0;
          const double* grow = pg + oc * oh * ow;
          for (int i = 0; i < oh * ow; ++i) sum += grow[i];
          db[oc] += sum;
        }
      }
      if (!xrg && !wrg) return;
      const double* px2 = xi->data.data();
      const double* pw3 = wi->data.data();
      std::vector<double>* dxp = xrg ? &acc_grad(xi) : nullptr;
      std::vector<double>* dwp = wrg ? &acc_grad(wi) : nullptr;
      for (int oc = 0; oc < cout; ++oc) {
        for (int ic = 0; ic < cin; ++ic) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const double wv = pw3[((oc * cin + ic) * kh + ky) * kw + kx];
              int oy_lo = std::max(0, (ph - ky + s - 1) / s);
              int oy_hi = std::min(oh - 1, (h - 1 + ph - ky) / s);
              int ox_lo = std::max(0, (pw - kx + s - 1) / s);
              int ox_hi = std::min(ow - 1, (wd - 1 + pw - kx) / s);
              double wsum = 0.0;
              for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const int iy = oy * s + ky - ph;
                const double* xrow = px2 + (ic * h + iy) * wd;
                const double* grow = pg + (oc * oh + oy) * ow;
                if (dxp) {
                  double* dxrow = dxp->data() + (ic * h + iy) * wd;
                  if (s == 1) {
                    const int off = kx - pw;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox + off] += wv * grow[ox];
                  } else {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) dxrow[ox * s + kx - pw] += wv * grow[ox];
                  }
                }
                if (dwp) {
                  if (s == 1) {
                    const int off = kx - pw;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) wsum += xrow[ox + off] * grow[ox];
                  } else {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) wsum += xrow[ox * s + kx - pw] * grow[ox];
                  }
                }
              }
              if (dwp) (*dwp)[((oc * cin + ic) * kh + ky) * kw + kx] += wsum;
            }
          }
        }
      }
    });
  }
  debug_check_finite(out, "conv2d");
  return out;
}

namespace {

Tensor softmax_impl(const Tensor& x, const std::vector<uint8_t>* allow, int rows, int n) {
  Tensor out(x.shape(), 0.0);
  const double* px = x.data();
  double* po = out.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = px + r * n;
    double* yr = po + r * n;
    const uint8_t* ar = allow ? allow->data() + static_cast<size_t>(r) * n : nullptr;
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < n; ++j) {
      if (ar && !ar[j]) continue;
      any = true;
      mx = std::max(mx, xr[j]);
    }
    if (!any) continue;  // fully masked row stays all-zero
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (ar && !ar[j]) continue;
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= sum;
  }
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    std::vector<uint8_t> allow_copy = allow ? *allow : std::vector<uint8_t>();
    const bool masked = allow != nullptr;
    Tape::active()->record([xi, oi, rows, n, allow_copy, masked]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      const double* y = oi->data.data();
      const double* pg = g->data();
      for (int r = 0; r < rows; ++r) {
        const double* yr = y + r * n;
        const double* gr = pg + r * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
        double* dr = dx.data() + r * n;
        if (masked) {
          const uint8_t* ar = allow_copy.data() + static_cast<size_t>(r) * n;
          for (int j = 0; j < n; ++j)
            if (ar[j]) dr[j] += yr[j] * (gr[j] - dot);
        } else {
          for (int j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
      }
    });
  }
  debug_check_finite(out, "softmax");
  return out;
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
  expect(x.ndim() >= 1, "softmax: empty shape");
  const int n = x.dim(x.ndim() - 1);
  const int rows = static_cast<int>(x.size() / n);
  return softmax_impl(x, nullptr, rows, n);
}

Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& allow) {
  expect(logits.ndim() == 2, "masked_softmax: expected [T,T] logits, got " + shape_str(logits.shape()));
  const int t = logits.dim(0);
  expect(logits.dim(1) == t && static_cast<int64_t>(allow.size()) == static_cast<int64_t>(t) * t,
         "masked_softmax: mask size does not match logits " + shape_str(logits.shape()));
  return softmax_impl(logits, &allow, t, t);
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF df) {
  Tensor out(x.shape(), 0.0);
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, n, df]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      const double* px2 = xi->data.data();
      const double* py = oi->data.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += (*g)[i] * df(px2[i], py[i]);
    });
  }
  debug_check_finite(out, name);
  return out;
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return phi + v * pdf;
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor concat_dim0(const Tensor& a, const Tensor& b) {
  expect(a.ndim() == b.ndim() && a.ndim() >= 1,
         "concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (int i = 1; i < a.ndim(); ++i)
    expect(a.dim(i) == b.dim(i),
           "concat: trailing dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape os = a.shape();
  os[0] = a.dim(0) + b.dim(0);
  Tensor out(os, 0.0);
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    const int64_t na = a.size(), nb = b.size();
    Tape::active()->record([ai, bi, oi, na, nb, arg, brg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (arg) {
        auto& da = acc_grad(ai);
        for (int64_t i = 0; i < na; ++i) da[i] += (*g)[i];
      }
      if (brg) {
        auto& db = acc_grad(bi);
        for (int64_t i = 0; i < nb; ++i) db[i] += (*g)[na + i];
      }
    });
  }
  return out;
}

namespace {

template <typename F, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da_fn, DB db_fn) {
  expect(same_shape(a.shape(), b.shape()), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                               " vs " + shape_str(b.shape()));
  Tensor out(a.shape(), 0.0);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = f(a.data()[i], b.data()[i]);
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape::active()->record([ai, bi, oi, n, arg, brg, da_fn, db_fn]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      if (arg) {
        auto& da = acc_grad(ai);
        for (int64_t i = 0; i < n; ++i) da[i] += (*g)[i] * da_fn(pa[i], pb[i]);
      }
      if (brg) {
        auto& db = acc_grad(bi);
        for (int64_t i = 0; i < n; ++i) db[i] += (*g)[i] * db_fn(pa[i], pb[i]);
      }
    });
  }
  debug_check_finite(out, name);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add_const(const Tensor& x, double c) {
  return unary_op(
      x, "add_const", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_const(const Tensor& x, double c) {
  return unary_op(
      x, "mul_const", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor scale_channels(const Tensor& x, const Tensor& g) {
  expect(x.ndim() == 3 && g.ndim() == 1 && g.dim(0) == x.dim(0),
         "scale_channels: shape mismatch " + shape_str(x.shape()) + " vs gains " + shape_str(g.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out(x.shape(), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double gv = g.data()[ch];
    const double* xr = x.data() + ch * hw;
    double* orow = out.data() + ch * hw;
    for (int i = 0; i < hw; ++i) orow[i] = xr[i] * gv;
  }
  if (recording({&x, &g})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), gi = g.impl(), oi = out.impl();
    const bool xrg = x.requires_grad(), grg = g.requires_grad();
    Tape::active()->record([xi, gi, oi, c, hw, xrg, grg]() {
      const auto* gr = out_grad(oi);
      if (!gr) return;
      if (xrg) {
        auto& dx = acc_grad(xi);
        for (int ch = 0; ch < c; ++ch) {
          const double gv = gi->data[ch];
          for (int i = 0; i < hw; ++i) dx[ch * hw + i] += (*gr)[ch * hw + i] * gv;
        }
      }
      if (grg) {
        auto& dg = acc_grad(gi);
        const double* px = xi->data.data();
        for (int ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (int i = 0; i < hw; ++i) s += (*gr)[ch * hw + i] * px[ch * hw + i];
          dg[ch] += s;
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  expect(x.ndim() == 3, "global_avg_pool: expected [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out(Shape{c}, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const double* xr = x.data() + ch * hw;
    for (int i = 0; i < hw; ++i) s += xr[i];
    out.data()[ch] = s / hw;
  }
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, c, hw]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int ch = 0; ch < c; ++ch) {
        const double gv = (*g)[ch] / hw;
        for (int i = 0; i < hw; ++i) dx[ch * hw + i] += gv;
      }
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& bias) {
  expect(w.ndim() == 2, "fc: weight must be [out,in], got " + shape_str(w.shape()));
  const int nout = w.dim(0), nin = w.dim(1);
  const bool vec1d = x.ndim() == 1;
  expect((vec1d && x.dim(0) == nin) || (x.ndim() == 2 && x.dim(1) == nin),
         "fc: shape mismatch input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  if (bias.defined())
    expect(bias.ndim() == 1 && bias.dim(0) == nout,
           "fc: bias shape " + shape_str(bias.shape()) + " does not match out dim");
  const int t = vec1d ? 1 : x.dim(0);
  Tensor out(vec1d ? Shape{nout} : Shape{t, nout}, 0.0);
  for (int r = 0; r < t; ++r) {
    const double* xr = x.data() + r * nin;
    double* orow = out.data() + r * nout;
    for (int o = 0; o < nout; ++o) {
      const double* wrow = w.data() + o * nin;
      double s = bias.defined() ? bias.data()[o] : 0.0;
      for (int i = 0; i < nin; ++i) s += wrow[i] * xr[i];
      orow[o] = s;
    }
  }
  if (recording({&x, &w, &bias})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), wi = w.impl(), oi = out.impl();
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    const bool xrg = x.requires_grad(), wrg = w.requires_grad();
    const bool brg = bias.defined() && bias.requires_grad();
    Tape::active()->record([xi, wi, bi, oi, t, nin, nout, xrg, wrg, brg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double* pg = g->data();
      for (int r = 0; r < t; ++r) {
        const double* grow = pg + r * nout;
        const double* xr = xi->data.data() + r * nin;
        if (xrg) {
          auto& dx = acc_grad(xi);
          double* dxr = dx.data() + r * nin;
          for (int o = 0; o < nout; ++o) {
            const double gv = grow[o];
            const double* wrow = wi->data.data() + o * nin;
            for (int i = 0; i < nin; ++i) dxr[i] += gv * wrow[i];
          }
        }
        if (wrg) {
          auto& dw = acc_grad(wi);
          for (int o = 0; o < nout; ++o) {
            const double gv = grow[o];
            double* dwr = dw.data() + o * nin;
            for (int i = 0; i < nin; ++i) dwr[i] += gv * xr[i];
          }
        }
        if (brg) {
          auto& db = acc_grad(bi);
          for (int o = 0; o < nout; ++o) db[o] += grow[o];
        }
      }
    });
  }
  debug_check_finite(out, "fc");
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  expect(x.ndim() == 3, "upsample2x: expected [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out(Shape{c, 2 * h, 2 * w}, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y) {
      const double* xr = x.data() + (ch * h + y / 2) * w;
      double* orow = out.data() + (ch * 2 * h + y) * 2 * w;
      for (int xx = 0; xx < 2 * w; ++xx) orow[xx] = xr[xx / 2];
    }
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, c, h, w]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
          double* dxr = dx.data() + (ch * h + y / 2) * w;
          const double* grow = g->data() + (ch * 2 * h + y) * 2 * w;
          for (int xx = 0; xx < 2 * w; ++xx) dxr[xx / 2] += grow[xx];
        }
    });
  }
  return out;
}

Tensor avgpool2x2(const Tensor& x) {
  expect(x.ndim() == 3, "avgpool2x2: expected [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  expect(h % 2 == 0 && w % 2 == 0, "avgpool2x2: dims must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor out(Shape{c, oh, ow}, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const double* base = x.data() + (ch * h + 2 * y) * w + 2 * xx;
        out.data()[(ch * oh + y) * ow + xx] = 0.25 * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, c, h, w, oh, ow]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            const double gv = 0.25 * (*g)[(ch * oh + y) * ow + xx];
            double* base = dx.data() + (ch * h + 2 * y) * w + 2 * xx;
            base[0] += gv;
            base[1] += gv;
            base[w] += gv;
            base[w + 1] += gv;
          }
    });
  }
  return out;
}

Tensor bce_map(const Tensor& pred, const Tensor& target) {
  expect(same_shape(pred.shape(), target.shape()),
         "bce: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const int64_t n = pred.size();
  Tensor out(pred.shape(), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(pred.data()[i], kBceClip, 1.0 - kBceClip);
    const double tv = target.data()[i];
    out.data()[i] = -(tv * std::log(p) + (1.0 - tv) * std::log(1.0 - p));
  }
  if (recording({&pred})) {
    out.set_requires_grad(true);
    ImplPtr pi = pred.impl(), ti = target.impl(), oi = out.impl();
    Tape::active()->record([pi, ti, oi, n]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dp = acc_grad(pi);
      for (int64_t i = 0; i < n; ++i) {
        const double praw = pi->data[i];
        if (praw <= kBceClip || praw >= 1.0 - kBceClip) continue;  // clipped region: flat
        const double tv = ti->data[i];
        dp[i] += (*g)[i] * (-tv / praw + (1.0 - tv) / (1.0 - praw));
      }
    });
  }
  debug_check_finite(out, "bce");
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      const double gv = (*g)[0];
      for (auto& v : dx) v += gv;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s * inv);
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, inv]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      const double gv = (*g)[0] * inv;
      for (auto& v : dx) v += gv;
    });
  }
  return out;
}

Tensor l1_sum(const Tensor& a, const Tensor& b) {
  expect(same_shape(a.shape(), b.shape()),
         "l1: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  Tensor out = Tensor::scalar(s);
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    Tape::active()->record([ai, bi, oi, arg, brg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double gv = (*g)[0];
      const int64_t n = static_cast<int64_t>(ai->data.size());
      for (int64_t i = 0; i < n; ++i) {
        const double d = ai->data[i] - bi->data[i];
        const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (arg) acc_grad(ai)[i] += gv * sgn;
        if (brg) acc_grad(bi)[i] -= gv * sgn;
      }
    });
  }
  return out;
}

Tensor weighted_sum(const std::vector<double>& coeffs, const std::vector<Tensor>& terms) {
  expect(coeffs.size() == terms.size() && !terms.empty(), "weighted_sum: coeff/term count mismatch");
  double s = 0.0;
  std::vector<const Tensor*> ptrs;
  for (size_t i = 0; i < terms.size(); ++i) {
    expect(terms[i].size() == 1, "weighted_sum: term " + std::to_string(i) + " is not scalar");
    s += coeffs[i] * terms[i].item();
    ptrs.push_back(&terms[i]);
  }
  Tensor out = Tensor::scalar(s);
  if (recording(ptrs)) {
    out.set_requires_grad(true);
    std::vector<ImplPtr> tis;
    std::vector<uint8_t> rgs;
    for (const auto& t : terms) {
      tis.push_back(t.impl());
      rgs.push_back(t.requires_grad() ? 1 : 0);
    }
    ImplPtr oi = out.impl();
    std::vector<double> cs = coeffs;
    Tape::active()->record([tis, rgs, oi, cs]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      for (size_t i = 0; i < tis.size(); ++i)
        if (rgs[i]) acc_grad(tis[i])[0] += (*g)[0] * cs[i];
    });
  }
  return out;
}

Tensor tokens_to_grid(const Tensor& tokens, int h, int w) {
  expect(tokens.ndim() == 2 && tokens.dim(0) == h * w,
         "tokens_to_grid: " + shape_str(tokens.shape()) + " does not cover grid " + std::to_string(h) +
             "x" + std::to_string(w));
  const int c = tokens.dim(1);
  Tensor out(Shape{c, h, w}, 0.0);
  for (int t = 0; t < h * w; ++t)
    for (int ch = 0; ch < c; ++ch) out.data()[ch * h * w + t] = tokens.data()[t * c + ch];
  if (recording({&tokens})) {
    out.set_requires_grad(true);
    ImplPtr xi = tokens.impl(), oi = out.impl();
    const int hw = h * w;
    Tape::active()->record([xi, oi, hw, c]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int t = 0; t < hw; ++t)
        for (int ch = 0; ch < c; ++ch) dx[t * c + ch] += (*g)[ch * hw + t];
    });
  }
  return out;
}

Tensor grid_to_tokens(const Tensor& grid) {
  expect(grid.ndim() == 3, "grid_to_tokens: expected [C,h,w], got " + shape_str(grid.shape()));
  const int c = grid.dim(0), hw = grid.dim(1) * grid.dim(2);
  Tensor out(Shape{hw, c}, 0.0);
  for (int t = 0; t < hw; ++t)
    for (int ch = 0; ch < c; ++ch) out.data()[t * c + ch] = grid.data()[ch * hw + t];
  if (recording({&grid})) {
    out.set_requires_grad(true);
    ImplPtr xi = grid.impl(), oi = out.impl();
    Tape::active()->record([xi, oi, hw, c]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      auto& dx = acc_grad(xi);
      for (int t = 0; t < hw; ++t)
        for (int ch = 0; ch < c; ++ch) dx[ch * hw + t] += (*g)[t * c + ch];
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& tokens, const Tensor& gain, double eps) {
  expect(tokens.ndim() == 2 && gain.ndim() == 1 && gain.dim(0) == tokens.dim(1),
         "rms_norm: shape mismatch " + shape_str(tokens.shape()) + " vs gain " + shape_str(gain.shape()));
  const int t = tokens.dim(0), c = tokens.dim(1);
  Tensor out(tokens.shape(), 0.0);
  std::vector<double> inv_r(t);
  for (int r = 0; r < t; ++r) {
    const double* xr = tokens.data() + r * c;
    double s = 0.0;
    for (int i = 0; i < c; ++i) s += xr[i] * xr[i];
    const double rms = std::sqrt(s / c + eps);
    inv_r[r] = 1.0 / rms;
    double* orow = out.data() + r * c;
    for (int i = 0; i < c; ++i) orow[i] = xr[i] * inv_r[r] * gain.data()[i];
  }
  if (recording({&tokens, &gain})) {
    out.set_requires_grad(true);
    ImplPtr xi = tokens.impl(), gi = gain.impl(), oi = out.impl();
    const bool xrg = tokens.requires_grad(), grg = gain.requires_grad();
    Tape::active()->record([xi, gi, oi, t, c, inv_r, xrg, grg]() {
      const auto* g = out_grad(oi);
      if (!g) return;
      for (int r = 0; r < t; ++r) {
        const double* xr = xi->data.data() + r * c;
        const double* grow = g->data() + r * c;
        const double ir = inv_r[r];
        if (xrg) {
          auto& dx = acc_grad(xi);
          double dot = 0.0;
          for (int i = 0; i < c; ++i) dot += grow[i] * gi->data[i] * xr[i];
          const double coef = dot * ir * ir * ir / c;
          double* dxr = dx.data() + r * c;
          for (int i = 0; i < c; ++i) dxr[i] += grow[i] * gi->data[i] * ir - xr[i] * coef;
        }
        if (grg) {
          auto& dg = acc_grad(gi);
          for (int i = 0; i < c; ++i) dg[i] += grow[i] * xr[i] * ir;
        }
      }
    });
  }
  debug_check_finite(out, "rms_norm");
  return out;
}

Tensor forward_primitive(const std::string& op_kind, const std::vector<Tensor>& in, const OpAttrs& attrs) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      throw std::invalid_argument("op '" + op_kind + "' expects " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
  };
  if (op_kind == "matmul") {
    need(2);
    return matmul(in[0], in[1]);
  }
  if (op_kind == "transpose") {
    need(1);
    return transpose(in[0]);
  }
  if (op_kind == "reshape") {
    need(1);
    return reshape(in[0], attrs.shape);
  }
  if (op_kind == "conv2d") {
    if (in.size() == 2) return conv2d(in[0], in[1], Tensor(), attrs.stride, attrs.pad);
    need(3);
    return conv2d(in[0], in[1], in[2], attrs.stride, attrs.pad);
  }
  if (op_kind == "softmax") {
    need(1);
    return softmax_lastdim(in[0]);
  }
  if (op_kind == "sigmoid") {
    need(1);
    return sigmoid(in[0]);
  }
  if (op_kind == "gelu") {
    need(1);
    return gelu(in[0]);
  }
  if (op_kind == "relu") {
    need(1);
    return relu(in[0]);
  }
  if (op_kind == "concat") {
    need(2);
    return concat_dim0(in[0], in[1]);
  }
  if (op_kind == "add") {
    need(2);
    return add(in[0], in[1]);
  }
  if (op_kind == "sub") {
    need(2);
    return sub(in[0], in[1]);
  }
  if (op_kind == "mul") {
    need(2);
    return mul(in[0], in[1]);
  }
  if (op_kind == "div") {
    need(2);
    return div(in[0], in[1]);
  }
  if (op_kind == "scale_channels") {
    need(2);
    return scale_channels(in[0], in[1]);
  }
  if (op_kind == "global_avg_pool") {
    need(1);
    return global_avg_pool(in[0]);
  }
  if (op_kind == "fc") {
    if (in.size() == 2) return fully_connected(in[0], in[1], Tensor());
    need(3);
    return fully_connected(in[0], in[1], in[2]);
  }
  if (op_kind == "upsample2x") {
    need(1);
    return upsample_nearest2x(in[0]);
  }
  if (op_kind == "avgpool2x2") {
    need(1);
    return avgpool2x2(in[0]);
  }
  if (op_kind == "bce") {
    need(2);
    return bce_map(in[0], in[1]);
  }
  if (op_kind == "sum") {
    need(1);
    return sum_all(in[0]);
  }
  if (op_kind == "mean") {
    need(1);
    return mean_all(in[0]);
  }
  if (op_kind == "l1") {
    need(2);
    return l1_sum(in[0], in[1]);
  }
  if (op_kind == "weighted_sum") {
    return weighted_sum(attrs.coeffs, in);
  }
  if (op_kind == "tokens_to_grid") {
    need(1);
    return tokens_to_grid(in[0], attrs.h, attrs.w);
  }
  if (op_kind == "grid_to_tokens") {
    need(1);
    return grid_to_tokens(in[0]);
  }
  if (op_kind == "rms_norm") {
    need(2);
    return rms_norm(in[0], in[1]);
  }
  throw std::invalid_argument("unknown op_kind '" + op_kind + "'");
}

}  // namespace pimforge
