/*
 * Copyright 2026 The npdraw Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "npdraw/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace npdraw::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x dim x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t o = i + (r - in.size());
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel_of(out);
  if (n == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = out[r - 1], la = sa[r - 1], lb = sb[r - 1];
  for (std::size_t i = 0; i < n; i += last) {
    for (std::size_t j = 0; j < last; ++j) f(i + j, ia + j * la, ib + j * lb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. fwd(a, b) -> y; da(a, b, y), db(a, b, y).
template <class T, class Fwd, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Da da,
                    Db db) {
  Shape out = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<T> y(numel_of(out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const bool same = a.shape() == b.shape();
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(pa[i], pb[i]);
  } else {
    broadcast_loop(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      y[i] = fwd(pa[ia], pb[ib]);
    });
  }
  return make_result<T>(out, std::move(y), {a, b}, name,
                        [out, sa, sb, same, da, db](Node<T>& self) {
                          auto& na = *self.parents[0];
                          auto& nb = *self.parents[1];
                          const T* g = self.grad.data();
                          const T* y = self.data.data();
                          const T* pa = na.data.data();
                          const T* pb = nb.data.data();
                          T* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
                          T* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
                          auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                            if (ga) ga[ia] += g[i] * da(pa[ia], pb[ib], y[i]);
                            if (gb) gb[ib] += g[i] * db(pa[ia], pb[ib], y[i]);
                          };
                          if (same) {
                            for (std::size_t i = 0; i < self.data.size(); ++i) step(i, i, i);
                          } else {
                            broadcast_loop(out, sa, sb, step);
                          }
                        });
}

// Elementwise unary op. fwd(x) -> y; dfdx(x, y).
template <class T, class Fwd, class Df>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Df df) {
  std::vector<T> y(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(px[i]);
  return make_result<T>(x.shape(), std::move(y), {x}, name, [df](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& gx = nx.ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(nx.data[i], self.data[i]);
  });
}

template <class T>
T softplus_scalar(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// im2col: column c*kh*kw + i*kw + j, row-of-output position. col is rows x ld; writes
// columns [offset, offset + oh*ow).
template <class T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t oh, std::size_t ow, T* col,
            std::size_t ld, std::size_t offset) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * ld + offset;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(ki);
          T* dst = row + y * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x) * stride - pad + static_cast<long>(kj);
            dst[x] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t oh, std::size_t ow, T* img,
            std::size_t ld, std::size_t offset) {
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * ld + offset;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const T* src = row + y * ow;
          T* dst = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x) * stride - pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

// Batch chunk so a column buffer stays near 256K entries (cache resident).
std::size_t chunk_size(std::size_t rows, std::size_t cols_per_item, std::size_t n) {
  const std::size_t budget = std::size_t{1} << 18;
  const std::size_t per = std::max<std::size_t>(1, rows * cols_per_item);
  return std::clamp<std::size_t>(budget / per, 1, n);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary_op<T>(
      x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary_op<T>(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-T(0.5) * v * v);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      x, "sigmoid", [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_op<T>(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op<T>(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op<T>(
      x, "softplus", [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

template <class T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      x, "log_sigmoid", [](T v) { return -softplus_scalar(-v); },
      [](T v, T) { return sigmoid_scalar(-v); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return make_result<T>({}, {s}, {x}, "sum", [](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(std::max<std::size_t>(1, x.numel()));
  return scale(sum(x), T(1) / n);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<long>(ax));
  }
  std::vector<T> y(s.outer * s.inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t d = 0; d < s.dim; ++d)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += px[(o * s.dim + d) * s.inner + i];
  return make_result<T>(out, std::move(y), {x}, "sum_axis", [s](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t d = 0; d < s.dim; ++d)
        for (std::size_t i = 0; i < s.inner; ++i)
          gx[(o * s.dim + d) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "mean");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(std::max<std::size_t>(1, x.dim(ax))));
}

template <class T>
Tensor<T> logsumexp(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "logsumexp");
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<long>(ax));
  }
  std::vector<T> y(s.outer * s.inner);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t d = 0; d < s.dim; ++d) m = std::max(m, px[(o * s.dim + d) * s.inner + i]);
      T acc = T(0);
      if (std::isfinite(m)) {
        for (std::size_t d = 0; d < s.dim; ++d) acc += std::exp(px[(o * s.dim + d) * s.inner + i] - m);
        y[o * s.inner + i] = m + std::log(acc);
      } else {
        y[o * s.inner + i] = m;
      }
    }
  }
  return make_result<T>(out, std::move(y), {x}, "logsumexp", [s](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& gx = nx.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T lse = self.data[o * s.inner + i];
        const T g = self.grad[o * s.inner + i];
        if (!std::isfinite(lse)) continue;
        for (std::size_t d = 0; d < s.dim; ++d) {
          const std::size_t k = (o * s.dim + d) * s.inner + i;
          gx[k] += g * std::exp(nx.data[k] - lse);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<T> y(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t d = 0; d < s.dim; ++d) m = std::max(m, px[(o * s.dim + d) * s.inner + i]);
      T z = T(0);
      for (std::size_t d = 0; d < s.dim; ++d) {
        const std::size_t k = (o * s.dim + d) * s.inner + i;
        y[k] = std::exp(px[k] - m);
        z += y[k];
      }
      for (std::size_t d = 0; d < s.dim; ++d) y[(o * s.dim + d) * s.inner + i] /= z;
    }
  return make_result<T>(x.shape(), std::move(y), {x}, "softmax", [s](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        T dot = T(0);
        for (std::size_t d = 0; d < s.dim; ++d) {
          const std::size_t k = (o * s.dim + d) * s.inner + i;
          dot += self.grad[k] * self.data[k];
        }
        for (std::size_t d = 0; d < s.dim; ++d) {
          const std::size_t k = (o * s.dim + d) * s.inner + i;
          gx[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<T> y(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t d = 0; d < s.dim; ++d) m = std::max(m, px[(o * s.dim + d) * s.inner + i]);
      T z = T(0);
      for (std::size_t d = 0; d < s.dim; ++d) z += std::exp(px[(o * s.dim + d) * s.inner + i] - m);
      const T lz = m + std::log(z);
      for (std::size_t d = 0; d < s.dim; ++d) {
        const std::size_t k = (o * s.dim + d) * s.inner + i;
        y[k] = px[k] - lz;
      }
    }
  return make_result<T>(x.shape(), std::move(y), {x}, "log_softmax", [s](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        T gsum = T(0);
        for (std::size_t d = 0; d < s.dim; ++d) gsum += self.grad[(o * s.dim + d) * s.inner + i];
        for (std::size_t d = 0; d < s.dim; ++d) {
          const std::size_t k = (o * s.dim + d) * s.inner + i;
          gx[k] += self.grad[k] - std::exp(self.data[k]) * gsum;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> y(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(y), {x}, "reshape", [](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) {
    throw ShapeError("permute: order of length " + std::to_string(order.size()) +
                     " for tensor " + shape_str(x.shape()));
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  Shape out(r);
  std::vector<std::size_t> src_strides(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (order[i] >= r || seen[order[i]]) throw ShapeError("permute: invalid axis order");
    seen[order[i]] = true;
    out[i] = x.dim(order[i]);
    src_strides[i] = in_strides[order[i]];
  }
  std::vector<T> y(x.numel());
  const T* px = x.data().data();
  const std::vector<std::size_t> zero(r, 0);
  broadcast_loop(out, src_strides, zero,
                 [&](std::size_t i, std::size_t is, std::size_t) { y[i] = px[is]; });
  return make_result<T>(out, std::move(y), {x}, "permute", [out, src_strides, zero](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    broadcast_loop(out, src_strides, zero,
                   [&](std::size_t i, std::size_t is, std::size_t) { gx[is] += self.grad[i]; });
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out[ax] += p.dim(ax);
  }
  const AxisSplit so = split_at(out, ax);
  std::vector<T> y(numel_of(out));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(ax) * so.inner;
    const T* src = p.data().data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy(src + o * block, src + (o + 1) * block, y.begin() + static_cast<long>(o * so.dim * so.inner + off * so.inner));
    off += p.dim(ax);
  }
  return make_result<T>(out, std::move(y), parts, "concat", [so, offsets, ax](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& np = *self.parents[k];
      if (!np.requires_grad) continue;
      auto& gp = np.ensure_grad();
      const std::size_t block = np.shape[ax] * so.inner;
      for (std::size_t o = 0; o < so.outer; ++o) {
        const T* src = self.grad.data() + o * so.dim * so.inner + offsets[k] * so.inner;
        for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += src[i];
      }
    }
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, x.rank(), "slice");
  if (begin > end || end > x.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out = x.shape();
  out[ax] = end - begin;
  const std::size_t len = end - begin;
  std::vector<T> y(s.outer * len * s.inner);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy(px + (o * s.dim + begin) * s.inner, px + (o * s.dim + end) * s.inner,
              y.begin() + static_cast<long>(o * len * s.inner));
  return make_result<T>(out, std::move(y), {x}, "slice", [s, begin, len](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < len * s.inner; ++i)
        gx[(o * s.dim + begin) * s.inner + i] += self.grad[o * len * s.inner + i];
  });
}

// ---------------------------------------------------------------------------
// Matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), m = b.dim(b.rank() - 1);
  const bool shared_rhs = b.rank() == 2;
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
  bool ok = kb == k;
  if (!shared_rhs) {
    ok = ok && b.rank() == a.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok) throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Shape out = a.shape();
  out.back() = m;
  std::vector<T> y(batch * n * m);
  if (shared_rhs) {
    MapMat<T>(y.data(), static_cast<long>(batch * n), static_cast<long>(m)).noalias() =
        CMapMat<T>(a.data().data(), static_cast<long>(batch * n), static_cast<long>(k)) *
        CMapMat<T>(b.data().data(), static_cast<long>(k), static_cast<long>(m));
  } else {
    for (std::size_t bi = 0; bi < batch; ++bi)
      MapMat<T>(y.data() + bi * n * m, static_cast<long>(n), static_cast<long>(m)).noalias() =
          CMapMat<T>(a.data().data() + bi * n * k, static_cast<long>(n), static_cast<long>(k)) *
          CMapMat<T>(b.data().data() + bi * k * m, static_cast<long>(k), static_cast<long>(m));
  }
  return make_result<T>(out, std::move(y), {a, b}, "matmul", [=](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const long ln = static_cast<long>(n), lk = static_cast<long>(k), lm = static_cast<long>(m);
    if (shared_rhs) {
      const long rows = static_cast<long>(batch) * ln;
      CMapMat<T> g(self.grad.data(), rows, lm);
      if (na.requires_grad)
        MapMat<T>(na.ensure_grad().data(), rows, lk).noalias() += g * CMapMat<T>(nb.data.data(), lk, lm).transpose();
      if (nb.requires_grad)
        MapMat<T>(nb.ensure_grad().data(), lk, lm).noalias() += CMapMat<T>(na.data.data(), rows, lk).transpose() * g;
      return;
    }
    for (std::size_t bi = 0; bi < batch; ++bi) {
      CMapMat<T> g(self.grad.data() + bi * n * m, ln, lm);
      if (na.requires_grad)
        MapMat<T>(na.ensure_grad().data() + bi * n * k, ln, lk).noalias() +=
            g * CMapMat<T>(nb.data.data() + bi * k * m, lk, lm).transpose();
      if (nb.requires_grad)
        MapMat<T>(nb.ensure_grad().data() + bi * k * m, lk, lm).noalias() +=
            CMapMat<T>(na.data.data() + bi * n * k, ln, lk).transpose() * g;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) + " output channels");
  }
  const long hp = static_cast<long>(h) + 2 * padding, wp = static_cast<long>(w) + 2 * padding;
  if (hp < static_cast<long>(kh) || wp < static_cast<long>(kw)) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = static_cast<std::size_t>((hp - static_cast<long>(kh)) / stride + 1);
  const std::size_t ow = static_cast<std::size_t>((wp - static_cast<long>(kw)) / stride + 1);
  const std::size_t rows = cin * kh * kw, per = oh * ow;
  const std::size_t chunk = chunk_size(rows, per, n);

  std::vector<T> y(n * cout * per);
  std::vector<T> col, out;
  for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, n - n0), ld = nb * per;
    col.resize(rows * ld);
    out.resize(cout * ld);
    for (std::size_t i = 0; i < nb; ++i)
      im2col(x.data().data() + (n0 + i) * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow,
             col.data(), ld, i * per);
    MapMat<T>(out.data(), static_cast<long>(cout), static_cast<long>(ld)).noalias() =
        CMapMat<T>(weight.data().data(), static_cast<long>(cout), static_cast<long>(rows)) *
        CMapMat<T>(col.data(), static_cast<long>(rows), static_cast<long>(ld));
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t co = 0; co < cout; ++co) {
        const T b0 = bias.defined() ? bias.data()[co] : T(0);
        const T* src = out.data() + co * ld + i * per;
        T* dst = y.data() + ((n0 + i) * cout + co) * per;
        for (std::size_t p = 0; p < per; ++p) dst[p] = src[p] + b0;
      }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>({n, cout, oh, ow}, std::move(y), inputs, "conv2d", [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    Node<T>* nbias = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    if (nbias && nbias->requires_grad) {
      auto& gb = nbias->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t co = 0; co < cout; ++co) {
          const T* g = self.grad.data() + (i * cout + co) * per;
          T acc = T(0);
          for (std::size_t p = 0; p < per; ++p) acc += g[p];
          gb[co] += acc;
        }
    }
    std::vector<T> col, gy, gcol;
    for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, n - n0), ld = nb * per;
      gy.resize(cout * ld);
      for (std::size_t i = 0; i < nb; ++i)
        for (std::size_t co = 0; co < cout; ++co)
          std::copy_n(self.grad.data() + ((n0 + i) * cout + co) * per, per, gy.data() + co * ld + i * per);
      CMapMat<T> g(gy.data(), static_cast<long>(cout), static_cast<long>(ld));
      if (nw.requires_grad) {
        col.resize(rows * ld);
        for (std::size_t i = 0; i < nb; ++i)
          im2col(nx.data.data() + (n0 + i) * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow,
                 col.data(), ld, i * per);
        MapMat<T>(nw.ensure_grad().data(), static_cast<long>(cout), static_cast<long>(rows)).noalias() +=
            g * CMapMat<T>(col.data(), static_cast<long>(rows), static_cast<long>(ld)).transpose();
      }
      if (nx.requires_grad) {
        gcol.resize(rows * ld);
        MapMat<T>(gcol.data(), static_cast<long>(rows), static_cast<long>(ld)).noalias() =
            CMapMat<T>(nw.data.data(), static_cast<long>(cout), static_cast<long>(rows)).transpose() * g;
        auto& gx = nx.ensure_grad();
        for (std::size_t i = 0; i < nb; ++i)
          col2im(gcol.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                 gx.data() + (n0 + i) * cin * h * w, ld, i * per);
      }
    }
  });
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1)) {
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0 || output_padding < 0 || output_padding >= stride) {
    throw ShapeError("conv_transpose2d: invalid stride/padding/output_padding");
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) + " output channels");
  }
  const long oh_l = (static_cast<long>(h) - 1) * stride - 2 * padding + static_cast<long>(kh) + output_padding;
  const long ow_l = (static_cast<long>(w) - 1) * stride - 2 * padding + static_cast<long>(kw) + output_padding;
  if (oh_l <= 0 || ow_l <= 0) throw ShapeError("conv_transpose2d: empty output for input " + shape_str(x.shape()));
  const std::size_t oh = static_cast<std::size_t>(oh_l), ow = static_cast<std::size_t>(ow_l);
  const std::size_t rows = cout * kh * kw, per_in = h * w, per_out = oh * ow;
  const std::size_t chunk = chunk_size(rows, per_in, n);

  std::vector<T> y(n * cout * per_out, T(0));
  std::vector<T> xm, col;
  for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, n - n0), ld = nb * per_in;
    xm.resize(cin * ld);
    col.resize(rows * ld);
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t ci = 0; ci < cin; ++ci)
        std::copy_n(x.data().data() + ((n0 + i) * cin + ci) * per_in, per_in, xm.data() + ci * ld + i * per_in);
    MapMat<T>(col.data(), static_cast<long>(rows), static_cast<long>(ld)).noalias() =
        CMapMat<T>(weight.data().data(), static_cast<long>(cin), static_cast<long>(rows)).transpose() *
        CMapMat<T>(xm.data(), static_cast<long>(cin), static_cast<long>(ld));
    for (std::size_t i = 0; i < nb; ++i)
      col2im(col.data(), cout, oh, ow, kh, kw, stride, padding, h, w,
             y.data() + (n0 + i) * cout * per_out, ld, i * per_in);
  }
  if (bias.defined())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t co = 0; co < cout; ++co) {
        T* dst = y.data() + (i * cout + co) * per_out;
        for (std::size_t p = 0; p < per_out; ++p) dst[p] += bias.data()[co];
      }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>({n, cout, oh, ow}, std::move(y), inputs, "conv_transpose2d", [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    Node<T>* nbias = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    if (nbias && nbias->requires_grad) {
      auto& gb = nbias->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t co = 0; co < cout; ++co) {
          const T* g = self.grad.data() + (i * cout + co) * per_out;
          T acc = T(0);
          for (std::size_t p = 0; p < per_out; ++p) acc += g[p];
          gb[co] += acc;
        }
    }
    std::vector<T> gcol, xm, gxm;
    for (std::size_t n0 = 0; n0 < n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, n - n0), ld = nb * per_in;
      gcol.resize(rows * ld);
      for (std::size_t i = 0; i < nb; ++i)
        im2col(self.grad.data() + (n0 + i) * cout * per_out, cout, oh, ow, kh, kw, stride, padding, h, w,
               gcol.data(), ld, i * per_in);
      CMapMat<T> gc(gcol.data(), static_cast<long>(rows), static_cast<long>(ld));
      if (nw.requires_grad) {
        xm.resize(cin * ld);
        for (std::size_t i = 0; i < nb; ++i)
          for (std::size_t ci = 0; ci < cin; ++ci)
            std::copy_n(nx.data.data() + ((n0 + i) * cin + ci) * per_in, per_in, xm.data() + ci * ld + i * per_in);
        MapMat<T>(nw.ensure_grad().data(), static_cast<long>(cin), static_cast<long>(rows)).noalias() +=
            CMapMat<T>(xm.data(), static_cast<long>(cin), static_cast<long>(ld)) * gc.transpose();
      }
      if (nx.requires_grad) {
        gxm.resize(cin * ld);
        MapMat<T>(gxm.data(), static_cast<long>(cin), static_cast<long>(ld)).noalias() =
            CMapMat<T>(nw.data.data(), static_cast<long>(cin), static_cast<long>(rows)) * gc;
        auto& gx = nx.ensure_grad();
        for (std::size_t i = 0; i < nb; ++i)
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* src = gxm.data() + ci * ld + i * per_in;
            T* dst = gx.data() + ((n0 + i) * cin + ci) * per_in;
            for (std::size_t p = 0; p < per_in; ++p) dst[p] += src[p];
          }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  if ((x.rank() != 4 && x.rank() != 2) || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1) ||
      running_mean.numel() != x.dim(1) || running_var.numel() != x.dim(1)) {
    throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " incompatible with " +
                     std::to_string(gamma.numel()) + " channels");
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t count = n * inner;
  std::vector<T> mu(c), invstd(c);
  const T* px = x.data().data();
  if (training) {
    if (count < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      T m = T(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < inner; ++p) m += px[(i * c + ch) * inner + p];
      m /= static_cast<T>(count);
      T v = T(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < inner; ++p) {
          const T d = px[(i * c + ch) * inner + p] - m;
          v += d * d;
        }
      const T var = v / static_cast<T>(count);
      mu[ch] = m;
      invstd[ch] = T(1) / std::sqrt(var + eps);
      running_mean.values()[ch] = (T(1) - momentum) * running_mean.values()[ch] + momentum * m;
      running_var.values()[ch] = (T(1) - momentum) * running_var.values()[ch] +
                                 momentum * v / static_cast<T>(count - 1);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      invstd[ch] = T(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = gamma.data()[ch], b = beta.data()[ch];
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t k = (i * c + ch) * inner + p;
        y[k] = (px[k] - mu[ch]) * invstd[ch] * g + b;
      }
    }
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta}, "batch_norm",
                        [=](Node<T>& self) {
                          auto& nx = *self.parents[0];
                          auto& ng = *self.parents[1];
                          auto& nbeta = *self.parents[2];
                          const T* g = self.grad.data();
                          const T* px = nx.data.data();
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            T sum_g = T(0), sum_gx = T(0);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t p = 0; p < inner; ++p) {
                                const std::size_t k = (i * c + ch) * inner + p;
                                const T xhat = (px[k] - mu[ch]) * invstd[ch];
                                sum_g += g[k];
                                sum_gx += g[k] * xhat;
                              }
                            if (ng.requires_grad) ng.ensure_grad()[ch] += sum_gx;
                            if (nbeta.requires_grad) nbeta.ensure_grad()[ch] += sum_g;
                            if (!nx.requires_grad) continue;
                            auto& gx = nx.ensure_grad();
                            const T gm = ng.data[ch];
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t p = 0; p < inner; ++p) {
                                const std::size_t k = (i * c + ch) * inner + p;
                                if (training) {
                                  const T xhat = (px[k] - mu[ch]) * invstd[ch];
                                  gx[k] += gm * invstd[ch] *
                                           (g[k] - sum_g / static_cast<T>(count) -
                                            xhat * sum_gx / static_cast<T>(count));
                                } else {
                                  gx[k] += gm * invstd[ch] * g[k];
                                }
                              }
                          }
                        });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d == 0 || gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " incompatible with gamma " +
                     shape_str(gamma.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> y(x.numel()), xhat(x.numel()), invstd(rows);
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T m = T(0);
    for (std::size_t j = 0; j < d; ++j) m += px[r * d + j];
    m /= static_cast<T>(d);
    T v = T(0);
    for (std::size_t j = 0; j < d; ++j) v += (px[r * d + j] - m) * (px[r * d + j] - m);
    invstd[r] = T(1) / std::sqrt(v / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (px[r * d + j] - m) * invstd[r];
      y[r * d + j] = xhat[r * d + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta}, "layer_norm",
                        [=](Node<T>& self) {
                          auto& nx = *self.parents[0];
                          auto& ng = *self.parents[1];
                          auto& nb = *self.parents[2];
                          const T* g = self.grad.data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            T s1 = T(0), s2 = T(0);
                            for (std::size_t j = 0; j < d; ++j) {
                              const T gh = g[r * d + j] * ng.data[j];
                              s1 += gh;
                              s2 += gh * xhat[r * d + j];
                              if (ng.requires_grad) ng.ensure_grad()[j] += g[r * d + j] * xhat[r * d + j];
                              if (nb.requires_grad) nb.ensure_grad()[j] += g[r * d + j];
                            }
                            if (!nx.requires_grad) continue;
                            auto& gx = nx.ensure_grad();
                            const T dd = static_cast<T>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                              const T gh = g[r * d + j] * ng.data[j];
                              gx[r * d + j] += invstd[r] * (gh - s1 / dd - xhat[r * d + j] * s2 / dd);
                            }
                          }
                        });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(y), {x}, "dropout", [mask](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& mask) {
  if (q.rank() < 2 || q.shape() != k.shape() || k.rank() != v.rank() ||
      k.dim(k.rank() - 2) != v.dim(v.rank() - 2)) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()));
  }
  const std::size_t r = q.rank();
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[r - 1], order[r - 2]);
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(q.shape().back()));
  Tensor<T> scores = scale(matmul(q, permute(k, order)), scale_factor);
  if (mask.defined()) scores = add(scores, mask);
  return matmul(softmax(scores, -1), v);
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& indices) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-d, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<T> y(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= rows) {
      throw std::out_of_range("embedding: index " + std::to_string(indices[i]) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(indices[i]) * d, d, y.data() + i * d);
  }
  return make_result<T>({indices.size(), d}, std::move(y), {table}, "embedding", [indices, d](Node<T>& self) {
    auto& gt = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(indices[i]) * d + j] += self.grad[i * d + j];
  });
}

template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4 || out_h == 0 || out_w == 0) {
    throw ShapeError("adaptive_avg_pool2d: input " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<T> y(n * c * out_h * out_w);
  const T* px = x.data().data();
  for (std::size_t pc = 0; pc < n * c; ++pc)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t y0 = lo(i, h, out_h), y1 = hi(i, h, out_h);
        const std::size_t x0 = lo(j, w, out_w), x1 = hi(j, w, out_w);
        T acc = T(0);
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += px[(pc * h + yy) * w + xx];
        y[(pc * out_h + i) * out_w + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  return make_result<T>({n, c, out_h, out_w}, std::move(y), {x}, "adaptive_avg_pool2d",
                        [=](Node<T>& self) {
                          auto& gx = self.parents[0]->ensure_grad();
                          for (std::size_t pc = 0; pc < n * c; ++pc)
                            for (std::size_t i = 0; i < out_h; ++i)
                              for (std::size_t j = 0; j < out_w; ++j) {
                                const std::size_t y0 = lo(i, h, out_h), y1 = hi(i, h, out_h);
                                const std::size_t x0 = lo(j, w, out_w), x1 = hi(j, w, out_w);
                                const T g = self.grad[(pc * out_h + i) * out_w + j] /
                                            static_cast<T>((y1 - y0) * (x1 - x0));
                                for (std::size_t yy = y0; yy < y1; ++yy)
                                  for (std::size_t xx = x0; xx < x1; ++xx) gx[(pc * h + yy) * w + xx] += g;
                              }
                        });
}

template <class T>
Tensor<T> window_means(const Tensor<T>& x, std::size_t kh, std::size_t kw, int padding) {
  if (x.rank() != 4 || kh == 0 || kw == 0 || padding < 0) {
    throw ShapeError("window_means: input " + shape_str(x.shape()) + " with kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const long p = padding, oh = static_cast<long>(h) + 2 * p - static_cast<long>(kh) + 1,
             ow = static_cast<long>(w) + 2 * p - static_cast<long>(kw) + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("window_means: kernel larger than padded input " + shape_str(x.shape()));
  const T inv = T(1) / static_cast<T>(oh * ow);
  // Window (i, j) covers input rows [i - p, i - p + oh) and cols [j - p, j - p + ow), clipped.
  auto clip = [](long lo, long len, std::size_t extent) {
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max(0L, lo)),
                                               static_cast<std::size_t>(std::clamp(lo + len, 0L, static_cast<long>(extent))));
  };
  const std::size_t per = c * kh * kw;
  std::vector<T> y(n * per);
  std::vector<T> integral((h + 1) * (w + 1));
  const T* px = x.data().data();
  for (std::size_t pc = 0; pc < n * c; ++pc) {
    const T* img = px + pc * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      T run = T(0);
      for (std::size_t q = 0; q < w; ++q) {
        run += img[r * w + q];
        integral[(r + 1) * (w + 1) + q + 1] = integral[r * (w + 1) + q + 1] + run;
      }
    }
    for (std::size_t i = 0; i < kh; ++i) {
      const auto [r0, r1] = clip(static_cast<long>(i) - p, oh, h);
      for (std::size_t j = 0; j < kw; ++j) {
        const auto [c0, c1] = clip(static_cast<long>(j) - p, ow, w);
        T s = T(0);
        if (r0 < r1 && c0 < c1)
          s = integral[r1 * (w + 1) + c1] - integral[r0 * (w + 1) + c1] - integral[r1 * (w + 1) + c0] +
              integral[r0 * (w + 1) + c0];
        y[pc * kh * kw + i * kw + j] = s * inv;
      }
    }
  }
  return make_result<T>({n, per}, std::move(y), {x}, "window_means", [=](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    // Scatter each window's grad over its rectangle with a 2-d difference array.
    std::vector<T> diff((h + 1) * (w + 1));
    for (std::size_t pc = 0; pc < n * c; ++pc) {
      std::fill(diff.begin(), diff.end(), T(0));
      for (std::size_t i = 0; i < kh; ++i) {
        const auto [r0, r1] = clip(static_cast<long>(i) - p, oh, h);
        for (std::size_t j = 0; j < kw; ++j) {
          const auto [c0, c1] = clip(static_cast<long>(j) - p, ow, w);
          if (r0 >= r1 || c0 >= c1) continue;
          const T g = self.grad[pc * kh * kw + i * kw + j] * inv;
          diff[r0 * (w + 1) + c0] += g;
          diff[r0 * (w + 1) + c1] -= g;
          diff[r1 * (w + 1) + c0] -= g;
          diff[r1 * (w + 1) + c1] += g;
        }
      }
      for (std::size_t r = 1; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) diff[r * (w + 1) + q] += diff[(r - 1) * (w + 1) + q];
      for (std::size_t r = 0; r < h; ++r) {
        T run = T(0);
        for (std::size_t q = 0; q < w; ++q) {
          run += diff[r * (w + 1) + q];
          gx[pc * h * w + r * w + q] += run;
        }
      }
    }
  });
}

template <class T>
Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft) {
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through: " + shape_str(hard.shape()) + " vs " + shape_str(soft.shape()));
  }
  std::vector<T> y(hard.data().begin(), hard.data().end());
  return make_result<T>(hard.shape(), std::move(y), {soft}, "straight_through", [](Node<T>& self) {
    auto& gs = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Likelihoods

template <class T>
Tensor<T> bernoulli_logprob(const Tensor<T>& target, const Tensor<T>& logits) {
  if (target.shape() != logits.shape()) {
    throw ShapeError("bernoulli_logprob: target " + shape_str(target.shape()) + " vs logits " +
                     shape_str(logits.shape()));
  }
  std::vector<T> y(logits.numel());
  const T* px = target.data().data();
  const T* pl = logits.data().data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = -px[i] * softplus_scalar(-pl[i]) - (T(1) - px[i]) * softplus_scalar(pl[i]);
  std::vector<T> tx(target.data().begin(), target.data().end());
  return make_result<T>(logits.shape(), std::move(y), {logits}, "bernoulli_logprob",
                        [tx = std::move(tx)](Node<T>& self) {
                          auto& nl = *self.parents[0];
                          auto& gl = nl.ensure_grad();
                          for (std::size_t i = 0; i < gl.size(); ++i)
                            gl[i] += self.grad[i] * (tx[i] - sigmoid_scalar(nl.data[i]));
                        });
}

template <class T>
Tensor<T> logistic_mixture_logprob(const Tensor<T>& target, const Tensor<T>& params, int mixtures,
                                   int levels) {
  if (target.rank() != 4 || params.rank() != 4 || mixtures < 1 || levels < 2) {
    throw ShapeError("logistic_mixture_logprob: target " + shape_str(target.shape()) + ", params " +
                     shape_str(params.shape()));
  }
  const std::size_t n = target.dim(0), c = target.dim(1), h = target.dim(2), w = target.dim(3);
  const std::size_t km = static_cast<std::size_t>(mixtures);
  if (params.dim(0) != n || params.dim(1) != km * (1 + 2 * c) || params.dim(2) != h || params.dim(3) != w) {
    throw std::invalid_argument("logistic_mixture_logprob: invalid mixture parameters " +
                                shape_str(params.shape()) + " for target " + shape_str(target.shape()) +
                                " with " + std::to_string(mixtures) + " mixtures");
  }
  const std::size_t hw = h * w, pc = params.dim(1);
  const T half = T(1) / static_cast<T>(levels - 1);
  const T log_bin = std::log(T(2) * half);
  const T edge = T(1) - half / T(2);
  const T log_scale_min = T(-7);

  // Per-input-element partials, filled during the forward pass.
  std::vector<T> dparams(params.numel(), T(0));
  std::vector<T> y(n * hw);
  const T* px = target.data().data();
  const T* pp = params.data().data();
  std::vector<T> lp(km), dmu(km * c), dls(km * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      auto P = [&](std::size_t ch) { return pp[(i * pc + ch) * hw + p]; };
      T lmax = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < km; ++k) lmax = std::max(lmax, P(k));
      T lz = T(0);
      for (std::size_t k = 0; k < km; ++k) lz += std::exp(P(k) - lmax);
      lz = lmax + std::log(lz);
      for (std::size_t k = 0; k < km; ++k) {
        T acc = P(k) - lz;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T x = px[((i * c) + ch) * hw + p];
          const T mu = P(km + k * c + ch);
          const T raw_ls = P(km + km * c + k * c + ch);
          const bool clamped = raw_ls < log_scale_min;
          const T ls = clamped ? log_scale_min : raw_ls;
          const T inv_s = std::exp(-ls);
          const T centered = x - mu;
          const T plus = inv_s * (centered + half);
          const T minus = inv_s * (centered - half);
          T ll, d_plus = T(0), d_minus = T(0), d_ls_direct = T(0);
          if (x < -edge) {
            ll = -softplus_scalar(-plus);
            d_plus = sigmoid_scalar(-plus);
          } else if (x > edge) {
            ll = -softplus_scalar(minus);
            d_minus = -sigmoid_scalar(minus);
          } else {
            // Difference of CDFs taken on the side that avoids cancellation near 1.
            const T diff = centered > T(0) ? sigmoid_scalar(-minus) - sigmoid_scalar(-plus)
                                           : sigmoid_scalar(plus) - sigmoid_scalar(minus);
            if (diff > T(1e-5)) {
              ll = std::log(diff);
              const T sp = sigmoid_scalar(plus), sm = sigmoid_scalar(minus);
              d_plus = sp * (T(1) - sp) / diff;
              d_minus = -sm * (T(1) - sm) / diff;
            } else {
              const T mid = inv_s * centered;
              ll = mid - ls - T(2) * softplus_scalar(mid) + log_bin;
              const T dmid = T(1) - T(2) * sigmoid_scalar(mid);
              // mid depends on mu and ls exactly like plus/minus do; route through d_plus.
              d_plus = dmid;
              d_ls_direct = T(-1);
              dmu[k * c + ch] = -inv_s * dmid;
              dls[k * c + ch] = clamped ? T(0) : (d_ls_direct - dmid * mid);
              acc += ll;
              continue;
            }
          }
          dmu[k * c + ch] = -inv_s * (d_plus + d_minus);
          dls[k * c + ch] = clamped ? T(0) : -(d_plus * plus + d_minus * minus);
          acc += ll;
        }
        lp[k] = acc;
        for (std::size_t ch = 0; ch < c; ++ch) {
          dparams[(i * pc + km + k * c + ch) * hw + p] = dmu[k * c + ch];
          dparams[(i * pc + km + km * c + k * c + ch) * hw + p] = dls[k * c + ch];
        }
      }
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < km; ++k) m = std::max(m, lp[k]);
      T z = T(0);
      for (std::size_t k = 0; k < km; ++k) z += std::exp(lp[k] - m);
      const T out = m + std::log(z);
      y[i * hw + p] = out;
      for (std::size_t k = 0; k < km; ++k) {
        const T resp = std::exp(lp[k] - out);
        const T weight = std::exp(P(k) - lz);
        dparams[(i * pc + k) * hw + p] = resp - weight;
        for (std::size_t ch = 0; ch < c; ++ch) {
          dparams[(i * pc + km + k * c + ch) * hw + p] *= resp;
          dparams[(i * pc + km + km * c + k * c + ch) * hw + p] *= resp;
        }
      }
    }
  return make_result<T>({n, h, w}, std::move(y), {params}, "logistic_mixture_logprob",
                        [dparams = std::move(dparams), n, pc, hw](Node<T>& self) {
                          auto& gp = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t ch = 0; ch < pc; ++ch)
                              for (std::size_t p = 0; p < hw; ++p) {
                                const std::size_t k = (i * pc + ch) * hw + p;
                                gp[k] += self.grad[i * hw + p] * dparams[k];
                              }
                        });
}

#define NPDRAW_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> neg(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> tanh(const Tensor<T>&);                                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> log_sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                             \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                            \
  template Tensor<T> logsumexp(const Tensor<T>&, int, bool);                                       \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);       \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                      int, int);                                                   \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,  \
                                Tensor<T>&, bool, T, T);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);                    \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                               const Tensor<T>&);                                                  \
  template Tensor<T> embedding(const Tensor<T>&, const std::vector<std::int64_t>&);                \
  template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);              \
  template Tensor<T> window_means(const Tensor<T>&, std::size_t, std::size_t, int);                 \
  template Tensor<T> straight_through(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> bernoulli_logprob(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> logistic_mixture_logprob(const Tensor<T>&, const Tensor<T>&, int, int);

NPDRAW_INSTANTIATE_OPS(float)
NPDRAW_INSTANTIATE_OPS(double)

}  // namespace npdraw::ad
