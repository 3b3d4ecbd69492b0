#include "sdah/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "sdah/flops.hpp"

namespace sdah {

namespace {
thread_local std::uint64_t g_flops = 0;
}

FlopScope::FlopScope() : start_(g_flops) {}
FlopScope::~FlopScope() = default;
std::uint64_t FlopScope::count() const { return g_flops - start_; }

namespace detail {
void add_flops(std::uint64_t n) { g_flops += n; }
}  // namespace detail

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

namespace {

using detail::input_grad;
using detail::make_result;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Row-major strides of `shape`.
std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return a;
}

// Splits a shape around `axis` into outer x len x inner.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& g = self.grad;
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* gi = input_grad(self, k))
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& g = self.grad;
    if (T* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (T* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (T* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_result<T>("div", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (T* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    if (T* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    const auto& g = self.grad;
    if (T* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const auto& g = self.grad;
    if (T* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || x.dim(-1) != b.dim(0))
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                     shape_str(x.shape()));
  const std::size_t c = b.numel();
  std::vector<T> out(x.numel());
  auto xv = x.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % c];
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, b}, [c](Node<T>& self) {
    const auto& g = self.grad;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (T* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
  });
}

// --------------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)))
    throw ShapeError("matmul: expected two 2-D or two 3-D operands");
  const int batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) throw ShapeError("matmul: batch size mismatch");
  const int m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " · " +
                     shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(batch) * m * n, T(0));
  auto av = a.data(), bv = b.data();
  for (int q = 0; q < batch; ++q) {
    const T* A = av.data() + static_cast<std::size_t>(q) * m * k;
    const T* B = bv.data() + static_cast<std::size_t>(q) * k * n;
    T* Z = out.data() + static_cast<std::size_t>(q) * m * n;
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        for (int j = 0; j < n; ++j) Z[i * n + j] += aip * B[p * n + j];
      }
  }
  detail::add_flops(2ull * batch * m * k * n);
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_result<T>("matmul", shape, std::move(out), {a, b},
                        [batch, m, k, n](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    T* ga = input_grad(self, 0);
    T* gb = input_grad(self, 1);
    for (int q = 0; q < batch; ++q) {
      const std::size_t oa = static_cast<std::size_t>(q) * m * k;
      const std::size_t ob = static_cast<std::size_t>(q) * k * n;
      const std::size_t oz = static_cast<std::size_t>(q) * m * n;
      if (ga) {
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += g[oz + i * n + j] * bv[ob + p * n + j];
            ga[oa + i * k + p] += acc;
          }
      }
      if (gb) {
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const T aip = av[oa + i * k + p];
            for (int j = 0; j < n; ++j) gb[ob + p * n + j] += aip * g[oz + i * n + j];
          }
      }
    }
  });
}

// ------------------------------------------------------------- layout changes

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::uint32_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size())
    throw ShapeError("gather: index count does not match output shape");
  std::vector<T> out(index.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw ShapeError("gather: index out of range");
    out[i] = xv[index[i]];
  }
  return make_result<T>("gather", std::move(out_shape), std::move(out), {x},
                        [index = std::move(index)](Node<T>& self) {
    const auto& g = self.grad;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) gx[index[i]] += g[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    const auto& g = self.grad;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> used(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_strides = strides_of(x.shape());
  const std::size_t n = x.numel();
  std::vector<std::uint32_t> index(n);
  std::vector<int> coord(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (int i = 0; i < r; ++i) src += coord[i] * in_strides[perm[i]];
    index[flat] = static_cast<std::uint32_t>(src);
    for (int i = r - 1; i >= 0; --i) {
      if (++coord[i] < out_shape[i]) break;
      coord[i] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out_shape));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<int> perm(x.rank());
  for (int i = 0; i < x.rank(); ++i) perm[i] = i;
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int begin, int end) {
  const int a = normalize_axis(axis, x.rank(), "slice");
  if (begin < 0 || end > x.dim(a) || begin >= end) throw ShapeError("slice: invalid range");
  const auto s = split_axis(x.shape(), a);
  const std::size_t width = end - begin;
  Shape out_shape = x.shape();
  out_shape[a] = static_cast<int>(width);
  std::vector<std::uint32_t> index;
  index.reserve(s.outer * width * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = begin; l < static_cast<std::size_t>(end); ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        index.push_back(static_cast<std::uint32_t>((o * s.len + l) * s.inner + i));
  return gather(x, std::move(index), std::move(out_shape));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const int a = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != a && p.dim(i) != parts[0].dim(i)) throw ShapeError("concat: shape mismatch");
    out_shape[a] += p.dim(a);
  }
  const auto s = split_axis(out_shape, a);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(static_cast<std::size_t>(p.dim(a)) * s.inner);
  const std::size_t row = s.len * s.inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                        [widths, row, outer = s.outer](Node<T>& self) {
    const auto& g = self.grad;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (T* gk = input_grad(self, k)) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i)
            gk[o * widths[k] + i] += g[o * row + offset + i];
      }
      offset += widths[k];
    }
  });
}

// -------------------------------------------------------------- convolutions

namespace {

struct ImageDims {
  bool batched;
  int n, c, h, w;
};

template <typename T>
ImageDims image_dims(const Tensor<T>& x, const char* op) {
  if (x.rank() == 3) return {false, 1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {true, x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw ShapeError(std::string(op) + ": expected [C x H x W] or [N x C x H x W], got " +
                   shape_str(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv2dOptions opt) {
  const ImageDims d = image_dims(x, "conv2d");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be 4-D");
  const int co = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int groups = opt.groups, s = opt.stride, p = opt.padding;
  if (groups < 1 || s < 1 || p < 0) throw ShapeError("conv2d: invalid stride/padding/groups");
  if (d.c % groups != 0 || co % groups != 0)
    throw ShapeError("conv2d: channels not divisible by groups");
  if (cig != d.c / groups)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co))
    throw ShapeError("conv2d: bias shape mismatch");
  if (d.h + 2 * p < kh || d.w + 2 * p < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  const int ho = (d.h + 2 * p - kh) / s + 1;
  const int wo = (d.w + 2 * p - kw) / s + 1;
  const int co_per_group = co / groups;

  std::vector<T> out(static_cast<std::size_t>(d.n) * co * ho * wo, T(0));
  auto xv = x.data(), wv = w.data();
  for (int n = 0; n < d.n; ++n)
    for (int oc = 0; oc < co; ++oc) {
      T* O = out.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
      if (bias.defined()) std::fill(O, O + ho * wo, bias.data()[oc]);
      const int g = oc / co_per_group;
      for (int icg = 0; icg < cig; ++icg) {
        const int ic = g * cig + icg;
        const T* X = xv.data() + (static_cast<std::size_t>(n) * d.c + ic) * d.h * d.w;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wk = wv[((static_cast<std::size_t>(oc) * cig + icg) * kh + ky) * kw + kx];
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * s - p + ky;
              if (iy < 0 || iy >= d.h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * s - p + kx;
                if (ix < 0 || ix >= d.w) continue;
                O[oy * wo + ox] += wk * X[iy * d.w + ix];
              }
            }
          }
      }
    }
  detail::add_flops(2ull * d.n * co * ho * wo * cig * kh * kw);
  Shape shape = d.batched ? Shape{d.n, co, ho, wo} : Shape{co, ho, wo};
  return make_result<T>(
      "conv2d", shape, std::move(out), {x, w, bias},
      [d, co, cig, kh, kw, s, p, ho, wo, co_per_group](Node<T>& self) {
        const auto& g = self.grad;
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        T* gx = input_grad(self, 0);
        T* gw = input_grad(self, 1);
        T* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
        for (int n = 0; n < d.n; ++n)
          for (int oc = 0; oc < co; ++oc) {
            const T* G = g.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
            if (gb)
              for (int i = 0; i < ho * wo; ++i) gb[oc] += G[i];
            const int grp = oc / co_per_group;
            for (int icg = 0; icg < cig; ++icg) {
              const int ic = grp * cig + icg;
              const std::size_t xo = (static_cast<std::size_t>(n) * d.c + ic) * d.h * d.w;
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  const std::size_t wi = ((static_cast<std::size_t>(oc) * cig + icg) * kh + ky) * kw + kx;
                  const T wk = wv[wi];
                  T acc = T(0);
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s - p + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * s - p + kx;
                      if (ix < 0 || ix >= d.w) continue;
                      const T go = G[oy * wo + ox];
                      if (gx) gx[xo + iy * d.w + ix] += go * wk;
                      acc += go * xv[xo + iy * d.w + ix];
                    }
                  }
                  if (gw) gw[wi] += acc;
                }
            }
          }
      });
}

template <typename T>
Tensor<T> deconv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                   int padding) {
  const ImageDims d = image_dims(x, "deconv2d");
  if (w.rank() != 4 || w.dim(0) != d.c)
    throw ShapeError("deconv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int s = stride, p = padding;
  if (s < 1 || p < 0) throw ShapeError("deconv2d: invalid stride/padding");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co))
    throw ShapeError("deconv2d: bias shape mismatch");
  const int ho = (d.h - 1) * s - 2 * p + kh;
  const int wo = (d.w - 1) * s - 2 * p + kw;
  if (ho < 1 || wo < 1) throw ShapeError("deconv2d: empty output geometry");

  std::vector<T> out(static_cast<std::size_t>(d.n) * co * ho * wo, T(0));
  auto xv = x.data(), wv = w.data();
  for (int n = 0; n < d.n; ++n) {
    if (bias.defined())
      for (int oc = 0; oc < co; ++oc) {
        T* O = out.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
        std::fill(O, O + ho * wo, bias.data()[oc]);
      }
    for (int ic = 0; ic < d.c; ++ic) {
      const T* X = xv.data() + (static_cast<std::size_t>(n) * d.c + ic) * d.h * d.w;
      for (int oc = 0; oc < co; ++oc) {
        T* O = out.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wk = wv[((static_cast<std::size_t>(ic) * co + oc) * kh + ky) * kw + kx];
            for (int iy = 0; iy < d.h; ++iy) {
              const int oy = iy * s - p + ky;
              if (oy < 0 || oy >= ho) continue;
              for (int ix = 0; ix < d.w; ++ix) {
                const int ox = ix * s - p + kx;
                if (ox < 0 || ox >= wo) continue;
                O[oy * wo + ox] += wk * X[iy * d.w + ix];
              }
            }
          }
      }
    }
  }
  detail::add_flops(2ull * d.n * d.c * co * kh * kw * d.h * d.w);
  Shape shape = d.batched ? Shape{d.n, co, ho, wo} : Shape{co, ho, wo};
  return make_result<T>("deconv2d", shape, std::move(out), {x, w, bias},
                        [d, co, kh, kw, s, p, ho, wo](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    T* gx = input_grad(self, 0);
    T* gw = input_grad(self, 1);
    T* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    for (int n = 0; n < d.n; ++n) {
      if (gb)
        for (int oc = 0; oc < co; ++oc) {
          const T* G = g.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
          for (int i = 0; i < ho * wo; ++i) gb[oc] += G[i];
        }
      for (int ic = 0; ic < d.c; ++ic) {
        const std::size_t xo = (static_cast<std::size_t>(n) * d.c + ic) * d.h * d.w;
        for (int oc = 0; oc < co; ++oc) {
          const T* G = g.data() + (static_cast<std::size_t>(n) * co + oc) * ho * wo;
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const std::size_t wi = ((static_cast<std::size_t>(ic) * co + oc) * kh + ky) * kw + kx;
              const T wk = wv[wi];
              T acc = T(0);
              for (int iy = 0; iy < d.h; ++iy) {
                const int oy = iy * s - p + ky;
                if (oy < 0 || oy >= ho) continue;
                for (int ix = 0; ix < d.w; ++ix) {
                  const int ox = ix * s - p + kx;
                  if (ox < 0 || ox >= wo) continue;
                  const T go = G[oy * wo + ox];
                  if (gx) gx[xo + iy * d.w + ix] += go * wk;
                  acc += go * xv[xo + iy * d.w + ix];
                }
              }
              if (gw) gw[wi] += acc;
            }
        }
      }
    }
  });
}

// ------------------------------------------------------------ normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int c = x.dim(-1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != c || beta.dim(0) != c)
    throw ShapeError("layer_norm: affine parameters do not match channel count " +
                     std::to_string(c));
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* X = xv.data() + r * c;
    T mu = T(0);
    for (int i = 0; i < c; ++i) mu += X[i];
    mu /= T(c);
    T var = T(0);
    for (int i = 0; i < c; ++i) var += (X[i] - mu) * (X[i] - mu);
    var /= T(c);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i) out[r * c + i] = (X[i] - mu) * rstd * gv[i] + bv[i];
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [c, rows, eps](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    const auto& gv = self.inputs[1]->value;
    T* gx = input_grad(self, 0);
    T* gg = input_grad(self, 1);
    T* gb = input_grad(self, 2);
    std::vector<T> xhat(c), dxhat(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* X = xv.data() + r * c;
      const T* G = g.data() + r * c;
      T mu = T(0);
      for (int i = 0; i < c; ++i) mu += X[i];
      mu /= T(c);
      T var = T(0);
      for (int i = 0; i < c; ++i) var += (X[i] - mu) * (X[i] - mu);
      var /= T(c);
      const T rstd = T(1) / std::sqrt(var + eps);
      T mean_d = T(0), mean_dx = T(0);
      for (int i = 0; i < c; ++i) {
        xhat[i] = (X[i] - mu) * rstd;
        dxhat[i] = G[i] * gv[i];
        mean_d += dxhat[i];
        mean_dx += dxhat[i] * xhat[i];
        if (gg) gg[i] += G[i] * xhat[i];
        if (gb) gb[i] += G[i];
      }
      mean_d /= T(c);
      mean_dx /= T(c);
      if (gx)
        for (int i = 0; i < c; ++i) gx[r * c + i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
  });
}

// ------------------------------------------------------------- activations

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<T>(v * normal_cdf(v));
  }
  return make_result<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        gx[i] += g[i] * static_cast<T>(normal_cdf(v) + v * normal_pdf(v));
      }
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return make_result<T>("tanh", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& y = self.value;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return make_result<T>("log", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    if (T* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const auto s = split_axis(x.shape(), a);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(xv[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  detail::add_flops(kSoftmaxFlopsPerElement * x.numel());
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    const auto& g = self.grad;
    const auto& y = self.value;
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "log_softmax");
  const auto s = split_axis(x.shape(), a);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(xv[base + l * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l)
        out[base + l * s.inner] = xv[base + l * s.inner] - lse;
    }
  detail::add_flops(kSoftmaxFlopsPerElement * x.numel());
  return make_result<T>("log_softmax", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    const auto& g = self.grad;
    const auto& y = self.value;
    T* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T gsum = T(0);
        for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gx[k] += g[k] - std::exp(y[k]) * gsum;
        }
      }
  });
}

// ---------------------------------------------------------------- sampling

namespace {

// Bilinear stencil of one clamped coordinate along an axis of length n.
template <typename T>
struct Stencil {
  int i0, i1;
  T frac;
  bool inside;  // coordinate was within [0, n-1] before clamping
};

template <typename T>
Stencil<T> stencil(T coord, int n) {
  const T hi = T(n - 1);
  const bool inside = coord >= T(0) && coord <= hi;
  const T c = std::clamp(coord, T(0), hi);
  const int i0 = static_cast<int>(std::floor(c));
  const int i1 = std::min(i0 + 1, n - 1);
  return {i0, i1, c - T(i0), inside};
}

}  // namespace

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& f, const Tensor<T>& points) {
  if (f.rank() != 3) throw ShapeError("bilinear_sample: features must be [C x H x W]");
  if (points.rank() != 2 || points.dim(1) != 2)
    throw ShapeError("bilinear_sample: points must be [P x 2]");
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2), np = points.dim(0);
  std::vector<T> out(static_cast<std::size_t>(np) * c);
  auto fv = f.data(), pv = points.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int q = 0; q < np; ++q) {
    const auto sy = stencil(pv[2 * q], h);
    const auto sx = stencil(pv[2 * q + 1], w);
    const T w00 = (T(1) - sy.frac) * (T(1) - sx.frac), w01 = (T(1) - sy.frac) * sx.frac;
    const T w10 = sy.frac * (T(1) - sx.frac), w11 = sy.frac * sx.frac;
    for (int ch = 0; ch < c; ++ch) {
      const T* F = fv.data() + ch * plane;
      out[static_cast<std::size_t>(q) * c + ch] =
          w00 * F[sy.i0 * w + sx.i0] + w01 * F[sy.i0 * w + sx.i1] + w10 * F[sy.i1 * w + sx.i0] +
          w11 * F[sy.i1 * w + sx.i1];
    }
  }
  detail::add_flops(kBilinearFlopsPerSample * np * c);
  return make_result<T>("bilinear_sample", Shape{np, c}, std::move(out), {f, points},
                        [c, h, w, np, plane](Node<T>& self) {
    const auto& g = self.grad;
    const auto& fv = self.inputs[0]->value;
    const auto& pv = self.inputs[1]->value;
    T* gf = input_grad(self, 0);
    T* gp = input_grad(self, 1);
    for (int q = 0; q < np; ++q) {
      const auto sy = stencil(pv[2 * q], h);
      const auto sx = stencil(pv[2 * q + 1], w);
      const T w00 = (T(1) - sy.frac) * (T(1) - sx.frac), w01 = (T(1) - sy.frac) * sx.frac;
      const T w10 = sy.frac * (T(1) - sx.frac), w11 = sy.frac * sx.frac;
      T dy = T(0), dx = T(0);
      for (int ch = 0; ch < c; ++ch) {
        const T go = g[static_cast<std::size_t>(q) * c + ch];
        const std::size_t o = ch * plane;
        const T f00 = fv[o + sy.i0 * w + sx.i0], f01 = fv[o + sy.i0 * w + sx.i1];
        const T f10 = fv[o + sy.i1 * w + sx.i0], f11 = fv[o + sy.i1 * w + sx.i1];
        if (gf) {
          gf[o + sy.i0 * w + sx.i0] += go * w00;
          gf[o + sy.i0 * w + sx.i1] += go * w01;
          gf[o + sy.i1 * w + sx.i0] += go * w10;
          gf[o + sy.i1 * w + sx.i1] += go * w11;
        }
        dy += go * ((T(1) - sx.frac) * (f10 - f00) + sx.frac * (f11 - f01));
        dx += go * ((T(1) - sy.frac) * (f01 - f00) + sy.frac * (f11 - f10));
      }
      if (gp) {
        if (sy.inside) gp[2 * q] += dy;
        if (sx.inside) gp[2 * q + 1] += dx;
      }
    }
  });
}

template <typename T>
Tensor<T> clamp_points(const Tensor<T>& points, T lo_y, T hi_y, T lo_x, T hi_x) {
  if (points.dim(-1) != 2) throw ShapeError("clamp_points: last axis must be 2");
  std::vector<T> out(points.numel());
  auto pv = points.data();
  for (std::size_t i = 0; i < out.size(); i += 2) {
    out[i] = std::clamp(pv[i], lo_y, hi_y);
    out[i + 1] = std::clamp(pv[i + 1], lo_x, hi_x);
  }
  return make_result<T>("clamp_points", points.shape(), std::move(out), {points},
                        [lo_y, hi_y, lo_x, hi_x](Node<T>& self) {
    const auto& g = self.grad;
    const auto& pv = self.inputs[0]->value;
    if (T* gp = input_grad(self, 0))
      for (std::size_t i = 0; i < g.size(); i += 2) {
        if (pv[i] >= lo_y && pv[i] <= hi_y) gp[i] += g[i];
        if (pv[i + 1] >= lo_x && pv[i + 1] <= hi_x) gp[i + 1] += g[i + 1];
      }
  });
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>("sum", Shape{1}, std::vector<T>{total}, {x}, [](Node<T>& self) {
    const T g = self.grad[0];
    if (T* gx = input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

#define SDAH_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                     \
  template Tensor<T> slice(const Tensor<T>&, int, int, int);                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> gather(const Tensor<T>&, std::vector<std::uint32_t>, Shape);            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dOptions);                                                  \
  template Tensor<T> deconv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,     \
                              int);                                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> tanh(const Tensor<T>&);                                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&, int);                                         \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                     \
  template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> clamp_points(const Tensor<T>&, T, T, T, T);                             \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);

SDAH_INSTANTIATE_OPS(float)
SDAH_INSTANTIATE_OPS(double)

}  // namespace sdah
