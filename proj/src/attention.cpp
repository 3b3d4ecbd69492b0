#include "sdah/attention.hpp"

#include <algorithm>
#include <cmath>

#include "sdah/flops.hpp"
#include "sdah/ops.hpp"

namespace sdah {

WindowLayout WindowLayout::make(int height, int width, int window, int shift) {
  if (window <= 0 || height <= 0 || width <= 0) throw ShapeError("window layout: sizes must be positive");
  if (height % window != 0 || width % window != 0)
    throw ShapeError("window size " + std::to_string(window) + " does not divide " +
                     std::to_string(height) + "x" + std::to_string(width));
  if (shift != 0 && shift != window / 2)
    throw ShapeError("window shift must be 0 or window/2, got " + std::to_string(shift));
  return WindowLayout{height, width, window, shift};
}

std::array<int, 2> WindowLayout::shifted_coord(int n, int p) const {
  const int wy = n / cols(), wx = n % cols();
  return {wy * window + p / window, wx * window + p % window};
}

std::array<int, 2> WindowLayout::global_coord(int n, int p) const {
  const auto s = shifted_coord(n, p);
  return {(s[0] + shift) % height, (s[1] + shift) % width};
}

int window_count(int height, int width, int window) {
  return WindowLayout::make(height, width, window).count();
}

std::vector<std::array<int, 2>> reference_points(const WindowLayout& layout) {
  std::vector<std::array<int, 2>> pts;
  pts.reserve(static_cast<std::size_t>(layout.count()) * layout.points());
  for (int n = 0; n < layout.count(); ++n)
    for (int p = 0; p < layout.points(); ++p) pts.push_back(layout.global_coord(n, p));
  return pts;
}

SampleScope parse_sample_scope(const std::string& s) {
  if (s == "global") return SampleScope::global;
  if (s == "window") return SampleScope::window;
  throw DataError("unknown sample_scope '" + s + "' (expected global|window)");
}

std::string to_string(SampleScope s) { return s == SampleScope::global ? "global" : "window"; }

namespace {

template <typename T>
void check_map(const Tensor<T>& x, const WindowLayout& layout, const char* op) {
  if (x.rank() != 3 || x.dim(1) != layout.height || x.dim(2) != layout.width)
    throw ShapeError(std::string(op) + ": map " + shape_str(x.shape()) + " does not match layout " +
                     std::to_string(layout.height) + "x" + std::to_string(layout.width));
}

}  // namespace

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, const WindowLayout& layout) {
  check_map(x, layout, "window_partition");
  const int c = x.dim(0), nw = layout.count(), np = layout.points();
  std::vector<std::uint32_t> index;
  index.reserve(x.numel());
  for (int n = 0; n < nw; ++n)
    for (int p = 0; p < np; ++p) {
      const auto g = layout.global_coord(n, p);
      for (int ch = 0; ch < c; ++ch)
        index.push_back(static_cast<std::uint32_t>((ch * layout.height + g[0]) * layout.width + g[1]));
    }
  return gather(x, std::move(index), Shape{nw, np, c});
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& wins, const WindowLayout& layout) {
  const int nw = layout.count(), np = layout.points();
  if (wins.rank() != 3 || wins.dim(0) != nw || wins.dim(1) != np)
    throw ShapeError("window_merge: expected [" + std::to_string(nw) + " x " + std::to_string(np) +
                     " x C], got " + shape_str(wins.shape()));
  const int c = wins.dim(2), h = layout.height, w = layout.width, ws = layout.window;
  std::vector<std::uint32_t> index(wins.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = (y - layout.shift + h) % h, sx = (x - layout.shift + w) % w;
        const int n = (sy / ws) * layout.cols() + sx / ws;
        const int p = (sy % ws) * ws + sx % ws;
        index[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            static_cast<std::uint32_t>((static_cast<std::size_t>(n) * np + p) * c + ch);
      }
  return gather(wins, std::move(index), Shape{c, h, w});
}

template <typename T>
Tensor<T> roll_map(const Tensor<T>& x, int shift) {
  if (x.rank() != 3) throw ShapeError("roll_map: expected [C x H x W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::uint32_t> index(x.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        index[(static_cast<std::size_t>(ch) * h + y) * w + xx] = static_cast<std::uint32_t>(
            (static_cast<std::size_t>(ch) * h + (y + shift) % h) * w + (xx + shift) % w);
  return gather(x, std::move(index), x.shape());
}

template <typename T>
Tensor<T> compute_offsets(const Tensor<T>& queries, const OffsetNet<T>& net, int window,
                          double gamma_off) {
  const bool single = queries.rank() == 2;
  const Tensor<T> q = single ? reshape(queries, Shape{1, queries.dim(0), queries.dim(1)}) : queries;
  if (q.rank() != 3 || q.dim(1) != window * window)
    throw ShapeError("compute_offsets: queries must be [N_w x Ws^2 x d], got " +
                     shape_str(queries.shape()));
  const int nw = q.dim(0), d = q.dim(2), k = net.dw_weight.dim(-1);
  auto grid = reshape(permute(q, {0, 2, 1}), Shape{nw, d, window, window});
  auto hidden = gelu(conv2d(grid, net.dw_weight, net.dw_bias, {1, k / 2, d}));
  auto raw = conv2d(hidden, net.pw_weight, net.pw_bias);
  auto off = permute(reshape(raw, Shape{nw, 2, window * window}), {0, 2, 1});
  off = scale(tanh(off), static_cast<T>(gamma_off * window / 2.0));
  return single ? reshape(off, Shape{window * window, 2}) : off;
}

template <typename T>
Tensor<T> interpolated_bias(const Tensor<T>& key_local, const Tensor<T>& table, int window) {
  const int side = 2 * window - 1;
  if (static_cast<int>(table.numel()) != side * side)
    throw ShapeError("interpolated_bias: table must hold (2Ws-1)^2 entries");
  if (key_local.rank() != 3 || key_local.dim(1) != window * window || key_local.dim(2) != 2)
    throw ShapeError("interpolated_bias: keys must be [N_w x Ws^2 x 2]");
  const int nw = key_local.dim(0), np = window * window;
  const T lo = T(0), hi = T(side - 1);

  // Table coordinate of displacement (key - query) + (Ws - 1), clamped.
  struct Tap {
    int i0, i1;
    T frac;
    bool inside;
  };
  auto tap = [lo, hi, side](T u) {
    const bool inside = u >= lo && u <= hi;
    const T c = std::clamp(u, lo, hi);
    const int i0 = static_cast<int>(std::floor(c));
    return Tap{i0, std::min(i0 + 1, side - 1), c - T(i0), inside};
  };

  std::vector<T> out(static_cast<std::size_t>(nw) * np * np);
  auto kv = key_local.data(), tv = table.data();
  for (int n = 0; n < nw; ++n)
    for (int q = 0; q < np; ++q) {
      const int qy = q / window, qx = q % window;
      for (int k = 0; k < np; ++k) {
        const std::size_t ki = (static_cast<std::size_t>(n) * np + k) * 2;
        const auto ty = tap(kv[ki] - T(qy) + T(window - 1));
        const auto tx = tap(kv[ki + 1] - T(qx) + T(window - 1));
        out[(static_cast<std::size_t>(n) * np + q) * np + k] =
            (T(1) - ty.frac) * (T(1) - tx.frac) * tv[ty.i0 * side + tx.i0] +
            (T(1) - ty.frac) * tx.frac * tv[ty.i0 * side + tx.i1] +
            ty.frac * (T(1) - tx.frac) * tv[ty.i1 * side + tx.i0] +
            ty.frac * tx.frac * tv[ty.i1 * side + tx.i1];
      }
    }
  detail::add_flops(kBilinearFlopsPerSample * out.size());
  return detail::make_result<T>(
      "interpolated_bias", Shape{nw, np, np}, std::move(out), {key_local, table},
      [nw, np, window, side, tap](Node<T>& self) {
        const auto& g = self.grad;
        const auto& kv = self.inputs[0]->value;
        const auto& tv = self.inputs[1]->value;
        T* gk = detail::input_grad(self, 0);
        T* gt = detail::input_grad(self, 1);
        for (int n = 0; n < nw; ++n)
          for (int q = 0; q < np; ++q) {
            const int qy = q / window, qx = q % window;
            for (int k = 0; k < np; ++k) {
              const std::size_t ki = (static_cast<std::size_t>(n) * np + k) * 2;
              const T go = g[(static_cast<std::size_t>(n) * np + q) * np + k];
              const auto ty = tap(kv[ki] - T(qy) + T(window - 1));
              const auto tx = tap(kv[ki + 1] - T(qx) + T(window - 1));
              const T t00 = tv[ty.i0 * side + tx.i0], t01 = tv[ty.i0 * side + tx.i1];
              const T t10 = tv[ty.i1 * side + tx.i0], t11 = tv[ty.i1 * side + tx.i1];
              if (gt) {
                gt[ty.i0 * side + tx.i0] += go * (T(1) - ty.frac) * (T(1) - tx.frac);
                gt[ty.i0 * side + tx.i1] += go * (T(1) - ty.frac) * tx.frac;
                gt[ty.i1 * side + tx.i0] += go * ty.frac * (T(1) - tx.frac);
                gt[ty.i1 * side + tx.i1] += go * ty.frac * tx.frac;
              }
              if (gk) {
                if (ty.inside)
                  gk[ki] += go * ((T(1) - tx.frac) * (t10 - t00) + tx.frac * (t11 - t01));
                if (tx.inside)
                  gk[ki + 1] += go * ((T(1) - ty.frac) * (t01 - t00) + ty.frac * (t11 - t10));
              }
            }
          }
      });
}

template <typename T>
Tensor<T> sdmsa(const Tensor<T>& x, const SdmsaParams<T>& params, const WindowLayout& layout,
                bool deform, SdmsaTrace<T>* trace) {
  check_map(x, layout, "sdmsa");
  const int c = params.channels, heads = params.heads, ws = layout.window;
  if (x.dim(0) != c) throw ShapeError("sdmsa: channel count does not match parameters");
  if (heads <= 0 || c % heads != 0) throw ShapeError("sdmsa: heads must divide channels");
  if (params.window != ws) throw ShapeError("sdmsa: parameter window size differs from layout");
  if (deform && static_cast<int>(params.offset_nets.size()) != heads)
    throw ShapeError("sdmsa: deformation needs one offset net per head");
  const int d = c / heads, nw = layout.count(), np = layout.points();
  const int h = layout.height, w = layout.width;
  const bool rolled = params.scope == SampleScope::window;

  auto xw = window_partition(x, layout);
  auto flat = reshape(xw, Shape{nw * np, c});
  auto q_all = matmul(flat, params.w_q);

  // Constant coordinate grids: the sampling frame (unshifted map for global
  // scope, shifted map for window scope) and the window-local frame.
  std::vector<T> frame(static_cast<std::size_t>(nw) * np * 2), local(frame.size());
  for (int n = 0; n < nw; ++n)
    for (int p = 0; p < np; ++p) {
      const auto g = rolled ? layout.shifted_coord(n, p) : layout.global_coord(n, p);
      const std::size_t i = (static_cast<std::size_t>(n) * np + p) * 2;
      frame[i] = T(g[0]);
      frame[i + 1] = T(g[1]);
      local[i] = T(p / ws);
      local[i + 1] = T(p % ws);
    }
  std::vector<T> frame_minus_local(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) frame_minus_local[i] = frame[i] - local[i];
  const Shape pts_shape{nw * np, 2};
  const Tensor<T> frame_t(pts_shape, frame), local_t(pts_shape, local);
  const Tensor<T> to_frame(pts_shape, frame_minus_local);
  const Tensor<T> to_local = scale(to_frame, T(-1));

  Tensor<T> source;
  if (deform) source = (rolled && layout.shift > 0) ? roll_map(x, layout.shift) : x;

  if (trace) {
    trace->layout = layout;
    trace->heads = heads;
    trace->frame_shift = rolled ? layout.shift : 0;
    trace->deformed = deform;
    trace->offset_bound = params.gamma_off * ws / 2.0;
    trace->reference = frame;
    trace->points.clear();
    trace->offsets.clear();
    trace->attention.clear();
  }

  const int side = 2 * ws - 1;
  const T inv_sqrt_d = T(1) / std::sqrt(T(d));
  std::vector<Tensor<T>> head_out;
  head_out.reserve(heads);
  for (int j = 0; j < heads; ++j) {
    auto q = reshape(slice(q_all, 1, j * d, (j + 1) * d), Shape{nw, np, d});
    Tensor<T> feats = flat, key_local = local_t, pts = frame_t;
    if (deform) {
      auto off = reshape(compute_offsets(q, params.offset_nets[j], ws, params.gamma_off), pts_shape);
      if (rolled) {
        key_local = clamp_points(add(local_t, off), T(0), T(ws - 1), T(0), T(ws - 1));
        pts = add(key_local, to_frame);
      } else {
        pts = clamp_points(add(frame_t, off), T(0), T(h - 1), T(0), T(w - 1));
        key_local = add(pts, to_local);
      }
      feats = bilinear_sample(source, pts);
    }
    auto k = reshape(matmul(feats, slice(params.w_k, 1, j * d, (j + 1) * d)), Shape{nw, np, d});
    auto v = reshape(matmul(feats, slice(params.w_v, 1, j * d, (j + 1) * d)), Shape{nw, np, d});
    auto scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    auto table = reshape(slice(params.bias_table, 0, j, j + 1), Shape{side, side});
    scores = add(scores, interpolated_bias(reshape(key_local, Shape{nw, np, 2}), table, ws));
    auto attn = softmax(scores, 2);
    head_out.push_back(matmul(attn, v));

    if (trace) {
      auto pv = pts.data();
      trace->points.insert(trace->points.end(), pv.begin(), pv.end());
      for (std::size_t i = 0; i < pv.size(); ++i) trace->offsets.push_back(pv[i] - frame[i]);
      auto av = attn.data();
      trace->attention.insert(trace->attention.end(), av.begin(), av.end());
    }
  }
  auto z = reshape(concat(head_out, 2), Shape{nw * np, c});
  auto out = reshape(matmul(z, params.w_o), Shape{nw, np, c});
  return window_merge(out, layout);
}

#define SDAH_INSTANTIATE_ATTENTION(T)                                                        \
  template Tensor<T> window_partition(const Tensor<T>&, const WindowLayout&);                \
  template Tensor<T> window_merge(const Tensor<T>&, const WindowLayout&);                    \
  template Tensor<T> roll_map(const Tensor<T>&, int);                                        \
  template Tensor<T> compute_offsets(const Tensor<T>&, const OffsetNet<T>&, int, double);    \
  template Tensor<T> interpolated_bias(const Tensor<T>&, const Tensor<T>&, int);             \
  template Tensor<T> sdmsa(const Tensor<T>&, const SdmsaParams<T>&, const WindowLayout&,     \
                           bool, SdmsaTrace<T>*);

SDAH_INSTANTIATE_ATTENTION(float)
SDAH_INSTANTIATE_ATTENTION(double)

}  // namespace sdah
