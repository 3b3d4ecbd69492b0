#pragma once

#include <array>
#include <string>
#include <vector>

#include "sdah/tensor.hpp"

namespace sdah {

/// Non-overlapping square windows tiling an H x W map after a cyclic shift of
/// (-shift, -shift). Window n covers rows [wy*Ws, wy*Ws+Ws) of the shifted map,
/// patches are numbered row-major inside a window, windows row-major.
struct WindowLayout {
  int height = 0;
  int width = 0;
  int window = 0;
  int shift = 0;

  /// Validates: window divides both sides, shift is 0 or window/2.
  static WindowLayout make(int height, int width, int window, int shift = 0);

  int rows() const { return height / window; }
  int cols() const { return width / window; }
  int count() const { return rows() * cols(); }
  int points() const { return window * window; }

  /// Unshifted (y, x) feature coordinate of patch p in window n.
  std::array<int, 2> global_coord(int n, int p) const;
  /// Shifted-frame (y, x) coordinate of patch p in window n.
  std::array<int, 2> shifted_coord(int n, int p) const;
};

/// N_w = H*W / Ws^2; throws ShapeError when Ws does not divide H and W.
int window_count(int height, int width, int window);

/// [C x H x W] -> [N_w x Ws^2 x C], shift applied first.
template <typename T> Tensor<T> window_partition(const Tensor<T>& x, const WindowLayout& layout);
/// Exact inverse of window_partition, including the un-shift.
template <typename T> Tensor<T> window_merge(const Tensor<T>& wins, const WindowLayout& layout);
/// Cyclic shift of a [C x H x W] map by (-shift, -shift).
template <typename T> Tensor<T> roll_map(const Tensor<T>& x, int shift);

/// Per-window patch coordinates in the unshifted frame, flattened as
/// [N_w * Ws^2] entries of (y, x).
std::vector<std::array<int, 2>> reference_points(const WindowLayout& layout);

/// Where deformed keys may be sampled from.
enum class SampleScope { global, window };
SampleScope parse_sample_scope(const std::string& s);
std::string to_string(SampleScope s);

/// Depthwise k x k -> GELU -> 1x1 to (dy, dx), applied to one head's queries
/// arranged on the Ws x Ws window grid.
template <typename T>
struct OffsetNet {
  Tensor<T> dw_weight;  // [d x 1 x k x k]
  Tensor<T> dw_bias;    // [d]
  Tensor<T> pw_weight;  // [2 x d x 1 x 1]
  Tensor<T> pw_bias;    // [2]
};

template <typename T>
struct SdmsaParams {
  int channels = 0;
  int heads = 0;
  int window = 0;
  double gamma_off = 1.0;
  SampleScope scope = SampleScope::global;

  Tensor<T> w_q, w_k, w_v, w_o;  // [C x C], head j uses columns [j*d, (j+1)*d)
  Tensor<T> bias_table;          // [heads x (2Ws-1) x (2Ws-1)]
  std::vector<OffsetNet<T>> offset_nets;  // one per head; empty without deformation

  int head_dim() const { return channels / heads; }
};

/// Values captured during one sdmsa forward, consumed by the explain exports.
/// Coordinates live in a frame shifted by -frame_shift (0 for global scope).
template <typename T>
struct SdmsaTrace {
  WindowLayout layout;
  int heads = 0;
  int frame_shift = 0;
  bool deformed = false;
  double offset_bound = 0;   // gamma_off * Ws / 2
  std::vector<T> reference;  // [N_w*P x 2]
  std::vector<T> points;     // [heads x N_w*P x 2], sampling coordinates after clamping
  std::vector<T> offsets;    // [heads x N_w*P x 2], points - reference
  std::vector<T> attention;  // [heads x N_w x P x P], rows sum to 1
};

/// Offsets for one head: queries [N_w x P x d] (or [P x d]) -> [.. x P x 2],
/// bounded by tanh to gamma_off * Ws / 2 pixels.
template <typename T>
Tensor<T> compute_offsets(const Tensor<T>& queries, const OffsetNet<T>& net, int window,
                          double gamma_off);

/// Relative-position bias between the window's query grid and continuous key
/// positions [N_w x P x 2] (window-local frame), by bilinear lookup into one
/// head's (2Ws-1) x (2Ws-1) table. Displacements are clamped into the table.
template <typename T>
Tensor<T> interpolated_bias(const Tensor<T>& key_local, const Tensor<T>& table, int window);

/// Shifted-window (deformable) multi-head self-attention over x [C x H x W].
/// With deform == false keys and values come straight from the window patches.
template <typename T>
Tensor<T> sdmsa(const Tensor<T>& x, const SdmsaParams<T>& params, const WindowLayout& layout,
                bool deform, SdmsaTrace<T>* trace = nullptr);

}  // namespace sdah
