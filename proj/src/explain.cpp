#include "sdah/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sdah/error.hpp"
#include "sdah/io.hpp"
#include "sdah/ops.hpp"

namespace sdah {

namespace {

template <typename T>
void check_trace(const SdmsaTrace<T>& t) {
  if (t.layout.window <= 0 || t.layout.height <= 0 || t.layout.width <= 0)
    throw DataError("explain: attention trace is absent or incomplete");
  const std::size_t n = static_cast<std::size_t>(t.layout.count()) * t.layout.points();
  if (t.heads <= 0 || n == 0 || t.reference.size() != 2 * n || t.points.size() != 2 * n * t.heads ||
      t.attention.size() != n * t.layout.points() * t.heads)
    throw DataError("explain: attention trace is absent or incomplete");
}

// Sampling-frame coordinate -> unshifted map coordinate.
int unroll(int v, int shift, int size) { return (v + shift) % size; }

std::vector<std::uint8_t> pnm_header(const char* magic, int w, int h) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {s.begin(), s.end()};
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

template <typename T>
Tensor<T> attention_mass(const SdmsaTrace<T>& trace, HeatmapReduction reduction) {
  check_trace(trace);
  const auto& L = trace.layout;
  const int h = L.height, w = L.width, nw = L.count(), np = L.points();
  const std::size_t npts = static_cast<std::size_t>(nw) * np;
  std::vector<double> map(static_cast<std::size_t>(h) * w, 0.0);
  for (int j = 0; j < trace.heads; ++j)
    for (int n = 0; n < nw; ++n)
      for (int k = 0; k < np; ++k) {
        double mass = 0;
        for (int q = 0; q < np; ++q) {
          const double a =
              trace.attention[((static_cast<std::size_t>(j) * nw + n) * np + q) * np + k];
          mass = reduction == HeatmapReduction::received ? mass + a : std::max(mass, a);
        }
        const std::size_t pi = (j * npts + static_cast<std::size_t>(n) * np + k) * 2;
        const double py = std::clamp<double>(trace.points[pi], 0, h - 1);
        const double px = std::clamp<double>(trace.points[pi + 1], 0, w - 1);
        const int y0 = static_cast<int>(std::floor(py)), x0 = static_cast<int>(std::floor(px));
        const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = py - y0, fx = px - x0;
        const int s = trace.frame_shift;
        auto splat = [&](int y, int x, double wt) {
          if (wt == 0) return;
          map[static_cast<std::size_t>(unroll(y, s, h)) * w + unroll(x, s, w)] += wt * mass;
        };
        splat(y0, x0, (1 - fy) * (1 - fx));
        splat(y0, x1, (1 - fy) * fx);
        splat(y1, x0, fy * (1 - fx));
        splat(y1, x1, fy * fx);
      }
  return Tensor<T>(Shape{h, w}, std::vector<T>(map.begin(), map.end()));
}

template <typename T>
Tensor<T> attention_heatmap(const SdmsaTrace<T>& trace, HeatmapReduction reduction) {
  const auto mass = attention_mass(trace, reduction);
  auto v = mass.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const T lo_v = *lo, range = *hi - *lo;
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (range > T(0))
      out[i] = (v[i] - lo_v) / range;
    else
      out[i] = *hi > T(0) ? T(1) : T(0);
  }
  return Tensor<T>(mass.shape(), std::move(out));
}

template <typename T>
std::string deformation_points_csv(const std::string& block, const SdmsaTrace<T>& trace,
                                   int stride) {
  check_trace(trace);
  if (stride < 1) throw DataError("deformation points: stride must be >= 1");
  const int nw = trace.layout.count(), np = trace.layout.points();
  const std::size_t npts = static_cast<std::size_t>(nw) * np;
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<T>::max_digits10);
  os << "block,window,head,ref_y,ref_x,def_y,def_x\n";
  for (int n = 0; n < nw; ++n)
    for (int j = 0; j < trace.heads; ++j)
      for (int p = 0; p < np; p += stride) {
        const std::size_t r = (static_cast<std::size_t>(n) * np + p) * 2;
        const std::size_t d = j * npts * 2 + r;
        os << block << ',' << n << ',' << j << ',' << trace.reference[r] << ','
           << trace.reference[r + 1] << ',' << trace.points[d] << ',' << trace.points[d + 1]
           << '\n';
      }
  return os.str();
}

template <typename T>
std::vector<std::uint8_t> deformation_field_ppm(const SdmsaTrace<T>& trace) {
  check_trace(trace);
  const auto& L = trace.layout;
  const int h = L.height, w = L.width;
  const std::size_t npts = static_cast<std::size_t>(L.count()) * L.points();
  const double bound = trace.offset_bound > 0 ? trace.offset_bound : 1.0;
  std::vector<double> dy(static_cast<std::size_t>(h) * w, 0.0), dx(dy.size(), 0.0);
  for (std::size_t i = 0; i < npts; ++i) {
    double sy = 0, sx = 0;
    for (int j = 0; j < trace.heads; ++j) {
      sy += trace.offsets[(j * npts + i) * 2];
      sx += trace.offsets[(j * npts + i) * 2 + 1];
    }
    const int y = unroll(static_cast<int>(trace.reference[i * 2]), trace.frame_shift, h);
    const int x = unroll(static_cast<int>(trace.reference[i * 2 + 1]), trace.frame_shift, w);
    dy[static_cast<std::size_t>(y) * w + x] = sy / trace.heads;
    dx[static_cast<std::size_t>(y) * w + x] = sx / trace.heads;
  }
  auto out = pnm_header("P6", w, h);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const double mag = std::hypot(dy[i], dx[i]) / (bound * std::sqrt(2.0));
    out.push_back(to_byte(128.0 + 127.0 * dy[i] / bound));
    out.push_back(to_byte(128.0 + 127.0 * dx[i] / bound));
    out.push_back(to_byte(255.0 * mag));
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& map, int height, int width) {
  if (map.rank() != 2) throw ShapeError("resize_bilinear: expected [h x w]");
  const int h = map.dim(0), w = map.dim(1);
  auto v = map.data();
  std::vector<T> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const double sy = std::clamp((y + 0.5) * h / height - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(std::floor(sy)), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < width; ++x) {
      const double sx = std::clamp((x + 0.5) * w / width - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(std::floor(sx)), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const double val = (1 - fy) * ((1 - fx) * v[y0 * w + x0] + fx * v[y0 * w + x1]) +
                         fy * ((1 - fx) * v[y1 * w + x0] + fx * v[y1 * w + x1]);
      out[static_cast<std::size_t>(y) * width + x] = static_cast<T>(val);
    }
  }
  return Tensor<T>(Shape{height, width}, std::move(out));
}

namespace {

template <typename T>
Tensor<T> roi_score(const Tensor<T>& logits, int target_class, const std::vector<std::uint8_t>& roi) {
  const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (target_class < 0 || target_class >= k) throw DataError("grad-cam: target class out of range");
  if (roi.size() != static_cast<std::size_t>(h) * w)
    throw DataError("grad-cam: roi must cover the " + std::to_string(h) + "x" + std::to_string(w) + " image");
  if (std::none_of(roi.begin(), roi.end(), [](std::uint8_t v) { return v != 0; }))
    throw DataError("grad-cam: empty roi");
  std::vector<T> m(roi.size());
  for (std::size_t i = 0; i < roi.size(); ++i) m[i] = roi[i] ? T(1) : T(0);
  return sum(mul(slice(logits, 0, target_class, target_class + 1), Tensor<T>(Shape{1, h, w}, std::move(m))));
}

template <typename T>
GradCamResult<T> cam_from(const BlockRecord<T>& rec, const Tensor<T>& logits, int height, int width) {
  const auto& f = rec.output;
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  auto fv = f.data();
  auto gv = f.grad();
  GradCamResult<T> r;
  r.channel_weights.assign(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += gv[ch * hw + i];
    r.channel_weights[ch] = s / static_cast<double>(hw);
  }
  std::vector<T> low(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0;
    for (int ch = 0; ch < c; ++ch) s += r.channel_weights[ch] * fv[ch * hw + i];
    low[i] = static_cast<T>(std::max(s, 0.0));
  }
  auto up = resize_bilinear(Tensor<T>(Shape{h, w}, std::move(low)), height, width);
  auto uv = up.data();
  const T peak = *std::max_element(uv.begin(), uv.end());
  std::vector<T> norm(uv.size(), T(0));
  if (peak > T(0))
    for (std::size_t i = 0; i < uv.size(); ++i) norm[i] = std::max(uv[i], T(0)) / peak;
  r.map = Tensor<T>(up.shape(), std::move(norm));
  r.features = f.detach();
  r.logits = logits.detach();
  return r;
}

template <typename T>
void clear_grads(const Model<T>& model) {
  for (auto [_, t] : model.params) t.zero_grad();
}

}  // namespace

template <typename T>
GradCamResult<T> seg_grad_cam(const Model<T>& model, const Tensor<T>& image, int target_class,
                              int target_block, const std::vector<std::uint8_t>& roi) {
  if (target_block < 0 || target_block >= kBlockCount) throw DataError("grad-cam: block out of range");
  auto fwd = forward(model, image);
  auto score = roi_score(fwd.logits, target_class, roi);
  score.backward();
  auto r = cam_from(fwd.blocks[target_block], fwd.logits, image.dim(1), image.dim(2));
  clear_grads(model);
  return r;
}

template <typename T>
double grad_cam_score(const Model<T>& model, const Tensor<T>& image, int target_class,
                      const std::vector<std::uint8_t>& roi, const ForwardOptions<T>& options) {
  NoGradGuard guard;
  return static_cast<double>(roi_score(forward(model, image, options).logits, target_class, roi).item());
}

template <typename T>
std::vector<std::uint8_t> map_pgm(const Tensor<T>& map) {
  if (map.rank() != 2) throw ShapeError("map_pgm: expected [H x W]");
  auto out = pnm_header("P5", map.dim(1), map.dim(0));
  for (T v : map.data()) out.push_back(to_byte(255.0 * static_cast<double>(v)));
  return out;
}

std::vector<std::uint8_t> label_pgm(const LabelMap& label, int classes) {
  auto out = pnm_header("P5", label.width, label.height);
  const double step = classes > 1 ? 255.0 / (classes - 1) : 0.0;
  for (auto v : label.values) out.push_back(to_byte(v * step));
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

template <typename T>
std::vector<std::filesystem::path> write_explain(const std::filesystem::path& root,
                                                 const Model<T>& model, const Tensor<T>& image,
                                                 const ExplainRequest& req) {
  ForwardOptions<T> opts;
  opts.trace = true;
  auto fwd = forward(model, image, opts);
  const int h = image.dim(1), w = image.dim(2);

  std::vector<std::uint8_t> roi = req.roi;
  if (roi.empty()) {
    const auto pred = [&] {
      auto lv = fwd.logits.data();
      const std::size_t n = static_cast<std::size_t>(h) * w;
      std::vector<std::uint8_t> m(n, 0);
      for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < fwd.logits.dim(0); ++c)
          if (lv[c * n + i] > lv[best * n + i]) best = c;
        m[i] = best == req.target_class ? 1 : 0;
      }
      return m;
    }();
    roi = std::any_of(pred.begin(), pred.end(), [](std::uint8_t v) { return v != 0; })
              ? pred
              : std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 1);
  }
  roi_score(fwd.logits, req.target_class, roi).backward();

  std::vector<int> blocks = req.blocks;
  if (blocks.empty())
    for (int b = 0; b < kBlockCount; ++b)
      if (fwd.blocks[b].trace) blocks.push_back(b);

  std::vector<std::filesystem::path> written;
  const auto case_dir = root / req.case_name;
  for (int b : blocks) {
    if (b < 0 || b >= kBlockCount) throw DataError("explain: block index out of range");
    const auto& rec = fwd.blocks[b];
    const auto dir = case_dir / rec.name;
    std::filesystem::create_directories(dir);
    if (rec.trace) {
      const auto mass = attention_mass(*rec.trace);
      write_bytes(dir / "attn.pgm", map_pgm(attention_heatmap(*rec.trace)));
      save_sdt(dir / "attn.sdt", blob_of(mass));
      write_text(dir / "points.csv", deformation_points_csv(rec.name, *rec.trace, req.point_stride));
      write_bytes(dir / "field.ppm", deformation_field_ppm(*rec.trace));
      for (const char* f : {"attn.pgm", "attn.sdt", "points.csv", "field.ppm"}) written.push_back(dir / f);
    }
    const auto cam = cam_from(rec, fwd.logits, h, w);
    write_bytes(dir / "gradcam.pgm", map_pgm(cam.map));
    written.push_back(dir / "gradcam.pgm");
  }
  clear_grads(model);
  return written;
}

#define SDAH_INSTANTIATE_EXPLAIN(T)                                                              \
  template Tensor<T> attention_mass(const SdmsaTrace<T>&, HeatmapReduction);                     \
  template Tensor<T> attention_heatmap(const SdmsaTrace<T>&, HeatmapReduction);                  \
  template std::string deformation_points_csv(const std::string&, const SdmsaTrace<T>&, int);    \
  template std::vector<std::uint8_t> deformation_field_ppm(const SdmsaTrace<T>&);                \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                                \
  template GradCamResult<T> seg_grad_cam(const Model<T>&, const Tensor<T>&, int, int,            \
                                         const std::vector<std::uint8_t>&);                      \
  template double grad_cam_score(const Model<T>&, const Tensor<T>&, int,                         \
                                 const std::vector<std::uint8_t>&, const ForwardOptions<T>&);    \
  template std::vector<std::uint8_t> map_pgm(const Tensor<T>&);                                  \
  template std::vector<std::filesystem::path> write_explain(                                     \
      const std::filesystem::path&, const Model<T>&, const Tensor<T>&, const ExplainRequest&);

SDAH_INSTANTIATE_EXPLAIN(float)
SDAH_INSTANTIATE_EXPLAIN(double)

}  // namespace sdah
