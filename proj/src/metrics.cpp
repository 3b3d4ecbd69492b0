#include "sdah/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sdah/error.hpp"

namespace sdah {

bool Mask::empty() const {
  return std::none_of(on.begin(), on.end(), [](std::uint8_t v) { return v != 0; });
}

Mask class_mask(const LabelMap& label, int cls) {
  Mask m{label.height, label.width, std::vector<std::uint8_t>(label.values.size())};
  for (std::size_t i = 0; i < label.values.size(); ++i) m.on[i] = label.values[i] == cls ? 1 : 0;
  return m;
}

namespace {

void check_pair(const Mask& a, const Mask& b, const char* op) {
  if (a.height != b.height || a.width != b.width || a.on.size() != b.on.size() ||
      a.on.size() != static_cast<std::size_t>(a.height) * a.width)
    throw ShapeError(std::string(op) + ": mask shapes differ");
}

}  // namespace

double dsc(const Mask& a, const Mask& b) {
  check_pair(a, b, "dsc");
  std::size_t sa = 0, sb = 0, both = 0;
  for (std::size_t i = 0; i < a.on.size(); ++i) {
    const bool x = a.on[i] != 0, y = b.on[i] != 0;
    sa += x;
    sb += y;
    both += x && y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(sa + sb);
}

std::vector<std::array<int, 2>> boundary_points(const Mask& m) {
  std::vector<std::array<int, 2>> pts;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1;
      if (edge || !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1))
        pts.push_back({y, x});
    }
  return pts;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope of parabolas w²(q - i)² + f(i).
void edt_1d(const std::vector<double>& f, double w2, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = -kInf;
    while (k >= 0) {
      const int p = v[k];
      s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
      if (s > z[k]) break;
      --k;
    }
    if (k < 0) s = -kInf;
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  for (int q = 0; q < n; ++q) {
    if (k < 0) {
      d[q] = kInf;
      continue;
    }
    int j = 0;
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = w2 * dq * dq + f[v[j]];
  }
}

// Squared distance from every pixel to the nearest point of `pts`.
std::vector<double> squared_edt(const std::vector<std::array<int, 2>>& pts, int h, int w,
                                std::array<double, 2> spacing) {
  std::vector<double> grid(static_cast<std::size_t>(h) * w, kInf);
  for (const auto& p : pts) grid[static_cast<std::size_t>(p[0]) * w + p[1]] = 0.0;
  const double wy = spacing[0] * spacing[0], wx = spacing[1] * spacing[1];
  std::vector<double> f, d;
  f.resize(h);
  d.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, wy, d);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, wx, d);
    for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = d[x];
  }
  return grid;
}

std::vector<double> directed(const std::vector<std::array<int, 2>>& from,
                             const std::vector<double>& to_edt, int w) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) out.push_back(std::sqrt(to_edt[static_cast<std::size_t>(p[0]) * w + p[1]]));
  return out;
}

std::optional<double> boundary_distance(const Mask& a, const Mask& b, std::array<double, 2> spacing,
                                        double q, const char* op) {
  check_pair(a, b, op);
  if (!(spacing[0] > 0 && spacing[1] > 0)) throw DataError(std::string(op) + ": spacing must be > 0");
  if (a.empty() || b.empty()) return std::nullopt;
  const auto ba = boundary_points(a), bb = boundary_points(b);
  const auto ea = squared_edt(ba, a.height, a.width, spacing);
  const auto eb = squared_edt(bb, b.height, b.width, spacing);
  const auto dab = directed(ba, eb, a.width), dba = directed(bb, ea, b.width);
  return std::max(percentile(dab, q), percentile(dba, q));
}

}  // namespace

std::optional<double> hd95(const Mask& a, const Mask& b, std::array<double, 2> spacing) {
  return boundary_distance(a, b, spacing, 95.0, "hd95");
}

std::optional<double> hausdorff(const Mask& a, const Mask& b, std::array<double, 2> spacing) {
  return boundary_distance(a, b, spacing, 100.0, "hausdorff");
}

// ----------------------------------------------------------------- t-test

double regularized_incomplete_beta(double x, double a, double b) {
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // The continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x > (a + 1) / (a + b + 2)) return 1.0 - regularized_incomplete_beta(1 - x, b, a);
  constexpr double tiny = 1e-300, eps = 1e-16;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1);
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1) * (a + m2));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    f *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    f *= delta;
    if (std::fabs(delta - 1.0) < eps) break;
  }
  return std::exp(ln_front) * f / a;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0)) throw DataError("student_t_cdf: dof must be > 0");
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * regularized_incomplete_beta(x, dof / 2.0, 0.5);
  return t >= 0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("paired_t_test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw DataError("paired_t_test: needs at least 2 pairs");
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = a[i] - b[i] - mean;
    ss += e * e;
  }
  const double var = ss / static_cast<double>(n - 1);
  if (!(var > 0)) throw DataError("paired_t_test: zero variance of differences");
  TTestResult r;
  r.dof = static_cast<int>(n - 1);
  r.mean_diff = mean;
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  const double x = r.dof / (r.dof + r.t * r.t);
  r.p = regularized_incomplete_beta(x, r.dof / 2.0, 0.5);
  return r;
}

// ------------------------------------------------------------- evaluation

EvalReport evaluate_labels(const std::vector<std::string>& names,
                           const std::vector<LabelMap>& predicted,
                           const std::vector<LabelMap>& reference, int classes) {
  if (names.size() != predicted.size() || predicted.size() != reference.size())
    throw DataError("evaluate: case, prediction and reference counts differ");
  EvalReport rep;
  rep.class_mean_dsc.assign(classes, 0.0);
  rep.class_mean_hd95.assign(classes, std::nullopt);
  std::vector<double> hd_sum(classes, 0.0);
  std::vector<int> hd_n(classes, 0);
  for (std::size_t i = 0; i < names.size(); ++i)
    for (int c = 1; c < classes; ++c) {
      const Mask p = class_mask(predicted[i], c), g = class_mask(reference[i], c);
      EvalRow row{names[i], c, dsc(p, g), hd95(p, g)};
      rep.class_mean_dsc[c] += row.dsc;
      if (row.hd95) {
        hd_sum[c] += *row.hd95;
        ++hd_n[c];
      } else {
        ++rep.hd95_excluded;
      }
      rep.rows.push_back(std::move(row));
    }
  const double n = static_cast<double>(std::max<std::size_t>(names.size(), 1));
  double dsc_total = 0, hd_total = 0;
  int hd_classes = 0;
  for (int c = 1; c < classes; ++c) {
    rep.class_mean_dsc[c] /= n;
    dsc_total += rep.class_mean_dsc[c];
    if (hd_n[c] > 0) {
      rep.class_mean_hd95[c] = hd_sum[c] / hd_n[c];
      hd_total += *rep.class_mean_hd95[c];
      ++hd_classes;
    }
  }
  rep.mean_dsc = classes > 1 ? dsc_total / (classes - 1) : 0.0;
  if (hd_classes > 0) rep.mean_hd95 = hd_total / hd_classes;
  return rep;
}

template <typename T>
EvalReport evaluate(const Model<T>& model, const std::vector<SegSample>& data,
                    const std::vector<std::string>& names, const SlidingConfig& cfg) {
  std::vector<LabelMap> pred, ref;
  for (const auto& s : data) {
    auto v = s.image.data();
    const Tensor<T> img(s.image.shape(), std::vector<T>(v.begin(), v.end()));
    pred.push_back(argmax_labels(sliding_predict(model, img, cfg)));
    ref.push_back(s.label);
  }
  return evaluate_labels(names, pred, ref, model.config.num_classes);
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto hd = [&os](const std::optional<double>& v) {
    if (v)
      os << *v;
    else
      os << "undefined";
  };
  os << "case,class,dsc,hd95\n";
  for (const auto& row : r.rows) {
    os << row.case_name << ',' << row.cls << ',' << row.dsc << ',';
    hd(row.hd95);
    os << '\n';
  }
  for (std::size_t c = 1; c < r.class_mean_dsc.size(); ++c) {
    os << "mean," << c << ',' << r.class_mean_dsc[c] << ',';
    hd(r.class_mean_hd95[c]);
    os << '\n';
  }
  os << "mean,avg," << r.mean_dsc << ',';
  hd(r.mean_hd95);
  os << '\n';
  return os.str();
}

template EvalReport evaluate(const Model<float>&, const std::vector<SegSample>&,
                             const std::vector<std::string>&, const SlidingConfig&);
template EvalReport evaluate(const Model<double>&, const std::vector<SegSample>&,
                             const std::vector<std::string>&, const SlidingConfig&);

}  // namespace sdah
