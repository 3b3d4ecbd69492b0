#include "sdah/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "sdah/config.hpp"
#include "sdah/error.hpp"
#include "sdah/ops.hpp"
#include "sdah/rng.hpp"

namespace sdah {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid train config: " + what); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(base_lr > 0)) fail("base_lr must be > 0");
  if (decay_start_step < 0) fail("decay_start_step must be >= 0");
  if (decay_every < 1) fail("decay_every must be >= 1");
  if (!(decay_factor > 0 && decay_factor < 1)) fail("decay_factor must lie in (0, 1)");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (!(lambda_dice >= 0) || !(lambda_ce >= 0)) fail("loss weights must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be > 0");
  if (log_every < 1) fail("log_every must be >= 1");
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.decay_start_step = 1'000;
  c.decay_every = 500;
  c.max_steps = 2'000;
  return c;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < cfg.decay_start_step) return cfg.base_lr;
  const std::int64_t k = 1 + (step - cfg.decay_start_step) / cfg.decay_every;
  return cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(k));
}

// ------------------------------------------------------------------ losses

namespace {

void check_label(const LabelMap& label, int classes, int h, int w, const char* op) {
  if (label.height != h || label.width != w ||
      label.values.size() != static_cast<std::size_t>(h) * w)
    throw ShapeError(std::string(op) + ": label " + std::to_string(label.height) + "x" +
                     std::to_string(label.width) + " does not match " + std::to_string(h) + "x" +
                     std::to_string(w));
  for (auto v : label.values)
    if (v >= classes)
      throw DataError(std::string(op) + ": label value " + std::to_string(v) + " >= K=" +
                      std::to_string(classes));
}

}  // namespace

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const LabelMap& label) {
  if (logits.rank() != 3) throw ShapeError("ce_loss: logits must be [K x H x W]");
  const int k = logits.dim(0), h = logits.dim(1), w = logits.dim(2), n = h * w;
  check_label(label, k, h, w, "ce_loss");
  auto ls = log_softmax(reshape(logits, Shape{k, n}), 0);
  std::vector<std::uint32_t> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(label.values[i] * n + i);
  return scale(mean(gather(ls, std::move(idx), Shape{n})), T(-1));
}

template <typename T>
Tensor<T> dice_loss_probs(const Tensor<T>& probs, const LabelMap& label, double eps) {
  if (probs.rank() != 3) throw ShapeError("dice_loss: probabilities must be [K x H x W]");
  const int k = probs.dim(0), h = probs.dim(1), w = probs.dim(2), n = h * w;
  if (k < 2) throw DataError("dice_loss: needs K >= 2");
  check_label(label, k, h, w, "dice_loss");
  std::vector<T> onehot(static_cast<std::size_t>(k) * n, T(0)), gsum(k, T(0));
  for (int i = 0; i < n; ++i) {
    onehot[static_cast<std::size_t>(label.values[i]) * n + i] = T(1);
    gsum[label.values[i]] += T(1);
  }
  const Tensor<T> g(Shape{k, n}, std::move(onehot));
  const Tensor<T> ones = Tensor<T>::full(Shape{n, 1}, T(1));
  auto p = reshape(probs, Shape{k, n});
  auto inter = matmul(mul(p, g), ones);  // [K x 1]
  auto psum = matmul(p, ones);
  auto num = add_scalar(scale(inter, T(2)), static_cast<T>(eps));
  auto den = add(psum, Tensor<T>(Shape{k, 1}, [&] {
                   std::vector<T> v(k);
                   for (int c = 0; c < k; ++c) v[c] = gsum[c] + static_cast<T>(eps);
                   return v;
                 }()));
  auto ratio = slice(div(num, den), 0, 1, k);
  return add_scalar(scale(mean(ratio), T(-1)), T(1));
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const LabelMap& label, double eps) {
  if (logits.rank() != 3) throw ShapeError("dice_loss: logits must be [K x H x W]");
  return dice_loss_probs(softmax(logits, 0), label, eps);
}

template <typename T>
LossParts<T> combined_loss(const Tensor<T>& logits, const LabelMap& label, double lambda_dice,
                           double lambda_ce) {
  LossParts<T> parts;
  parts.dice = dice_loss(logits, label);
  parts.ce = ce_loss(logits, label);
  parts.total = add(scale(parts.dice, static_cast<T>(lambda_dice)),
                    scale(parts.ce, static_cast<T>(lambda_ce)));
  return parts;
}

// -------------------------------------------------------------------- Adam

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr,
               const AdamOptions& opt) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), T(0));
      state.v[i].assign(params[i].numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state/parameter count mismatch");
  const std::int64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.numel()) throw ShapeError("adam_step: moment shape mismatch");
    auto g = p.grad();
    auto x = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = g[k];
      const double mk = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      const double vk = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + opt.eps);
      x[k] = static_cast<T>(x[k] - update);
    }
    detail::check_finite<T>(x, "adam_step");
  }
  state.step = t;
}

// --------------------------------------------------------- synthetic data

namespace {

constexpr double kBackground = 0.15;
constexpr double kInterior = 0.85;
constexpr double kRing = 0.5;
constexpr double kBlob = 0.65;
constexpr double kNoiseSigma = 0.1;
constexpr double kRingScale = 1.45;

struct Ellipse {
  double cy, cx, ry, rx, theta;

  // <= 1 inside
  double level(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dy * c + dx * s) / ry, v = (-dy * s + dx * c) / rx;
    return u * u + v * v;
  }
};

Ellipse random_ellipse(SplitMix64& rng, int h, int w, double lo, double hi, double margin) {
  const double side = std::min(h, w);
  Ellipse e;
  e.ry = rng.uniform(lo, hi) * side;
  e.rx = rng.uniform(lo, hi) * side;
  const double reach = std::max(e.ry, e.rx) * margin;
  e.cy = rng.uniform(std::min(reach, h / 2.0), std::max(h - 1 - reach, h / 2.0));
  e.cx = rng.uniform(std::min(reach, w / 2.0), std::max(w - 1 - reach, w / 2.0));
  e.theta = rng.uniform(0.0, std::numbers::pi);
  return e;
}

void paint(const Ellipse& e, double scale, std::uint8_t cls, double intensity, int h, int w,
           std::vector<std::uint8_t>& label, std::vector<double>& img) {
  const double s2 = scale * scale;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (e.level(y, x) <= s2) {
        label[static_cast<std::size_t>(y) * w + x] = cls;
        img[static_cast<std::size_t>(y) * w + x] = intensity;
      }
}

}  // namespace

std::vector<SegSample> synth_dataset(int n, int height, int width, int classes, std::uint64_t seed) {
  if (classes < 2 || classes > 4) throw DataError("synth_dataset: classes must be 2, 3 or 4");
  if (n < 0 || height < 8 || width < 8) throw DataError("synth_dataset: invalid size");
  std::vector<SegSample> out;
  out.reserve(n);
  const std::size_t px = static_cast<std::size_t>(height) * width;
  for (int i = 0; i < n; ++i) {
    SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::vector<std::uint8_t> label(px, 0);
    std::vector<double> img(px, kBackground);
    const int shapes = 1 + static_cast<int>(rng.below(3));
    for (int s = 0; s < shapes; ++s) {
      if (classes == 2) {
        const Ellipse e = random_ellipse(rng, height, width, 0.12, 0.28, 1.0);
        paint(e, 1.0, 1, kInterior, height, width, label, img);
      } else {
        const Ellipse e = random_ellipse(rng, height, width, 0.1, 0.22, kRingScale);
        paint(e, kRingScale, 2, kRing, height, width, label, img);
        paint(e, 1.0, 1, kInterior, height, width, label, img);
      }
    }
    if (classes == 4 && rng.uniform() < 0.5) {
      Ellipse b = random_ellipse(rng, height, width, 0.06, 0.12, 1.0);
      b.rx = b.ry;
      paint(b, 1.0, 3, kBlob, height, width, label, img);
    }
    std::vector<float> pixels(px);
    for (std::size_t k = 0; k < px; ++k)
      pixels[k] = static_cast<float>(std::clamp(img[k] + kNoiseSigma * rng.normal(), 0.0, 1.0));
    SegSample sample;
    sample.image = Tensor<float>(Shape{1, height, width}, std::move(pixels));
    sample.label = LabelMap{height, width, std::move(label)};
    sample.classes = classes;
    out.push_back(std::move(sample));
  }
  return out;
}

// ------------------------------------------------------------ dataset I/O

LabelMap label_from_blob(const ArrayBlob& blob, int classes) {
  if (blob.dtype != DType::u8 || blob.shape.size() != 2)
    throw DataError("label must be a 2-D u8 array, got shape " + shape_str(blob.shape));
  LabelMap l{blob.shape[0], blob.shape[1], blob.to_u8()};
  for (auto v : l.values)
    if (v >= classes) throw DataError("label value " + std::to_string(v) + " >= classes");
  return l;
}

ArrayBlob blob_of_label(const LabelMap& label) {
  return blob_of_u8(Shape{label.height, label.width}, label.values);
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream stem;
    stem << "case" << std::setw(4) << std::setfill('0') << i;
    const std::string image = stem.str() + ".image.sdt", label = stem.str() + ".label.sdt";
    save_sdt(dir / image, blob_of(samples[i].image));
    save_sdt(dir / label, blob_of_label(samples[i].label));
    entries.push_back({{"image", image}, {"label", label}, {"classes", samples[i].classes}});
  }
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
  os << nlohmann::json{{"entries", entries}}.dump(2) << "\n";
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array())
    throw DataError("manifest.json must hold an 'entries' array");
  return j;
}

}  // namespace

std::vector<SegSample> load_dataset(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  std::vector<SegSample> out;
  for (const auto& e : j["entries"]) {
    if (!e.contains("image") || !e.contains("label") || !e.contains("classes"))
      throw DataError("manifest entry needs image, label and classes");
    SegSample s;
    s.classes = e["classes"].get<int>();
    const ArrayBlob img = load_sdt(dir / e["image"].get<std::string>());
    if (img.shape.size() != 3) throw DataError("image must be [C x H x W]");
    s.image = img.to_tensor<float>();
    s.label = label_from_blob(load_sdt(dir / e["label"].get<std::string>()), s.classes);
    if (s.label.height != img.shape[1] || s.label.width != img.shape[2])
      throw DataError("label shape does not match image in " + e["image"].get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> dataset_case_names(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir);
  std::vector<std::string> names;
  for (const auto& e : j["entries"]) {
    std::string stem = std::filesystem::path(e["image"].get<std::string>()).stem().string();
    if (auto dot = stem.find('.'); dot != std::string::npos) stem.resize(dot);
    names.push_back(stem);
  }
  return names;
}

// ---------------------------------------------------------------- training

std::vector<int> batch_indices(std::int64_t step, int batch, int n, std::uint64_t seed) {
  if (n < 1) throw DataError("batch_indices: empty dataset");
  std::vector<int> out(batch);
  std::int64_t cached_epoch = -1;
  std::vector<int> perm(n);
  for (int b = 0; b < batch; ++b) {
    const std::int64_t pos = step * batch + b;
    const std::int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      for (int i = 0; i < n; ++i) perm[i] = i;
      SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
      for (int i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
      cached_epoch = epoch;
    }
    out[b] = perm[pos % n];
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> image_as(const Tensor<float>& img) {
  if constexpr (std::is_same_v<T, float>) {
    return img;
  } else {
    auto v = img.data();
    return Tensor<T>(img.shape(), std::vector<T>(v.begin(), v.end()));
  }
}

}  // namespace

template <typename T>
void train(Model<T>& model, const std::vector<SegSample>& data, const TrainConfig& cfg,
           TrainState<T>& state, const std::function<void(const LossRecord&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  for (const auto& s : data)
    if (s.classes != model.config.num_classes)
      throw DataError("train: sample class count differs from model num_classes");
  std::vector<Tensor<T>> params;
  params.reserve(model.params.size());
  for (auto& [_, t] : model.params) params.push_back(t);
  const AdamOptions opt{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  const T inv_batch = T(1) / static_cast<T>(cfg.batch_size);

  for (std::int64_t step = state.adam.step; step < cfg.max_steps; ++step) {
    LossRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, cfg);
    try {
      model.zero_grad();
      for (int idx : batch_indices(step, cfg.batch_size, static_cast<int>(data.size()), cfg.seed)) {
        const auto& s = data[idx];
        auto logits = forward(model, image_as<T>(s.image)).logits;
        auto parts = combined_loss(logits, s.label, cfg.lambda_dice, cfg.lambda_ce);
        rec.loss += parts.total.item();
        rec.dice += parts.dice.item();
        rec.ce += parts.ce.item();
        scale(parts.total, inv_batch).backward();
      }
      adam_step(params, state.adam, rec.lr, opt);
    } catch (const NumericalError& e) {
      throw NumericalError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    rec.loss /= cfg.batch_size;
    rec.dice /= cfg.batch_size;
    rec.ce /= cfg.batch_size;
    state.history.push_back(rec);
    if (on_step) on_step(rec);
  }
}

std::vector<LossRecord> logged_records(const std::vector<LossRecord>& history,
                                       std::int64_t log_every) {
  std::vector<LossRecord> out;
  for (std::size_t i = 0; i < history.size(); ++i)
    if (history[i].step % log_every == 0 || i + 1 == history.size()) out.push_back(history[i]);
  return out;
}

std::string loss_csv(const std::vector<LossRecord>& rows) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "step,loss,dice_loss,ce_loss,lr\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.loss << ',' << r.dice << ',' << r.ce << ',' << r.lr << '\n';
  return os.str();
}

template <typename T>
Checkpoint train_checkpoint(const Model<T>& model, const TrainState<T>& state,
                            const TrainConfig& cfg) {
  Checkpoint ck = model_checkpoint(model);
  ck.put("meta.train", blob_of_text(train_config_to_json(cfg)));
  ck.put("train.step", blob_of(Tensor<double>(Shape{1}, std::vector<double>{static_cast<double>(state.adam.step)})));
  if (!state.adam.m.empty()) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& [name, t] = model.params[i];
      ck.put("optim.m." + name, blob_of(Tensor<T>(t.shape(), state.adam.m[i])));
      ck.put("optim.v." + name, blob_of(Tensor<T>(t.shape(), state.adam.v[i])));
    }
  }
  return ck;
}

template <typename T>
AdamState<T> load_adam_state(const Checkpoint& ck, const Model<T>& model) {
  AdamState<T> st;
  if (const ArrayBlob* step = ck.find("train.step"))
    st.step = static_cast<std::int64_t>(step->to_tensor<double>().item());
  if (st.step == 0) return st;
  for (const auto& [name, t] : model.params) {
    const ArrayBlob* m = ck.find("optim.m." + name);
    const ArrayBlob* v = ck.find("optim.v." + name);
    if (!m || !v) throw DataError("checkpoint lacks optimizer moments for " + name);
    const auto mt = m->to_tensor<T>(), vt = v->to_tensor<T>();
    auto mv = mt.data();
    auto vv = vt.data();
    if (mv.size() != t.numel() || vv.size() != t.numel())
      throw DataError("optimizer moment shape mismatch for " + name);
    st.m.emplace_back(mv.begin(), mv.end());
    st.v.emplace_back(vv.begin(), vv.end());
  }
  return st;
}

#define SDAH_INSTANTIATE_TRAINING(T)                                                            \
  template Tensor<T> ce_loss(const Tensor<T>&, const LabelMap&);                                \
  template Tensor<T> dice_loss_probs(const Tensor<T>&, const LabelMap&, double);                \
  template Tensor<T> dice_loss(const Tensor<T>&, const LabelMap&, double);                      \
  template LossParts<T> combined_loss(const Tensor<T>&, const LabelMap&, double, double);       \
  template void adam_step(std::vector<Tensor<T>>&, AdamState<T>&, double, const AdamOptions&);  \
  template void train(Model<T>&, const std::vector<SegSample>&, const TrainConfig&,             \
                      TrainState<T>&, const std::function<void(const LossRecord&)>&);           \
  template Checkpoint train_checkpoint(const Model<T>&, const TrainState<T>&,                   \
                                       const TrainConfig&);                                     \
  template AdamState<T> load_adam_state(const Checkpoint&, const Model<T>&);

SDAH_INSTANTIATE_TRAINING(float)
SDAH_INSTANTIATE_TRAINING(double)

}  // namespace sdah
