#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sdah/config.hpp"
#include "sdah/error.hpp"
#include "sdah/explain.hpp"
#include "sdah/inference.hpp"
#include "sdah/io.hpp"
#include "sdah/metrics.hpp"
#include "sdah/network.hpp"
#include "sdah/selfcheck.hpp"
#include "sdah/training.hpp"

namespace fs = std::filesystem;
using namespace sdah;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitSelfcheck = 4;

Tensor<float> load_image(const fs::path& path, int in_channels) {
  const ArrayBlob blob = load_sdt(path);
  if (blob.dtype == DType::u8) throw DataError("image " + path.string() + " must be f32 or f64");
  Tensor<float> t = blob.to_tensor<float>();
  if (t.rank() == 2) t = Tensor<float>(Shape{1, t.dim(0), t.dim(1)}, std::vector<float>(t.data().begin(), t.data().end()));
  if (t.rank() != 3 || t.dim(0) != in_channels)
    throw DataError("image " + path.string() + " has shape " + shape_str(t.shape()) + ", expected [" +
                    std::to_string(in_channels) + " x H x W]");
  return t;
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_extension();
  return out.string() + suffix;
}

struct Options {
  // synth
  int n = 200, size = 32, classes = 2;
  std::uint64_t seed = 0;
  std::string out;
  // train
  std::string data, config, resume, loss_csv;
  // infer / eval / explain
  std::string ckpt, image, preview, block = "all", case_name;
  int crop = 0, step = 0, cls = 1, stride = 1;
  // count
  int height = 0;
};

int cmd_synth(const Options& o) {
  const auto samples = synth_dataset(o.n, o.size, o.size, o.classes, o.seed);
  save_dataset(o.out, samples);
  std::cout << "wrote " << samples.size() << " samples to " << o.out << "\n";
  return kExitOk;
}

int cmd_train(const Options& o) {
  const RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  const auto data = load_dataset(o.data);
  Model<float> model = build_model<float>(rc.model);
  TrainState<float> state;
  if (!o.resume.empty()) {
    const Checkpoint ck = load_checkpoint(o.resume);
    load_params(model, ck);
    state.adam = load_adam_state(ck, model);
  }
  const auto t0 = std::chrono::steady_clock::now();
  train(model, data, rc.train, state, [&](const LossRecord& r) {
    if (r.step % rc.train.log_every == 0 || r.step + 1 == rc.train.max_steps)
      std::printf("step %lld loss %.6f dice %.6f ce %.6f lr %.3g\n", static_cast<long long>(r.step),
                  r.loss, r.dice, r.ce, r.lr);
  });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(o.out, train_checkpoint(model, state, rc.train));
  const fs::path csv = o.loss_csv.empty() ? sibling(o.out, ".loss.csv") : fs::path(o.loss_csv);
  write_text(csv, loss_csv(logged_records(state.history, rc.train.log_every)));
  std::printf("trained %zu steps in %.1f s; checkpoint %s, loss curve %s\n", state.history.size(),
              secs, o.out.c_str(), csv.string().c_str());
  return kExitOk;
}

SlidingConfig sliding_from(const Options& o, const ModelConfig& mc) {
  SlidingConfig s;
  s.crop = o.crop > 0 ? o.crop : mc.image_size;
  s.step = o.step > 0 ? o.step : s.crop / 2;
  s.validate();
  return s;
}

int cmd_infer(const Options& o) {
  const Model<float> model = load_model<float>(load_checkpoint(o.ckpt));
  const auto image = load_image(o.image, model.config.in_channels);
  const auto probs = sliding_predict(model, image, sliding_from(o, model.config));
  const LabelMap mask = argmax_labels(probs);
  save_sdt(o.out, blob_of_label(mask));
  const fs::path preview = o.preview.empty() ? sibling(o.out, ".pgm") : fs::path(o.preview);
  write_bytes(preview, label_pgm(mask, model.config.num_classes));
  std::cout << "wrote mask " << o.out << " and preview " << preview.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const Model<float> model = load_model<float>(load_checkpoint(o.ckpt));
  const auto data = load_dataset(o.data);
  const auto rep = evaluate(model, data, dataset_case_names(o.data), sliding_from(o, model.config));
  write_text(o.out, eval_csv(rep));
  std::printf("mean foreground DSC %.6f", rep.mean_dsc);
  if (rep.mean_hd95)
    std::printf(", mean HD95 %.6f", *rep.mean_hd95);
  else
    std::printf(", mean HD95 undefined");
  std::printf(" (%d undefined HD95 cases excluded)\n", rep.hd95_excluded);
  return kExitOk;
}

int cmd_explain(const Options& o) {
  const Model<float> model = load_model<float>(load_checkpoint(o.ckpt));
  const auto image = load_image(o.image, model.config.in_channels);
  ExplainRequest req;
  if (o.case_name.empty()) {
    const std::string file = fs::path(o.image).filename().string();
    req.case_name = file.substr(0, file.find('.'));
  } else {
    req.case_name = o.case_name;
  }
  req.target_class = o.cls;
  req.point_stride = o.stride;
  if (o.block != "all") req.blocks = {block_index(o.block)};
  const auto files = write_explain(o.out, model, image, req);
  std::cout << "wrote " << files.size() << " files under " << (fs::path(o.out) / req.case_name).string()
            << "\n";
  return kExitOk;
}

int cmd_count(const Options& o) {
  const RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  const int side = o.height > 0 ? o.height : rc.model.image_size;
  const auto model = build_model<float>(rc.model);
  std::cout << "params " << count_params(model) << "\n";
  std::cout << "flops " << count_flops(rc.model, side, side) << " at " << side << "x" << side << "\n";
  return kExitOk;
}

int cmd_selfcheck() {
  bool all = true;
  for (const auto& r : run_selfcheck()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    all = all && r.passed;
  }
  return all ? kExitOk : kExitSelfcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SDAH-UNet desk toolkit: synthetic data, training, inference, evaluation, explanations"};
  app.require_subcommand(0, 1);
  Options o;
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the default run configuration as JSON");

  auto* synth = app.add_subcommand("synth", "Write a synthetic segmentation dataset");
  synth->add_option("--n", o.n, "Number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "Image side in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--classes", o.classes, "Class count K (2, 3 or 4)");
  synth->add_option("--seed", o.seed, "Generator seed");
  synth->add_option("--out", o.out, "Output dataset directory")->required();

  auto* trn = app.add_subcommand("train", "Train a model on a dataset directory");
  trn->add_option("--data", o.data, "Dataset directory")->required();
  trn->add_option("--config", o.config, "Run configuration JSON");
  trn->add_option("--out", o.out, "Checkpoint path")->required();
  trn->add_option("--resume", o.resume, "Resume from a training checkpoint");
  trn->add_option("--loss-csv", o.loss_csv, "Loss curve path (default <out>.loss.csv)");

  auto* inf = app.add_subcommand("infer", "Sliding-window prediction of one image");
  inf->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  inf->add_option("--image", o.image, "SDT1 image [C x H x W]")->required();
  inf->add_option("--crop", o.crop, "Tile side (default: model image_size)");
  inf->add_option("--step", o.step, "Tile stride (default: crop/2)");
  inf->add_option("--out", o.out, "Mask output (SDT1 u8)")->required();
  inf->add_option("--preview", o.preview, "PGM preview path (default <out>.pgm)");

  auto* ev = app.add_subcommand("eval", "Per-case DSC and HD95 over a dataset");
  ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  ev->add_option("--data", o.data, "Dataset directory")->required();
  ev->add_option("--out", o.out, "CSV output")->required();
  ev->add_option("--crop", o.crop, "Tile side");
  ev->add_option("--step", o.step, "Tile stride");

  auto* ex = app.add_subcommand("explain", "Attention, deformation and Grad-CAM exports");
  ex->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  ex->add_option("--image", o.image, "SDT1 image [C x H x W]")->required();
  ex->add_option("--block", o.block, "Block name (stage{i}.enc, stage{i}.dec) or 'all'");
  ex->add_option("--class", o.cls, "Target class for Grad-CAM");
  ex->add_option("--case", o.case_name, "Case directory name (default: image file name up to the first dot)");
  ex->add_option("--stride", o.stride, "Keep every n-th deformation point")->check(CLI::PositiveNumber);
  ex->add_option("--out", o.out, "Output root")->required();

  auto* cnt = app.add_subcommand("count", "Parameter and FLOP counts");
  cnt->add_option("--config", o.config, "Run configuration JSON");
  cnt->add_option("--size", o.height, "Input side (default: model image_size)");

  auto* chk = app.add_subcommand("selfcheck", "Run the built-in verification suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sdah: usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (print_config) {
      std::cout << run_config_to_json(RunConfig{}) << "\n";
      return kExitOk;
    }
    if (synth->parsed()) return cmd_synth(o);
    if (trn->parsed()) return cmd_train(o);
    if (inf->parsed()) return cmd_infer(o);
    if (ev->parsed()) return cmd_eval(o);
    if (ex->parsed()) return cmd_explain(o);
    if (cnt->parsed()) return cmd_count(o);
    if (chk->parsed()) return cmd_selfcheck();
    std::cerr << "sdah: usage error: no subcommand given (see --help)\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "sdah: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "sdah: error: " << e.what() << "\n";
    return kExitData;
  }
}
