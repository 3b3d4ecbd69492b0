#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sdah/io.hpp"
#include "sdah/network.hpp"
#include "sdah/tensor.hpp"

namespace sdah {

/// Integer class map, row-major [H x W].
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct SegSample {
  Tensor<float> image;  // [C_in x H x W], values in [0, 1]
  LabelMap label;
  int classes = 2;
};

struct TrainConfig {
  int batch_size = 8;
  double base_lr = 2e-4;
  std::int64_t decay_start_step = 50'000;
  std::int64_t decay_every = 10'000;
  double decay_factor = 0.5;
  std::int64_t max_steps = 2'000;
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t log_every = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Paper schedule compressed so a 2000-step run crosses several decays.
TrainConfig desk_train_config();

/// base_lr before decay_start_step, then base_lr·factor^(1 + ⌊(step - start) / every⌋).
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Mean over pixels of -log softmax at the true class. logits [K x H x W].
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const LabelMap& label);
/// Soft Dice on probabilities [K x H x W], averaged over foreground classes.
template <typename T>
Tensor<T> dice_loss_probs(const Tensor<T>& probs, const LabelMap& label, double eps = 1e-5);
/// Soft Dice on softmax(logits).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const LabelMap& label, double eps = 1e-5);

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> dice;
  Tensor<T> ce;
};
template <typename T>
LossParts<T> combined_loss(const Tensor<T>& logits, const LabelMap& label, double lambda_dice,
                           double lambda_ce);

template <typename T>
struct AdamState {
  std::int64_t step = 0;  // completed updates
  std::vector<std::vector<T>> m, v;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every tensor from its accumulated grad.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr,
               const AdamOptions& opt = {});

/// Ellipses, rings and blobs on a noisy background. K in {2, 3, 4}.
std::vector<SegSample> synth_dataset(int n, int height, int width, int classes, std::uint64_t seed);

void save_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples);
std::vector<SegSample> load_dataset(const std::filesystem::path& dir);
/// Case names in manifest order (file stem of each image entry).
std::vector<std::string> dataset_case_names(const std::filesystem::path& dir);

LabelMap label_from_blob(const ArrayBlob& blob, int classes);
ArrayBlob blob_of_label(const LabelMap& label);

/// Dataset index of batch slot `slot` at `step`: sample order is a fresh
/// Fisher-Yates shuffle per epoch, a pure function of (seed, epoch).
std::vector<int> batch_indices(std::int64_t step, int batch, int n, std::uint64_t seed);

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0, dice = 0, ce = 0, lr = 0;
};

template <typename T>
struct TrainState {
  AdamState<T> adam;
  std::vector<LossRecord> history;  // one record per completed step
};

/// Runs steps adam.step .. cfg.max_steps - 1. `on_step` (optional) sees each record.
template <typename T>
void train(Model<T>& model, const std::vector<SegSample>& data, const TrainConfig& cfg,
           TrainState<T>& state, const std::function<void(const LossRecord&)>& on_step = {});

/// Rows at multiples of log_every plus the final step.
std::vector<LossRecord> logged_records(const std::vector<LossRecord>& history,
                                       std::int64_t log_every);
std::string loss_csv(const std::vector<LossRecord>& rows);

/// Model checkpoint plus optimizer moments, step counter and train config.
template <typename T>
Checkpoint train_checkpoint(const Model<T>& model, const TrainState<T>& state,
                            const TrainConfig& cfg);
/// Restores the optimizer state saved by train_checkpoint.
template <typename T>
AdamState<T> load_adam_state(const Checkpoint& ck, const Model<T>& model);

}  // namespace sdah
