#include "sdah/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sdah/error.hpp"

namespace sdah {

using nlohmann::json;

namespace {

json parse(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string(what) + ": invalid JSON: " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw DataError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw DataError(std::string(what) + ": unknown field '" + key + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const char* what) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": field '" + key + "': " + e.what());
  }
}

json model_json(const ModelConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"stem_width", c.stem_width},
              {"stage_widths", c.stage_widths},
              {"window_sizes", c.window_sizes},
              {"num_heads", c.num_heads},
              {"deform_flags", c.deform_flags},
              {"branch_mode", to_string(c.branch_mode)},
              {"gamma_off", c.gamma_off},
              {"mlp_ratio", c.mlp_ratio},
              {"fusion", to_string(c.fusion)},
              {"sample_scope", to_string(c.sample_scope)},
              {"offset_kernel", c.offset_kernel},
              {"image_size", c.image_size},
              {"seed", c.seed}};
}

ModelConfig model_from(const json& j) {
  const char* what = "model config";
  reject_unknown(j,
                 {"in_channels", "num_classes", "stem_width", "stage_widths", "window_sizes",
                  "num_heads", "deform_flags", "branch_mode", "gamma_off", "mlp_ratio", "fusion",
                  "sample_scope", "offset_kernel", "image_size", "seed"},
                 what);
  ModelConfig c;
  read(j, "in_channels", c.in_channels, what);
  read(j, "num_classes", c.num_classes, what);
  read(j, "stem_width", c.stem_width, what);
  read(j, "stage_widths", c.stage_widths, what);
  read(j, "window_sizes", c.window_sizes, what);
  read(j, "num_heads", c.num_heads, what);
  read(j, "deform_flags", c.deform_flags, what);
  std::string s;
  if (j.contains("branch_mode")) {
    read(j, "branch_mode", s, what);
    c.branch_mode = parse_branch_mode(s);
  }
  read(j, "gamma_off", c.gamma_off, what);
  read(j, "mlp_ratio", c.mlp_ratio, what);
  if (j.contains("fusion")) {
    read(j, "fusion", s, what);
    c.fusion = parse_fusion(s);
  }
  if (j.contains("sample_scope")) {
    read(j, "sample_scope", s, what);
    c.sample_scope = parse_sample_scope(s);
  }
  read(j, "offset_kernel", c.offset_kernel, what);
  read(j, "image_size", c.image_size, what);
  read(j, "seed", c.seed, what);
  c.validate();
  return c;
}

json train_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},   {"base_lr", c.base_lr},
              {"decay_start_step", c.decay_start_step},
              {"decay_every", c.decay_every}, {"decay_factor", c.decay_factor},
              {"max_steps", c.max_steps},     {"lambda_dice", c.lambda_dice},
              {"lambda_ce", c.lambda_ce},     {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},   {"adam_eps", c.adam_eps},
              {"log_every", c.log_every},     {"seed", c.seed}};
}

TrainConfig train_from(const json& j) {
  const char* what = "train config";
  reject_unknown(j,
                 {"batch_size", "base_lr", "decay_start_step", "decay_every", "decay_factor",
                  "max_steps", "lambda_dice", "lambda_ce", "adam_beta1", "adam_beta2", "adam_eps",
                  "log_every", "seed"},
                 what);
  TrainConfig c = desk_train_config();
  read(j, "batch_size", c.batch_size, what);
  read(j, "base_lr", c.base_lr, what);
  read(j, "decay_start_step", c.decay_start_step, what);
  read(j, "decay_every", c.decay_every, what);
  read(j, "decay_factor", c.decay_factor, what);
  read(j, "max_steps", c.max_steps, what);
  read(j, "lambda_dice", c.lambda_dice, what);
  read(j, "lambda_ce", c.lambda_ce, what);
  read(j, "adam_beta1", c.adam_beta1, what);
  read(j, "adam_beta2", c.adam_beta2, what);
  read(j, "adam_eps", c.adam_eps, what);
  read(j, "log_every", c.log_every, what);
  read(j, "seed", c.seed, what);
  c.validate();
  return c;
}

json sliding_json(const SlidingConfig& c) {
  return json{{"crop", c.crop}, {"step", c.step}, {"sigma_ratio", c.sigma_ratio}};
}

SlidingConfig sliding_from(const json& j) {
  const char* what = "sliding config";
  reject_unknown(j, {"crop", "step", "sigma_ratio"}, what);
  SlidingConfig c;
  read(j, "crop", c.crop, what);
  read(j, "step", c.step, what);
  read(j, "sigma_ratio", c.sigma_ratio, what);
  c.validate();
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c, int indent) { return model_json(c).dump(indent); }

ModelConfig model_config_from_json(const std::string& text) {
  return model_from(parse(text, "model config"));
}

std::string train_config_to_json(const TrainConfig& c, int indent) { return train_json(c).dump(indent); }

TrainConfig train_config_from_json(const std::string& text) {
  return train_from(parse(text, "train config"));
}

std::string run_config_to_json(const RunConfig& c, int indent) {
  return json{{"model", model_json(c.model)},
              {"train", train_json(c.train)},
              {"sliding", sliding_json(c.sliding)}}
      .dump(indent);
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = parse(text, "config");
  reject_unknown(j, {"model", "train", "sliding"}, "config");
  RunConfig c;
  if (j.contains("model")) c.model = model_from(j["model"]);
  if (j.contains("train")) c.train = train_from(j["train"]);
  if (j.contains("sliding")) c.sliding = sliding_from(j["sliding"]);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

}  // namespace sdah
