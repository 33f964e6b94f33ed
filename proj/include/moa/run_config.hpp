#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "moa/model_config.hpp"
#include "moa/train.hpp"

namespace moa {

// A full run description parsed from flat `key = value` text with dotted
// sections. Unknown keys are rejected.
struct RunConfig {
  std::optional<std::string> preset_name;
  ModelConfig model;          // preset (if named) with model.*/moa.* overrides applied
  TrainRecipe recipe;
  std::string precision = "f32";  // f32 | f64

  std::string data_kind = "synthetic";  // synthetic | cifar10 | cifar100
  std::string data_dir;                 // falls back to MOA_DATA_DIR
  int64_t synth_classes = 4;
  int64_t synth_per_class = 16;
  int64_t synth_size = 16;

  std::string out_dir = "run-out";

  static RunConfig parse(const std::string& text);
  static RunConfig parse_file(const std::string& path);
};

}  // namespace moa
