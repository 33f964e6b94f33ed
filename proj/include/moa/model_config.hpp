#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace moa {

struct MoaSettings {
  bool enabled = true;
  int64_t kv_patch = 0;    // 0 -> window + 2
  int64_t kv_stride = 0;   // 0 -> window
  int64_t kv_padding = 1;
  int64_t reduction = 32;
};

struct ModelConfig {
  int64_t input_size = 32;  // square images
  int64_t in_channels = 3;
  int64_t patch_size = 1;
  int64_t window_size = 4;
  std::vector<int64_t> depths;
  std::vector<int64_t> num_heads;
  std::vector<int64_t> hidden_dims;
  int64_t num_classes = 100;
  MoaSettings moa;
  double drop_path_max = 0.0;

  int64_t num_stages() const { return static_cast<int64_t>(depths.size()); }
  // Token-map side length at stage s (0-based): (input/patch) / 2^s.
  int64_t stage_resolution(int64_t stage) const {
    return (input_size / patch_size) >> stage;
  }
  int64_t kv_patch_or_default() const {
    return moa.kv_patch > 0 ? moa.kv_patch : window_size + 2;
  }
  int64_t kv_stride_or_default() const {
    return moa.kv_stride > 0 ? moa.kv_stride : window_size;
  }

  // Throws GeometryError/ConfigError describing the first violated rule.
  void validate() const;

  // Flat key=value text (the same keys the run-config file uses).
  std::string serialize() const;
  static ModelConfig deserialize(const std::string& text);
};

// Known presets: moa-t-cifar, moa-b-cifar, moa-t-in, moa-s-in, moa-b-in,
// tiny-synth. Unknown names raise ConfigError listing the options.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// Drops trailing stages whose token map is smaller than the window.
ModelConfig fit_stages_to_window(ModelConfig cfg);

}  // namespace moa
