#include "moa/model_config.hpp"

#include <map>
#include <sstream>

#include "moa/errors.hpp"
#include "moa/moa_block.hpp"

namespace moa {

void ModelConfig::validate() const {
  if (depths.empty()) throw ConfigError("config: at least one stage required");
  if (depths.size() != num_heads.size() || depths.size() != hidden_dims.size())
    throw ConfigError("config: depths/num_heads/hidden_dims must have equal length");
  if (patch_size < 1 || input_size % patch_size != 0)
    throw GeometryError("config: patch size " + std::to_string(patch_size) +
                        " does not divide input " + std::to_string(input_size));
  if (num_classes < 1) throw ConfigError("config: num_classes must be positive");
  if (drop_path_max < 0.0 || drop_path_max >= 1.0)
    throw ConfigError("config: drop_path_max must be in [0,1)");
  for (int64_t s = 0; s < num_stages(); ++s) {
    int64_t res = stage_resolution(s);
    if (res < 1 || (stage_resolution(0) >> s) << s != stage_resolution(0))
      throw GeometryError("config: stage " + std::to_string(s + 1) + " resolution is not integral");
    if (res % window_size != 0)
      throw GeometryError("config: window " + std::to_string(window_size) +
                          " does not divide stage " + std::to_string(s + 1) + " resolution " +
                          std::to_string(res));
    if (hidden_dims[s] % num_heads[s] != 0)
      throw GeometryError("config: hidden dim " + std::to_string(hidden_dims[s]) +
                          " not divisible by heads " + std::to_string(num_heads[s]) +
                          " at stage " + std::to_string(s + 1));
    if (s + 1 < num_stages()) {
      if (res % 2 != 0)
        throw GeometryError("config: stage " + std::to_string(s + 1) + " resolution " +
                            std::to_string(res) + " must be even for patch merging");
      if (moa.enabled) {
        if (moa.reduction < 1) throw ConfigError("config: moa.reduction must be >= 1");
        MoaGeometry g;
        g.height = g.width = res;
        g.channels = hidden_dims[s];
        g.reduction = moa.reduction;
        g.query_patch = window_size;
        g.kv_patch = kv_patch_or_default();
        g.kv_stride = kv_stride_or_default();
        g.kv_padding = moa.kv_padding;
        g.validate();
      }
    }
  }
}

namespace {

std::string join(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int64_t> split_ints(const std::string& s) {
  std::vector<int64_t> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    size_t pos = 0;
    long long v = std::stoll(tok, &pos);
    while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
    if (pos != tok.size()) throw ConfigError("config: bad integer list element '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "model.input_size = " << input_size << "\n";
  os << "model.in_channels = " << in_channels << "\n";
  os << "model.patch_size = " << patch_size << "\n";
  os << "model.window_size = " << window_size << "\n";
  os << "model.depths = " << join(depths) << "\n";
  os << "model.num_heads = " << join(num_heads) << "\n";
  os << "model.hidden_dims = " << join(hidden_dims) << "\n";
  os << "model.num_classes = " << num_classes << "\n";
  os << "model.drop_path_max = " << drop_path_max << "\n";
  os << "moa.enabled = " << (moa.enabled ? "true" : "false") << "\n";
  os << "moa.kv_patch = " << moa.kv_patch << "\n";
  os << "moa.kv_stride = " << moa.kv_stride << "\n";
  os << "moa.kv_padding = " << moa.kv_padding << "\n";
  os << "moa.reduction = " << moa.reduction << "\n";
  return os.str();
}

bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      return static_cast<int64_t>(std::stoll(v));
    } catch (...) {
      throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
    }
  };
  if (key == "model.input_size") cfg.input_size = as_int(value);
  else if (key == "model.in_channels") cfg.in_channels = as_int(value);
  else if (key == "model.patch_size") cfg.patch_size = as_int(value);
  else if (key == "model.window_size") cfg.window_size = as_int(value);
  else if (key == "model.depths") cfg.depths = split_ints(value);
  else if (key == "model.num_heads") cfg.num_heads = split_ints(value);
  else if (key == "model.hidden_dims") cfg.hidden_dims = split_ints(value);
  else if (key == "model.num_classes") cfg.num_classes = as_int(value);
  else if (key == "model.drop_path_max") cfg.drop_path_max = std::stod(value);
  else if (key == "moa.enabled") {
    if (value != "true" && value != "false")
      throw ConfigError("config: moa.enabled must be true or false, got '" + value + "'");
    cfg.moa.enabled = value == "true";
  } else if (key == "moa.kv_patch") cfg.moa.kv_patch = as_int(value);
  else if (key == "moa.kv_stride") cfg.moa.kv_stride = as_int(value);
  else if (key == "moa.kv_padding") cfg.moa.kv_padding = as_int(value);
  else if (key == "moa.reduction") cfg.moa.reduction = as_int(value);
  else return false;
  return true;
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t\r");
      size_t e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) continue;
    if (!apply_model_key(cfg, key, value))
      throw ConfigError("config: unknown model key '" + key + "'");
  }
  return cfg;
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "moa-t-cifar" || name == "moa-b-cifar") {
    c.input_size = 32;
    c.patch_size = 1;
    c.window_size = 4;
    c.depths = {2, 2, 6, 2};
    c.num_classes = 100;
    c.drop_path_max = 0.2;
    c.moa = {true, 6, 4, 1, 32};
    if (name == "moa-t-cifar") {
      c.num_heads = {3, 6, 12, 24};
      c.hidden_dims = {96, 192, 384, 768};
    } else {
      c.num_heads = {4, 8, 16, 32};
      c.hidden_dims = {128, 256, 512, 1024};
    }
  } else if (name == "moa-t-in" || name == "moa-s-in" || name == "moa-b-in") {
    c.input_size = 224;
    c.patch_size = 4;
    c.window_size = 14;
    c.num_classes = 1000;
    c.moa = {true, 16, 14, 1, 32};
    if (name == "moa-t-in") {
      c.depths = {2, 2, 8};
      c.num_heads = {3, 6, 12};
      c.hidden_dims = {96, 192, 384};
      c.drop_path_max = 0.2;
    } else if (name == "moa-s-in") {
      c.depths = {2, 2, 20};
      c.num_heads = {3, 6, 12};
      c.hidden_dims = {96, 192, 384};
      c.drop_path_max = 0.3;
    } else {
      c.depths = {2, 2, 20};
      c.num_heads = {4, 8, 16};
      c.hidden_dims = {128, 256, 512};
      c.drop_path_max = 0.5;
    }
  } else if (name == "tiny-synth") {
    c.input_size = 16;
    c.patch_size = 1;
    c.window_size = 4;
    c.depths = {1, 1};
    c.num_heads = {2, 4};
    c.hidden_dims = {16, 32};
    c.num_classes = 4;
    c.drop_path_max = 0.0;
    c.moa = {true, 6, 4, 1, 2};
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "'; known presets: " + known);
  }
  c.validate();
  return c;
}

std::vector<std::string> preset_names() {
  return {"moa-t-cifar", "moa-b-cifar", "moa-t-in", "moa-s-in", "moa-b-in", "tiny-synth"};
}

ModelConfig fit_stages_to_window(ModelConfig cfg) {
  size_t keep = 0;
  while (keep < cfg.depths.size() && cfg.stage_resolution(static_cast<int64_t>(keep)) >= cfg.window_size)
    ++keep;
  if (keep == 0)
    throw GeometryError("config: window " + std::to_string(cfg.window_size) +
                        " larger than the embedded map");
  cfg.depths.resize(keep);
  cfg.num_heads.resize(keep);
  cfg.hidden_dims.resize(keep);
  return cfg;
}

}  // namespace moa
