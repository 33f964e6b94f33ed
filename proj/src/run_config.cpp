#include "moa/run_config.hpp"

#include <fstream>
#include <sstream>

#include "moa/errors.hpp"

namespace moa {

// defined in model_config.cpp
bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

int64_t as_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
}

double as_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig rc;
  bool synth_classes_set = false, synth_size_set = false;
  // two passes: a named preset must seed the model before overrides land
  std::vector<std::pair<std::string, std::string>> kvs;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value: '" +
                        trim(line) + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: empty key on line " + std::to_string(lineno));
    kvs.emplace_back(key, value);
  }
  for (const auto& [key, value] : kvs)
    if (key == "preset") {
      rc.preset_name = value;
      rc.model = preset(value);
    }
  for (const auto& [key, value] : kvs) {
    if (key == "preset") continue;
    if (apply_model_key(rc.model, key, value)) continue;
    if (key == "train.epochs") rc.recipe.epochs = as_int(key, value);
    else if (key == "train.batch_size") rc.recipe.batch_size = as_int(key, value);
    else if (key == "train.lr") rc.recipe.lr_peak = as_double(key, value);
    else if (key == "train.lr_min") rc.recipe.lr_min = as_double(key, value);
    else if (key == "train.weight_decay") rc.recipe.weight_decay = as_double(key, value);
    else if (key == "train.warmup_epochs") rc.recipe.warmup_epochs = as_double(key, value);
    else if (key == "train.mixup_alpha") rc.recipe.mixup_alpha = as_double(key, value);
    else if (key == "train.precision") {
      if (value != "f32" && value != "f64")
        throw ConfigError("config: train.precision must be f32 or f64, got '" + value + "'");
      rc.precision = value;
    } else if (key == "data.kind") {
      if (value != "synthetic" && value != "cifar10" && value != "cifar100")
        throw ConfigError("config: data.kind must be synthetic, cifar10 or cifar100, got '" +
                          value + "'");
      rc.data_kind = value;
    } else if (key == "data.dir") rc.data_dir = value;
    else if (key == "data.synth_classes") {
      rc.synth_classes = as_int(key, value);
      synth_classes_set = true;
    } else if (key == "data.synth_per_class") rc.synth_per_class = as_int(key, value);
    else if (key == "data.synth_size") {
      rc.synth_size = as_int(key, value);
      synth_size_set = true;
    } else if (key == "out") rc.out_dir = value;
    else if (key == "seed") rc.recipe.seed = static_cast<uint64_t>(as_int(key, value));
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  if (rc.data_kind == "synthetic") {
    // the model defines the task geometry unless the synth keys override it
    if (synth_classes_set) rc.model.num_classes = rc.synth_classes;
    else rc.synth_classes = rc.model.num_classes;
    if (synth_size_set) rc.model.input_size = rc.synth_size;
    else rc.synth_size = rc.model.input_size;
  }
  return rc;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

}  // namespace moa
