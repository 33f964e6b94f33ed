#pragma once

// Full classifier assembly: patch partition + embedding, per-stage local
// transformer blocks, MOA between stages, patch merging, and the pooled
// linear head. Also the checkpoint container (config text + named float32
// parameter arrays, little-endian).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "moa/moa_block.hpp"
#include "moa/model_config.hpp"
#include "moa/nn.hpp"
#include "moa/params.hpp"
#include "moa/tensor.hpp"
#include "moa/window.hpp"

namespace moa {

// Each P x P x Cin patch flattened (sites in raster order, channels fastest)
// and projected to C0: [B, Hin, Win, Cin] -> [B, Hin/P, Win/P, C0].
template <class S>
Tensor<S> patch_partition_embed(const Tensor<S>& images, int64_t patch,
                                const LinearLayer<S>& proj) {
  int64_t B = images.size(0), H = images.size(1), W = images.size(2), C = images.size(3);
  if (H % patch != 0 || W % patch != 0)
    throw GeometryError("patch embed: patch " + std::to_string(patch) + " does not divide input " +
                        std::to_string(H) + "x" + std::to_string(W));
  int64_t hp = H / patch, wp = W / patch;
  Tensor<S> patches = reshape(window_partition(images, patch), {B, hp, wp, patch * patch * C});
  return proj.forward(patches);
}

// Concatenates each 2x2 neighborhood (TL, TR, BL, BR) to 4C, layer-norms,
// and projects to 2C: [B,H,W,C] -> [B,H/2,W/2,2C].
template <class S>
struct PatchMerge {
  LayerNorm<S> norm;      // over 4C
  LinearLayer<S> proj;    // 4C -> 2C

  PatchMerge() = default;
  PatchMerge(ParamStore<S>& ps, const std::string& name, int64_t dim) :
      norm(ps, name + ".norm", 4 * dim), proj(ps, name + ".proj", 4 * dim, 2 * dim) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    int64_t B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
    if (H % 2 != 0 || W % 2 != 0)
      throw GeometryError("patch merge: odd feature map " + std::to_string(H) + "x" +
                          std::to_string(W));
    std::vector<int64_t> rows;
    rows.reserve(static_cast<size_t>(B * H * W));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < H; i += 2)
        for (int64_t j = 0; j < W; j += 2) {
          rows.push_back((b * H + i) * W + j);
          rows.push_back((b * H + i) * W + j + 1);
          rows.push_back((b * H + i + 1) * W + j);
          rows.push_back((b * H + i + 1) * W + j + 1);
        }
    Tensor<S> merged = reshape(gather_rows(x, rows, C), {B, H / 2, W / 2, 4 * C});
    return proj.forward(norm.forward(merged));
  }
};

template <class S>
struct ModelStage {
  std::vector<LocalBlock<S>> blocks;
  std::optional<MoaBlock<S>> moa;
  std::optional<PatchMerge<S>> merge;
  int64_t resolution = 0;
  int64_t dim = 0;
};

template <class S>
struct Model {
  ModelConfig cfg;
  ParamStore<S> params;
  LinearLayer<S> embed;
  std::vector<ModelStage<S>> stages;
  LayerNorm<S> final_norm;
  LinearLayer<S> head;

  explicit Model(const ModelConfig& config, uint64_t seed = 42) : cfg(config), params(seed) {
    cfg.validate();
    embed = LinearLayer<S>(params, "embed",
                           cfg.patch_size * cfg.patch_size * cfg.in_channels, cfg.hidden_dims[0]);
    int64_t total_blocks = 0;
    for (int64_t d : cfg.depths) total_blocks += d;
    int64_t block_index = 0;
    for (int64_t s = 0; s < cfg.num_stages(); ++s) {
      ModelStage<S> stage;
      stage.resolution = cfg.stage_resolution(s);
      stage.dim = cfg.hidden_dims[s];
      std::string sname = "stages." + std::to_string(s);
      for (int64_t b = 0; b < cfg.depths[s]; ++b) {
        // stochastic depth ramps linearly from 0 to drop_path_max over all blocks
        S rate = total_blocks > 1
                     ? static_cast<S>(cfg.drop_path_max * double(block_index) / double(total_blocks - 1))
                     : S(0);
        stage.blocks.emplace_back(params, sname + ".blocks." + std::to_string(b), stage.dim,
                                  cfg.num_heads[s], cfg.window_size, rate);
        ++block_index;
      }
      bool last = s + 1 == cfg.num_stages();
      if (!last) {
        if (cfg.moa.enabled) {
          MoaGeometry g;
          g.height = g.width = stage.resolution;
          g.channels = stage.dim;
          g.reduction = cfg.moa.reduction;
          g.query_patch = cfg.window_size;
          g.kv_patch = cfg.kv_patch_or_default();
          g.kv_stride = cfg.kv_stride_or_default();
          g.kv_padding = cfg.moa.kv_padding;
          stage.moa.emplace(params, sname + ".moa", g, cfg.num_heads[s]);
        }
        stage.merge.emplace(params, sname + ".merge", stage.dim);
      }
      stages.push_back(std::move(stage));
    }
    int64_t last_dim = cfg.hidden_dims.back();
    final_norm = LayerNorm<S>(params, "final_norm", last_dim);
    head = LinearLayer<S>(params, "head", last_dim, cfg.num_classes);
  }

  // images: [B, input, input, in_channels] -> logits [B, num_classes]
  Tensor<S> forward(const Tensor<S>& images, bool training = false,
                    std::mt19937_64* rng = nullptr) const {
    if (images.ndim() != 4 || images.size(1) != cfg.input_size ||
        images.size(2) != cfg.input_size || images.size(3) != cfg.in_channels)
      throw GeometryError("model: input " + shape_str(images.shape()) + " does not match config " +
                          std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
                          "x" + std::to_string(cfg.in_channels));
    int64_t B = images.size(0);
    Tensor<S> x = patch_partition_embed(images, cfg.patch_size, embed);
    for (const auto& stage : stages) {
      int64_t res = stage.resolution;
      Tensor<S> win = window_partition(x, cfg.window_size);
      for (const auto& block : stage.blocks) win = block.forward(win, training, rng);
      x = window_reverse(win, cfg.window_size, B, res, res);
      if (stage.moa) x = stage.moa->forward(x);
      if (stage.merge) x = stage.merge->forward(x);
    }
    int64_t res = stages.back().resolution;
    int64_t dim = stages.back().dim;
    Tensor<S> tokens = reshape(final_norm.forward(x), {B, res * res, dim});
    return head.forward(mean_over_axis(tokens, 1));
  }
};

// ---------------------------------------------------------------------------
// checkpoint: "MOACKPT1" magic, u32 version, u32 config length + text,
// u32 param count, then per parameter u16 name length, name, u8 ndim,
// u32 dims, float32 data. Little-endian throughout.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(uint16_t(b[0]) | uint16_t(b[1]) << 8);
}

}  // namespace detail

constexpr char kCheckpointMagic[8] = {'M', 'O', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const Model<S>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, kCheckpointVersion);
  std::string cfg = model.cfg.serialize();
  detail::put_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(os, static_cast<uint32_t>(model.params.size()));
  for (const auto& [name, t] : model.params.items()) {
    detail::put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.ndim()));
    for (int64_t d = 0; d < t.ndim(); ++d) detail::put_u32(os, static_cast<uint32_t>(t.size(d)));
    for (S v : t.values()) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(os, bits);
    }
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

template <class S>
Model<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  uint32_t cfg_len = detail::get_u32(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw FormatError("checkpoint: truncated config block");
  ModelConfig cfg = ModelConfig::deserialize(cfg_text);
  Model<S> model(cfg, 0);
  uint32_t count = detail::get_u32(is);
  if (count != model.params.size())
    throw FormatError("checkpoint: has " + std::to_string(count) + " parameters, model needs " +
                      std::to_string(model.params.size()));
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = detail::get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    int ndim = is.get();
    if (!is || ndim < 0) throw FormatError("checkpoint: truncated at parameter " + std::to_string(i));
    Shape shape(static_cast<size_t>(ndim));
    for (auto& d : shape) d = detail::get_u32(is);
    if (!model.params.contains(name))
      throw FormatError("checkpoint: unknown parameter '" + name + "'");
    Tensor<S>& t = model.params.at(name);
    if (t.shape() != shape)
      throw FormatError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                        ", model expects " + shape_str(t.shape()));
    auto vals = t.mutable_values();
    for (int64_t j = 0; j < t.numel(); ++j) {
      uint32_t bits = detail::get_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      vals[static_cast<size_t>(j)] = static_cast<S>(f);
    }
    if (!is) throw FormatError("checkpoint: truncated data for parameter '" + name + "'");
  }
  return model;
}

}  // namespace moa
