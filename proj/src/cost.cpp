#include "moa/cost.hpp"

#include <iomanip>
#include <sstream>

#include "moa/errors.hpp"
#include "moa/moa_block.hpp"

namespace moa {

namespace {

constexpr int64_t kLayerNormFlopsPerElem = 8;
constexpr int64_t kGeluFlopsPerElem = 10;
constexpr int64_t kSoftmaxFlopsPerElem = 5;

struct Walk {
  std::vector<CostRow> rows;

  void row(const std::string& name, int64_t params, int64_t flops) {
    rows.push_back({name, params, flops, flops / 2});
  }

  // flops of a bias-ful linear over `tokens` positions
  static int64_t linear_flops(int64_t tokens, int64_t in, int64_t out) {
    return 2 * tokens * in * out + tokens * out;  // MACs*2 + bias adds
  }
  static int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }

  void linear(const std::string& name, int64_t tokens, int64_t in, int64_t out) {
    row(name, linear_params(in, out), linear_flops(tokens, in, out));
  }
  void layernorm(const std::string& name, int64_t tokens, int64_t dim) {
    row(name, 2 * dim, kLayerNormFlopsPerElem * tokens * dim);
  }
  void mlp(const std::string& name, int64_t tokens, int64_t dim, int64_t hidden) {
    row(name + ".fc1", linear_params(dim, hidden), linear_flops(tokens, dim, hidden));
    row(name + ".gelu", 0, kGeluFlopsPerElem * tokens * hidden);
    row(name + ".fc2", linear_params(hidden, dim), linear_flops(tokens, hidden, dim));
  }
  // attention over `groups` independent (queries x keys) blocks
  void attention(const std::string& name, int64_t groups, int64_t queries, int64_t keys,
                 int64_t dim, int64_t heads, int64_t table_rows) {
    int64_t logits = groups * queries * keys;
    int64_t qk = 2 * logits * dim;          // QK^T across all heads
    int64_t bias_scale = 2 * logits * heads;  // 1/sqrt(d) scale + bias add
    int64_t soft = kSoftmaxFlopsPerElem * logits * heads;
    int64_t av = 2 * logits * dim;
    row(name + ".rel_pos.table", table_rows * heads, 0);
    row(name + ".attend", 0, qk + bias_scale + soft + av);
  }
};

}  // namespace

CostReport analyze(const ModelConfig& cfg) {
  cfg.validate();
  Walk w;
  int64_t res = cfg.stage_resolution(0);
  int64_t tokens = res * res;
  w.linear("embed", tokens, cfg.patch_size * cfg.patch_size * cfg.in_channels,
           cfg.hidden_dims[0]);

  int64_t win = cfg.window_size;
  for (int64_t s = 0; s < cfg.num_stages(); ++s) {
    res = cfg.stage_resolution(s);
    tokens = res * res;
    int64_t dim = cfg.hidden_dims[s];
    int64_t heads = cfg.num_heads[s];
    int64_t windows = (res / win) * (res / win);
    std::string sname = "stages." + std::to_string(s);
    for (int64_t b = 0; b < cfg.depths[s]; ++b) {
      std::string bname = sname + ".blocks." + std::to_string(b);
      w.layernorm(bname + ".norm1", tokens, dim);
      w.linear(bname + ".attn.qkv", tokens, dim, 3 * dim);
      w.attention(bname + ".attn", windows, win * win, win * win, dim, heads,
                  (2 * win - 1) * (2 * win - 1));
      w.linear(bname + ".attn.proj", tokens, dim, dim);
      w.row(bname + ".residual1", 0, tokens * dim);
      w.layernorm(bname + ".norm2", tokens, dim);
      w.mlp(bname + ".mlp", tokens, dim, kMlpRatio * dim);
      w.row(bname + ".residual2", 0, tokens * dim);
    }
    bool last = s + 1 == cfg.num_stages();
    if (!last) {
      if (cfg.moa.enabled) {
        MoaGeometry g;
        g.height = g.width = res;
        g.channels = dim;
        g.reduction = cfg.moa.reduction;
        g.query_patch = win;
        g.kv_patch = cfg.kv_patch_or_default();
        g.kv_stride = cfg.kv_stride_or_default();
        g.kv_padding = cfg.moa.kv_padding;
        int64_t cr = g.reduced_channels();
        auto [nh, nw] = key_grid_dims(res, res, g.kv_patch, g.kv_padding, g.kv_stride);
        int64_t m2 = g.query_grid_h() * g.query_grid_w();
        int64_t n2 = nh * nw;
        int64_t mh = g.query_grid_h(), mw = g.query_grid_w();
        std::string mname = sname + ".moa";
        w.linear(mname + ".reduce", tokens, dim, cr);
        w.linear(mname + ".q_proj", m2, win * win * cr, dim);
        w.linear(mname + ".k_proj", n2, g.kv_patch * g.kv_patch * cr, dim);
        w.linear(mname + ".v_proj", n2, g.kv_patch * g.kv_patch * cr, dim);
        w.layernorm(mname + ".norm1", m2, dim);
        w.attention(mname, 1, m2, n2, dim, heads, (2 * mh - 1) * (2 * mw - 1));
        w.row(mname + ".residual1", 0, m2 * dim);
        w.layernorm(mname + ".norm2", m2, dim);
        w.mlp(mname + ".mlp", m2, dim, kMlpRatio * dim);
        w.row(mname + ".residual2", 0, m2 * dim);
        w.linear(mname + ".out", m2, dim, dim);
        w.row(mname + ".broadcast", 0, tokens * dim);
      }
      w.layernorm(sname + ".merge.norm", tokens / 4, 4 * dim);
      w.linear(sname + ".merge.proj", tokens / 4, 4 * dim, 2 * dim);
    }
  }
  res = cfg.stage_resolution(cfg.num_stages() - 1);
  int64_t last_dim = cfg.hidden_dims.back();
  w.layernorm("final_norm", res * res, last_dim);
  w.row("pool", 0, res * res * last_dim);
  w.linear("head", 1, last_dim, cfg.num_classes);
  return {std::move(w.rows)};
}

CostReport count_params(const ModelConfig& cfg) { return analyze(cfg); }
CostReport count_flops(const ModelConfig& cfg) { return analyze(cfg); }

int64_t CostReport::total_params() const {
  int64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}
int64_t CostReport::total_flops() const {
  int64_t n = 0;
  for (const auto& r : rows) n += r.flops;
  return n;
}
int64_t CostReport::total_macs() const {
  int64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

std::string CostReport::format(bool csv) const {
  std::ostringstream os;
  if (csv) {
    os << "name,params,flops,macs\n";
    for (const auto& r : rows)
      os << r.name << "," << r.params << "," << r.flops << "," << r.macs << "\n";
    os << "total," << total_params() << "," << total_flops() << "," << total_macs() << "\n";
  } else {
    size_t w = 4;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    os << std::left << std::setw(static_cast<int>(w) + 2) << "name" << std::right
       << std::setw(14) << "params" << std::setw(16) << "flops" << std::setw(16) << "macs"
       << "\n";
    for (const auto& r : rows)
      os << std::left << std::setw(static_cast<int>(w) + 2) << r.name << std::right
         << std::setw(14) << r.params << std::setw(16) << r.flops << std::setw(16) << r.macs
         << "\n";
    os << std::left << std::setw(static_cast<int>(w) + 2) << "total" << std::right
       << std::setw(14) << total_params() << std::setw(16) << total_flops() << std::setw(16)
       << total_macs() << "\n";
    os << std::fixed << std::setprecision(3) << "total: " << double(total_params()) / 1e6
       << "M params, " << total_gflops() << " GFLOPs (" << total_gmacs() << " GMACs)\n";
  }
  return os.str();
}

CostReport CostReport::parse_csv(const std::string& text) {
  CostReport report;
  std::istringstream is(text);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != "name,params,flops,macs")
        throw FormatError("cost csv: unexpected header '" + line + "'");
      header = false;
      continue;
    }
    std::istringstream ls(line);
    CostRow r;
    std::string field;
    if (!std::getline(ls, r.name, ',')) throw FormatError("cost csv: bad row '" + line + "'");
    try {
      std::getline(ls, field, ',');
      r.params = std::stoll(field);
      std::getline(ls, field, ',');
      r.flops = std::stoll(field);
      std::getline(ls, field, ',');
      r.macs = std::stoll(field);
    } catch (...) {
      throw FormatError("cost csv: bad row '" + line + "'");
    }
    if (r.name == "total") continue;  // derived, recomputed from rows
    report.rows.push_back(std::move(r));
  }
  if (header) throw FormatError("cost csv: empty input");
  return report;
}

}  // namespace moa
