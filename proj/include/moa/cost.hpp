#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/model_config.hpp"

namespace moa {

// Per-layer parameter and FLOP tallies for a single forward pass at batch 1.
//
// Counting conventions:
//   - flops counts one multiply-accumulate as 2 FLOPs (mul + add), covering
//     linears, the attention matmuls (QK^T and AV), and 1x1 convs.
//   - macs counts the same multiply-accumulates once; this is the convention
//     most published model tables use for their "FLOPs" columns.
//   - LayerNorm is charged 8 FLOPs (4 MACs) per element, GELU 10 (5),
//     softmax 5 per logit (2.5 MACs, rounded down per row), residual and
//     broadcast adds 1 per element.
struct CostRow {
  std::string name;
  int64_t params = 0;
  int64_t flops = 0;
  int64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;

  int64_t total_params() const;
  int64_t total_flops() const;
  int64_t total_macs() const;
  double total_gflops() const { return double(total_flops()) / 1e9; }
  double total_gmacs() const { return double(total_macs()) / 1e9; }

  // Human-readable table, or comma-separated rows (name,params,flops,macs).
  std::string format(bool csv) const;
  static CostReport parse_csv(const std::string& text);
};

CostReport count_params(const ModelConfig& cfg);
CostReport count_flops(const ModelConfig& cfg);
CostReport analyze(const ModelConfig& cfg);  // both in one walk

}  // namespace moa
