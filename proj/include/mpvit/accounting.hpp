#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpvit/config.hpp"

namespace mpvit {

// One multiply-accumulate counts as one FLOP throughout.
namespace cost {

std::int64_t conv_params(std::int64_t in, std::int64_t out, int kernel, int groups, bool bias);
std::int64_t conv_macs(std::int64_t in, std::int64_t out, int kernel, int groups, std::int64_t out_h, std::int64_t out_w);
std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias);
std::int64_t linear_macs(std::int64_t in, std::int64_t out, std::int64_t tokens);
std::int64_t norm_params(std::int64_t channels);

// Q, K, V and output projections plus the two per-head d x d products.
std::int64_t attention_params(std::int64_t channels);
std::int64_t attention_macs(std::int64_t tokens, std::int64_t channels, int heads);

// Conv position encoding, two LayerNorms, attention, MLP.
std::int64_t encoder_block_params(std::int64_t channels, int mlp_ratio);
std::int64_t encoder_block_macs(std::int64_t tokens, std::int64_t channels, int heads, int mlp_ratio);

}  // namespace cost

struct StageCost {
  std::string name;  // stem, stage2..stage5, head
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops_macs = 0;
  std::vector<StageCost> per_stage;
  // Leading-term complexity summed over every encoder tower:
  // time L*h*N*C^2, memory L*h*C^2 + L*h*N*C.
  std::int64_t analytic_time = 0;
  std::int64_t analytic_memory = 0;
};

struct Complexity {
  std::int64_t time = 0;
  std::int64_t memory = 0;
};

Complexity complexity_model(std::int64_t layers, std::int64_t heads, std::int64_t tokens, std::int64_t channels);

CostReport cost_report(const ModelConfig& config, std::int64_t input_hw = 224);
std::int64_t count_params(const ModelConfig& config);
std::int64_t count_flops(const ModelConfig& config, std::int64_t input_hw = 224);

struct SweepRow {
  std::string spec;  // as given by the caller
  CostReport report;
};

// Reports in input order. Each spec is a preset name or spec string.
std::vector<SweepRow> sweep_configs(const std::vector<std::string>& specs, std::int64_t input_hw = 224);

// Header "spec,params,flops_macs,analytic_time,analytic_memory", one row per
// entry, fields quoted where needed.
std::string sweep_csv(const std::vector<SweepRow>& rows);

// RFC 4180 style reader: quoted fields, doubled quotes, CRLF or LF.
std::vector<std::vector<std::string>> read_csv(const std::string& text);

// Spec column of a sweep CSV (header required).
std::vector<std::string> sweep_specs_from_csv(const std::string& text);

// Human-friendly "22.8M" / "4.7G".
std::string format_millions(std::int64_t value);
std::string format_billions(std::int64_t value);

}  // namespace mpvit
