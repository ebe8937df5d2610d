#include "mpvit/accounting.hpp"

#include <cstdio>

#include "mpvit/errors.hpp"
#include "mpvit/model.hpp"

namespace mpvit {

namespace cost {

std::int64_t conv_params(std::int64_t in, std::int64_t out, int kernel, int groups, bool bias) {
  return out * (in / groups) * kernel * kernel + (bias ? out : 0);
}

std::int64_t conv_macs(std::int64_t in, std::int64_t out, int kernel, int groups, std::int64_t out_h,
                       std::int64_t out_w) {
  return out * (in / groups) * kernel * kernel * out_h * out_w;
}

std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias) { return in * out + (bias ? out : 0); }

std::int64_t linear_macs(std::int64_t in, std::int64_t out, std::int64_t tokens) { return in * out * tokens; }

std::int64_t norm_params(std::int64_t channels) { return 2 * channels; }

std::int64_t attention_params(std::int64_t channels) { return 4 * linear_params(channels, channels, true); }

std::int64_t attention_macs(std::int64_t tokens, std::int64_t channels, int heads) {
  const std::int64_t d = channels / heads;
  return 4 * linear_macs(channels, channels, tokens) + 2 * heads * tokens * d * d;
}

std::int64_t encoder_block_params(std::int64_t c, int r) {
  return conv_params(c, c, 3, static_cast<int>(c), true) + 2 * norm_params(c) + attention_params(c) +
         linear_params(c, r * c, true) + linear_params(r * c, c, true);
}

std::int64_t encoder_block_macs(std::int64_t tokens, std::int64_t c, int heads, int r) {
  return tokens * 9 * c + attention_macs(tokens, c, heads) + linear_macs(c, r * c, tokens) +
         linear_macs(r * c, c, tokens);
}

}  // namespace cost

Complexity complexity_model(std::int64_t layers, std::int64_t heads, std::int64_t tokens, std::int64_t channels) {
  return {layers * heads * tokens * channels * channels,
          layers * heads * channels * channels + layers * heads * tokens * channels};
}

CostReport cost_report(const ModelConfig& config, std::int64_t input_hw) {
  config.validate();
  check_input_geometry(input_hw, input_hw);
  using namespace cost;
  CostReport rep;

  StageCost stem{"stem", 0, 0};
  const std::int64_t c2 = config.channels[0];
  std::int64_t h = conv_output_size(input_hw, 3, 2, 1);
  stem.params += conv_params(3, c2 / 2, 3, 1, false) + norm_params(c2 / 2);
  stem.flops += conv_macs(3, c2 / 2, 3, 1, h, h);
  h = conv_output_size(h, 3, 2, 1);
  stem.params += conv_params(c2 / 2, c2, 3, 1, false) + norm_params(c2);
  stem.flops += conv_macs(c2 / 2, c2, 3, 1, h, h);
  rep.per_stage.push_back(stem);

  std::int64_t in = c2;
  for (int i = 0; i < kNumStages; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const std::int64_t c = config.channels[s];
    const int paths = config.paths[s];
    StageCost st{"stage" + std::to_string(i + kFirstStage), 0, 0};
    const int stride = i == 0 ? 1 : 2;
    const std::int64_t out_h = conv_output_size(h, 3, stride, 1);

    for (int j = 0; j < paths; ++j) {
      const bool series = config.embed == EmbedMode::kSeries;
      const int k = series ? 3 : 3 + 2 * j;
      const std::int64_t unit_in = (series && j > 0) ? c : in;
      st.params += conv_params(unit_in, unit_in, k, static_cast<int>(unit_in), false) +
                   conv_params(unit_in, c, 1, 1, false) + norm_params(c);
      st.flops += conv_macs(unit_in, unit_in, k, static_cast<int>(unit_in), out_h, out_h) +
                  conv_macs(unit_in, c, 1, 1, out_h, out_h);
    }
    h = out_h;
    const std::int64_t n = h * h;

    const std::int64_t towers = static_cast<std::int64_t>(paths) * config.layers[s];
    st.params += towers * encoder_block_params(c, config.mlp_ratio);
    st.flops += towers * encoder_block_macs(n, c, config.heads, config.mlp_ratio);
    const auto cx = complexity_model(towers, config.heads, n, c);
    rep.analytic_time += cx.time;
    rep.analytic_memory += cx.memory;

    std::int64_t merged = c;
    if (config.gli == GliMode::kConcat) merged = (paths + 1) * c;
    if (config.gli == GliMode::kNone) merged = paths * c;
    if (config.gli != GliMode::kNone) {
      st.params += 2 * conv_params(c, c, 1, 1, false) + conv_params(c, c, 3, static_cast<int>(c), false) +
                   3 * norm_params(c);
      st.flops += (2 * conv_macs(c, c, 1, 1, h, h) + conv_macs(c, c, 3, static_cast<int>(c), h, h));
    }
    const std::int64_t out = config.out_channels(i);
    st.params += conv_params(merged, out, 1, 1, true);
    st.flops += conv_macs(merged, out, 1, 1, h, h);
    rep.per_stage.push_back(st);
    in = out;
  }

  const std::int64_t c5 = config.channels[kNumStages - 1];
  rep.per_stage.push_back({"head", linear_params(c5, config.num_classes, true), linear_macs(c5, config.num_classes, 1)});

  for (const auto& st : rep.per_stage) {
    rep.params += st.params;
    rep.flops_macs += st.flops;
  }
  return rep;
}

std::int64_t count_params(const ModelConfig& config) { return cost_report(config).params; }

std::int64_t count_flops(const ModelConfig& config, std::int64_t input_hw) {
  return cost_report(config, input_hw).flops_macs;
}

std::vector<SweepRow> sweep_configs(const std::vector<std::string>& specs, std::int64_t input_hw) {
  std::vector<SweepRow> rows;
  rows.reserve(specs.size());
  for (const auto& spec : specs) rows.push_back({spec, cost_report(resolve_model(spec), input_hw)});
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "spec,params,flops_macs,analytic_time,analytic_memory\n";
  for (const auto& row : rows) {
    out += csv_field(row.spec) + "," + std::to_string(row.report.params) + "," +
           std::to_string(row.report.flops_macs) + "," + std::to_string(row.report.analytic_time) + "," +
           std::to_string(row.report.analytic_memory) + "\n";
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_row = [&] {
    row.push_back(field);
    rows.push_back(std::move(row));
    row.clear();
    field.clear();
    field_started = false;
  };
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      if (!field.empty()) throw ParseError("csv: quote inside unquoted field", i);
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(field);
      field.clear();
      field_started = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_row();
    } else {
      field += c;
      field_started = true;
    }
    ++i;
  }
  if (quoted) throw ParseError("csv: unterminated quoted field", text.size());
  if (field_started || !row.empty()) end_row();
  return rows;
}

std::vector<std::string> sweep_specs_from_csv(const std::string& text) {
  const auto rows = read_csv(text);
  if (rows.empty() || rows.front().empty() || rows.front().front() != "spec") {
    throw ParseError("sweep csv: missing 'spec' header", 0);
  }
  std::vector<std::string> specs;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() == 1 && rows[r][0].empty()) continue;
    specs.push_back(rows[r][0]);
  }
  return specs;
}

std::string format_millions(std::int64_t value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(value) / 1e6);
  return buf;
}

std::string format_billions(std::int64_t value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fG", static_cast<double>(value) / 1e9);
  return buf;
}

}  // namespace mpvit
