#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mpvit {

inline constexpr int kNumStages = 4;
// Stages are numbered 2..5 after the stem; arrays below index them 0..3.
inline constexpr int kFirstStage = 2;

enum class EmbedMode { kSeries, kParallel };

// How a stage merges its outputs before the 1x1 projection:
//   concat - local feature and every path, (paths + 1) * C channels
//   sum    - elementwise sum of local feature and paths
//   none   - paths only, no local feature branch
enum class GliMode { kConcat, kSum, kNone };

struct ModelConfig {
  std::array<int, kNumStages> paths{};
  std::array<int, kNumStages> layers{};
  std::array<int, kNumStages> channels{};
  int heads = 8;
  int mlp_ratio = 4;
  int num_classes = 1000;
  EmbedMode embed = EmbedMode::kSeries;
  GliMode gli = GliMode::kConcat;

  // Throws ConfigError naming the offending field.
  void validate() const;

  // Output width of stage i's aggregation (0-based index).
  int out_channels(int stage_index) const {
    return stage_index + 1 < kNumStages ? channels[stage_index + 1] : channels[kNumStages - 1];
  }

  // "[p..]P_[l..]L_[c..]C;h=..;r=..;classes=..;embed=..;gli=.."
  std::string canonical() const;
  // Bracket part only, as written in cost tables.
  std::string bracket() const;
  // 64-bit FNV-1a of canonical().
  std::uint64_t fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

std::uint64_t fnv1a64(std::string_view bytes);

const char* embed_name(EmbedMode mode);
const char* gli_name(GliMode mode);

// tiny, xsmall, small, base.
ModelConfig preset(std::string_view name);
std::vector<std::string> preset_names();
bool is_preset(std::string_view name);

// Bracket grammar "[p2,p3,p4,p5]P_[l2,..]L_[c2,..]C" with optional whitespace,
// then optional ";key=value" options (h, r, classes, embed, gli). Without a
// gli option the aggregation defaults to paths-only, the form used by the
// path-dimension comparison. Throws ParseError carrying the character offset.
ModelConfig parse_spec(std::string_view text);

// Preset name or spec string; a preset name may also carry ";key=value" options.
ModelConfig resolve_model(std::string_view name_or_spec);

// Padding that makes a k x k, stride s conv produce `target` outputs from
// `in` inputs. Smallest such padding below k; GeometryError if none exists.
int solve_padding(std::int64_t in, int kernel, int stride, std::int64_t target);

// Per-stage token-map side lengths for a square input.
std::array<std::int64_t, kNumStages> stage_resolutions(std::int64_t input_hw);

}  // namespace mpvit
