#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "mpvit/config.hpp"
#include "mpvit/layers.hpp"

namespace mpvit {

// Two stride-2 ConvBnAct units: 3 -> C2/2 -> C2.
template <typename T>
struct Stem {
  ConvBnAct<T> conv1;
  ConvBnAct<T> conv2;

  Stem() = default;
  Stem(int c2, Rng& rng);
  Tensor<T> forward(const Tensor<T>& image, bool training);
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Produces one equal-resolution map per path. Series mode chains 3x3
// depthwise-separable units and taps each one (receptive fields 3, 5, 7, ...);
// parallel mode runs independent k = 3, 5, 7, ... units on the input.
template <typename T>
struct MsPatchEmbed {
  EmbedMode mode = EmbedMode::kSeries;
  int stride = 1;
  std::vector<DwSeparableConv<T>> units;

  MsPatchEmbed() = default;
  MsPatchEmbed(std::int64_t in, std::int64_t out, int num_paths, int stride, EmbedMode mode, Rng& rng);
  std::vector<Tensor<T>> forward(const Tensor<T>& x, bool training);
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

// Depthwise residual bottleneck: x + (1x1 -> dw 3x3 -> 1x1)(x).
template <typename T>
struct LocalFeature {
  ConvBnAct<T> reduce;
  ConvBnAct<T> depthwise;
  ConvBnAct<T> expand;

  LocalFeature() = default;
  LocalFeature(std::int64_t channels, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct GliAggregate {
  GliMode mode = GliMode::kConcat;
  Conv2d<T> proj;  // 1x1 with bias

  GliAggregate() = default;
  GliAggregate(std::int64_t channels, int num_paths, std::int64_t out_channels, GliMode mode, Rng& rng);
  // Width of the tensor fed to the projection.
  std::int64_t merged_channels() const { return proj.weight.dim(1); }
  // `local` is ignored (may be undefined) in kNone mode.
  Tensor<T> forward(const Tensor<T>& local, const std::vector<Tensor<T>>& globals) const;
  void collect(ParamSet<T>& set, const std::string& prefix) const;
};

template <typename T>
struct Stage {
  MsPatchEmbed<T> embed;
  std::vector<std::vector<EncoderBlock<T>>> paths;
  std::optional<LocalFeature<T>> local;
  GliAggregate<T> gli;
};

template <typename T>
struct StageOutput {
  std::int64_t height = 0;
  std::int64_t width = 0;
  Tensor<T> local;                 // undefined in kNone mode
  std::vector<Tensor<T>> globals;  // one map [N,C,H,W] per path
  Tensor<T> aggregated;
};

template <typename T>
struct ForwardTrace {
  std::array<StageOutput<T>, kNumStages> stages;
};

// Addresses one encoder block; stage is 2..5, path and layer are 0-based.
struct BlockAddress {
  int stage = kFirstStage;
  int path = 0;
  int layer = 0;
};

template <typename T>
struct AttentionProbe {
  BlockAddress address;
  AttentionTap<T> tap;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // image [N,3,H,W] with H, W >= 32 and divisible by 32 -> logits [N,classes].
  Tensor<T> forward(const Tensor<T>& image, bool training, ForwardTrace<T>* trace = nullptr,
                    AttentionProbe<T>* probe = nullptr);

  ParamSet<T> parameters() const;

  Stem<T>& stem() { return stem_; }
  Stage<T>& stage(int index) { return stages_.at(static_cast<std::size_t>(index)); }
  const Stage<T>& stage(int index) const { return stages_.at(static_cast<std::size_t>(index)); }
  Linear<T>& head() { return head_; }

 private:
  ModelConfig config_;
  Stem<T> stem_;
  std::array<Stage<T>, kNumStages> stages_;
  Linear<T> head_;
};

// GeometryError unless H, W >= 32 and both divisible by 32.
void check_input_geometry(std::int64_t height, std::int64_t width);

// Throws AddressError listing valid ranges.
void check_block_address(const ModelConfig& config, const BlockAddress& address);

}  // namespace mpvit
