#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpvit/model.hpp"

namespace mpvit {

inline constexpr int kMeanHeads = -1;

struct AttentionMap {
  int stage = kFirstStage;
  int path = 0;
  int layer = 0;
  int head = kMeanHeads;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> values;  // row-major, each in [0,1]
};

// Channel mean of softmax(K) for one batch item, then the head mean when
// head == kMeanHeads, min-max normalised. A flat map (max == min) becomes
// all zeros. softmax_k is [B,h,N,d] with N == height * width.
AttentionMap attention_from_softmax(const Tensor<float>& softmax_k, std::int64_t height, std::int64_t width,
                                    int head, std::int64_t batch_index = 0);

// Runs an eval-mode forward of a single image [1,3,H,W] and reads the
// addressed block. Does not change model state. AddressError on a bad
// stage/path/layer/head.
AttentionMap attention_map(Model<float>& model, const Tensor<float>& image, const BlockAddress& address,
                           int head = kMeanHeads);

// Half-pixel bilinear resize with edge clamping.
std::vector<double> resize_bilinear(const std::vector<double>& values, std::int64_t height, std::int64_t width,
                                    std::int64_t out_height, std::int64_t out_width);

// Map resized to the image size and multiplied into every channel.
// image is [3,H,W] or [1,3,H,W]; the result is [3,H,W].
Tensor<float> overlay(const AttentionMap& map, const Tensor<float>& image);

enum class ImageFormat { kPgm, kCsv };

// PGM: binary P5, maxval 255, byte = floor(255 v + 0.5). CSV: one row per
// image row, six decimals. ContractError for values outside [0,1].
void export_image(const std::vector<double>& values, std::int64_t height, std::int64_t width, const std::string& path,
                  ImageFormat format);

// Binary P6 of a [3,H,W] tensor in [0,1].
void export_rgb(const Tensor<float>& image, const std::string& path);

// Binary P5 or P6 with maxval 255 -> [1,3,H,W] in [0,1]; grayscale is
// replicated. FormatError on anything else.
Tensor<float> read_pnm(const std::string& path);

}  // namespace mpvit
