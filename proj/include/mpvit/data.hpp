#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpvit/tensor.hpp"

namespace mpvit {

enum class Split : std::uint8_t { kTrain = 0, kEval = 1 };

struct Dataset {
  Tensor<float> images;  // [n,3,S,S], values in [0,1]
  std::vector<int> labels;
  std::vector<Split> split;
  int classes = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t side() const { return images.defined() ? images.dim(2) : 0; }
  // Samples tagged `which`, in original order.
  Dataset subset(Split which) const;
  // Samples at `indices`, in that order.
  Dataset select(std::span<const std::size_t> indices) const;
};

// Gathers images[indices] into a fresh [k,3,S,S] tensor.
Tensor<float> gather_images(const Dataset& data, std::span<const std::size_t> indices);

// Procedurally drawn shapes on noisy backgrounds. Class c draws shape c % 4
// (disc, square, triangle, diagonal cross) with fill style c / 4 (solid,
// outline, stripes, checks). Position, size and hue are random; foreground
// sits a fixed 0.55 above the background in every channel. Labels cycle
// 0..classes-1; every fifth sample is tagged for evaluation.
Dataset synth_dataset(std::uint64_t seed, std::int64_t n, int classes, std::int64_t size);

// MNIST-style IDX pair. Grayscale is replicated to three channels, scaled by
// 1/255 and zero-padded (centred) up to the next multiple of 32. All samples
// are tagged for training.
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);

}  // namespace mpvit
