#include "mpvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "mpvit/errors.hpp"
#include "mpvit/rng.hpp"

namespace mpvit {

Dataset Dataset::subset(Split which) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) idx.push_back(i);
  }
  return select(idx);
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset out;
  out.classes = classes;
  out.images = gather_images(*this, indices);
  for (std::size_t i : indices) {
    out.labels.push_back(labels.at(i));
    out.split.push_back(split.at(i));
  }
  return out;
}

Tensor<float> gather_images(const Dataset& data, std::span<const std::size_t> indices) {
  const std::int64_t s = data.side();
  const auto per = static_cast<std::size_t>(3 * s * s);
  std::vector<float> buf(indices.size() * per);
  const auto src = data.images.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= data.labels.size()) throw ContractError("gather_images: index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                buf.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return Tensor<float>::from_data({static_cast<std::int64_t>(indices.size()), 3, s, s}, std::move(buf));
}

namespace {

// Inside test in the shape's local frame: u, v in units of the radius.
bool inside_shape(int kind, double u, double v) {
  switch (kind) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2:
      // Upright triangle with apex at v = -1 and base at v = 0.7.
      return v >= -1.0 && v <= 0.7 && std::abs(u) <= (v + 1.0) * 0.6;
    default: {
      // Diagonal cross.
      const double a = (u + v) * std::numbers::sqrt2 / 2, b = (v - u) * std::numbers::sqrt2 / 2;
      return (std::abs(a) <= 0.3 && std::abs(b) <= 1.0) || (std::abs(b) <= 0.3 && std::abs(a) <= 1.0);
    }
  }
}

bool styled(int style, int kind, double u, double v, double px) {
  if (!inside_shape(kind, u, v)) return false;
  switch (style) {
    case 0:
      return true;
    case 1: {
      // Outline: drop points whose neighbourhood is entirely inside.
      const double d = 2.0 * px;
      return !(inside_shape(kind, u + d, v) && inside_shape(kind, u - d, v) && inside_shape(kind, u, v + d) &&
               inside_shape(kind, u, v - d));
    }
    case 2:
      return static_cast<int>(std::floor((v + 2.0) / (4.0 * px))) % 2 == 0;
    default:
      return (static_cast<int>(std::floor((u + 2.0) / (4.0 * px))) + static_cast<int>(std::floor((v + 2.0) / (4.0 * px)))) % 2 == 0;
  }
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, std::int64_t n, int classes, std::int64_t size) {
  if (classes < 1 || classes > 16) throw ContractError("synth_dataset: classes must be in [1, 16]");
  if (size < 32 || size % 32 != 0) throw ContractError("synth_dataset: size must be a positive multiple of 32");
  if (n < 0) throw ContractError("synth_dataset: n must be >= 0");
  Rng rng(seed);
  Dataset d;
  d.classes = classes;
  const auto s = static_cast<std::size_t>(size);
  std::vector<float> img(static_cast<std::size_t>(n) * 3 * s * s);
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels.push_back(label);
    d.split.push_back(i % 5 == 4 ? Split::kEval : Split::kTrain);
    const int kind = label % 4;
    const int style = label / 4;
    const double sz = static_cast<double>(size);
    const double radius = rng.uniform(0.25, 0.3) * sz;
    const double cx = rng.uniform(radius, sz - radius);
    const double cy = rng.uniform(radius, sz - radius);
    float fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      bg[c] = static_cast<float>(rng.uniform(0.0, 0.35));
      fg[c] = bg[c] + 0.55f;
    }
    float* base = img.data() + static_cast<std::size_t>(i) * 3 * s * s;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
        const bool on = styled(style, kind, u, v, 1.0 / radius);
        for (std::size_t c = 0; c < 3; ++c) {
          const float noise = static_cast<float>(rng.uniform(-0.06, 0.06));
          base[(c * s + y) * s + x] = std::clamp((on ? fg[c] : bg[c]) + noise, 0.0f, 1.0f);
        }
      }
    }
  }
  d.images = Tensor<float>::from_data({n, 3, size, size}, std::move(img));
  return d;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  if (ib.size() < 16) throw LengthError("'" + images_path + "': header truncated");
  if (be32(ib, 0) != 0x00000803) throw FormatError("'" + images_path + "': bad magic, expected 0x00000803");
  if (lb.size() < 8) throw LengthError("'" + labels_path + "': header truncated");
  if (be32(lb, 0) != 0x00000801) throw FormatError("'" + labels_path + "': bad magic, expected 0x00000801");
  const std::size_t n = be32(ib, 4), rows = be32(ib, 8), cols = be32(ib, 12);
  const std::size_t nl = be32(lb, 4);
  using Wide = unsigned __int128;
  if (Wide{ib.size() - 16} < Wide{n} * rows * cols) throw LengthError("'" + images_path + "': payload truncated");
  if (lb.size() - 8 < nl) throw LengthError("'" + labels_path + "': payload truncated");
  if (nl != n) {
    throw LengthError("label count " + std::to_string(nl) + " does not match image count " + std::to_string(n));
  }
  if (rows == 0 || cols == 0) throw FormatError("'" + images_path + "': empty image dimensions");
  const std::size_t side = (std::max(rows, cols) + 31) / 32 * 32;
  const std::size_t top = (side - rows) / 2, left = (side - cols) / 2;

  Dataset d;
  std::vector<float> img(n * 3 * side * side, 0.0f);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x = 0; x < cols; ++x) {
        const float v = static_cast<float>(ib[16 + (i * rows + y) * cols + x]) / 255.0f;
        for (std::size_t c = 0; c < 3; ++c) img[((i * 3 + c) * side + top + y) * side + left + x] = v;
      }
    }
    const int label = lb[8 + i];
    d.labels.push_back(label);
    d.split.push_back(Split::kTrain);
    max_label = std::max(max_label, label);
  }
  d.classes = max_label + 1;
  const auto s = static_cast<std::int64_t>(side);
  d.images = Tensor<float>::from_data({static_cast<std::int64_t>(n), 3, s, s}, std::move(img));
  return d;
}

}  // namespace mpvit
