#include "mpvit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mpvit/errors.hpp"

namespace mpvit {

AttentionMap attention_from_softmax(const Tensor<float>& softmax_k, std::int64_t height, std::int64_t width, int head,
                                    std::int64_t batch_index) {
  if (softmax_k.rank() != 4) throw DimensionError("attention_from_softmax: expected [B,h,N,d]");
  const std::int64_t b = softmax_k.dim(0), h = softmax_k.dim(1), n = softmax_k.dim(2), d = softmax_k.dim(3);
  if (n != height * width) {
    throw DimensionError("attention_from_softmax: " + std::to_string(n) + " tokens for a " + std::to_string(height) +
                         "x" + std::to_string(width) + " map");
  }
  if (batch_index < 0 || batch_index >= b) throw AddressError("batch index out of range");
  if (head != kMeanHeads && (head < 0 || head >= h)) {
    throw AddressError("head " + std::to_string(head) + " out of range; valid: 0.." + std::to_string(h - 1) + " or mean");
  }
  AttentionMap out;
  out.head = head;
  out.height = height;
  out.width = width;
  out.values.assign(static_cast<std::size_t>(n), 0.0);
  const auto src = softmax_k.data();
  const int h0 = head == kMeanHeads ? 0 : head, h1 = head == kMeanHeads ? static_cast<int>(h) : head + 1;
  for (int hh = h0; hh < h1; ++hh) {
    const auto base = static_cast<std::size_t>((batch_index * h + hh) * n * d);
    for (std::int64_t t = 0; t < n; ++t) {
      double s = 0.0;
      for (std::int64_t c = 0; c < d; ++c) s += static_cast<double>(src[base + static_cast<std::size_t>(t * d + c)]);
      out.values[static_cast<std::size_t>(t)] += s / static_cast<double>(d);
    }
  }
  for (auto& v : out.values) v /= static_cast<double>(h1 - h0);
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double mn = *lo, mx = *hi;
  for (auto& v : out.values) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
  return out;
}

AttentionMap attention_map(Model<float>& model, const Tensor<float>& image, const BlockAddress& address, int head) {
  check_block_address(model.config(), address);
  if (head != kMeanHeads && (head < 0 || head >= model.config().heads)) {
    throw AddressError("head " + std::to_string(head) + " out of range; valid: 0.." +
                       std::to_string(model.config().heads - 1) + " or mean");
  }
  if (image.rank() != 4 || image.dim(0) != 1) throw DimensionError("attention_map: expected a single image [1,3,H,W]");
  NoGradGuard guard;
  AttentionProbe<float> probe;
  probe.address = address;
  model.forward(image, false, nullptr, &probe);
  auto map = attention_from_softmax(probe.tap.softmax_k, probe.height, probe.width, head);
  map.stage = address.stage;
  map.path = address.path;
  map.layer = address.layer;
  return map;
}

std::vector<double> resize_bilinear(const std::vector<double>& values, std::int64_t height, std::int64_t width,
                                    std::int64_t out_height, std::int64_t out_width) {
  if (static_cast<std::int64_t>(values.size()) != height * width || height < 1 || width < 1) {
    throw DimensionError("resize_bilinear: values do not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (out_height < 1 || out_width < 1) throw DimensionError("resize_bilinear: empty target");
  auto axis = [](std::int64_t o, std::int64_t in, std::int64_t out, std::int64_t& i0, std::int64_t& i1, double& f) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::int64_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    f = src - static_cast<double>(i0);
  };
  std::vector<double> out(static_cast<std::size_t>(out_height * out_width));
  for (std::int64_t y = 0; y < out_height; ++y) {
    std::int64_t y0, y1;
    double fy;
    axis(y, height, out_height, y0, y1, fy);
    for (std::int64_t x = 0; x < out_width; ++x) {
      std::int64_t x0, x1;
      double fx;
      axis(x, width, out_width, x0, x1, fx);
      auto at = [&](std::int64_t r, std::int64_t c) { return values[static_cast<std::size_t>(r * width + c)]; };
      const double top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx;
      const double bot = at(y1, x0) * (1 - fx) + at(y1, x1) * fx;
      out[static_cast<std::size_t>(y * out_width + x)] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

Tensor<float> overlay(const AttentionMap& map, const Tensor<float>& image) {
  const bool batched = image.rank() == 4;
  if (!(image.rank() == 3 || (batched && image.dim(0) == 1)) || image.dim(batched ? 1 : 0) != 3) {
    throw DimensionError("overlay: expected an image [3,H,W] or [1,3,H,W]");
  }
  const std::int64_t h = image.dim(batched ? 2 : 1), w = image.dim(batched ? 3 : 2);
  const auto up = resize_bilinear(map.values, map.height, map.width, h, w);
  std::vector<float> out(image.data().begin(), image.data().end());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < up.size(); ++i) out[c * up.size() + i] *= static_cast<float>(up[i]);
  }
  return Tensor<float>::from_data({3, h, w}, std::move(out));
}

namespace {

void check_range(const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0 && values[i] <= 1.0)) {
      throw ContractError("export_image: value " + std::to_string(values[i]) + " at index " + std::to_string(i) +
                          " outside [0,1]");
    }
  }
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::floor(v * 255.0 + 0.5)); }

void write_all(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

}  // namespace

void export_image(const std::vector<double>& values, std::int64_t height, std::int64_t width, const std::string& path,
                  ImageFormat format) {
  if (static_cast<std::int64_t>(values.size()) != height * width || height < 1 || width < 1) {
    throw DimensionError("export_image: values do not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  check_range(values);
  std::string bytes;
  if (format == ImageFormat::kPgm) {
    bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : values) bytes.push_back(static_cast<char>(to_byte(v)));
  } else {
    char buf[32];
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        std::snprintf(buf, sizeof buf, "%.6f", values[static_cast<std::size_t>(y * width + x)]);
        if (x > 0) bytes.push_back(',');
        bytes += buf;
      }
      bytes.push_back('\n');
    }
  }
  write_all(path, bytes);
}

void export_rgb(const Tensor<float>& image, const std::string& path) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("export_rgb: expected [3,H,W]");
  const std::int64_t h = image.dim(1), w = image.dim(2);
  const auto d = image.data();
  std::vector<double> values(d.begin(), d.end());
  check_range(values);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const auto plane = static_cast<std::size_t>(h * w);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) bytes.push_back(static_cast<char>(to_byte(values[c * plane + i])));
  }
  write_all(path, bytes);
}

Tensor<float> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const auto magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError("'" + path + "': not a binary PGM/PPM");
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    maxval = std::stoll(token());
  } catch (const std::exception&) {
    throw FormatError("'" + path + "': malformed header");
  }
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("'" + path + "': need positive dims and maxval 255");
  ++pos;
  const std::int64_t channels = magic == "P6" ? 3 : 1;
  const auto need = static_cast<std::size_t>(w * h * channels);
  if (bytes.size() < pos || bytes.size() - pos < need) throw LengthError("'" + path + "': pixel data truncated");
  const auto plane = static_cast<std::size_t>(w * h);
  std::vector<float> out(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto src = channels == 3 ? i * 3 + c : i;
      out[c * plane + i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + src])) / 255.0f;
    }
  }
  return Tensor<float>::from_data({1, 3, h, w}, std::move(out));
}

}  // namespace mpvit
