#include "mpvit/config.hpp"

#include <cctype>
#include <charconv>
#include <limits>

#include "mpvit/errors.hpp"
#include "mpvit/ops.hpp"

namespace mpvit {

namespace {

std::string stage_field(const char* name, int index) {
  return std::string(name) + "_" + std::to_string(index + kFirstStage);
}

std::string join(const std::array<int, kNumStages>& v) {
  std::string s = "[";
  for (int i = 0; i < kNumStages; ++i) {
    if (i > 0) s += ",";
    s += std::to_string(v[static_cast<std::size_t>(i)]);
  }
  return s + "]";
}

class SpecParser {
 public:
  explicit SpecParser(std::string_view text, std::size_t start = 0) : text_(text), pos_(start) {}

  ModelConfig parse() {
    ModelConfig cfg;
    cfg.gli = GliMode::kNone;
    cfg.paths = list('P');
    expect('_');
    cfg.layers = list('L');
    expect('_');
    cfg.channels = list('C');
    return options(cfg);
  }

  ModelConfig options(ModelConfig cfg) {
    skip_ws();
    while (pos_ < text_.size()) {
      expect(';');
      skip_ws();
      const std::size_t key_pos = pos_;
      const std::string key = word();
      skip_ws();
      expect('=');
      skip_ws();
      const std::size_t value_pos = pos_;
      if (key == "h") {
        cfg.heads = integer();
      } else if (key == "r") {
        cfg.mlp_ratio = integer();
      } else if (key == "classes") {
        cfg.num_classes = integer();
      } else if (key == "embed") {
        const std::string v = word();
        if (v == "series") {
          cfg.embed = EmbedMode::kSeries;
        } else if (v == "parallel") {
          cfg.embed = EmbedMode::kParallel;
        } else {
          throw ParseError("embed must be series or parallel, got '" + v + "'", value_pos);
        }
      } else if (key == "gli") {
        const std::string v = word();
        if (v == "concat") {
          cfg.gli = GliMode::kConcat;
        } else if (v == "sum") {
          cfg.gli = GliMode::kSum;
        } else if (v == "none") {
          cfg.gli = GliMode::kNone;
        } else {
          throw ParseError("gli must be concat, sum or none, got '" + v + "'", value_pos);
        }
      } else {
        throw ParseError("unknown spec option '" + key + "'", key_pos);
      }
      skip_ws();
    }
    return cfg;
  }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError(std::string("expected '") + c + "', got end of input", pos_);
    if (text_[pos_] != c) {
      throw ParseError(std::string("expected '") + c + "', got '" + text_[pos_] + "'", pos_);
    }
    ++pos_;
  }

  int integer() {
    skip_ws();
    int value = 0;
    const char* begin = text_.data() + pos_;
    const char* end = text_.data() + text_.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec == std::errc::result_out_of_range) throw ParseError("integer out of range", pos_);
    if (ec != std::errc() || ptr == begin) throw ParseError("expected an integer", pos_);
    pos_ += static_cast<std::size_t>(ptr - begin);
    return value;
  }

  std::string word() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) ++pos_;
    if (pos_ == start) throw ParseError("expected a name", pos_);
    return std::string(text_.substr(start, pos_ - start));
  }

  std::array<int, kNumStages> list(char tag) {
    std::array<int, kNumStages> v{};
    expect('[');
    for (int i = 0; i < kNumStages; ++i) {
      if (i > 0) expect(',');
      v[static_cast<std::size_t>(i)] = integer();
    }
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == ',') {
      throw ParseError("expected exactly " + std::to_string(kNumStages) + " entries", pos_);
    }
    expect(']');
    expect(tag);
    return v;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  for (int i = 0; i < kNumStages; ++i) {
    const auto s = static_cast<std::size_t>(i);
    if (paths[s] < 1) throw ConfigError(stage_field("paths", i) + " must be >= 1, got " + std::to_string(paths[s]));
    if (layers[s] < 1) throw ConfigError(stage_field("layers", i) + " must be >= 1, got " + std::to_string(layers[s]));
    if (channels[s] < 1) {
      throw ConfigError(stage_field("channels", i) + " must be >= 1, got " + std::to_string(channels[s]));
    }
  }
  if (heads < 1) throw ConfigError("heads must be >= 1, got " + std::to_string(heads));
  for (int i = 0; i < kNumStages; ++i) {
    const auto c = channels[static_cast<std::size_t>(i)];
    if (c % heads != 0) {
      throw ConfigError(stage_field("channels", i) + " = " + std::to_string(c) + " is not divisible by heads = " +
                        std::to_string(heads));
    }
  }
  if (channels[0] % 2 != 0) {
    throw ConfigError("channels_2 must be even for the stem, got " + std::to_string(channels[0]));
  }
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1, got " + std::to_string(mlp_ratio));
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1, got " + std::to_string(num_classes));
}

std::string ModelConfig::bracket() const {
  return join(paths) + "P_" + join(layers) + "L_" + join(channels) + "C";
}

std::string ModelConfig::canonical() const {
  return bracket() + ";h=" + std::to_string(heads) + ";r=" + std::to_string(mlp_ratio) +
         ";classes=" + std::to_string(num_classes) + ";embed=" + embed_name(embed) + ";gli=" + gli_name(gli);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t ModelConfig::fingerprint() const { return fnv1a64(canonical()); }

const char* embed_name(EmbedMode mode) { return mode == EmbedMode::kSeries ? "series" : "parallel"; }

const char* gli_name(GliMode mode) {
  switch (mode) {
    case GliMode::kConcat:
      return "concat";
    case GliMode::kSum:
      return "sum";
    case GliMode::kNone:
      return "none";
  }
  return "?";
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  c.paths = {2, 3, 3, 3};
  c.gli = GliMode::kConcat;
  if (name == "tiny") {
    c.layers = {1, 2, 4, 1};
    c.channels = {64, 96, 176, 216};
    c.mlp_ratio = 2;
  } else if (name == "xsmall") {
    c.layers = {1, 2, 4, 1};
    c.channels = {64, 128, 192, 256};
  } else if (name == "small") {
    c.layers = {1, 3, 6, 3};
    c.channels = {64, 128, 216, 288};
  } else if (name == "base") {
    c.layers = {1, 3, 8, 3};
    c.channels = {128, 224, 368, 480};
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected tiny, xsmall, small or base)");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"tiny", "xsmall", "small", "base"}; }

bool is_preset(std::string_view name) {
  for (const auto& p : preset_names()) {
    if (p == name) return true;
  }
  return false;
}

ModelConfig parse_spec(std::string_view text) { return SpecParser(text).parse(); }

ModelConfig resolve_model(std::string_view name_or_spec) {
  const auto semi = name_or_spec.find(';');
  auto head = name_or_spec.substr(0, semi);
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.back()))) head.remove_suffix(1);
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.front()))) head.remove_prefix(1);
  if (is_preset(head)) {
    if (semi == std::string_view::npos) return preset(head);
    return SpecParser(name_or_spec, semi).options(preset(head));
  }
  return parse_spec(name_or_spec);
}

int solve_padding(std::int64_t in, int kernel, int stride, std::int64_t target) {
  for (int p = 0; p < kernel; ++p) {
    if (in - kernel + 2 * p < 0) continue;
    if ((in - kernel + 2 * p) / stride + 1 == target) return p;
  }
  throw GeometryError("no padding aligns a " + std::to_string(kernel) + "x" + std::to_string(kernel) + " stride " +
                      std::to_string(stride) + " conv on " + std::to_string(in) + " inputs to " +
                      std::to_string(target) + " outputs");
}

std::array<std::int64_t, kNumStages> stage_resolutions(std::int64_t input_hw) {
  std::array<std::int64_t, kNumStages> r{};
  std::int64_t h = conv_output_size(conv_output_size(input_hw, 3, 2, 1), 3, 2, 1);
  for (int i = 0; i < kNumStages; ++i) {
    if (i > 0) h = conv_output_size(h, 3, 2, 1);
    r[static_cast<std::size_t>(i)] = h;
  }
  return r;
}

}  // namespace mpvit
