#include "mpvit/model.hpp"

#include <string>

#include "mpvit/errors.hpp"

namespace mpvit {

template <typename T>
Stem<T>::Stem(int c2, Rng& rng) : conv1(3, c2 / 2, 3, {2, 1, 1}, rng), conv2(c2 / 2, c2, 3, {2, 1, 1}, rng) {
  if (c2 % 2 != 0) throw ConfigError("stem: channels_2 must be even, got " + std::to_string(c2));
}

template <typename T>
Tensor<T> Stem<T>::forward(const Tensor<T>& image, bool training) {
  return conv2.forward(conv1.forward(image, training), training);
}

template <typename T>
void Stem<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  conv1.collect(set, prefix + ".conv1");
  conv2.collect(set, prefix + ".conv2");
}

template <typename T>
MsPatchEmbed<T>::MsPatchEmbed(std::int64_t in, std::int64_t out, int num_paths, int s, EmbedMode m, Rng& rng)
    : mode(m), stride(s) {
  if (s != 1 && s != 2) throw ConfigError("patch embed: stride must be 1 or 2, got " + std::to_string(s));
  if (num_paths < 1) throw ConfigError("patch embed: paths must be >= 1, got " + std::to_string(num_paths));
  for (int j = 0; j < num_paths; ++j) {
    if (mode == EmbedMode::kSeries) {
      units.emplace_back(j == 0 ? in : out, out, 3, j == 0 ? s : 1, 1, rng);
    } else {
      const int k = 3 + 2 * j;
      units.emplace_back(in, out, k, s, (k - 1) / 2, rng);
    }
  }
}

template <typename T>
std::vector<Tensor<T>> MsPatchEmbed<T>::forward(const Tensor<T>& x, bool training) {
  std::vector<Tensor<T>> out;
  out.reserve(units.size());
  if (mode == EmbedMode::kSeries) {
    Tensor<T> cur = x;
    for (auto& u : units) {
      cur = u.forward(cur, training);
      out.push_back(cur);
    }
  } else {
    for (auto& u : units) out.push_back(u.forward(x, training));
  }
  return out;
}

template <typename T>
void MsPatchEmbed<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  for (std::size_t j = 0; j < units.size(); ++j) units[j].collect(set, prefix + "." + std::to_string(j));
}

template <typename T>
LocalFeature<T>::LocalFeature(std::int64_t c, Rng& rng)
    : reduce(c, c, 1, {1, 0, 1}, rng),
      depthwise(c, c, 3, {1, 1, static_cast<int>(c)}, rng),
      expand(c, c, 1, {1, 0, 1}, rng, false) {}

template <typename T>
Tensor<T> LocalFeature<T>::forward(const Tensor<T>& x, bool training) {
  auto y = expand.forward(depthwise.forward(reduce.forward(x, training), training), training);
  return add(x, y);
}

template <typename T>
void LocalFeature<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  reduce.collect(set, prefix + ".conv1");
  depthwise.collect(set, prefix + ".conv2");
  expand.collect(set, prefix + ".conv3");
}

template <typename T>
GliAggregate<T>::GliAggregate(std::int64_t c, int num_paths, std::int64_t out, GliMode m, Rng& rng) : mode(m) {
  std::int64_t merged = c;
  if (mode == GliMode::kConcat) merged = (num_paths + 1) * c;
  if (mode == GliMode::kNone) merged = num_paths * c;
  proj = Conv2d<T>(merged, out, 1, {1, 0, 1}, rng, true);
}

template <typename T>
Tensor<T> GliAggregate<T>::forward(const Tensor<T>& local, const std::vector<Tensor<T>>& globals) const {
  std::vector<Tensor<T>> parts;
  if (mode != GliMode::kNone) parts.push_back(local);
  parts.insert(parts.end(), globals.begin(), globals.end());
  const Shape& ref = parts.front().shape();
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.shape() != ref) {
      throw DimensionError("gli: inputs must share shape " + shape_str(ref) + ", got " + shape_str(p.shape()));
    }
  }
  Tensor<T> merged = mode == GliMode::kSum ? add_n(std::span<const Tensor<T>>(parts)) : concat(parts, 1);
  return proj.forward(merged);
}

template <typename T>
void GliAggregate<T>::collect(ParamSet<T>& set, const std::string& prefix) const {
  proj.collect(set, prefix + ".proj");
}

void check_input_geometry(std::int64_t height, std::int64_t width) {
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw GeometryError("input must be at least 32x32 with sides divisible by 32, got " + std::to_string(height) +
                        "x" + std::to_string(width));
  }
}

void check_block_address(const ModelConfig& config, const BlockAddress& a) {
  const int last = kFirstStage + kNumStages - 1;
  if (a.stage < kFirstStage || a.stage > last) {
    throw AddressError("stage " + std::to_string(a.stage) + " out of range [" + std::to_string(kFirstStage) + ", " +
                       std::to_string(last) + "]");
  }
  const auto i = static_cast<std::size_t>(a.stage - kFirstStage);
  if (a.path < 0 || a.path >= config.paths[i]) {
    throw AddressError("path " + std::to_string(a.path) + " out of range [0, " + std::to_string(config.paths[i] - 1) +
                       "] for stage " + std::to_string(a.stage));
  }
  if (a.layer < 0 || a.layer >= config.layers[i]) {
    throw AddressError("layer " + std::to_string(a.layer) + " out of range [0, " +
                       std::to_string(config.layers[i] - 1) + "] for stage " + std::to_string(a.stage));
  }
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  stem_ = Stem<T>(config_.channels[0], rng);
  std::int64_t in = config_.channels[0];
  for (int i = 0; i < kNumStages; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const std::int64_t c = config_.channels[s];
    Stage<T>& st = stages_[s];
    st.embed = MsPatchEmbed<T>(in, c, config_.paths[s], i == 0 ? 1 : 2, config_.embed, rng);
    st.paths.resize(static_cast<std::size_t>(config_.paths[s]));
    for (auto& tower : st.paths) {
      for (int l = 0; l < config_.layers[s]; ++l) tower.emplace_back(c, config_.heads, config_.mlp_ratio, rng);
    }
    if (config_.gli != GliMode::kNone) st.local.emplace(c, rng);
    st.gli = GliAggregate<T>(c, config_.paths[s], config_.out_channels(i), config_.gli, rng);
    in = config_.out_channels(i);
  }
  head_ = Linear<T>(config_.channels[kNumStages - 1], config_.num_classes, rng);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& image, bool training, ForwardTrace<T>* trace, AttentionProbe<T>* probe) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw DimensionError("model input must be [N,3,H,W], got " + shape_str(image.shape()));
  }
  check_input_geometry(image.dim(2), image.dim(3));
  if (probe != nullptr) check_block_address(config_, probe->address);

  Tensor<T> x = stem_.forward(image, training);
  for (int i = 0; i < kNumStages; ++i) {
    Stage<T>& st = stages_[static_cast<std::size_t>(i)];
    auto embedded = st.embed.forward(x, training);
    const std::int64_t h = embedded.front().dim(2);
    const std::int64_t w = embedded.front().dim(3);
    std::vector<Tensor<T>> globals;
    globals.reserve(embedded.size());
    for (std::size_t j = 0; j < st.paths.size(); ++j) {
      Tensor<T> tokens = map_to_tokens(embedded[j]);
      for (std::size_t l = 0; l < st.paths[j].size(); ++l) {
        AttentionTap<T>* tap = nullptr;
        if (probe != nullptr && probe->address.stage == i + kFirstStage &&
            probe->address.path == static_cast<int>(j) && probe->address.layer == static_cast<int>(l)) {
          tap = &probe->tap;
          probe->height = h;
          probe->width = w;
        }
        tokens = st.paths[j][l].forward(tokens, h, w, tap);
      }
      globals.push_back(tokens_to_map(tokens, h, w));
    }
    Tensor<T> local;
    if (st.local) local = st.local->forward(embedded.front(), training);
    x = st.gli.forward(local, globals);
    if (trace != nullptr) {
      auto& out = trace->stages[static_cast<std::size_t>(i)];
      out.height = h;
      out.width = w;
      out.local = local.defined() ? local.detach() : Tensor<T>();
      out.globals.clear();
      for (const auto& g : globals) out.globals.push_back(g.detach());
      out.aggregated = x.detach();
    }
  }
  auto pooled = reduce(x, ReduceKind::kMean, {2, 3});
  return head_.forward(pooled);
}

template <typename T>
ParamSet<T> Model<T>::parameters() const {
  ParamSet<T> set;
  stem_.collect(set, "stem");
  for (int i = 0; i < kNumStages; ++i) {
    const auto& st = stages_[static_cast<std::size_t>(i)];
    const std::string prefix = "stage" + std::to_string(i + kFirstStage);
    st.embed.collect(set, prefix + ".embed");
    for (std::size_t j = 0; j < st.paths.size(); ++j) {
      for (std::size_t l = 0; l < st.paths[j].size(); ++l) {
        st.paths[j][l].collect(set, prefix + ".path" + std::to_string(j) + ".block" + std::to_string(l));
      }
    }
    if (st.local) st.local->collect(set, prefix + ".local");
    st.gli.collect(set, prefix + ".gli");
  }
  head_.collect(set, "head");
  return set;
}

#define MPVIT_INSTANTIATE_MODEL(T) \
  template struct Stem<T>;         \
  template struct MsPatchEmbed<T>; \
  template struct LocalFeature<T>; \
  template struct GliAggregate<T>; \
  template class Model<T>;

MPVIT_INSTANTIATE_MODEL(float)
MPVIT_INSTANTIATE_MODEL(double)

}  // namespace mpvit
