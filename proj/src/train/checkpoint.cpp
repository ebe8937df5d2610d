#include "mpvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "mpvit/errors.hpp"

namespace mpvit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

struct Record {
  std::vector<std::int64_t> dims;
  std::vector<float> values;
};

using Records = std::map<std::string, Record>;

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void tensor(const std::string& name, const std::vector<std::int64_t>& dims, std::span<const float> values) {
    if (name.size() > 0xffff) throw ContractError("checkpoint: tensor name too long");
    put(static_cast<std::uint16_t>(name.size()));
    buf_.insert(buf_.end(), name.begin(), name.end());
    put(static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) put(static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const char*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size() * sizeof(float));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) {
      throw FormatError("'" + path_ + "': truncated at byte " + std::to_string(pos_));
    }
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::vector<std::int64_t> dims_of(std::size_t n) { return {static_cast<std::int64_t>(n)}; }

Records read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  Reader r(bytes, path);
  if (bytes.size() < 4 || bytes.compare(0, 4, "MPVT") != 0) throw FormatError("'" + path + "': bad magic");
  r.str(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path + "': unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  Records out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    auto name = r.str(len);
    const auto rank = r.get<std::uint8_t>();
    Record rec;
    std::uint64_t n = 1;
    for (int k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>();
      rec.dims.push_back(d);
      n *= d;
      if (n > bytes.size()) throw FormatError("'" + path + "': tensor '" + name + "' larger than the file");
    }
    const auto raw = r.str(static_cast<std::size_t>(n) * sizeof(float));
    rec.values.resize(static_cast<std::size_t>(n));
    std::memcpy(rec.values.data(), raw.data(), raw.size());
    if (!out.emplace(name, std::move(rec)).second) throw FormatError("'" + path + "': duplicate tensor '" + name + "'");
  }
  if (!r.done()) throw FormatError("'" + path + "': trailing bytes after tensor " + std::to_string(count));
  for (const char* key : {"meta.fingerprint", "meta.spec"}) {
    if (!out.count(key)) throw FormatError("'" + path + "': missing " + key);
  }
  if (out.at("meta.fingerprint").values.size() != 4) throw FormatError("'" + path + "': malformed meta.fingerprint");
  return out;
}

std::uint64_t stored_fingerprint(const Records& recs) {
  std::uint64_t fp = 0;
  for (float chunk : recs.at("meta.fingerprint").values) fp = (fp << 16) | static_cast<std::uint64_t>(chunk);
  return fp;
}

std::string stored_spec(const Records& recs) {
  std::string s;
  for (float c : recs.at("meta.spec").values) s.push_back(static_cast<char>(static_cast<int>(c)));
  return s;
}

// Checks every model tensor against the file, then copies.
OptimState<float> apply(Model<float>& model, const Records& recs, const std::string& path) {
  const auto set = model.parameters();
  for (const auto& item : set.items()) {
    const auto it = recs.find(item.name);
    if (it == recs.end()) throw CompatibilityError("'" + path + "': missing tensor '" + item.name + "'");
    if (it->second.dims != item.tensor.shape()) {
      throw CompatibilityError("'" + path + "': shape mismatch for '" + item.name + "'");
    }
  }
  OptimState<float> optim;
  const bool has_optim = recs.count("optim.step") > 0;
  if (has_optim) {
    const auto& step = recs.at("optim.step").values;
    if (step.size() != 2) throw FormatError("'" + path + "': malformed optim.step");
    optim.step = (static_cast<std::int64_t>(step[0]) << 24) | static_cast<std::int64_t>(step[1]);
    for (const auto& item : set.items()) {
      if (!item.trainable) continue;
      const auto m = recs.find("optim.m." + item.name), v = recs.find("optim.v." + item.name);
      if (m == recs.end() || v == recs.end()) {
        throw FormatError("'" + path + "': optimizer state missing for '" + item.name + "'");
      }
      if (m->second.values.size() != item.tensor.numel() || v->second.values.size() != item.tensor.numel()) {
        throw FormatError("'" + path + "': optimizer state size mismatch for '" + item.name + "'");
      }
      optim.m.push_back(m->second.values);
      optim.v.push_back(v->second.values);
    }
  }
  for (const auto& item : set.items()) {
    auto t = item.tensor;
    const auto& src = recs.at(item.name).values;
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
  return optim;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const OptimState<float>* optim, const std::string& path) {
  const auto set = model.parameters();
  const auto& cfg = model.config();
  std::vector<std::pair<std::string, std::pair<std::vector<std::int64_t>, std::vector<float>>>> entries;

  const auto fp = cfg.fingerprint();
  std::vector<float> chunks;
  for (int s = 48; s >= 0; s -= 16) chunks.push_back(static_cast<float>((fp >> s) & 0xffff));
  entries.push_back({"meta.fingerprint", {dims_of(4), chunks}});
  const auto spec = cfg.canonical();
  std::vector<float> spec_bytes(spec.begin(), spec.end());
  entries.push_back({"meta.spec", {dims_of(spec_bytes.size()), spec_bytes}});

  for (const auto& item : set.items()) {
    const auto d = item.tensor.data();
    entries.push_back({item.name, {item.tensor.shape(), {d.begin(), d.end()}}});
  }
  if (optim != nullptr && optim->step > 0) {
    // Step split into 24-bit halves so it survives the f32 payload exactly.
    const std::vector<float> step{static_cast<float>(optim->step >> 24), static_cast<float>(optim->step & 0xffffff)};
    entries.push_back({"optim.step", {dims_of(2), step}});
    std::size_t k = 0;
    for (const auto& item : set.items()) {
      if (!item.trainable) continue;
      if (k >= optim->m.size()) throw ContractError("save_checkpoint: optimizer state does not match the model");
      entries.push_back({"optim.m." + item.name, {item.tensor.shape(), optim->m[k]}});
      entries.push_back({"optim.v." + item.name, {item.tensor.shape(), optim->v[k]}});
      ++k;
    }
  }

  Writer w;
  w.bytes() = "MPVT";
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, rec] : entries) w.tensor(name, rec.first, rec.second);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const auto recs = read_records(path);
  ModelConfig cfg;
  try {
    cfg = resolve_model(stored_spec(recs));
  } catch (const Error& e) {
    throw FormatError("'" + path + "': stored spec unreadable: " + e.what());
  }
  if (cfg.fingerprint() != stored_fingerprint(recs)) {
    throw FormatError("'" + path + "': stored fingerprint does not match the stored spec");
  }
  LoadedCheckpoint out;
  auto model = std::make_unique<Model<float>>(cfg, 0);
  out.optim = apply(*model, recs, path);
  out.model = std::move(model);
  return out;
}

OptimState<float> load_checkpoint_into(Model<float>& model, const std::string& path) {
  const auto recs = read_records(path);
  if (stored_fingerprint(recs) != model.config().fingerprint()) {
    throw CompatibilityError("'" + path + "': checkpoint was saved for '" + stored_spec(recs) + "', model is '" +
                             model.config().canonical() + "'");
  }
  return apply(model, recs, path);
}

}  // namespace mpvit
