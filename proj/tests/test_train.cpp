#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "mpvit/checkpoint.hpp"
#include "mpvit/errors.hpp"
#include "mpvit/ops.hpp"
#include "mpvit/train.hpp"

using namespace mpvit;
namespace fs = std::filesystem;

namespace {

const char* kMicro = "[2,3,3,3]P_[1,1,1,1]L_[16,24,32,48]C;r=2;classes=4;gli=concat";

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("mpvit_test_" + name); }

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, unsigned char fill) {
  std::string s;
  put_be32(s, 0x803);
  put_be32(s, n);
  put_be32(s, rows);
  put_be32(s, cols);
  s.append(static_cast<std::size_t>(n) * rows * cols, static_cast<char>(fill));
  return s;
}

std::string idx_labels(const std::vector<unsigned char>& labels) {
  std::string s;
  put_be32(s, 0x801);
  put_be32(s, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) s.push_back(static_cast<char>(l));
  return s;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<float> snapshot(const Model<float>& m) {
  std::vector<float> out;
  const auto set = m.parameters();
  for (const auto& item : set.items()) {
    if (!item.trainable) continue;
    const auto d = item.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

// Reference Adam in plain f64 for a single flat vector.
struct AdamOracle {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& w, const std::vector<double>& g, double lr) {
    if (m.empty()) m.assign(w.size(), 0.0), v.assign(w.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
};

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("synthetic set is deterministic and balanced") {
    const auto a = synth_dataset(3, 103, 4, 32), b = synth_dataset(3, 103, 4, 32), c = synth_dataset(4, 103, 4, 32);
    CHECK(a.images.shape() == Shape{103, 3, 32, 32});
    CHECK(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
    CHECK_FALSE(std::equal(a.images.data().begin(), a.images.data().end(), c.images.data().begin()));
    CHECK(a.labels == b.labels);
    std::vector<int> hist(4, 0);
    for (int l : a.labels) ++hist[static_cast<std::size_t>(l)];
    CHECK(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()) <= 1);
    const auto px = a.images.data();
    CHECK(std::all_of(px.begin(), px.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
    const auto ev = a.subset(Split::kEval), tr = a.subset(Split::kTrain);
    CHECK(ev.size() + tr.size() == a.size());
    CHECK(ev.size() == 20);
  }

  TEST_CASE("synthetic set rejects bad arguments") {
    CHECK_THROWS_AS(synth_dataset(0, 4, 17, 32), ContractError);
    CHECK_THROWS_AS(synth_dataset(0, 4, 4, 48), ContractError);
  }

  TEST_CASE("a conv and pooling probe separates four classes") {
    const auto data = synth_dataset(11, 2048, 4, 32);
    const auto tr = data.subset(Split::kTrain), ev = data.subset(Split::kEval);
    Rng rng(2);
    Conv2d<float> conv(3, 32, 3, {1, 1, 1}, rng, true);
    Linear<float> head(32, 4, rng);
    std::vector<Tensor<float>> params{conv.weight, conv.bias, head.weight, head.bias};
    OptimState<float> state;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    auto logits_of = [&](const Tensor<float>& x) {
      auto f = reduce(hardswish(conv.forward(x)), ReduceKind::kMean, {2, 3});
      return head.forward(f);
    };
    const std::size_t batch = 32;
    const auto total = 20 * (tr.size() / static_cast<std::int64_t>(batch));
    std::vector<std::size_t> idx;
    for (int epoch = 0; epoch < 20; ++epoch) {
      const auto perm = rng.permutation(static_cast<std::size_t>(tr.size()));
      for (std::size_t b = 0; b + batch <= perm.size(); b += batch) {
        idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(b), perm.begin() + static_cast<std::ptrdiff_t>(b + batch));
        std::vector<int> labels;
        for (auto i : idx) labels.push_back(tr.labels[i]);
        for (auto& p : params) p.zero_grad();
        cross_entropy(logits_of(gather_images(tr, idx)), labels).backward();
        adamw_step(params, state, cosine_lr(state.step, total, 0.1, 0), cfg);
      }
    }
    NoGradGuard guard;
    const auto logits = logits_of(ev.images);
    int correct = 0;
    for (std::int64_t i = 0; i < ev.size(); ++i) {
      const auto row = logits.data().subspan(static_cast<std::size_t>(i * 4), 4);
      if (std::max_element(row.begin(), row.end()) - row.begin() == ev.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(ev.size());
    MESSAGE("probe accuracy " << acc);
    CHECK(acc > 0.6);
  }

  TEST_CASE("idx pair loads, pads and scales") {
    const auto ip = temp_path("img.idx"), lp = temp_path("lbl.idx");
    write_file(ip, idx_images(3, 28, 28, 255));
    write_file(lp, idx_labels({0, 2, 1}));
    const auto d = load_idx_dataset(ip.string(), lp.string());
    CHECK(d.images.shape() == Shape{3, 3, 32, 32});
    CHECK(d.classes == 3);
    CHECK(d.labels == std::vector<int>{0, 2, 1});
    const auto v = d.images.data();
    CHECK(v[0] == 0.0f);
    CHECK(v[2 * 32 + 2] == 1.0f);
    CHECK(v[29 * 32 + 29] == 1.0f);
    CHECK(v[30 * 32 + 30] == 0.0f);
    CHECK(v[32 * 32 + 2 * 32 + 2] == 1.0f);
  }

  TEST_CASE("idx errors") {
    const auto ip = temp_path("img.idx"), lp = temp_path("lbl.idx");
    write_file(lp, idx_labels({0, 1}));
    write_file(ip, idx_images(3, 28, 28, 1));
    CHECK_THROWS_AS(load_idx_dataset(ip.string(), lp.string()), LengthError);
    auto truncated = idx_images(2, 28, 28, 1);
    truncated.resize(truncated.size() - 5);
    write_file(ip, truncated);
    CHECK_THROWS_AS(load_idx_dataset(ip.string(), lp.string()), LengthError);
    auto bad = idx_images(2, 28, 28, 1);
    bad[3] = 0x04;
    write_file(ip, bad);
    CHECK_THROWS_AS(load_idx_dataset(ip.string(), lp.string()), FormatError);
    CHECK_THROWS_AS(load_idx_dataset("/nonexistent/x", lp.string()), FormatError);
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("adamw hand examples") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    auto w = Tensor<double>::from_data({1}, {1.0}, true);
    std::vector<Tensor<double>> params{w};
    OptimState<double> st;
    sum_all(w).backward();
    adamw_step(params, st, 0.1, cfg);
    CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(st.step == 1);

    auto z = Tensor<double>::from_data({2}, {1.5, -2.0}, true);
    std::vector<Tensor<double>> zp{z};
    OptimState<double> zs;
    sum_all(scale(z, 0.0)).backward();
    adamw_step(zp, zs, 0.1, cfg);
    CHECK(z.data()[0] == 1.5);
    CHECK(z.data()[1] == -2.0);
    cfg.weight_decay = 0.05;
    adamw_step(zp, zs, 0.1, cfg);
    CHECK(z.data()[0] == doctest::Approx(1.5 * (1 - 0.1 * 0.05)).epsilon(1e-15));
    CHECK(z.data()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.05)).epsilon(1e-15));
  }

  TEST_CASE("zero decay matches a plain adam oracle") {
    Rng rng(9);
    std::vector<double> w(7), g(7);
    for (auto& x : w) x = rng.normal();
    auto t = Tensor<double>::from_data({7}, w, true);
    std::vector<Tensor<double>> params{t};
    OptimState<double> st;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamOracle oracle;
    for (int step = 0; step < 25; ++step) {
      for (auto& x : g) x = rng.normal();
      t.zero_grad();
      sum_all(mul(t, Tensor<double>::from_data({7}, g))).backward();
      adamw_step(params, st, 0.01, cfg);
      oracle.step(w, g, 0.01);
    }
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(t.data()[i] - w[i]) <= 1e-12);
  }

  TEST_CASE("parameters without gradients are skipped") {
    auto a = Tensor<double>::from_data({1}, {2.0}, true), b = Tensor<double>::from_data({1}, {3.0}, true);
    std::vector<Tensor<double>> params{a, b};
    OptimState<double> st;
    sum_all(scale(a, 2.0)).backward();
    adamw_step(params, st, 0.1, AdamWConfig{});
    CHECK(a.data()[0] != 2.0);
    CHECK(b.data()[0] == 3.0);
  }

  TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 1.0, 10) == 0.0);
    CHECK(cosine_lr(5, 100, 1.0, 10) == doctest::Approx(0.5));
    CHECK(cosine_lr(10, 100, 1.0, 10) == doctest::Approx(1.0));
    CHECK(cosine_lr(55, 100, 1.0, 10) == doctest::Approx(0.5));
    CHECK(std::abs(cosine_lr(100, 100, 1.0, 10)) < 1e-15);
    CHECK(cosine_lr(0, 100, 2.0, 0) == 2.0);
    CHECK_THROWS_AS(cosine_lr(101, 100, 1.0, 10), ContractError);
    CHECK_THROWS_AS(cosine_lr(5, 100, 1.0, 100), ContractError);
  }
}

TEST_SUITE("training") {
  const auto data = synth_dataset(5, 160, 4, 32);
  const auto tr = data.subset(Split::kTrain), ev = data.subset(Split::kEval);

  TEST_CASE("zero learning rate leaves weights alone") {
    Model<float> m(parse_spec(kMicro), 1);
    const auto before = snapshot(m);
    TrainOptions o;
    o.epochs = 1;
    o.batch = 16;
    o.base_lr = 0.0;
    train(m, tr, ev, o);
    CHECK(snapshot(m) == before);
  }

  TEST_CASE("loss goes down and runs repeat bitwise") {
    TrainOptions o;
    o.epochs = 3;
    o.batch = 16;
    o.seed = 4;
    Model<float> a(parse_spec(kMicro), 1), b(parse_spec(kMicro), 1);
    const auto ra = train(a, tr, ev, o), rb = train(b, tr, ev, o);
    REQUIRE(ra.history.size() == 3);
    CHECK(ra.history.back().train_loss < ra.history.front().train_loss);
    CHECK(metrics_csv(ra.history) == metrics_csv(rb.history));
    CHECK(snapshot(a) == snapshot(b));
    CHECK(ra.steps == 3 * (tr.size() / 16));
  }

  TEST_CASE("untrained model is near chance") {
    const auto big = synth_dataset(6, 200, 4, 32);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      Model<float> m(parse_spec(kMicro), seed);
      const double acc = evaluate(m, big);
      CHECK(acc >= 0.10);
      CHECK(acc <= 0.40);
    }
  }

  TEST_CASE("eight samples are memorised") {
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
    const auto few = tr.select(idx);
    Model<float> m(parse_spec(kMicro), 2);
    TrainOptions o;
    o.epochs = 300;
    o.batch = 8;
    o.base_lr = 2e-3;
    o.warmup_epochs = 10;
    o.evaluate_each_epoch = false;
    double best = 1e9;
    int reached = -1;
    o.on_epoch = [&](const EpochMetrics& e) {
      best = std::min(best, e.train_loss);
      if (reached < 0 && e.train_loss < 0.01) reached = e.epoch;
    };
    const auto r = train(m, few, {}, o);
    CHECK(r.steps == 300);
    MESSAGE("first step under 0.01: " << reached);
    CHECK(best < 0.01);
    CHECK(evaluate(m, few) == 1.0);
  }

  TEST_CASE("contract errors") {
    Model<float> m(parse_spec(kMicro), 1);
    CHECK_THROWS_AS(evaluate(m, Dataset{}), ContractError);
    TrainOptions o;
    o.batch = static_cast<int>(tr.size()) + 1;
    CHECK_THROWS_AS(train(m, tr, ev, o), ContractError);
  }

  TEST_CASE("non-finite loss aborts with a name") {
    Model<float> m(parse_spec(kMicro), 1);
    auto set = m.parameters();
    auto w = set.find("head.weight")->tensor;
    w.mutable_data()[0] = std::nanf("");
    TrainOptions o;
    o.epochs = 1;
    o.batch = 16;
    try {
      train(m, tr, ev, o);
      FAIL("expected an abort");
    } catch (const NumericAbort& e) {
      CHECK(std::string(e.what()).find("head.weight") != std::string::npos);
    }
  }

  TEST_CASE("metrics csv") {
    const auto csv = metrics_csv({{1, 0.5, 0.25, 0.001}});
    CHECK(csv == "epoch,train_loss,eval_acc,lr\n1,0.5,0.25,0.001\n");
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bitwise") {
    Model<float> m(parse_spec(kMicro), 3);
    const auto data = synth_dataset(8, 40, 4, 32);
    TrainOptions o;
    o.epochs = 1;
    o.batch = 8;
    const auto r = train(m, data, data, o);
    const auto path = temp_path("ckpt.bin");
    save_checkpoint(m, &r.optim, path.string());
    auto loaded = load_checkpoint(path.string());
    CHECK(loaded.model->config() == m.config());
    CHECK(snapshot(*loaded.model) == snapshot(m));
    CHECK(loaded.optim.step == r.optim.step);
    CHECK(loaded.optim.m == r.optim.m);
    CHECK(loaded.optim.v == r.optim.v);
    NoGradGuard guard;
    const auto x = gather_images(data, std::vector<std::size_t>{0, 1, 2});
    const auto a = m.forward(x, false), b = loaded.model->forward(x, false);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    const auto again = temp_path("ckpt2.bin");
    save_checkpoint(*loaded.model, &loaded.optim, again.string());
    CHECK(read_bytes(path) == read_bytes(again));
  }

  TEST_CASE("header layout") {
    Model<float> m(parse_spec(kMicro), 3);
    const auto path = temp_path("ckpt.bin");
    save_checkpoint(m, nullptr, path.string());
    const auto bytes = read_bytes(path);
    REQUIRE(bytes.size() > 12);
    CHECK(bytes.substr(0, 4) == "MPVT");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    const auto n = static_cast<std::size_t>(static_cast<unsigned char>(bytes[8])) +
                   256 * static_cast<std::size_t>(static_cast<unsigned char>(bytes[9]));
    CHECK(n == m.parameters().items().size() + 2);
  }

  TEST_CASE("corruption and mismatch") {
    Model<float> m(parse_spec(kMicro), 3);
    const auto path = temp_path("ckpt.bin");
    save_checkpoint(m, nullptr, path.string());
    const auto good = read_bytes(path);
    for (std::size_t pos : {0u, 4u}) {
      auto bad = good;
      bad[pos] = static_cast<char>(bad[pos] ^ 0x5a);
      write_file(path, bad);
      CHECK_THROWS_AS(load_checkpoint(path.string()), FormatError);
    }
    write_file(path, good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(load_checkpoint(path.string()), FormatError);

    write_file(path, good);
    auto other = parse_spec(kMicro);
    other.num_classes = 5;
    Model<float> o(other, 3);
    const auto before = snapshot(o);
    CHECK_THROWS_AS(load_checkpoint_into(o, path.string()), CompatibilityError);
    CHECK(snapshot(o) == before);
    Model<float> same(parse_spec(kMicro), 9);
    load_checkpoint_into(same, path.string());
    CHECK(snapshot(same) == snapshot(m));
  }

  TEST_CASE("fingerprint is a pure function of the spec") {
    CHECK(parse_spec(kMicro).fingerprint() == parse_spec(kMicro).fingerprint());
    CHECK(parse_spec(kMicro).fingerprint() != parse_spec("[2,3,3,3]P_[1,1,1,1]L_[16,24,32,48]C").fingerprint());
  }
}
