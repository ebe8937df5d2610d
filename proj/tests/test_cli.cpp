#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "mpvit/accounting.hpp"
#include "mpvit/analysis.hpp"
#include "mpvit/checkpoint.hpp"
#include "mpvit/cli.hpp"
#include "mpvit/data.hpp"

using namespace mpvit;
namespace fs = std::filesystem;

namespace {

const char* kMicro = "[2,3,3,3]P_[1,1,1,1]L_[16,24,32,48]C;r=2;classes=4;gli=concat";

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mpvit_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

Tensor<float> random_image(Rng& rng, std::int64_t hw) {
  std::vector<float> v(static_cast<std::size_t>(3 * hw * hw));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from_data({1, 3, hw, hw}, std::move(v));
}

// Parses "P5\nW H\n255\n" and returns {W, H, payload size}.
std::array<std::int64_t, 3> pgm_header(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::int64_t w = 0, h = 0, mx = 0;
  in >> magic >> w >> h >> mx;
  in.get();
  REQUIRE(magic == "P5");
  REQUIRE(mx == 255);
  return {w, h, static_cast<std::int64_t>(bytes.size()) - static_cast<std::int64_t>(in.tellg())};
}

}  // namespace

TEST_SUITE("attention maps") {
  TEST_CASE("constant keys give the all-zero map") {
    const std::int64_t n = 12, d = 4;
    auto k = Tensor<float>::full({1, 2, n, d}, 1.0f / static_cast<float>(n));
    const auto map = attention_from_softmax(k, 3, 4, kMeanHeads);
    CHECK(map.height == 3);
    CHECK(map.width == 4);
    for (double v : map.values) CHECK(v == 0.0);
  }

  TEST_CASE("single token gives [[0]]") {
    const auto map = attention_from_softmax(Tensor<float>::full({1, 1, 1, 3}, 1.0f), 1, 1, 0);
    REQUIRE(map.values.size() == 1);
    CHECK(map.values[0] == 0.0);
  }

  TEST_CASE("channel and head means then min-max") {
    // Two heads, three tokens, two channels.
    const std::vector<float> k{0.2f, 0.4f, 0.3f, 0.3f, 0.5f, 0.3f,   // head 0: token means 0.3, 0.3, 0.4
                               0.1f, 0.1f, 0.6f, 0.6f, 0.3f, 0.3f};  // head 1: 0.1, 0.6, 0.3
    const auto t = Tensor<float>::from_data({1, 2, 3, 2}, k);
    const auto h0 = attention_from_softmax(t, 1, 3, 0);
    CHECK(h0.values[0] == doctest::Approx(0.0));
    CHECK(h0.values[1] == doctest::Approx(0.0));
    CHECK(h0.values[2] == doctest::Approx(1.0));
    const auto mean = attention_from_softmax(t, 1, 3, kMeanHeads);  // 0.2, 0.45, 0.35
    CHECK(mean.values[0] == doctest::Approx(0.0));
    CHECK(mean.values[1] == doctest::Approx(1.0));
    CHECK(mean.values[2] == doctest::Approx(0.6));
    CHECK_THROWS_AS(attention_from_softmax(t, 1, 3, 2), AddressError);
    CHECK_THROWS_AS(attention_from_softmax(t, 2, 2, 0), DimensionError);
  }

  TEST_CASE("maps from models are in range with stage dims") {
    Rng rng(1);
    Model<float> model(parse_spec(kMicro), 3);
    const auto image = random_image(rng, 64);
    const std::int64_t side[] = {16, 8, 4, 2};
    for (int s = 2; s <= 5; ++s) {
      for (int p = 0; p < model.config().paths[static_cast<std::size_t>(s - 2)]; ++p) {
        for (int h : {kMeanHeads, 0, 7}) {
          const auto map = attention_map(model, image, {s, p, 0}, h);
          CHECK(map.height == side[s - 2]);
          CHECK(map.width == side[s - 2]);
          CHECK(map.stage == s);
          CHECK(map.path == p);
          for (double v : map.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
          }
        }
      }
    }
  }

  TEST_CASE("last stage at 224 is 7x7") {
    Rng rng(2);
    Model<float> model(parse_spec(kMicro), 1);
    const auto map = attention_map(model, random_image(rng, 224), {5, 1, 0});
    CHECK(map.height == 7);
    CHECK(map.width == 7);
  }

  TEST_CASE("reading a map leaves the model untouched") {
    Rng rng(3);
    Model<float> model(parse_spec(kMicro), 5);
    const auto image = random_image(rng, 64);
    NoGradGuard guard;
    const auto before = model.forward(image, false);
    attention_map(model, image, {3, 2, 0});
    const auto after = model.forward(image, false);
    CHECK(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
  }

  TEST_CASE("bad addresses list valid ranges") {
    Rng rng(4);
    Model<float> model(parse_spec(kMicro), 1);
    const auto image = random_image(rng, 64);
    CHECK_THROWS_AS(attention_map(model, image, {6, 0, 0}), AddressError);
    CHECK_THROWS_AS(attention_map(model, image, {2, 2, 0}), AddressError);
    CHECK_THROWS_AS(attention_map(model, image, {3, 0, 1}), AddressError);
    CHECK_THROWS_AS(attention_map(model, image, {3, 0, 0}, 8), AddressError);
    try {
      attention_map(model, image, {4, 3, 0});
      FAIL("expected an address error");
    } catch (const AddressError& e) {
      CHECK(std::string(e.what()).find("[0, 2]") != std::string::npos);
    }
  }
}

TEST_SUITE("overlay and export") {
  TEST_CASE("bilinear upsampling") {
    const auto up = resize_bilinear({0, 1, 0, 1}, 2, 2, 4, 4);
    const double expect[] = {0.0, 0.25, 0.75, 1.0};
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) CHECK(up[static_cast<std::size_t>(y * 4 + x)] == doctest::Approx(expect[x]));
      for (int x = 1; x < 4; ++x) CHECK(up[static_cast<std::size_t>(y * 4 + x)] >= up[static_cast<std::size_t>(y * 4 + x - 1)]);
    }
    const auto same = resize_bilinear({0.1, 0.7, 0.3, 0.9, 0.2, 0.4}, 2, 3, 2, 3);
    CHECK(same == std::vector<double>{0.1, 0.7, 0.3, 0.9, 0.2, 0.4});
  }

  TEST_CASE("identity and black overlays") {
    Rng rng(5);
    const auto image = random_image(rng, 32);
    AttentionMap ones;
    ones.height = ones.width = 2;
    ones.values.assign(4, 1.0);
    const auto a = overlay(ones, image);
    CHECK(std::equal(a.data().begin(), a.data().end(), image.data().begin()));
    auto zeros = ones;
    zeros.values.assign(4, 0.0);
    const auto black = overlay(zeros, image);
    for (float v : black.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("pgm bytes") {
    const auto dir = scratch_dir("pgm");
    export_image({1.0}, 1, 1, (dir / "a.pgm").string(), ImageFormat::kPgm);
    CHECK(read_bytes(dir / "a.pgm") == std::string("P5\n1 1\n255\n\xff"));
    export_image({0.5}, 1, 1, (dir / "b.pgm").string(), ImageFormat::kPgm);
    CHECK(static_cast<unsigned char>(read_bytes(dir / "b.pgm").back()) == 128);
    export_image({0.0, 0.25, 0.75, 1.0, 0.1, 0.2}, 2, 3, (dir / "c.pgm").string(), ImageFormat::kPgm);
    const auto bytes = read_bytes(dir / "c.pgm");
    const auto hdr = pgm_header(bytes);
    CHECK(hdr == std::array<std::int64_t, 3>{3, 2, 6});
    const auto back = read_pnm((dir / "c.pgm").string());
    CHECK(back.shape() == Shape{1, 3, 2, 3});
    CHECK(back.data()[1] == doctest::Approx(64.0 / 255.0));
  }

  TEST_CASE("csv round trip") {
    const auto dir = scratch_dir("csv");
    Rng rng(6);
    std::vector<double> v(20);
    for (auto& x : v) x = rng.uniform();
    export_image(v, 4, 5, (dir / "m.csv").string(), ImageFormat::kCsv);
    std::istringstream in(read_bytes(dir / "m.csv"));
    std::string line;
    std::size_t i = 0, rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::istringstream cells(line);
      std::string cell;
      while (std::getline(cells, cell, ',')) {
        CHECK(std::abs(std::stod(cell) - v[i]) <= 5e-7);
        ++i;
      }
    }
    CHECK(rows == 4);
    CHECK(i == 20);
  }

  TEST_CASE("out-of-range values are rejected, not clamped") {
    const auto dir = scratch_dir("range");
    CHECK_THROWS_AS(export_image({1.0001}, 1, 1, (dir / "x.pgm").string(), ImageFormat::kPgm), ContractError);
    CHECK_THROWS_AS(export_image({-1e-9}, 1, 1, (dir / "x.csv").string(), ImageFormat::kCsv), ContractError);
    CHECK_THROWS_AS(export_image({std::nan("")}, 1, 1, (dir / "x.pgm").string(), ImageFormat::kPgm), ContractError);
    CHECK_FALSE(fs::exists(dir / "x.pgm"));
  }
}

TEST_SUITE("run config") {
  TEST_CASE("preset resolves") {
    const auto cfg = parse_config_text("model = tiny\n");
    CHECK(cfg.model == preset("tiny"));
    CHECK(cfg.epochs == 30);
  }

  TEST_CASE("comments, spacing and values") {
    const auto cfg = parse_config_text(
        "# header\n\n  model=tiny; classes=4   # inline\nseed = 7\nlr = 1e-3\nimage_size = 32\noutput_dir = runs/a\n");
    CHECK(cfg.model.num_classes == 4);
    CHECK(cfg.seed == 7);
    CHECK(cfg.lr == 1e-3);
    CHECK(cfg.image_size == 32);
    CHECK(cfg.output_dir == "runs/a");
  }

  TEST_CASE("errors carry line numbers") {
    auto line_of = [](const std::string& text) -> std::size_t {
      try {
        parse_config_text(text);
      } catch (const ConfigFileError& e) {
        return e.line();
      }
      return 0;
    };
    CHECK(line_of("model = tiny\nseed = 1\n\nseed = 2\n") == 4);
    CHECK(line_of("model = tiny\ncolour = red\n") == 2);
    CHECK(line_of("model = tiny\nepochs = ten\n") == 2);
    CHECK(line_of("model = tiny\nbatch = 0\n") == 2);
    CHECK(line_of("model = [1,1]P\n") == 1);
    CHECK(line_of("model tiny\n") == 1);
    try {
      parse_config_text("model = tiny\nseed = 1\nseed = 2\n");
      FAIL("expected an error");
    } catch (const ConfigFileError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
      CHECK(std::string(e.what()).find("seed") != std::string::npos);
    }
  }

  TEST_CASE("missing model lists required keys") {
    try {
      parse_config_text("seed = 1\n");
      FAIL("expected an error");
    } catch (const ConfigFileError& e) {
      CHECK(std::string(e.what()).find("required: model") != std::string::npos);
    }
  }
}

TEST_SUITE("command line") {
  TEST_CASE("describe small") {
    const auto r = cli({"describe", "--model", "small"});
    CHECK(r.code == 0);
    CHECK(r.out.find("stage5") != std::string::npos);
    const auto at = r.out.find("params       ");
    REQUIRE(at != std::string::npos);
    const double params = std::stod(r.out.substr(at + 13));
    CHECK(std::abs(params / 22.8e6 - 1) <= 0.05);
    CHECK((r.out.find("22.8M") != std::string::npos || r.out.find("22.9M") != std::string::npos));
  }

  TEST_CASE("count") {
    const auto r = cli({"count", "-m", "tiny", "--size", "224"});
    CHECK(r.code == 0);
    CHECK(r.out.find("params 5812400") != std::string::npos);
    CHECK(cli({"count", "-m", "tiny", "--size", "100"}).code == 1);
  }

  TEST_CASE("sweep reproduces the single-path row and is idempotent") {
    const auto r = cli({"sweep", "--spec", "[1,1,1,1]P_[2,2,2,2]L_[64,128,320,512]C"});
    CHECK(r.code == 0);
    const auto rows = read_csv(r.out);
    REQUIRE(rows.size() == 2);
    CHECK(std::abs(std::stod(rows[1][1]) / 11.0e6 - 1) <= 0.05);

    const auto dir = scratch_dir("sweep");
    const auto first = (dir / "a.csv").string(), second = (dir / "b.csv").string();
    CHECK(cli({"sweep", "-s", "tiny", "-s", "[2,4,4,4]P_[1,2,4,1]L_[64,96,176,224]C", "-o", first}).code == 0);
    CHECK(cli({"sweep", "--file", first, "-o", second}).code == 0);
    CHECK(read_bytes(first) == read_bytes(second));
  }

  TEST_CASE("usage errors exit 1 with text on stderr") {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {}, {"frobnicate"}, {"count"}, {"count", "-m", "tiny", "--bogus"}, {"sweep"}, {"count", "-m", "[1,2"}}) {
      const auto r = cli(args);
      CHECK(r.code == 1);
      CHECK_FALSE(r.err.empty());
    }
  }

  TEST_CASE("data errors exit 2") {
    CHECK(cli({"eval", "--checkpoint", "/nonexistent/model.ckpt"}).code == 2);
    const auto dir = scratch_dir("data");
    std::ofstream(dir / "bad.cfg") << "model = tiny\nseed = 1\nseed = 2\n";
    const auto r = cli({"train", "-c", (dir / "bad.cfg").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("line 3") != std::string::npos);
  }

  TEST_CASE("diverging training exits 3") {
    const auto dir = scratch_dir("nan");
    std::ofstream(dir / "run.cfg") << "model = " << kMicro << "\nsynth_n = 40\nimage_size = 32\nepochs = 3\n"
                                   << "batch = 8\nlr = 1e30\nwarmup_epochs = 0\noutput_dir = " << (dir / "out").string()
                                   << "\n";
    const auto r = cli({"train", "-c", (dir / "run.cfg").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("non-finite") != std::string::npos);
  }

  TEST_CASE("train, eval and attend from a checkpoint") {
    const auto dir = scratch_dir("flow");
    std::ofstream(dir / "run.cfg") << "model = " << kMicro << "\nsynth_n = 80\nimage_size = 32\nepochs = 2\n"
                                   << "batch = 16\noutput_dir = " << (dir / "out").string() << "\n";
    const auto t = cli({"train", "-c", (dir / "run.cfg").string()});
    REQUIRE(t.code == 0);
    CHECK(fs::exists(dir / "out" / "model.ckpt"));
    CHECK(read_bytes(dir / "out" / "metrics.csv").rfind("epoch,train_loss,eval_acc,lr\n", 0) == 0);

    const auto ckpt = (dir / "out" / "model.ckpt").string();
    const auto e = cli({"eval", "--checkpoint", ckpt, "-c", (dir / "run.cfg").string()});
    CHECK(e.code == 0);
    CHECK(e.out.find("accuracy") != std::string::npos);

    const auto a = cli({"attend", "--checkpoint", ckpt, "--stage", "4", "--path", "2", "--size", "64", "-o",
                        (dir / "maps").string()});
    CHECK(a.code == 0);
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir / "maps")) files.push_back(f.path());
    REQUIRE(files.size() == 1);
    CHECK(files[0].filename() == "attn_s4_p2_l0_mean.pgm");
    CHECK(pgm_header(read_bytes(files[0])) == std::array<std::int64_t, 3>{4, 4, 16});
  }

  TEST_CASE("attend writes one map per path by default") {
    const auto dir = scratch_dir("paths");
    const auto r = cli({"attend", "-m", kMicro, "--stage", "3", "--head", "1", "--overlay", "-o", dir.string()});
    CHECK(r.code == 0);
    for (int p = 0; p < 3; ++p) {
      const auto f = dir / ("attn_s3_p" + std::to_string(p) + "_l0_h1.pgm");
      REQUIRE(fs::exists(f));
      CHECK(pgm_header(read_bytes(f)) == std::array<std::int64_t, 3>{8, 8, 64});
      CHECK(fs::exists(dir / ("attn_s3_p" + std::to_string(p) + "_l0_h1_overlay.ppm")));
    }
    CHECK(cli({"attend", "-m", kMicro, "--stage", "3", "--path", "3", "-o", dir.string()}).code == 1);
    CHECK(cli({"attend", "-m", kMicro, "--stage", "3", "--head", "many", "-o", dir.string()}).code == 1);
  }

  TEST_CASE("attend reads a pgm image") {
    const auto dir = scratch_dir("image");
    std::vector<double> px(64 * 64);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i % 64) / 63.0;
    export_image(px, 64, 64, (dir / "in.pgm").string(), ImageFormat::kPgm);
    const auto r = cli({"attend", "-m", kMicro, "--image", (dir / "in.pgm").string(), "--stage", "5", "--path", "0",
                        "-o", (dir / "out").string()});
    CHECK(r.code == 0);
    export_image(std::vector<double>(50 * 50, 0.5), 50, 50, (dir / "odd.pgm").string(), ImageFormat::kPgm);
    CHECK(cli({"attend", "-m", kMicro, "--image", (dir / "odd.pgm").string(), "--stage", "5", "-o",
               (dir / "out").string()})
              .code == 2);
  }
}
