#include <cmath>
#include <vector>

#include "doctest.h"
#include "mpvit/accounting.hpp"
#include "mpvit/errors.hpp"
#include "mpvit/model.hpp"

using namespace mpvit;

namespace {

// Torchvision-style ResNet-50 (bottleneck, stride on the 3x3) at 224.
std::int64_t resnet50_macs() {
  using cost::conv_macs;
  std::int64_t total = conv_macs(3, 64, 7, 1, 112, 112);
  std::int64_t in = 64, hw = 56;
  const int blocks[4] = {3, 4, 6, 3};
  const std::int64_t widths[4] = {64, 128, 256, 512};
  for (int s = 0; s < 4; ++s) {
    const std::int64_t w = widths[s], out = 4 * w;
    for (int b = 0; b < blocks[s]; ++b) {
      const bool down = b == 0 && s > 0;
      const std::int64_t out_hw = down ? hw / 2 : hw;
      total += conv_macs(in, w, 1, 1, hw, hw);
      total += conv_macs(w, w, 3, 1, out_hw, out_hw);
      total += conv_macs(w, out, 1, 1, out_hw, out_hw);
      if (b == 0) total += conv_macs(in, out, 1, 1, out_hw, out_hw);
      in = out;
      hw = out_hw;
    }
  }
  return total + cost::linear_macs(2048, 1000, 1);
}

double rel(double a, double b) { return std::abs(a / b - 1.0); }

ModelConfig random_config(Rng& rng) {
  ModelConfig cfg;
  cfg.heads = 2;
  cfg.mlp_ratio = 1 + static_cast<int>(rng.below(4));
  cfg.num_classes = 1 + static_cast<int>(rng.below(10));
  cfg.embed = rng.below(2) ? EmbedMode::kParallel : EmbedMode::kSeries;
  cfg.gli = static_cast<GliMode>(rng.below(3));
  for (std::size_t i = 0; i < 4; ++i) {
    cfg.paths[i] = 1 + static_cast<int>(rng.below(4));
    cfg.layers[i] = 1 + static_cast<int>(rng.below(2));
    cfg.channels[i] = 2 * (1 + static_cast<int>(rng.below(6)));
  }
  return cfg;
}

}  // namespace

TEST_SUITE("primitives") {
  TEST_CASE("closed forms") {
    CHECK(cost::linear_params(64, 10, true) == 64 * 10 + 10);
    CHECK(cost::linear_params(64, 10, false) == 640);
    CHECK(cost::conv_params(64, 64, 3, 64, false) == 576);
    CHECK(cost::conv_macs(64, 128, 3, 1, 56, 56) == 128LL * 64 * 9 * 56 * 56);
    CHECK(cost::encoder_block_params(64, 4) == 49984 + 4 * 64 + 4 * 64 + 64 + 64);
  }

  TEST_CASE("resnet-50 calibration lands near 4.1G") {
    const auto macs = resnet50_macs();
    MESSAGE("resnet-50 MACs: " << macs);
    CHECK(rel(static_cast<double>(macs), 4.1e9) < 0.02);
  }

  TEST_CASE("complexity model") {
    const auto unit = complexity_model(1, 1, 1, 1);
    CHECK(unit.time == 1);
    CHECK(unit.memory == 2);
    const auto a = complexity_model(3, 8, 196, 64), c2 = complexity_model(3, 8, 196, 128),
               l2 = complexity_model(6, 8, 196, 64);
    CHECK(c2.time == 4 * a.time);
    CHECK(l2.time == 2 * a.time);
    CHECK(l2.memory == 2 * a.memory);
  }

  TEST_CASE("attention cost is affine in N and quadratic in C") {
    for (std::int64_t c : {16, 64, 216}) {
      for (std::int64_t n : {7, 49, 196, 3136}) {
        const auto f1 = cost::attention_macs(n, c, 8), f2 = cost::attention_macs(2 * n, c, 8),
                   f3 = cost::attention_macs(3 * n, c, 8);
        CHECK(f2 - f1 == f3 - f2);
        const double ratio = static_cast<double>(cost::attention_macs(n, 2 * c, 8)) / static_cast<double>(f1);
        CHECK(ratio >= 3.9);
        CHECK(ratio <= 4.1);
      }
    }
  }
}

TEST_SUITE("report") {
  TEST_CASE("per-stage entries sum to totals") {
    for (const auto& name : preset_names()) {
      const auto rep = cost_report(preset(name));
      REQUIRE(rep.per_stage.size() == 6);
      CHECK(rep.per_stage.front().name == "stem");
      CHECK(rep.per_stage[1].name == "stage2");
      CHECK(rep.per_stage.back().name == "head");
      std::int64_t p = 0, f = 0;
      for (const auto& s : rep.per_stage) {
        CHECK(s.params >= 0);
        CHECK(s.flops >= 0);
        p += s.params;
        f += s.flops;
      }
      CHECK(p == rep.params);
      CHECK(f == rep.flops_macs);
    }
  }

  TEST_CASE("presets against the configuration table") {
    const char* names[] = {"tiny", "xsmall", "small", "base"};
    const double params[] = {5.7e6, 10.5e6, 22.8e6, 74.8e6};
    const double flops[] = {1.5e9, 2.9e9, 4.7e9, 16.4e9};
    for (int i = 0; i < 4; ++i) {
      const auto rep = cost_report(preset(names[i]));
      MESSAGE(std::string(names[i]) << ": " << format_millions(rep.params) << " " << format_billions(rep.flops_macs));
      CHECK(rel(static_cast<double>(rep.params), params[i]) <= 0.05);
      CHECK(rel(static_cast<double>(rep.flops_macs), flops[i]) <= 0.15);
    }
  }

  TEST_CASE("path-dimension rows") {
    const char* specs[] = {"[1,1,1,1]P_[2,2,2,2]L_[64,128,320,512]C", "[2,2,2,2]P_[1,2,4,1]L_[64,128,256,320]C",
                           "[2,3,3,3]P_[1,1,2,1]L_[64,128,256,320]C", "[2,3,3,3]P_[1,2,4,1]L_[64,128,192,256]C",
                           "[2,4,4,4]P_[1,2,4,1]L_[64,96,176,224]C"};
    const double params[] = {11.0e6, 10.9e6, 10.8e6, 10.1e6, 10.5e6};
    const double flops[] = {1.9e9, 2.6e9, 2.3e9, 2.7e9, 2.6e9};
    for (int i = 0; i < 5; ++i) {
      const auto rep = cost_report(parse_spec(specs[i]));
      MESSAGE(std::string(specs[i]) << ": " << format_millions(rep.params) << " " << format_billions(rep.flops_macs));
      CHECK(rel(static_cast<double>(rep.params), params[i]) <= 0.05);
      CHECK(rel(static_cast<double>(rep.flops_macs), flops[i]) <= 0.15);
    }
  }

  TEST_CASE("doubling the input side quadruples conv work") {
    const auto a = cost_report(preset("small"), 224), b = cost_report(preset("small"), 448);
    for (std::size_t s = 0; s + 1 < a.per_stage.size(); ++s) CHECK(b.per_stage[s].flops == 4 * a.per_stage[s].flops);
    CHECK(b.per_stage.back().flops == a.per_stage.back().flops);
  }

  TEST_CASE("adding a path never decreases cost") {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
      auto cfg = random_config(rng);
      const auto base = cost_report(cfg, 64);
      for (std::size_t i = 0; i < 4; ++i) {
        auto more = cfg;
        ++more.paths[i];
        const auto rep = cost_report(more, 64);
        CHECK(rep.params >= base.params);
        CHECK(rep.flops_macs >= base.flops_macs);
      }
    }
  }

  TEST_CASE("bad geometry rejected") {
    CHECK_THROWS_AS(cost_report(preset("tiny"), 100), GeometryError);
  }
}

TEST_SUITE("dual route") {
  TEST_CASE("analytic params equal the instantiated tensors") {
    for (const auto& name : preset_names()) {
      Model<float> model(preset(name), 1);
      CHECK(model.parameters().trainable_count() == count_params(preset(name)));
    }
    Rng rng(4);
    for (int t = 0; t < 60; ++t) {
      const auto cfg = random_config(rng);
      Model<float> model(cfg, static_cast<std::uint64_t>(t));
      CHECK(model.parameters().trainable_count() == count_params(cfg));
    }
  }

  TEST_CASE("analytic MACs equal the measured forward") {
    Rng rng(5);
    for (int t = 0; t < 40; ++t) {
      const auto cfg = random_config(rng);
      const std::int64_t hw = 32 * (1 + static_cast<std::int64_t>(rng.below(3)));
      Model<float> model(cfg, static_cast<std::uint64_t>(t));
      NoGradGuard guard;
      reset_mac_counter();
      model.forward(Tensor<float>::zeros({1, 3, hw, hw}), false);
      CHECK(mac_counter() == static_cast<std::uint64_t>(count_flops(cfg, hw)));
    }
  }

  TEST_CASE("tiny at 224 measured") {
    Model<float> model(preset("tiny"), 1);
    NoGradGuard guard;
    reset_mac_counter();
    model.forward(Tensor<float>::zeros({1, 3, 224, 224}), false);
    CHECK(mac_counter() == static_cast<std::uint64_t>(count_flops(preset("tiny"), 224)));
  }
}

TEST_SUITE("sweep") {
  TEST_CASE("empty list gives header only") {
    CHECK(sweep_configs({}).empty());
    CHECK(sweep_csv({}) == "spec,params,flops_macs,analytic_time,analytic_memory\n");
  }

  TEST_CASE("rows follow input order and re-parse") {
    const std::vector<std::string> specs{"[2,2,2,2]P_[1,2,4,1]L_[64,128,256,320]C", "tiny",
                                         "[2,4,4,4]P_[1,2,4,1]L_[64,96,176,224]C;gli=concat"};
    const auto rows = sweep_configs(specs);
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(rows[i].spec == specs[i]);
    const auto csv = sweep_csv(rows);
    CHECK(csv.find("\"[2,2,2,2]P_[1,2,4,1]L_[64,128,256,320]C\",") != std::string::npos);
    const auto parsed = read_csv(csv);
    REQUIRE(parsed.size() == 4);
    CHECK(parsed[1].size() == 5);
    CHECK(parsed[2][0] == "tiny");
    CHECK(parsed[1][1] == std::to_string(rows[0].report.params));
    const auto again = sweep_csv(sweep_configs(sweep_specs_from_csv(csv)));
    CHECK(again == csv);
  }

  TEST_CASE("csv quoting") {
    const auto rows = read_csv("a,\"b,\"\"c\"\"\",d\r\n\"x\ny\",,\n");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == std::vector<std::string>{"a", "b,\"c\"", "d"});
    CHECK(rows[1] == std::vector<std::string>{"x\ny", "", ""});
    CHECK_THROWS_AS(read_csv("\"open"), ParseError);
    CHECK_THROWS_AS(sweep_specs_from_csv("name\nx\n"), ParseError);
  }

  TEST_CASE("malformed spec reports position") {
    try {
      sweep_configs({"[1,1,1,1]P_[1,1]L_[8,8,8,8]C"});
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.position() == 15);
    }
  }
}
