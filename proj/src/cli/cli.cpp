#include "mpvit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>

#include "mpvit/accounting.hpp"
#include "mpvit/analysis.hpp"
#include "mpvit/checkpoint.hpp"
#include "mpvit/data.hpp"
#include "mpvit/train.hpp"

namespace mpvit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config file

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "model",        "seed",         "dataset",       "synth_n",     "synth_classes", "image_size",
      "data_seed",    "train_images", "train_labels",  "eval_images", "eval_labels",   "epochs",
      "batch",        "lr",           "weight_decay",  "warmup_epochs", "target_accuracy", "output_dir"};
  return keys;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v, std::size_t line) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigFileError("'" + key + "' expects a number, got '" + v + "'", line);
  return out;
}

double parse_real(const std::string& key, const std::string& v, std::size_t line) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw ConfigFileError("'" + key + "' expects a real number, got '" + v + "'", line);
}

template <typename N>
N at_least(const std::string& key, N value, N lo, std::size_t line) {
  if (value < lo) throw ConfigFileError("'" + key + "' must be >= " + std::to_string(lo), line);
  return value;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  const auto& keys = config_keys();
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const auto body = trim(std::string_view(raw).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigFileError("expected 'key = value'", line);
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigFileError("unknown key '" + key + "'", line);
    if (const auto it = seen.find(key); it != seen.end()) {
      throw ConfigFileError("duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")", line);
    }
    seen.emplace(key, line);
    if (value.empty()) throw ConfigFileError("empty value for '" + key + "'", line);

    if (key == "model") {
      cfg.model_text = value;
      try {
        cfg.model = resolve_model(value);
        cfg.model.validate();
      } catch (const Error& e) {
        throw ConfigFileError(std::string("bad model: ") + e.what(), line);
      }
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(key, value, line);
    } else if (key == "data_seed") {
      cfg.data_seed = parse_number<std::uint64_t>(key, value, line);
    } else if (key == "dataset") {
      if (value != "synth" && value != "idx") throw ConfigFileError("'dataset' must be synth or idx", line);
      cfg.dataset = value;
    } else if (key == "synth_n") {
      cfg.synth_n = at_least<std::int64_t>(key, parse_number<std::int64_t>(key, value, line), 1, line);
    } else if (key == "synth_classes") {
      cfg.synth_classes = parse_number<int>(key, value, line);
      if (cfg.synth_classes < 1 || cfg.synth_classes > 16) throw ConfigFileError("'synth_classes' must be 1..16", line);
    } else if (key == "image_size") {
      cfg.image_size = parse_number<std::int64_t>(key, value, line);
      if (cfg.image_size < 32 || cfg.image_size % 32 != 0) {
        throw ConfigFileError("'image_size' must be a positive multiple of 32", line);
      }
    } else if (key == "train_images") {
      cfg.train_images = value;
    } else if (key == "train_labels") {
      cfg.train_labels = value;
    } else if (key == "eval_images") {
      cfg.eval_images = value;
    } else if (key == "eval_labels") {
      cfg.eval_labels = value;
    } else if (key == "epochs") {
      cfg.epochs = at_least(key, parse_number<int>(key, value, line), 1, line);
    } else if (key == "batch") {
      cfg.batch = at_least(key, parse_number<int>(key, value, line), 1, line);
    } else if (key == "lr") {
      cfg.lr = at_least(key, parse_real(key, value, line), 0.0, line);
    } else if (key == "weight_decay") {
      cfg.weight_decay = at_least(key, parse_real(key, value, line), 0.0, line);
    } else if (key == "warmup_epochs") {
      cfg.warmup_epochs = at_least(key, parse_number<int>(key, value, line), 0, line);
    } else if (key == "target_accuracy") {
      cfg.target_accuracy = parse_real(key, value, line);
      if (cfg.target_accuracy < 0.0 || cfg.target_accuracy > 1.0) {
        throw ConfigFileError("'target_accuracy' must be in [0,1]", line);
      }
    } else if (key == "output_dir") {
      cfg.output_dir = value;
    }
  }
  if (!seen.count("model")) {
    std::string optional;
    for (const auto& k : keys) {
      if (k != "model") optional += (optional.empty() ? "" : ", ") + k;
    }
    throw ConfigFileError("missing required key 'model' (required: model; optional: " + optional + ")", line);
  }
  if (cfg.dataset == "idx" && (cfg.train_images.empty() || cfg.train_labels.empty())) {
    throw ConfigFileError("dataset = idx requires train_images and train_labels", line);
  }
  if (cfg.eval_images.empty() != cfg.eval_labels.empty()) {
    throw ConfigFileError("eval_images and eval_labels must be given together", line);
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  return parse_config_text({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

// ---------------------------------------------------------------- commands

namespace {

// Bad argument value that CLI11 cannot see (exit 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

std::pair<Dataset, Dataset> load_run_data(const RunConfig& cfg) {
  if (cfg.dataset == "synth") {
    const auto all = synth_dataset(cfg.data_seed, cfg.synth_n, cfg.synth_classes, cfg.image_size);
    return {all.subset(Split::kTrain), all.subset(Split::kEval)};
  }
  auto train = load_idx_dataset(cfg.train_images, cfg.train_labels);
  if (!cfg.eval_images.empty()) return {std::move(train), load_idx_dataset(cfg.eval_images, cfg.eval_labels)};
  for (std::size_t i = 0; i < train.split.size(); ++i) train.split[i] = i % 5 == 4 ? Split::kEval : Split::kTrain;
  return {train.subset(Split::kTrain), train.subset(Split::kEval)};
}

ModelConfig model_arg(const std::string& text) {
  auto cfg = resolve_model(text);
  cfg.validate();
  return cfg;
}

void describe(const ModelConfig& cfg, std::int64_t hw, std::ostream& out) {
  const auto rep = cost_report(cfg, hw);
  const auto res = stage_resolutions(hw);
  char fp[32];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(cfg.fingerprint()));
  out << "model        " << cfg.canonical() << "\n";
  out << "fingerprint  " << fp << "\n";
  out << "input        " << hw << "x" << hw << "\n\n";
  out << std::left << std::setw(8) << "stage" << std::setw(10) << "tokens" << std::setw(10) << "width" << std::setw(7)
      << "paths" << std::setw(8) << "layers" << std::setw(12) << "params" << "flops\n";
  for (const auto& s : rep.per_stage) {
    out << std::left << std::setw(8) << s.name;
    if (s.name.rfind("stage", 0) == 0) {
      const int i = s.name.back() - '0' - kFirstStage;
      const auto r = res[static_cast<std::size_t>(i)];
      out << std::setw(10) << (std::to_string(r) + "x" + std::to_string(r)) << std::setw(10)
          << (std::to_string(cfg.channels[static_cast<std::size_t>(i)]) + "->" + std::to_string(cfg.out_channels(i)))
          << std::setw(7) << cfg.paths[static_cast<std::size_t>(i)] << std::setw(8)
          << cfg.layers[static_cast<std::size_t>(i)];
    } else {
      out << std::setw(10) << "" << std::setw(10) << "" << std::setw(7) << "" << std::setw(8) << "";
    }
    out << std::setw(12) << s.params << s.flops << "\n";
  }
  out << "\nparams       " << rep.params << " (" << format_millions(rep.params) << ")\n";
  out << "flops        " << rep.flops_macs << " MACs (" << format_billions(rep.flops_macs) << ")\n";
  out << "attn time    " << rep.analytic_time << "\n";
  out << "attn memory  " << rep.analytic_memory << "\n";
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> specs_from_file(const std::string& path) {
  const auto text = read_text(path);
  if (text.rfind("spec", 0) == 0) return sweep_specs_from_csv(text);
  std::vector<std::string> specs;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (!t.empty() && t[0] != '#') specs.push_back(t);
  }
  return specs;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

int parse_head(const std::string& text) {
  if (text == "mean") return kMeanHeads;
  int h = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), h);
  if (ec != std::errc() || ptr != text.data() + text.size() || h < 0) {
    throw UsageError("--head expects a head index or 'mean', got '" + text + "'");
  }
  return h;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-path vision transformer toolkit: cost accounting, toy training and attention maps.", "mpvit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string model_text, spec_file, out_path, config_path, checkpoint, image_path, out_dir = ".", head_text = "mean",
                                                                                    format_text = "pgm";
  std::int64_t size = 224, sample = 0, synth_n = 500;
  std::uint64_t seed = 0, data_seed = 0;
  std::vector<std::string> specs;
  std::vector<int> paths;
  int stage = 0, layer = 0;
  bool want_overlay = false;

  auto* describe_cmd = app.add_subcommand("describe", "Per-stage structure and cost report");
  describe_cmd->add_option("-m,--model", model_text, "Preset name or spec string")->required();
  describe_cmd->add_option("--size", size, "Input side length")->capture_default_str();

  auto* count_cmd = app.add_subcommand("count", "Parameter and FLOP totals");
  count_cmd->add_option("-m,--model", model_text, "Preset name or spec string")->required();
  count_cmd->add_option("--size", size, "Input side length")->capture_default_str();

  auto* sweep_cmd = app.add_subcommand("sweep", "Cost table for a list of specs as CSV");
  sweep_cmd->add_option("-s,--spec", specs, "Spec string or preset (repeatable)");
  sweep_cmd->add_option("-f,--file", spec_file, "File with one spec per line, or a sweep CSV");
  sweep_cmd->add_option("--size", size, "Input side length")->capture_default_str();
  sweep_cmd->add_option("-o,--out", out_path, "Write CSV here instead of stdout");

  auto* train_cmd = app.add_subcommand("train", "Train from a run configuration file");
  train_cmd->add_option("-c,--config", config_path, "key = value run configuration")->required();
  train_cmd->add_option("--output-dir", out_path, "Override output_dir from the config");

  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("-c,--config", config_path, "Run configuration supplying the dataset");
  eval_cmd->add_option("--data-seed", data_seed, "Synthetic dataset seed (without --config)");
  eval_cmd->add_option("--n", synth_n, "Synthetic dataset size (without --config)")->capture_default_str();
  eval_cmd->add_option("--size", size, "Synthetic image side (without --config)");

  auto* attend_cmd = app.add_subcommand("attend", "Export attention maps for the paths of one stage");
  auto* ck = attend_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* md = attend_cmd->add_option("-m,--model", model_text, "Random model from a preset or spec");
  ck->excludes(md);
  attend_cmd->add_option("--seed", seed, "Initialisation seed for --model");
  auto* img = attend_cmd->add_option("--image", image_path, "Binary PGM or PPM input");
  auto* smp = attend_cmd->add_option("--sample", sample, "Index into a synthetic dataset instead of --image");
  img->excludes(smp);
  attend_cmd->add_option("--data-seed", data_seed, "Synthetic dataset seed for --sample");
  attend_cmd->add_option("--size", size, "Synthetic image side for --sample");
  attend_cmd->add_option("--stage", stage, "Stage 2..5")->required();
  attend_cmd->add_option("--path", paths, "Path index (repeatable; default all)");
  attend_cmd->add_option("--layer", layer, "Block within the path")->capture_default_str();
  attend_cmd->add_option("--head", head_text, "Head index or 'mean'")->capture_default_str();
  attend_cmd->add_option("--format", format_text, "pgm or csv")
      ->check(CLI::IsMember({"pgm", "csv"}))
      ->capture_default_str();
  attend_cmd->add_option("-o,--out-dir", out_dir, "Output directory")->capture_default_str();
  attend_cmd->add_flag("--overlay", want_overlay, "Also write the map multiplied into the image (PPM)");

  std::vector<const char*> argv{"mpvit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*describe_cmd) {
      describe(model_arg(model_text), size, out);
    } else if (*count_cmd) {
      const auto rep = cost_report(model_arg(model_text), size);
      out << "params " << rep.params << " " << format_millions(rep.params) << "\n";
      out << "flops_macs " << rep.flops_macs << " " << format_billions(rep.flops_macs) << "\n";
    } else if (*sweep_cmd) {
      if (!spec_file.empty()) {
        const auto more = specs_from_file(spec_file);
        specs.insert(specs.end(), more.begin(), more.end());
      }
      if (specs.empty()) throw UsageError("sweep needs --spec or --file");
      const auto csv = sweep_csv(sweep_configs(specs, size));
      if (out_path.empty()) {
        out << csv;
      } else {
        write_text(out_path, csv);
      }
    } else if (*train_cmd) {
      auto cfg = parse_config(config_path);
      if (!out_path.empty()) cfg.output_dir = out_path;
      const auto [train_set, eval_set] = load_run_data(cfg);
      Model<float> model(cfg.model, cfg.seed);
      TrainOptions o;
      o.epochs = cfg.epochs;
      o.batch = cfg.batch;
      o.base_lr = cfg.lr;
      o.weight_decay = cfg.weight_decay;
      o.warmup_epochs = cfg.warmup_epochs;
      o.seed = cfg.seed;
      o.target_accuracy = cfg.target_accuracy;
      o.on_epoch = [&out](const EpochMetrics& m) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "epoch %3d  loss %.4f  eval_acc %.4f  lr %.3g\n", m.epoch, m.train_loss,
                      m.eval_acc, m.lr);
        out << buf << std::flush;
      };
      const auto result = train(model, train_set, eval_set, o);
      fs::create_directories(cfg.output_dir);
      const auto dir = fs::path(cfg.output_dir);
      write_text(dir / "metrics.csv", metrics_csv(result.history));
      save_checkpoint(model, &result.optim, (dir / "model.ckpt").string());
      out << "wrote " << (dir / "metrics.csv").string() << " and " << (dir / "model.ckpt").string() << "\n";
    } else if (*eval_cmd) {
      auto loaded = load_checkpoint(checkpoint);
      auto& model = *loaded.model;
      Dataset data;
      if (!config_path.empty()) {
        data = load_run_data(parse_config(config_path)).second;
      } else {
        const int classes = model.config().num_classes;
        if (classes > 16) throw UsageError("model has " + std::to_string(classes) + " classes; pass --config with a dataset");
        if (eval_cmd->count("--size") == 0) size = 64;
        data = synth_dataset(data_seed, synth_n, classes, size).subset(Split::kEval);
      }
      out << "samples  " << data.size() << "\n";
      out << "accuracy " << evaluate(model, data) << "\n";
      out << "loss     " << evaluate_loss(model, data) << "\n";
    } else if (*attend_cmd) {
      std::unique_ptr<Model<float>> owned;
      if (!checkpoint.empty()) {
        owned = load_checkpoint(checkpoint).model;
      } else if (!model_text.empty()) {
        owned = std::make_unique<Model<float>>(model_arg(model_text), seed);
      } else {
        throw UsageError("attend needs --checkpoint or --model");
      }
      auto& model = *owned;
      const auto& mc = model.config();
      Tensor<float> image;
      if (!image_path.empty()) {
        image = read_pnm(image_path);
        try {
          check_input_geometry(image.dim(2), image.dim(3));
        } catch (const GeometryError& e) {
          throw FormatError("'" + image_path + "': " + e.what());
        }
      } else {
        if (attend_cmd->count("--size") == 0) size = 64;
        const int classes = std::clamp(mc.num_classes, 1, 16);
        const auto data = synth_dataset(data_seed, sample + 1, classes, size);
        image = gather_images(data, std::vector<std::size_t>{static_cast<std::size_t>(sample)});
      }
      if (stage < kFirstStage || stage >= kFirstStage + kNumStages) {
        throw AddressError("stage " + std::to_string(stage) + " out of range; valid: 2..5");
      }
      const int np = mc.paths[static_cast<std::size_t>(stage - kFirstStage)];
      if (paths.empty()) {
        for (int p = 0; p < np; ++p) paths.push_back(p);
      }
      const int head = parse_head(head_text);
      const auto format = format_text == "csv" ? ImageFormat::kCsv : ImageFormat::kPgm;
      fs::create_directories(out_dir);
      for (int p : paths) {
        const auto map = attention_map(model, image, {stage, p, layer}, head);
        const std::string stem = "attn_s" + std::to_string(stage) + "_p" + std::to_string(p) + "_l" +
                                 std::to_string(layer) + "_" + (head == kMeanHeads ? "mean" : "h" + head_text);
        const auto file = fs::path(out_dir) / (stem + (format == ImageFormat::kCsv ? ".csv" : ".pgm"));
        export_image(map.values, map.height, map.width, file.string(), format);
        out << file.string() << " " << map.height << "x" << map.width << "\n";
        if (want_overlay) {
          const auto ov = fs::path(out_dir) / (stem + "_overlay.ppm");
          export_rgb(overlay(map, image), ov.string());
          out << ov.string() << "\n";
        }
      }
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigFileError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitData;
  } catch (const UsageError& e) {
    err << e.what() << "\n" << app.get_subcommands().front()->help();
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "invalid model spec: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "invalid model: " << e.what() << "\n";
    return kExitUsage;
  } catch (const AddressError& e) {
    err << "invalid address: " << e.what() << "\n";
    return kExitUsage;
  } catch (const GeometryError& e) {
    err << "invalid geometry: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace mpvit
