#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mpvit/config.hpp"
#include "mpvit/errors.hpp"

namespace mpvit {

// Parse error in a run configuration file; carries the 1-based line.
class ConfigFileError : public ParseError {
 public:
  ConfigFileError(const std::string& what, std::size_t line)
      : ParseError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct RunConfig {
  std::string model_text;
  ModelConfig model;
  std::uint64_t seed = 0;
  std::string dataset = "synth";  // synth | idx
  std::int64_t synth_n = 2048;
  int synth_classes = 4;
  std::int64_t image_size = 64;
  std::uint64_t data_seed = 0;
  std::string train_images;
  std::string train_labels;
  std::string eval_images;
  std::string eval_labels;
  int epochs = 30;
  int batch = 32;
  double lr = 2e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  double target_accuracy = 0.0;
  std::string output_dir = "out";
};

// Line-based "key = value" with '#' comments. Unknown keys, duplicates,
// malformed values and a missing `model` raise ConfigFileError.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

// Keys accepted by parse_config, in documentation order.
const std::vector<std::string>& config_keys();

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Subcommands: describe, count, sweep, train, eval, attend.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mpvit
