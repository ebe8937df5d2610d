#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "mpvit/model.hpp"
#include "mpvit/train.hpp"

namespace mpvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, little-endian:
//   "MPVT" | u32 version | u32 count | count x
//   (u16 name length | name | u8 rank | u32 dims[rank] | f32 payload)
// Besides the model tensors the file carries meta.fingerprint (the 64-bit
// config hash as four 16-bit chunks), meta.spec (canonical spec bytes) and,
// when given, optim.step / optim.m.<name> / optim.v.<name>.
void save_checkpoint(const Model<float>& model, const OptimState<float>* optim, const std::string& path);

struct LoadedCheckpoint {
  std::unique_ptr<Model<float>> model;
  OptimState<float> optim;  // empty when the file had none
};

// Rebuilds the model from the stored spec. The whole file is validated
// before any model is constructed.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Loads into an existing model. CompatibilityError when the stored
// fingerprint differs from model.config().fingerprint().
OptimState<float> load_checkpoint_into(Model<float>& model, const std::string& path);

}  // namespace mpvit
