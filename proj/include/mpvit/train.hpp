#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpvit/data.hpp"
#include "mpvit/errors.hpp"
#include "mpvit/model.hpp"

namespace mpvit {

struct AdamWConfig {
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

// One AdamW update of every parameter from its accumulated gradient:
//   theta <- theta - lr * wd * theta                  (decoupled decay)
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
// `decay` selects which parameters receive weight decay (all when empty).
// Parameters without a gradient are left untouched.
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimState<T>& state, double lr, const AdamWConfig& config,
                const std::vector<bool>& decay = {});

// Linear ramp 0 -> base_lr over `warmup` steps, then half-cosine to 0 at `total`.
double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, std::int64_t warmup);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_acc = 0.0;
  double lr = 0.0;
};

struct TrainOptions {
  int epochs = 30;
  int batch = 32;
  double base_lr = 2e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  std::uint64_t seed = 0;
  // Stop after the first epoch whose eval accuracy reaches this (0 = never).
  double target_accuracy = 0.0;
  // Stop after this many optimizer steps (0 = no limit).
  std::int64_t max_steps = 0;
  // Evaluate on the eval set after every epoch.
  bool evaluate_each_epoch = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::int64_t steps = 0;
  OptimState<float> optim;
};

// Raised when the loss turns non-finite; what() names the first offending tensor.
class NumericAbort : public NumericError {
 public:
  using NumericError::NumericError;
};

// Cross-entropy training with seeded shuffling; BatchNorm in training mode.
// Weight decay skips one-dimensional tensors (biases and norm affines).
TrainResult train(Model<float>& model, const Dataset& train_set, const Dataset& eval_set, const TrainOptions& options);

// Argmax accuracy in eval mode. Throws ContractError on an empty dataset.
double evaluate(Model<float>& model, const Dataset& data, int batch = 64);

// Mean cross-entropy in eval mode.
double evaluate_loss(Model<float>& model, const Dataset& data, int batch = 64);

// "epoch,train_loss,eval_acc,lr" plus one row per epoch.
std::string metrics_csv(const std::vector<EpochMetrics>& history);

}  // namespace mpvit
