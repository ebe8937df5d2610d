#include "mpvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mpvit/ops.hpp"
#include "mpvit/rng.hpp"

namespace mpvit {

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimState<T>& state, double lr, const AdamWConfig& config,
                const std::vector<bool>& decay) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  if (!decay.empty() && decay.size() != params.size()) throw ContractError("adamw_step: decay mask size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.has_grad()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw ContractError("adamw_step: moment shape mismatch for parameter " + std::to_string(k));
    auto w = p.mutable_data();
    const auto g = p.grad();
    const bool decayed = decay.empty() || decay[k];
    const double shrink = decayed ? 1.0 - lr * config.weight_decay : 1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = config.beta1 * static_cast<double>(m[i]) + (1.0 - config.beta1) * gi;
      const double vi = config.beta2 * static_cast<double>(v[i]) + (1.0 - config.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config.eps);
      w[i] = static_cast<T>(static_cast<double>(w[i]) * shrink - lr * update);
    }
  }
}

template void adamw_step(std::vector<Tensor<float>>&, OptimState<float>&, double, const AdamWConfig&,
                         const std::vector<bool>&);
template void adamw_step(std::vector<Tensor<double>>&, OptimState<double>&, double, const AdamWConfig&,
                         const std::vector<bool>&);

double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, std::int64_t warmup) {
  if (total <= 0 || step < 0 || step > total) throw ContractError("cosine_lr: need 0 <= step <= total");
  if (warmup < 0 || warmup >= total) throw ContractError("cosine_lr: need 0 <= warmup < total");
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

template <typename Fn>
void for_each_batch(const Dataset& data, int batch, Fn&& fn) {
  if (data.size() == 0) throw ContractError("evaluate: dataset is empty");
  if (batch < 1) throw ContractError("evaluate: batch must be >= 1");
  std::vector<std::size_t> idx;
  for (std::int64_t start = 0; start < data.size(); start += batch) {
    const std::int64_t end = std::min<std::int64_t>(start + batch, data.size());
    idx.clear();
    for (std::int64_t i = start; i < end; ++i) idx.push_back(static_cast<std::size_t>(i));
    fn(gather_images(data, idx), std::span<const int>(data.labels).subspan(static_cast<std::size_t>(start), idx.size()));
  }
}

}  // namespace

double evaluate(Model<float>& model, const Dataset& data, int batch) {
  NoGradGuard guard;
  std::int64_t correct = 0;
  for_each_batch(data, batch, [&](const Tensor<float>& x, std::span<const int> labels) {
    auto logits = model.forward(x, false);
    const auto k = static_cast<std::size_t>(logits.dim(1));
    const auto d = logits.data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (argmax_row(d.subspan(i * k, k)) == labels[i]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_loss(Model<float>& model, const Dataset& data, int batch) {
  NoGradGuard guard;
  double total = 0.0;
  for_each_batch(data, batch, [&](const Tensor<float>& x, std::span<const int> labels) {
    total += static_cast<double>(cross_entropy(model.forward(x, false), labels).item()) *
             static_cast<double>(labels.size());
  });
  return total / static_cast<double>(data.size());
}

TrainResult train(Model<float>& model, const Dataset& train_set, const Dataset& eval_set, const TrainOptions& o) {
  if (o.batch < 1 || o.batch > train_set.size()) {
    throw ContractError("train: batch " + std::to_string(o.batch) + " must be in [1, " +
                        std::to_string(train_set.size()) + "]");
  }
  if (o.epochs < 1) throw ContractError("train: epochs must be >= 1");
  if (train_set.classes > model.config().num_classes) {
    throw ContractError("train: dataset has " + std::to_string(train_set.classes) + " classes but the model outputs " +
                        std::to_string(model.config().num_classes));
  }

  const auto set = model.parameters();
  std::vector<Tensor<float>> params;
  std::vector<std::string> names;
  std::vector<bool> decay;
  for (const auto& item : set.items()) {
    if (!item.trainable) continue;
    params.push_back(item.tensor);
    names.push_back(item.name);
    decay.push_back(item.tensor.rank() > 1);
  }

  const std::int64_t n = train_set.size();
  const std::int64_t per_epoch = n / o.batch;
  std::int64_t total = per_epoch * o.epochs;
  if (o.max_steps > 0) total = std::min(total, o.max_steps);
  const std::int64_t warmup = std::min<std::int64_t>(per_epoch * o.warmup_epochs, total - 1);
  AdamWConfig acfg;
  acfg.weight_decay = o.weight_decay;

  TrainResult result;
  Rng rng(o.seed);
  std::vector<std::size_t> batch_idx;
  for (int epoch = 1; epoch <= o.epochs && result.steps < total; ++epoch) {
    const auto perm = rng.permutation(static_cast<std::size_t>(n));
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    double lr = 0.0;
    for (std::int64_t b = 0; b < per_epoch && result.steps < total; ++b) {
      batch_idx.assign(perm.begin() + b * o.batch, perm.begin() + (b + 1) * o.batch);
      std::vector<int> labels;
      for (auto i : batch_idx) labels.push_back(train_set.labels[i]);
      for (auto& p : params) p.zero_grad();

      auto logits = model.forward(gather_images(train_set, batch_idx), true);
      auto loss = cross_entropy(logits, labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        std::string where;
        for (std::size_t k = 0; k < params.size() && where.empty(); ++k) {
          for (float v : params[k].data()) {
            if (!std::isfinite(v)) {
              where = "parameter '" + names[k] + "'";
              break;
            }
          }
        }
        if (where.empty()) where = first_non_finite(loss);
        throw NumericAbort("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(result.steps) + "; first non-finite tensor: " + where);
      }
      loss.backward();
      lr = cosine_lr(result.steps, total, o.base_lr, warmup);
      adamw_step(params, result.optim, lr, acfg, decay);
      ++result.steps;
      loss_sum += value;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
    m.eval_acc = (o.evaluate_each_epoch && eval_set.size() > 0) ? evaluate(model, eval_set) : 0.0;
    m.lr = lr;
    result.history.push_back(m);
    if (o.on_epoch) o.on_epoch(m);
    if (o.target_accuracy > 0.0 && m.eval_acc >= o.target_accuracy) break;
  }
  return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_loss,eval_acc,lr\n";
  char buf[128];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", m.epoch, m.train_loss, m.eval_acc, m.lr);
    out += buf;
  }
  return out;
}

}  // namespace mpvit
