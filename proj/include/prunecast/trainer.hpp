#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "prunecast/dataset.hpp"
#include "prunecast/forecaster.hpp"

namespace prunecast {

enum class OptimizerKind { sgd, adam };
const char* to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::size_t patience = 1;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;                 // global-norm clip; 0 disables
  bool train_norms = true;                // update norm gain/offset
  std::optional<std::size_t> max_steps;   // optimizer-step budget across epochs

  std::vector<std::string> violations() const;
  void validate() const;
};

/// Adam/SGD state over a fixed list of parameter tensors.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr);
  /// params[i] -= update(grads[i]).
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mse = 0.0;
  std::size_t steps = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  bool stopped_early = false;
  std::size_t steps = 0;

  nlohmann::json to_json() const;
};

/// Loss and parameter gradients of one batch, with gradients of masked
/// weight and bias coordinates forced to zero.
double loss_and_grads(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                      const std::vector<ParamRef>& params, std::vector<Tensor>& grads, bool train_norms);

/// Trains the unmasked parameters on normalized windows. On return the model
/// holds the snapshot with the best validation MSE.
TrainHistory finetune(Forecaster& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg);

struct EvalReport {
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> mse_by_step;
  std::vector<double> mae_by_step;
  std::size_t windows = 0;
  bool raw_scale = false;
  std::size_t horizon = 0;
  std::size_t dense_parameters = 0;
  std::size_t effective_parameters = 0;
  double param_fraction = 1.0;
  double inference_seconds = 0.0;  // wall clock, kept out of to_json()

  nlohmann::json to_json() const;
};

/// MSE/MAE of pred against target, both [windows x horizon].
EvalReport score_predictions(const Tensor& pred, const Tensor& target);

/// Metrics over every window and forecast step.
EvalReport evaluate(const Forecaster& model, const WindowSet& windows, bool raw_scale = false,
                    std::size_t batch = 256);

struct BenchStats {
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  double min_seconds = 0.0;
  std::size_t repeats = 0;
  std::size_t warmup = 0;
  std::size_t batch = 0;

  nlohmann::json to_json() const;
};

/// Times `repeats` forward passes over `contexts` after `warmup` untimed runs.
BenchStats bench_inference(const Forecaster& model, const Tensor& contexts, std::size_t repeats,
                           std::size_t warmup = 3);

}  // namespace prunecast
