#include "prunecast/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "prunecast/errors.hpp"

namespace prunecast {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  // lr = 0 is accepted: it turns fine-tuning into a no-op, which is useful as a control.
  if (!(lr >= 0.0) || !std::isfinite(lr)) v.push_back("train.lr must be a finite value >= 0");
  if (batch_size == 0) v.push_back("train.batch_size must be >= 1");
  if (max_epochs == 0) v.push_back("train.max_epochs must be >= 1");
  if (patience == 0) v.push_back("train.patience must be >= 1");
  if (!(clip_norm >= 0.0)) v.push_back("train.clip_norm must be >= 0");
  if (max_steps && *max_steps == 0) v.push_back("train.max_steps must be >= 1 when set");
  return v;
}

void TrainConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

Optimizer::Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

void Optimizer::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw ContractError("optimizer: params and grads differ in count");
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t i = 0; i < grads[p].size(); ++i) (*params[p])[i] -= lr_ * grads[p][i];
    return;
  }
  if (m_.empty()) {
    for (const Tensor& g : grads) {
      m_.emplace_back(g.shape(), 0.0);
      v_.emplace_back(g.shape(), 0.0);
    }
  }
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      const double g = grads[p][i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      (*params[p])[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

nlohmann::json TrainHistory::to_json() const {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : epochs)
    ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_mse", e.val_mse}, {"steps", e.steps}});
  return {{"epochs", ep},
          {"best_epoch", best_epoch},
          {"best_val_mse", best_val_mse},
          {"stopped_early", stopped_early},
          {"steps", steps}};
}

double loss_and_grads(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                      const std::vector<ParamRef>& params, std::vector<Tensor>& grads, bool train_norms) {
  Tape tape;
  ModelVars vars;
  ForwardOptions opts;
  opts.param_grads = true;
  opts.norm_grads = train_norms;
  Var pred = model.forward(tape, contexts, opts, &vars);
  Var loss = ad::mse_loss(pred, tape.constant(targets));
  tape.backward(loss);
  grads.clear();
  for (const ParamRef& p : params) {
    Tensor g = tape.grad(vars.at(*p.tensor));
    if (p.layer) {
      const MaskedLinear& l = *p.layer;
      if (p.is_bias) {
        for (std::size_t j = 0; j < g.size(); ++j) g[j] *= l.mask_out[j];
      } else {
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) g.at(r, c) *= l.mask_in[r] * l.mask_out[c];
      }
    }
    grads.push_back(std::move(g));
  }
  return loss.value()[0];
}

TrainHistory finetune(Forecaster& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ContractError("finetune: no training windows");
  if (val.empty()) throw ContractError("finetune: no validation windows");

  std::vector<ParamRef> params;
  for (const ParamRef& p : model.parameters())
    if (cfg.train_norms || !p.is_norm) params.push_back(p);
  std::vector<Tensor*> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);

  Optimizer opt(cfg.optimizer, cfg.lr);
  Rng rng(cfg.seed);
  TrainHistory hist;
  std::vector<Tensor> best;
  std::size_t bad = 0;
  std::vector<std::size_t> order(train.size());
  std::vector<Tensor> grads;
  bool budget_hit = false;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !budget_hit; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * cfg.batch_size, n = std::min(cfg.batch_size, train.size() - first);
      const WindowBatch batch = make_batch(train, std::span<const std::size_t>(order.data() + first, n));
      const double loss =
          loss_and_grads(model, batch.norm_contexts, batch.norm_targets, params, grads, cfg.train_norms);
      double norm2 = 0.0;
      for (const auto& g : grads)
        for (double x : g.data()) norm2 += x * x;
      if (!std::isfinite(loss) || !std::isfinite(norm2)) {
        std::ostringstream msg;
        msg << "non-finite loss during fine-tuning (epoch " << epoch << ", batch " << b + 1 << ", lr " << cfg.lr
            << ", loss " << loss << ")";
        throw NumericError(msg.str());
      }
      const double norm = std::sqrt(norm2);
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
        const double s = cfg.clip_norm / norm;
        for (auto& g : grads)
          for (double& x : g.data()) x *= s;
      }
      opt.step(tensors, grads);
      loss_sum += loss * static_cast<double>(n);
      seen += n;
      if (cfg.max_steps && opt.steps() >= *cfg.max_steps) {
        budget_hit = true;
        break;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.val_mse = evaluate(model, val).mse;
    rec.steps = opt.steps();
    hist.epochs.push_back(rec);
    if (!std::isfinite(rec.val_mse)) {
      throw NumericError("non-finite validation MSE after epoch " + std::to_string(epoch) + " (lr " +
                         std::to_string(cfg.lr) + ")");
    }
    if (best.empty() || rec.val_mse < hist.best_val_mse) {
      hist.best_val_mse = rec.val_mse;
      hist.best_epoch = epoch;
      best.clear();
      for (Tensor* t : tensors) best.push_back(*t);
      bad = 0;
    } else if (++bad >= cfg.patience) {
      hist.stopped_early = true;
      break;
    }
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] = best[i];
  hist.steps = opt.steps();
  return hist;
}

nlohmann::json EvalReport::to_json() const {
  return {{"mse", mse},
          {"mae", mae},
          {"mse_by_step", mse_by_step},
          {"mae_by_step", mae_by_step},
          {"windows", windows},
          {"horizon", horizon},
          {"scale", raw_scale ? "raw" : "normalized"},
          {"dense_parameters", dense_parameters},
          {"effective_parameters", effective_parameters},
          {"param_fraction", param_fraction}};
}

EvalReport score_predictions(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 2) {
    throw DimensionError("score_predictions: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const std::size_t N = pred.rows(), H = pred.cols();
  if (N == 0) throw ContractError("score_predictions: no windows");
  EvalReport rep;
  rep.windows = N;
  rep.horizon = H;
  std::vector<double> se(H, 0.0), ae(H, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t h = 0; h < H; ++h) {
      const double d = pred.at(i, h) - target.at(i, h);
      se[h] += d * d;
      ae[h] += std::abs(d);
    }
  }
  const double nw = static_cast<double>(N);
  for (std::size_t h = 0; h < H; ++h) {
    rep.mse_by_step.push_back(se[h] / nw);
    rep.mae_by_step.push_back(ae[h] / nw);
    rep.mse += se[h];
    rep.mae += ae[h];
  }
  rep.mse /= nw * static_cast<double>(H);
  rep.mae /= nw * static_cast<double>(H);
  return rep;
}

EvalReport evaluate(const Forecaster& model, const WindowSet& windows, bool raw_scale, std::size_t batch) {
  if (windows.empty()) throw ContractError("evaluate: empty test set");
  if (batch == 0) batch = 256;
  const std::size_t H = windows.horizon();
  if (H != model.config().horizon || windows.context_length() != model.config().context) {
    throw DimensionError("evaluate: windows are (context " + std::to_string(windows.context_length()) +
                         ", horizon " + std::to_string(H) + ") but the model expects (" +
                         std::to_string(model.config().context) + ", " + std::to_string(model.config().horizon) +
                         ")");
  }
  Tensor pred_all = Tensor::matrix(windows.size(), H), target_all = Tensor::matrix(windows.size(), H);
  double seconds = 0.0;
  for (std::size_t first = 0; first < windows.size(); first += batch) {
    const std::size_t n = std::min(batch, windows.size() - first);
    const WindowBatch b = make_batch(windows, first, n);
    const auto t0 = std::chrono::steady_clock::now();
    Tensor pred = model.predict_normalized(b.norm_contexts);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < H; ++h) {
        double p = pred.at(i, h), y = b.norm_targets.at(i, h);
        if (raw_scale) {
          p = p * b.stats[i].std + b.stats[i].mean;
          y = b.targets.at(i, h);
        }
        pred_all.at(first + i, h) = p;
        target_all.at(first + i, h) = y;
      }
    }
  }
  EvalReport rep = score_predictions(pred_all, target_all);
  rep.raw_scale = raw_scale;
  rep.dense_parameters = model.config().dense_parameter_count();
  rep.effective_parameters = model.effective_parameter_count();
  rep.param_fraction = static_cast<double>(rep.effective_parameters) / static_cast<double>(rep.dense_parameters);
  rep.inference_seconds = seconds;
  return rep;
}

nlohmann::json BenchStats::to_json() const {
  return {{"mean_seconds", mean_seconds}, {"std_seconds", std_seconds}, {"min_seconds", min_seconds},
          {"repeats", repeats},           {"warmup", warmup},           {"batch", batch}};
}

BenchStats bench_inference(const Forecaster& model, const Tensor& contexts, std::size_t repeats,
                           std::size_t warmup) {
  if (repeats == 0) throw ContractError("bench_inference: repeats must be >= 1");
  if (contexts.rows() == 0) throw ContractError("bench_inference: no windows");
  for (std::size_t i = 0; i < warmup; ++i) (void)model.predict_normalized(contexts);
  std::vector<double> times;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor out = model.predict_normalized(contexts);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (out.empty()) throw StateError("bench_inference: empty output");
  }
  BenchStats s;
  s.repeats = repeats;
  s.warmup = warmup;
  s.batch = contexts.rows();
  s.mean_seconds = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(repeats);
  double var = 0.0;
  for (double t : times) var += (t - s.mean_seconds) * (t - s.mean_seconds);
  s.std_seconds = std::sqrt(var / static_cast<double>(repeats));
  s.min_seconds = *std::min_element(times.begin(), times.end());
  return s;
}

}  // namespace prunecast
