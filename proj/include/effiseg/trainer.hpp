#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "effiseg/data.hpp"
#include "effiseg/metrics.hpp"
#include "effiseg/model.hpp"

namespace effiseg {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 4;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 7;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir = "checkpoints";

  bool operator==(const TrainConfig&) const = default;

  /// Throws ConfigError unless epochs, batch_size, patience >= 1, learning_rate > 0
  /// and the Adam coefficients lie in their valid ranges.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Bias-corrected Adam update of one array. `t` is the 1-based step number.
template <typename Derived, typename G, typename M>
void adam_update(Eigen::ArrayBase<Derived>& param, const Eigen::ArrayBase<G>& grad, Eigen::ArrayBase<M>& m,
                 Eigen::ArrayBase<M>& v, long t, double lr, double beta1, double beta2, double eps) {
  using Scalar = typename Derived::Scalar;
  const Scalar b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
  m = b1 * m + (Scalar(1) - b1) * grad;
  v = b2 * v + (Scalar(1) - b2) * grad.square();
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(beta1, static_cast<double>(t)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(beta2, static_cast<double>(t)));
  param -= static_cast<Scalar>(lr) * (m / c1) / ((v / c2).sqrt() + static_cast<Scalar>(eps));
}

/// First and second moments per parameter tensor, in registry order.
template <typename Scalar>
struct AdamState {
  long step = 0;
  std::vector<ArrayX<Scalar>> m;
  std::vector<ArrayX<Scalar>> v;
};

/// One Adam step over every trainable parameter of `reg`, using the gradients
/// currently stored on the parameters. Frozen parameters are skipped.
template <typename Scalar>
void adam_step(ParameterRegistry<Scalar>& reg, AdamState<Scalar>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  if (state.m.empty()) {
    for (const auto& p : reg.parameters) {
      state.m.push_back(ArrayX<Scalar>::Zero(p.var->value().size()));
      state.v.push_back(ArrayX<Scalar>::Zero(p.var->value().size()));
    }
  }
  if (state.m.size() != reg.parameters.size()) throw ShapeError("optimizer state does not match the parameter list");
  ++state.step;
  for (std::size_t i = 0; i < reg.parameters.size(); ++i) {
    Var<Scalar>& p = *reg.parameters[i].var;
    if (!p.requires_grad()) continue;
    if (state.m[i].size() != p.value().size()) {
      throw ShapeError("optimizer state for '" + reg.parameters[i].name + "' has the wrong size");
    }
    adam_update(p.value().array(), p.grad().array(), state.m[i], state.v[i], state.step, lr, beta1, beta2, eps);
  }
}

/// Validation-loss early stopping with patience.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }

  /// Records one epoch; returns true if it is the new best.
  bool record(int epoch, double val_loss) {
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0;
  bool stopped_early = false;
  std::filesystem::path checkpoint;  // empty when no checkpoint_dir is set
};

/// "epoch,train_loss,val_loss,val_dice" with 17 significant digits.
std::string history_csv(const std::vector<EpochRecord>& history);

struct TrainHooks {
  std::function<void(int epoch, int batch, double loss)> on_batch;
  std::function<void(const EpochRecord&, bool improved)> on_epoch;
};

/// Optimizer and loss bound to one model.
template <typename Scalar>
class TrainStepper {
 public:
  TrainStepper(PolypSegNet<Scalar>& model, const TrainConfig& cfg) : model_(model), cfg_(cfg), reg_(model.registry()) {}

  /// Forward in training mode, loss, backward and one Adam update. Returns the
  /// pre-update loss; throws NumericError if it is not finite.
  double step(const Tensor4<Scalar>& images, const Tensor4<Scalar>& masks) {
    reg_.zero_grad();
    const Var<Scalar> logits = model_.forward_logits(Var<Scalar>::constant(images), Mode::Train);
    const Var<Scalar> loss = segmentation_loss_from_logits(logits, masks);
    const double value = static_cast<double>(loss.value().data()[0]);
    if (!std::isfinite(value)) throw NumericError("non-finite loss " + std::to_string(value));
    backward(loss);
    {
      NoGradGuard guard;
      adam_step(reg_, state_, cfg_.learning_rate, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
    }
    return value;
  }

  /// Inference-mode loss and per-image Dice sums over one batch.
  std::pair<double, double> measure(const Tensor4<Scalar>& images, const Tensor4<Scalar>& masks) {
    NoGradGuard guard;
    const Var<Scalar> logits = model_.forward_logits(Var<Scalar>::constant(images), Mode::Infer);
    const double loss = static_cast<double>(segmentation_loss_from_logits(logits, masks).value().data()[0]);
    const Tensor4<Scalar> pred(logits.shape(), (logits.value().array() > Scalar(0)).template cast<Scalar>());
    double dice_sum = 0;
    const Index per = pred.shape().plane();
    for (Index b = 0; b < pred.n(); ++b) {
      dice_sum += dice(pred.array().segment(b * per, per), masks.array().segment(b * per, per));
    }
    return {loss, dice_sum};
  }

  const AdamState<Scalar>& state() const { return state_; }

 private:
  PolypSegNet<Scalar>& model_;
  TrainConfig cfg_;
  ParameterRegistry<Scalar> reg_;
  AdamState<Scalar> state_;
};

namespace detail {

inline std::vector<Sample> fit_to(const std::vector<Sample>& set, Index h, Index w) {
  std::vector<Sample> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(resize_sample(s, static_cast<int>(h), static_cast<int>(w)));
  return out;
}

template <typename Scalar>
void make_batch_as(const std::vector<Sample>& set, const std::vector<std::size_t>& idx, Tensor4<Scalar>& x,
                   Tensor4<Scalar>& y) {
  Tensor4<float> xf, yf;
  make_batch(set, idx, xf, yf);
  if constexpr (std::is_same_v<Scalar, float>) {
    x = std::move(xf);
    y = std::move(yf);
  } else {
    x = xf.cast<Scalar>();
    y = yf.cast<Scalar>();
  }
}

template <typename Scalar>
std::vector<Tensor4<Scalar>> snapshot(const ParameterRegistry<Scalar>& reg) {
  std::vector<Tensor4<Scalar>> out;
  for (const auto& p : reg.parameters) out.push_back(p.var->value());
  for (const auto& b : reg.buffers) out.push_back(*b.tensor);
  return out;
}

template <typename Scalar>
void restore(ParameterRegistry<Scalar>& reg, const std::vector<Tensor4<Scalar>>& saved) {
  std::size_t i = 0;
  for (auto& p : reg.parameters) p.var->value() = saved[i++];
  for (auto& b : reg.buffers) *b.tensor = saved[i++];
}

}  // namespace detail

/// Validation loss and mean Dice in inference mode, batched in `set` order.
template <typename Scalar>
std::pair<double, double> validate_model(TrainStepper<Scalar>& stepper, const std::vector<Sample>& set, int batch_size) {
  double loss = 0, dice_sum = 0;
  for (std::size_t first = 0; first < set.size(); first += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < std::min(set.size(), first + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    Tensor4<Scalar> x, y;
    detail::make_batch_as(set, idx, x, y);
    const auto [l, d] = stepper.measure(x, y);
    loss += l * static_cast<double>(idx.size());
    dice_sum += d;
  }
  const double n = static_cast<double>(set.size());
  return {loss / n, dice_sum / n};
}

/// Mini-batch Adam on `train_set` with a seeded reshuffle every epoch. After
/// each epoch the un-augmented `val_set` is scored; the weights with the lowest
/// validation loss are kept (and written to <checkpoint_dir>/best.ckpt when a
/// directory is set), training stops after `patience` epochs without
/// improvement, and the best weights are restored into `model` at the end.
/// The history is written to <checkpoint_dir>/history.csv. A non-finite loss
/// or activation aborts with NumericError naming the epoch and batch.
template <typename Scalar>
TrainResult train(PolypSegNet<Scalar>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw DatasetError("training needs non-empty train and validation sets");
  const Index h = model.config().input_h, w = model.config().input_w;
  const std::vector<Sample> train_data = detail::fit_to(train_set, h, w);
  const std::vector<Sample> val_data = detail::fit_to(val_set, h, w);

  const bool write_files = !cfg.checkpoint_dir.empty();
  if (write_files) std::filesystem::create_directories(cfg.checkpoint_dir);

  TrainStepper<Scalar> stepper(model, cfg);
  ParameterRegistry<Scalar> reg = model.registry();
  EarlyStopping stopper(cfg.patience);
  std::vector<Tensor4<Scalar>> best = detail::snapshot(reg);
  TrainResult result;
  if (write_files) result.checkpoint = cfg.checkpoint_dir / "best.ckpt";

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);

    double loss_sum = 0;
    int batch = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      ++batch;
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(first),
                                         order.begin() + static_cast<std::ptrdiff_t>(last));
      Tensor4<Scalar> x, y;
      detail::make_batch_as(train_data, idx, x, y);
      double loss = 0;
      try {
        loss = stepper.step(x, y);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ": " + e.what());
      }
      loss_sum += loss * static_cast<double>(idx.size());
      if (hooks.on_batch) hooks.on_batch(epoch, batch, loss);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_data.size());
    try {
      std::tie(rec.val_loss, rec.val_dice) = validate_model(stepper, val_data, cfg.batch_size);
    } catch (const NumericError& e) {
      throw NumericError("validation aborted at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    result.history.push_back(rec);
    const bool improved = stopper.record(epoch, rec.val_loss);
    if (improved) {
      best = detail::snapshot(reg);
      if (write_files) save_checkpoint(model, result.checkpoint, epoch);
    }
    if (hooks.on_epoch) hooks.on_epoch(rec, improved);
    if (write_files) {
      std::ofstream(cfg.checkpoint_dir / "history.csv") << history_csv(result.history);
    }
    if (stopper.should_stop()) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  detail::restore(reg, best);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

}  // namespace effiseg
