#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scenemixer/data.hpp"
#include "scenemixer/model.hpp"

namespace scenemixer {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr_init = 1e-3;
  double lr_factor = 0.5;
  std::size_t lr_patience = 10;
  double lr_min = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-7;
  std::uint64_t shuffle_seed = 42;

  void validate() const;
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  /// d loss / d logits for a softmax head: (probs - onehot) / n.
  BasicTensor<T> grad_logits;
};

/// Mean negative log-likelihood, probabilities clamped below at 1e-12.
template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels);

template <typename T>
struct AdamState {
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

/// One bias-corrected Adam update. Zero-initializes state on first use.
/// Throws on a non-finite gradient before touching any parameter.
template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, AdamState<T>& state,
               double lr, const AdamHyper& hyper = {});

/// Multiplies the learning rate by `factor` once validation accuracy has
/// failed to strictly improve for `patience` consecutive epochs, never going
/// below `lr_min`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr_init, double factor, std::size_t patience, double lr_min);
  explicit PlateauScheduler(const TrainConfig& cfg)
      : PlateauScheduler(cfg.lr_init, cfg.lr_factor, cfg.lr_patience, cfg.lr_min) {}

  /// Call once per epoch; returns the learning rate for the next epoch.
  double update(double val_accuracy);

  double lr() const { return lr_; }
  std::optional<double> best() const { return best_; }
  std::size_t epochs_since_improvement() const { return stale_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double lr_min_;
  std::optional<double> best_;
  std::size_t stale_ = 0;
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t batches = 0;
};

/// Shuffles with a generator seeded by `shuffle_seed`, then trains on
/// consecutive minibatches (the last one may be partial).
EpochStats train_epoch(Model& model, const LabeledImages& data, AdamState<float>& optimizer, double lr,
                       std::size_t batch_size, std::uint64_t shuffle_seed, const AdamHyper& hyper = {});

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
};

/// Infer-mode loss, accuracy and predictions, in batches of `batch_size`.
Evaluation evaluate(const Model& model, const LabeledImages& data, std::size_t batch_size = 64);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_oa = 0.0;
  double val_loss = 0.0;
  double val_oa = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when empty

  std::string csv() const;
};

/// Keeps the snapshot with the highest validation accuracy (earliest on ties).
template <typename M>
class BestSnapshot {
 public:
  /// Returns true when `candidate` became the new best.
  bool offer(std::size_t epoch, double val_accuracy, const M& candidate) {
    if (best_ && val_accuracy <= score_) return false;
    best_ = candidate;
    score_ = val_accuracy;
    epoch_ = epoch;
    return true;
  }
  bool has_value() const { return best_.has_value(); }
  const M& value() const { return *best_; }
  M& value() { return *best_; }
  std::size_t epoch() const { return epoch_; }
  double score() const { return score_; }

 private:
  std::optional<M> best_;
  double score_ = 0.0;
  std::size_t epoch_ = 0;
};

struct FitResult {
  Model model;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

FitResult fit(Model model, const LabeledImages& train, const LabeledImages& val, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {});

}  // namespace scenemixer
