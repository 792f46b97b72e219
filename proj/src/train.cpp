#include "scenemixer/train.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "scenemixer/rng.hpp"

namespace scenemixer {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr factor must lie in (0, 1)");
  if (!(lr_init > 0.0)) throw ConfigError("initial learning rate must be positive");
  if (!(lr_min > 0.0) || lr_min > lr_init) throw ConfigError("lr floor must be positive and at most the initial lr");
  if (lr_patience < 1) throw ConfigError("lr patience must be at least 1");
}

template <typename T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2) throw ShapeError("cross_entropy expects (n, C) probabilities, got " + probs.shape().str());
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (labels.size() != n) throw ShapeError(fmt::format("{} labels for {} probability rows", labels.size(), n));

  LossResult<T> r;
  r.grad_logits = probs;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw Error(fmt::format("label {} at row {} is outside [0, {})", labels[i], i, c));
    total -= std::log(std::max(static_cast<double>(probs[i * c + labels[i]]), 1e-12));
    r.grad_logits[i * c + labels[i]] -= T{1};
  }
  const T inv_n = T{1} / static_cast<T>(n);
  for (auto& g : r.grad_logits.data()) g *= inv_n;
  r.loss = total / static_cast<double>(n);
  if (!std::isfinite(r.loss)) throw Error("cross_entropy produced a non-finite loss");
  return r;
}

template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, AdamState<T>& state,
               double lr, const AdamHyper& hyper) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("adam_step: {} parameters but {} gradients", params.size(), grads.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("adam_step: parameter " + params[i]->shape().str() + " vs gradient " + grads[i].shape().str());
    }
    for (T g : grads[i].data()) {
      if (!std::isfinite(g)) throw Error(fmt::format("adam_step: non-finite gradient in parameter {}", i));
    }
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  } else if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state does not match the parameter list");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta2, t)));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* theta = params[i]->ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    const T* g = grads[i].ptr();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      theta[j] -= rate * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr_init, double factor, std::size_t patience, double lr_min)
    : lr_(lr_init), factor_(factor), patience_(patience), lr_min_(lr_min) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
  if (patience < 1) throw ConfigError("plateau patience must be at least 1");
  if (!(lr_min > 0.0) || lr_min > lr_init) throw ConfigError("lr floor must be positive and at most the initial lr");
}

double PlateauScheduler::update(double val_accuracy) {
  if (!best_ || val_accuracy > *best_) {
    best_ = val_accuracy;
    stale_ = 0;
    return lr_;
  }
  if (++stale_ >= patience_) {
    lr_ = std::max(lr_ * factor_, lr_min_);
    stale_ = 0;
  }
  return lr_;
}

namespace {

Tensor gather_rows(const Tensor& images, std::span<const std::size_t> rows) {
  const std::size_t stride = images.size() / images.dim(0);
  std::vector<std::size_t> dims = images.shape().dims();
  dims[0] = rows.size();
  Tensor out{Shape(dims)};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(images.ptr() + rows[i] * stride, stride, out.ptr() + i * stride);
  }
  return out;
}

std::size_t count_correct(const std::vector<std::size_t>& predicted, std::span<const std::size_t> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return correct;
}

}  // namespace

EpochStats train_epoch(Model& model, const LabeledImages& data, AdamState<float>& optimizer, double lr,
                       std::size_t batch_size, std::uint64_t shuffle_seed, const AdamHyper& hyper) {
  if (data.size() == 0) throw Error("train_epoch: dataset is empty");
  if (batch_size == 0) throw Error("train_epoch: batch size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(shuffle_seed);
  rng.shuffle(std::span<std::size_t>(order));

  auto params = model.parameters();
  std::vector<Tensor*> tensors;
  for (auto& p : params) tensors.push_back(p.tensor);

  EpochStats stats;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(start + batch_size, order.size());
    const std::span<const std::size_t> rows(order.data() + start, stop - start);
    std::vector<std::size_t> labels;
    for (std::size_t r : rows) labels.push_back(data.labels[r]);

    auto result = forward(model, gather_rows(data.images, rows), Mode::train, true);
    const auto loss = cross_entropy(result.probs, labels);
    const auto grads = backward(model, result.trace, loss.grad_logits);
    adam_step<float>(tensors, grads, optimizer, lr, hyper);

    loss_sum += loss.loss * static_cast<double>(rows.size());
    correct += count_correct(argmax_rows(result.probs), labels);
    ++stats.batches;
  }
  stats.loss = loss_sum / static_cast<double>(data.size());
  stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return stats;
}

Evaluation evaluate(const Model& model, const LabeledImages& data, std::size_t batch_size) {
  if (data.size() == 0) throw Error("evaluate: dataset is empty");
  Evaluation ev;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t stop = std::min(start + batch_size, data.size());
    std::vector<std::size_t> rows(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    const std::span<const std::size_t> labels(data.labels.data() + start, rows.size());
    const Tensor probs = infer(model, gather_rows(data.images, rows));
    loss_sum += cross_entropy(probs, labels).loss * static_cast<double>(rows.size());
    const auto pred = argmax_rows(probs);
    ev.predictions.insert(ev.predictions.end(), pred.begin(), pred.end());
  }
  ev.loss = loss_sum / static_cast<double>(data.size());
  ev.accuracy = static_cast<double>(count_correct(ev.predictions, data.labels)) / static_cast<double>(data.size());
  return ev;
}

std::string TrainHistory::csv() const {
  std::string out = "epoch,train_loss,train_oa,val_loss,val_oa,lr\n";
  for (const auto& e : epochs) {
    out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.8g}\n", e.epoch, e.train_loss, e.train_oa, e.val_loss,
                       e.val_oa, e.lr);
  }
  return out;
}

FitResult fit(Model model, const LabeledImages& train, const LabeledImages& val, const TrainConfig& cfg,
              const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw Error("fit needs non-empty training and validation sets");

  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps};
  AdamState<float> optimizer;
  PlateauScheduler scheduler(cfg);
  BestSnapshot<Model> best;
  TrainHistory history;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = scheduler.lr();
    const std::uint64_t seed = cfg.shuffle_seed * 0x9E3779B97F4A7C15ULL + epoch;
    const EpochStats stats = train_epoch(model, train, optimizer, lr, cfg.batch_size, seed, hyper);
    const Evaluation ev = evaluate(model, val);

    EpochRecord rec{epoch, stats.loss, stats.accuracy, ev.loss, ev.accuracy, lr};
    history.epochs.push_back(rec);
    if (best.offer(epoch, ev.accuracy, model)) history.best_epoch = epoch;
    scheduler.update(ev.accuracy);
    if (on_epoch) on_epoch(rec);
  }
  return {best.value(), std::move(history)};
}

template LossResult<float> cross_entropy(const BasicTensor<float>&, std::span<const std::size_t>);
template LossResult<double> cross_entropy(const BasicTensor<double>&, std::span<const std::size_t>);
template void adam_step(std::span<BasicTensor<float>* const>, std::span<const BasicTensor<float>>, AdamState<float>&,
                        double, const AdamHyper&);
template void adam_step(std::span<BasicTensor<double>* const>, std::span<const BasicTensor<double>>,
                        AdamState<double>&, double, const AdamHyper&);

}  // namespace scenemixer
