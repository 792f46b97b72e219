#include "scenemixer/metrics.hpp"

#include <fmt/format.h>

#include <cmath>

namespace scenemixer {

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::string> class_names)
    : classes_(classes), counts_(classes * classes, 0) {
  if (classes < 2) throw Error("a confusion matrix needs at least two classes");
  set_class_names(std::move(class_names));
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts)
    : classes_(classes), counts_(std::move(counts)) {
  if (classes < 2) throw Error("a confusion matrix needs at least two classes");
  if (counts_.size() != classes * classes) {
    throw Error(fmt::format("{} counts do not form a {}x{} matrix", counts_.size(), classes, classes));
  }
}

void ConfusionMatrix::set_class_names(std::vector<std::string> names) {
  if (!names.empty() && names.size() != classes_) {
    throw Error(fmt::format("{} class names for a {}-class matrix", names.size(), classes_));
  }
  names_ = std::move(names);
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, i);
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t t = 0;
  for (std::size_t j = 0; j < classes_; ++j) t += at(truth, j);
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, predicted);
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw Error("cannot add confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t classes) {
  if (truth.size() != predicted.size()) {
    throw Error(fmt::format("label length mismatch: {} true vs {} predicted", truth.size(), predicted.size()));
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || predicted[i] >= classes) {
      throw Error(fmt::format("label out of range at sample {}: true {}, predicted {}, classes {}", i, truth[i],
                              predicted[i], classes));
    }
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

namespace {
std::uint64_t require_samples(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error("metrics are undefined for an empty confusion matrix");
  return total;
}
}  // namespace

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = require_samples(cm);
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

double average_accuracy(const ConfusionMatrix& cm, AverageAccuracy variant) {
  const auto total = static_cast<double>(require_samples(cm));
  const std::size_t c = cm.classes();
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double tp = static_cast<double>(cm.at(i, i));
    const double row = static_cast<double>(cm.row_sum(i));
    if (variant == AverageAccuracy::macro_recall) {
      if (row == 0.0) throw Error(fmt::format("class {} has no samples; macro recall is undefined", i));
      sum += tp / row;
    } else {
      const double fp = static_cast<double>(cm.col_sum(i)) - tp;
      const double fn = row - tp;
      const double tn = total - tp - fp - fn;
      sum += (tp + tn) / total;
    }
  }
  return sum / static_cast<double>(c);
}

double chance_agreement(const ConfusionMatrix& cm) {
  const auto total = static_cast<double>(require_samples(cm));
  double pe = 0.0;
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    pe += static_cast<double>(cm.row_sum(i)) * static_cast<double>(cm.col_sum(i));
  }
  return pe / (total * total);
}

double kappa(const ConfusionMatrix& cm) {
  const double po = overall_accuracy(cm);
  const double pe = chance_agreement(cm);
  if (pe == 1.0) throw Error("kappa is undefined: chance agreement equals 1 (all samples in one class)");
  return (po - pe) / (1.0 - pe);
}

MetricsSummary summarize(const ConfusionMatrix& cm) {
  MetricsSummary s;
  s.oa = overall_accuracy(cm);
  s.aa = average_accuracy(cm, AverageAccuracy::macro_recall);
  s.aa_eq2 = average_accuracy(cm, AverageAccuracy::eq2);
  s.kappa = kappa(cm);
  return s;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  auto name = [&](std::size_t i) {
    return cm.class_names().empty() ? std::to_string(i) : cm.class_names()[i];
  };
  std::string out = "true\\predicted";
  for (std::size_t j = 0; j < cm.classes(); ++j) out += "," + name(j);
  out += "\n";
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    out += name(i);
    for (std::size_t j = 0; j < cm.classes(); ++j) out += "," + std::to_string(cm.at(i, j));
    out += "\n";
  }
  return out;
}

std::string metrics_csv(const MetricsSummary& s) {
  return fmt::format("metric,value\nOA,{:.2f}\nAA,{:.2f}\nAA_eq2,{:.2f}\nkappa_x100,{:.2f}\n", 100.0 * s.oa,
                     100.0 * s.aa, 100.0 * s.aa_eq2, 100.0 * s.kappa);
}

}  // namespace scenemixer
