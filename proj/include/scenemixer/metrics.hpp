#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scenemixer/tensor.hpp"

namespace scenemixer {

/// C x C count table; rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes, std::vector<std::string> class_names = {});
  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * classes_ + predicted]; }

  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t col_sum(std::size_t predicted) const;

  const std::vector<std::string>& class_names() const { return names_; }
  void set_class_names(std::vector<std::string> names);

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix& other) const { return classes_ == other.classes_ && counts_ == other.counts_; }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::string> names_;
};

ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                          std::size_t classes);

double overall_accuracy(const ConfusionMatrix& cm);

enum class AverageAccuracy {
  eq2,           // mean over classes of one-vs-rest accuracy (TP_i + TN_i) / total
  macro_recall,  // mean over classes of TP_i / row_i
};

double average_accuracy(const ConfusionMatrix& cm, AverageAccuracy variant = AverageAccuracy::macro_recall);

/// Probability of chance agreement, sum_c row_c * col_c / total^2.
double chance_agreement(const ConfusionMatrix& cm);

/// Cohen's kappa. Throws when chance agreement is 1 (kappa undefined).
double kappa(const ConfusionMatrix& cm);

struct MetricsSummary {
  double oa = 0.0;
  double aa = 0.0;
  double aa_eq2 = 0.0;
  double kappa = 0.0;
};

MetricsSummary summarize(const ConfusionMatrix& cm);

/// Header row of predicted class names, then one row per true class.
std::string confusion_csv(const ConfusionMatrix& cm);
/// `metric,value` rows: OA, AA, AA_eq2 as percentages and kappa x100, two decimals.
std::string metrics_csv(const MetricsSummary& summary);

}  // namespace scenemixer
