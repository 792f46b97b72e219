#include <gtest/gtest.h>

#include <numeric>

#include "scenemixer/metrics.hpp"
#include "scenemixer/rng.hpp"

namespace scenemixer {
namespace {

ConfusionMatrix cm2(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  return ConfusionMatrix(2, std::vector<std::uint64_t>{a, b, c, d});
}

TEST(Confusion, Examples) {
  const std::vector<std::size_t> truth{0, 1, 1}, pred{0, 1, 0};
  EXPECT_EQ(confusion(truth, pred, 2), cm2(1, 0, 1, 1));
  const auto diag = confusion(truth, truth, 2);
  EXPECT_EQ(diag, cm2(1, 0, 0, 2));
}

TEST(Confusion, IsAdditiveOverConcatenation) {
  Rng rng(3);
  std::vector<std::size_t> t(40), p(40);
  for (std::size_t i = 0; i < 40; ++i) {
    t[i] = rng.below(4);
    p[i] = rng.below(4);
  }
  auto first = confusion(std::span(t).first(15), std::span(p).first(15), 4);
  first += confusion(std::span(t).subspan(15), std::span(p).subspan(15), 4);
  EXPECT_EQ(first, confusion(t, p, 4));
}

TEST(Confusion, RejectsBadInput) {
  const std::vector<std::size_t> a{0, 1}, b{0}, c{0, 2};
  EXPECT_THROW(confusion(a, b, 2), Error);
  EXPECT_THROW(confusion(a, c, 2), Error);
  EXPECT_THROW(ConfusionMatrix(1), Error);
}

TEST(OverallAccuracy, Examples) {
  EXPECT_DOUBLE_EQ(overall_accuracy(cm2(40, 10, 20, 30)), 0.70);
  EXPECT_EQ(overall_accuracy(cm2(5, 0, 0, 7)), 1.0);
  EXPECT_EQ(overall_accuracy(cm2(0, 5, 7, 0)), 0.0);
  EXPECT_THROW(overall_accuracy(ConfusionMatrix(3)), Error);
}

TEST(AverageAccuracy, VariantsDiverge) {
  const ConfusionMatrix cm(3, std::vector<std::uint64_t>{10, 0, 0, 0, 10, 0, 5, 0, 5});
  EXPECT_NEAR(average_accuracy(cm, AverageAccuracy::macro_recall), 0.83333, 5e-6);
  EXPECT_NEAR(average_accuracy(cm, AverageAccuracy::eq2), 0.88889, 5e-6);
  EXPECT_DOUBLE_EQ(average_accuracy(cm, AverageAccuracy::macro_recall), 2.5 / 3.0);
  EXPECT_DOUBLE_EQ(average_accuracy(cm, AverageAccuracy::eq2), 8.0 / 9.0);

  const ConfusionMatrix perfect(3, std::vector<std::uint64_t>{4, 0, 0, 0, 2, 0, 0, 0, 9});
  EXPECT_EQ(average_accuracy(perfect, AverageAccuracy::macro_recall), 1.0);
  EXPECT_EQ(average_accuracy(perfect, AverageAccuracy::eq2), 1.0);
}

TEST(AverageAccuracy, TwoClassEq2EqualsOverallAccuracy) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto cm = cm2(1 + rng.below(50), rng.below(50), rng.below(50), 1 + rng.below(50));
    EXPECT_EQ(average_accuracy(cm, AverageAccuracy::eq2), overall_accuracy(cm));
  }
}

TEST(AverageAccuracy, EmptyRowIsAnErrorForMacroRecall) {
  const auto cm = cm2(3, 1, 0, 0);
  EXPECT_THROW(average_accuracy(cm, AverageAccuracy::macro_recall), Error);
  EXPECT_NO_THROW(average_accuracy(cm, AverageAccuracy::eq2));
}

TEST(Kappa, Examples) {
  EXPECT_EQ(kappa(cm2(50, 0, 0, 50)), 1.0);
  EXPECT_EQ(kappa(cm2(25, 25, 25, 25)), 0.0);
  const auto cm = cm2(40, 10, 20, 30);
  EXPECT_DOUBLE_EQ(chance_agreement(cm), 0.5);
  EXPECT_NEAR(kappa(cm), 0.4, 1e-15);
  EXPECT_THROW(kappa(cm2(9, 0, 0, 0)), Error);
}

TEST(Kappa, OneExactlyForPositiveDiagonalMatrices) {
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = 2 + rng.below(5);
    ConfusionMatrix cm(c);
    for (std::size_t k = 0; k < c; ++k) cm.at(k, k) = 1 + rng.below(20);
    EXPECT_EQ(kappa(cm), 1.0);
    const std::size_t a = rng.below(c), b = (a + 1 + rng.below(c - 1)) % c;
    cm.at(a, b) += 1;
    EXPECT_LT(kappa(cm), 1.0);
  }
}

// ---------------------------------------------------------------------------
// Direct-definition oracle: expands the table into individual (truth, pred)
// samples and evaluates each statistic from its textbook definition.

struct Pair {
  std::size_t t, p;
};

std::vector<Pair> expand(const ConfusionMatrix& cm) {
  std::vector<Pair> out;
  for (std::size_t t = 0; t < cm.classes(); ++t)
    for (std::size_t p = 0; p < cm.classes(); ++p)
      for (std::uint64_t k = 0; k < cm.at(t, p); ++k) out.push_back({t, p});
  return out;
}

double oracle_oa(const std::vector<Pair>& s) {
  return double(std::count_if(s.begin(), s.end(), [](Pair x) { return x.t == x.p; })) / double(s.size());
}

double oracle_eq2(const std::vector<Pair>& s, std::size_t c) {
  double sum = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const auto agree = std::count_if(s.begin(), s.end(), [k](Pair x) { return (x.t == k) == (x.p == k); });
    sum += double(agree) / double(s.size());
  }
  return sum / double(c);
}

double oracle_macro(const std::vector<Pair>& s, std::size_t c) {
  double sum = 0;
  for (std::size_t k = 0; k < c; ++k) {
    double in_class = 0, hit = 0;
    for (Pair x : s)
      if (x.t == k) {
        ++in_class;
        hit += x.p == k;
      }
    sum += hit / in_class;
  }
  return sum / double(c);
}

double oracle_kappa(const std::vector<Pair>& s, std::size_t c) {
  const double n = double(s.size());
  double pe = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const auto truth_k = std::count_if(s.begin(), s.end(), [k](Pair x) { return x.t == k; });
    const auto pred_k = std::count_if(s.begin(), s.end(), [k](Pair x) { return x.p == k; });
    pe += (double(truth_k) / n) * (double(pred_k) / n);
  }
  const double po = oracle_oa(s);
  return (po - pe) / (1 - pe);
}

TEST(MetricsOracle, RandomMatricesAgreeWithDirectDefinitions) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.below(9);
    ConfusionMatrix cm(c);
    for (std::size_t t = 0; t < c; ++t) {
      for (std::size_t p = 0; p < c; ++p) cm.at(t, p) = rng.below(51);
      if (cm.row_sum(t) == 0) cm.at(t, rng.below(c)) = 1;
    }
    const auto samples = expand(cm);
    const auto s = summarize(cm);
    EXPECT_NEAR(s.oa, oracle_oa(samples), 1e-12);
    EXPECT_NEAR(s.aa, oracle_macro(samples, c), 1e-12);
    EXPECT_NEAR(s.aa_eq2, oracle_eq2(samples, c), 1e-12);
    EXPECT_NEAR(s.kappa, oracle_kappa(samples, c), 1e-12);
    EXPECT_GE(s.kappa, -1.0);
    EXPECT_LE(s.kappa, 1.0);
    const double pe = chance_agreement(cm);
    EXPECT_NEAR(s.kappa, (s.oa - pe) / (1 - pe), 1e-12);
  }
}

TEST(MetricsOracle, InvariantUnderClassPermutation) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + rng.below(7);
    ConfusionMatrix cm(c);
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t p = 0; p < c; ++p) cm.at(t, p) = 1 + rng.below(30);
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    ConfusionMatrix permuted(c);
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t p = 0; p < c; ++p) permuted.at(perm[t], perm[p]) = cm.at(t, p);
    const auto a = summarize(cm), b = summarize(permuted);
    EXPECT_NEAR(a.oa, b.oa, 1e-12);
    EXPECT_NEAR(a.aa, b.aa, 1e-12);
    EXPECT_NEAR(a.aa_eq2, b.aa_eq2, 1e-12);
    EXPECT_NEAR(a.kappa, b.kappa, 1e-12);
  }
}

TEST(MetricsCsv, Layout) {
  ConfusionMatrix cm(2, std::vector<std::uint64_t>{40, 10, 20, 30});
  cm.set_class_names({"forest", "river"});
  const auto csv = confusion_csv(cm);
  EXPECT_NE(csv.find("forest,river\n"), std::string::npos);
  EXPECT_NE(csv.find("forest,40,10\n"), std::string::npos);
  EXPECT_NE(csv.find("river,20,30\n"), std::string::npos);

  const auto m = metrics_csv(summarize(cm));
  EXPECT_EQ(m.rfind("metric,value\n", 0), 0u);
  EXPECT_NE(m.find("OA,70.00\n"), std::string::npos);
  EXPECT_NE(m.find("kappa_x100,40.00\n"), std::string::npos);
}

}  // namespace
}  // namespace scenemixer
