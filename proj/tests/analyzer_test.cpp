#include <gtest/gtest.h>

#include "scenemixer/analyzer.hpp"
#include "test_util.hpp"

namespace scenemixer {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_h = c.input_w = 4;
  c.input_c = 1;
  c.patch = 2;
  c.embed_dim = 2;
  c.depth = 1;
  c.num_classes = 2;
  return c;
}

ModelConfig random_config(Rng& rng) {
  ModelConfig c;
  c.patch = 1 + rng.below(4);
  c.input_h = c.patch * (1 + rng.below(5));
  c.input_w = c.patch * (1 + rng.below(5));
  c.input_c = 1 + rng.below(4);
  c.embed_dim = 1 + rng.below(9);
  c.depth = 1 + rng.below(3);
  c.kernels.clear();
  const std::size_t branches = 1 + rng.below(3);
  for (std::size_t i = 0; i < branches; ++i) c.kernels.push_back(1 + 2 * rng.below(4));
  c.num_classes = 2 + rng.below(6);
  return c;
}

/// Runs a batch-of-one inference with the layer counters on.
OpCounts observed_counts(const ModelConfig& cfg) {
  const auto m = build<float>(cfg, 1);
  Rng rng(2);
  const auto x = testing::random_tensor<float>(Shape{1, cfg.input_h, cfg.input_w, cfg.input_c}, rng);
  ScopedOpCounter counter;
  infer(m, x);
  return counter.counts();
}

TEST(CountParams, Examples) {
  EXPECT_EQ(count_params(eurosat_config()), 94'090u);
  EXPECT_EQ(count_params(tiny_config()), 102u);
  EXPECT_EQ(count_params(aid_config()), 96'670u);
  EXPECT_EQ(count_params(eurosat_config(), true), 94'090u - 4 * 2 * 128);
}

TEST(CountParams, EqualsBuiltScalarCount) {
  Rng rng(77);
  for (int i = 0; i < 25; ++i) {
    const auto cfg = random_config(rng);
    EXPECT_EQ(count_params(cfg), build<float>(cfg, 1).scalar_count()) << format_config(cfg);
  }
}

TEST(CountMacs, Examples) {
  EXPECT_EQ(count_macs(eurosat_config()), 22'807'808u);
  EXPECT_EQ(count_macs(eurosat_config()), PublishedCost::macs);
  EXPECT_EQ(count_macs(tiny_config()), 324u);
  const auto report = analyze(eurosat_config());
  ASSERT_FALSE(report.layers.empty());
  EXPECT_EQ(report.layers.front().name, "patch_embed");
  EXPECT_EQ(report.layers.front().macs, 1'572'864u);
}

TEST(CountMacs, EqualsInstrumentedForwardPass) {
  EXPECT_EQ(observed_counts(eurosat_config()).macs, count_macs(eurosat_config()));
  Rng rng(78);
  for (int i = 0; i < 25; ++i) {
    const auto cfg = random_config(rng);
    EXPECT_EQ(observed_counts(cfg).macs, count_macs(cfg)) << format_config(cfg);
  }
}

TEST(CountFlops, Examples) {
  EXPECT_EQ(count_flops(eurosat_config()), 46'041'610u);
  EXPECT_EQ(count_flops(eurosat_config(), FlopConvention::macs_only), 45'615'616u);
  const double rel = (double(count_flops(eurosat_config())) - double(PublishedCost::flops)) / double(PublishedCost::flops);
  EXPECT_LT(std::abs(rel), 0.02);
}

TEST(CountFlops, TinyValueFixedByInstrumentedCount) {
  const auto seen = observed_counts(tiny_config());
  EXPECT_EQ(seen.macs, 324u);
  EXPECT_EQ(seen.bias_adds, 34u);
  EXPECT_EQ(count_flops(tiny_config()), 2 * seen.macs + seen.bias_adds);
  EXPECT_EQ(count_flops(tiny_config()), 682u);
}

TEST(CountFlops, BiasAddsEqualInstrumentedCount) {
  Rng rng(79);
  for (int i = 0; i < 10; ++i) {
    const auto cfg = random_config(rng);
    const auto seen = observed_counts(cfg);
    EXPECT_EQ(count_flops(cfg), 2 * seen.macs + seen.bias_adds) << format_config(cfg);
    EXPECT_EQ(count_flops(cfg, FlopConvention::macs_only), 2 * seen.macs);
  }
}

TEST(Counts, LinearInDepth) {
  Rng rng(80);
  for (int i = 0; i < 10; ++i) {
    auto cfg = random_config(rng);
    std::vector<std::uint64_t> p, m, f;
    for (std::size_t depth = 1; depth <= 4; ++depth) {
      cfg.depth = depth;
      p.push_back(count_params(cfg));
      m.push_back(count_macs(cfg));
      f.push_back(count_flops(cfg));
    }
    for (std::size_t d = 2; d < 4; ++d) {
      EXPECT_EQ(p[d] - p[d - 1], p[1] - p[0]);
      EXPECT_EQ(m[d] - m[d - 1], m[1] - m[0]);
      EXPECT_EQ(f[d] - f[d - 1], f[1] - f[0]);
    }
  }
}

TEST(Analyze, TotalsAreSumsOfLayers) {
  for (bool trainable : {false, true}) {
    for (auto conv : {FlopConvention::macs_plus_bias, FlopConvention::macs_only}) {
      const auto r = analyze(eurosat_config(), conv, trainable);
      std::uint64_t p = 0, m = 0, f = 0;
      for (const auto& l : r.layers) {
        p += l.params;
        m += l.macs;
        f += l.flops;
      }
      EXPECT_EQ(r.total.params, p);
      EXPECT_EQ(r.total.macs, m);
      EXPECT_EQ(r.total.flops, f);
      EXPECT_EQ(r.total.params, count_params(eurosat_config(), trainable));
      EXPECT_EQ(r.convention, conv);
    }
  }
}

TEST(Analyze, ReportShowsConventionAndPublishedFigures) {
  const auto text = format_report(eurosat_config(), analyze(eurosat_config()));
  EXPECT_NE(text.find("22,807,808"), std::string::npos);
  EXPECT_NE(text.find("46,041,610"), std::string::npos);
  EXPECT_NE(text.find("94,090"), std::string::npos);
  EXPECT_NE(text.find("100,117"), std::string::npos);
  EXPECT_NE(text.find(convention_text(FlopConvention::macs_plus_bias)), std::string::npos);

  const auto other = format_report(tiny_config(), analyze(tiny_config()));
  EXPECT_EQ(other.find("100,117"), std::string::npos);
}

TEST(Analyze, CsvHasHeaderAndTotal) {
  const auto csv = report_csv(analyze(tiny_config()));
  EXPECT_EQ(csv.rfind("layer,params,macs,flops\n", 0), 0u);
  EXPECT_NE(csv.find("total,102,324,682"), std::string::npos);
}

TEST(Analyze, InvalidConfigThrows) {
  auto c = eurosat_config();
  c.depth = 0;
  EXPECT_THROW(count_params(c), ConfigError);
  EXPECT_THROW(count_macs(c), ConfigError);
  EXPECT_THROW(analyze(c), ConfigError);
}

}  // namespace
}  // namespace scenemixer
