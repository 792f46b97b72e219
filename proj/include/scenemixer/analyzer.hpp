#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scenemixer/model.hpp"

namespace scenemixer {

/// How FLOPs are derived from MACs.
enum class FlopConvention {
  macs_plus_bias,  // 2 * MACs + one addition per conv/dense output element
  macs_only,       // 2 * MACs
};

std::string convention_text(FlopConvention convention);

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  LayerCost total;
  FlopConvention convention = FlopConvention::macs_plus_bias;
};

/// Published figures for the default 64x64x3 / 10-class configuration.
struct PublishedCost {
  static constexpr std::uint64_t params = 100'117;
  static constexpr std::uint64_t flops = 45'913'344;
  static constexpr std::uint64_t macs = 22'807'808;
};

/// Per-layer closed-form costs. Batch-norm running statistics count as
/// parameters unless `trainable_only`.
CostReport analyze(const ModelConfig& config, FlopConvention convention = FlopConvention::macs_plus_bias,
                   bool trainable_only = false);

std::uint64_t count_params(const ModelConfig& config, bool trainable_only = false);
std::uint64_t count_macs(const ModelConfig& config);
std::uint64_t count_flops(const ModelConfig& config, FlopConvention convention = FlopConvention::macs_plus_bias);

/// Human-readable table, with the published figures alongside when the
/// config matches the published setting.
std::string format_report(const ModelConfig& config, const CostReport& report);
std::string report_csv(const CostReport& report);

}  // namespace scenemixer
