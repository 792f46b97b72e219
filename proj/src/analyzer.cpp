#include "scenemixer/analyzer.hpp"

#include <fmt/format.h>

namespace scenemixer {

namespace {

/// 22807808 -> "22,807,808"
std::string grouped(std::uint64_t v) {
  std::string digits = std::to_string(v);
  for (std::size_t i = digits.size(); i > 3; i -= 3) digits.insert(i - 3, ",");
  return digits;
}

}  // namespace

std::string convention_text(FlopConvention convention) {
  switch (convention) {
    case FlopConvention::macs_plus_bias:
      return "FLOPs = 2*MACs + bias additions (one per conv/dense output element); MACs exclude biases, "
             "batch norm, GELU, branch merge, pooling and softmax";
    case FlopConvention::macs_only:
      return "FLOPs = 2*MACs (bias additions not counted); MACs exclude biases, batch norm, GELU, branch merge, "
             "pooling and softmax";
  }
  return "";
}

CostReport analyze(const ModelConfig& config, FlopConvention convention, bool trainable_only) {
  config.validate();
  const std::uint64_t d = config.embed_dim;
  const std::uint64_t cells = static_cast<std::uint64_t>(config.grid_h()) * config.grid_w();
  const std::uint64_t p2 = static_cast<std::uint64_t>(config.patch) * config.patch;
  const bool with_bias = convention == FlopConvention::macs_plus_bias;

  CostReport report;
  report.convention = convention;
  auto push = [&](std::string name, std::uint64_t params, std::uint64_t macs, std::uint64_t bias_adds) {
    report.layers.push_back({std::move(name), params, macs, 2 * macs + (with_bias ? bias_adds : 0)});
  };

  push("patch_embed", p2 * config.input_c * d + d, cells * d * p2 * config.input_c, cells * d);
  for (std::size_t b = 0; b < config.depth; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    for (std::size_t k : config.kernels) {
      const std::uint64_t k2 = static_cast<std::uint64_t>(k) * k;
      push(prefix + "dw" + std::to_string(k), k2 * d + d, cells * d * k2, cells * d);
    }
    push(prefix + "pw", d * d + d, cells * d * d, cells * d);
    push(prefix + "bn", trainable_only ? 2 * d : 4 * d, 0, 0);
  }
  const std::uint64_t classes = config.num_classes;
  push("head", d * classes + classes, d * classes, classes);

  report.total.name = "total";
  for (const auto& l : report.layers) {
    report.total.params += l.params;
    report.total.macs += l.macs;
    report.total.flops += l.flops;
  }
  return report;
}

std::uint64_t count_params(const ModelConfig& config, bool trainable_only) {
  return analyze(config, FlopConvention::macs_plus_bias, trainable_only).total.params;
}

std::uint64_t count_macs(const ModelConfig& config) { return analyze(config).total.macs; }

std::uint64_t count_flops(const ModelConfig& config, FlopConvention convention) {
  return analyze(config, convention).total.flops;
}

std::string format_report(const ModelConfig& config, const CostReport& report) {
  std::string out = fmt::format("{:<16} {:>12} {:>14} {:>14}\n", "layer", "params", "MACs", "FLOPs");
  for (const auto& l : report.layers) {
    out += fmt::format("{:<16} {:>12} {:>14} {:>14}\n", l.name, grouped(l.params), grouped(l.macs),
                       grouped(l.flops));
  }
  out += fmt::format("{:<16} {:>12} {:>14} {:>14}\n", "total", grouped(report.total.params),
                     grouped(report.total.macs), grouped(report.total.flops));
  out += "convention: " + convention_text(report.convention) + "\n";

  ModelConfig published = eurosat_config();
  published.class_names = config.class_names;
  published.residual = config.residual;
  if (config == published) {
    auto delta = [](std::uint64_t ours, std::uint64_t theirs) {
      return 100.0 * (static_cast<double>(ours) - static_cast<double>(theirs)) / static_cast<double>(theirs);
    };
    out += "published reference (64x64x3 input, 10 classes):\n";
    out += fmt::format("  params {:>12}  (ours {:+.2f}%)\n", grouped(PublishedCost::params),
                       delta(report.total.params, PublishedCost::params));
    out += fmt::format("  FLOPs  {:>12}  (ours {:+.2f}%)\n", grouped(PublishedCost::flops),
                       delta(report.total.flops, PublishedCost::flops));
    out += fmt::format("  MACs   {:>12}  (ours {:+.2f}%)\n", grouped(PublishedCost::macs),
                       delta(report.total.macs, PublishedCost::macs));
    out += "note: the published parameter total is not reproducible by any layout that also matches the "
           "published MAC count; the MAC count is matched exactly.\n";
  }
  return out;
}

std::string report_csv(const CostReport& report) {
  std::string out = "layer,params,macs,flops\n";
  for (const auto& l : report.layers) out += fmt::format("{},{},{},{}\n", l.name, l.params, l.macs, l.flops);
  out += fmt::format("total,{},{},{}\n", report.total.params, report.total.macs, report.total.flops);
  return out;
}

}  // namespace scenemixer
