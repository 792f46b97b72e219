#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scenemixer/layers.hpp"
#include "scenemixer/tensor.hpp"

namespace scenemixer {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class MergeMode { sum };

struct ModelConfig {
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t input_c = 3;
  std::size_t patch = 4;
  std::size_t embed_dim = 128;
  std::size_t depth = 4;
  std::vector<std::size_t> kernels{3, 5};
  MergeMode merge = MergeMode::sum;
  std::size_t num_classes = 10;
  double bn_eps = 1e-3;
  double bn_momentum = 0.99;
  bool residual = false;
  /// Optional label names, travelling with checkpoints so `predict` can
  /// print a class name. Empty or exactly num_classes entries.
  std::vector<std::string> class_names;

  std::size_t grid_h() const { return input_h / patch; }
  std::size_t grid_w() const { return input_w / patch; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// 64x64x3 input, 10 classes.
ModelConfig eurosat_config();
/// 64x64x3 input, 30 classes.
ModelConfig aid_config();

/// Flat `key=value` text; blank lines and `#` comments are ignored, unknown
/// keys are rejected, omitted keys keep their defaults.
ModelConfig parse_config(const std::string& text);
std::string format_config(const ModelConfig& config);
ModelConfig load_config_file(const std::filesystem::path& path);

template <typename T>
struct MixerBlock {
  std::vector<ConvParams<T>> depthwise;  // one per kernel size
  ConvParams<T> pointwise;
  BatchNormState<T> norm;
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
struct SceneMixerModel {
  ModelConfig config;
  ConvParams<T> embed;
  std::vector<MixerBlock<T>> blocks;
  ConvParams<T> head;

  /// Trainable tensors in a fixed order: embed, blocks (depthwise branches,
  /// pointwise, gamma, beta), head.
  std::vector<NamedTensor<T>> parameters();
  /// Batch-norm running statistics.
  std::vector<NamedTensor<T>> buffers();
  /// parameters() followed by buffers().
  std::vector<NamedTensor<T>> state();

  std::size_t scalar_count() const;

  template <typename U>
  SceneMixerModel<U> cast() const;
};

using Model = SceneMixerModel<float>;

/// Glorot-uniform conv/dense weights from a seeded generator, zero biases,
/// identity batch norm.
template <typename T>
SceneMixerModel<T> build(const ModelConfig& config, std::uint64_t seed);

/// Layer caches recorded by a forward pass that keeps its trace.
template <typename T>
struct BlockTrace {
  BasicTensor<T> input;
  std::vector<LayerCache<T>> depthwise;
  LayerCache<T> pointwise;
  LayerCache<T> gelu;
  LayerCache<T> norm;
};

template <typename T>
struct ForwardTrace {
  LayerCache<T> embed;
  std::vector<BlockTrace<T>> blocks;
  LayerCache<T> pool;
  LayerCache<T> head;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;
  BasicTensor<T> probs;
  ForwardTrace<T> trace;  // filled when requested
};

/// Train mode normalizes with batch statistics and updates running stats.
template <typename T>
ForwardResult<T> forward(SceneMixerModel<T>& model, const BasicTensor<T>& x, Mode mode, bool keep_trace = false);

/// Infer-mode class probabilities; never mutates the model.
template <typename T>
BasicTensor<T> infer(const SceneMixerModel<T>& model, const BasicTensor<T>& x);

/// Gradients of every trainable tensor, aligned with model.parameters(),
/// given the loss gradient with respect to the pre-softmax logits.
template <typename T>
std::vector<BasicTensor<T>> backward(const SceneMixerModel<T>& model, ForwardTrace<T>& trace,
                                     const BasicTensor<T>& grad_logits);

/// Argmax of infer-mode probabilities, ties to the lowest class index.
template <typename T>
std::vector<std::size_t> predict(const SceneMixerModel<T>& model, const BasicTensor<T>& x);

template <typename T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& probs);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::string& bytes);

}  // namespace scenemixer
