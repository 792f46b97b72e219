#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "scenemixer/tensor.hpp"

namespace scenemixer {

enum class Mode { train, infer };

enum class LayerKind { patch_embed, depthwise_conv, pointwise_conv, gelu, batch_norm, global_avg_pool, dense, softmax };

std::string_view layer_name(LayerKind kind);

/// Weights and bias of a convolution or dense layer.
///   patch_embed:    weights (p, p, C_in, D)
///   depthwise_conv: weights (k, k, C)
///   pointwise_conv: weights (C_in, C_out)
///   dense:          weights (F, K)
template <typename T>
struct ConvParams {
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

template <typename T>
struct BatchNormState {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.99;
  double epsilon = 1e-3;

  static BatchNormState fresh(std::size_t channels, double momentum, double epsilon);
  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

/// Forward intermediates for exactly one backward call.
template <typename T>
struct LayerCache {
  LayerKind kind = LayerKind::dense;
  Mode mode = Mode::infer;
  std::size_t window = 0;       // patch size or kernel size
  BasicTensor<T> input;
  BasicTensor<T> output;        // softmax probabilities
  BasicTensor<T> normalized;    // batch-norm x-hat
  BasicTensor<T> weights;       // weights or gamma as seen by the forward
  std::vector<T> inv_std;
  Shape output_shape;
  bool filled = false;
  bool consumed = false;
};

template <typename T>
struct LayerGrads {
  BasicTensor<T> input;
  /// Conv/dense: {weights, bias}. Batch norm: {gamma, beta}. Others: empty.
  std::vector<BasicTensor<T>> params;
};

// ---------------------------------------------------------------------------
// Forward passes. A non-null cache is filled for the matching backward.

template <typename T>
BasicTensor<T> patch_embed(const BasicTensor<T>& x, const ConvParams<T>& p, std::size_t patch,
                           LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> depthwise_conv(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> pointwise_conv(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x, LayerCache<T>* cache = nullptr);

/// Train mode normalizes with biased batch statistics and folds them into
/// the running estimates: run <- momentum * run + (1 - momentum) * batch.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, BatchNormState<T>& s, Mode mode, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& x, const BatchNormState<T>& s, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, LayerCache<T>* cache = nullptr);

/// Exact reverse mode of whichever forward filled `cache`. Marks the cache
/// consumed; a second call with the same cache throws.
template <typename T>
LayerGrads<T> layer_backward(LayerCache<T>& cache, const BasicTensor<T>& upstream);

double standard_normal_cdf(double x);

// ---------------------------------------------------------------------------
// Operation counting. While a ScopedOpCounter is alive, every conv/dense
// forward adds the multiplies it executes and the bias additions it performs.

struct OpCounts {
  std::uint64_t macs = 0;
  std::uint64_t bias_adds = 0;
};

class ScopedOpCounter {
 public:
  ScopedOpCounter();
  ~ScopedOpCounter();
  ScopedOpCounter(const ScopedOpCounter&) = delete;
  ScopedOpCounter& operator=(const ScopedOpCounter&) = delete;

  OpCounts counts() const;
};

}  // namespace scenemixer
