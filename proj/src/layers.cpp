#include "scenemixer/layers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>

#include "scenemixer/parallel.hpp"

namespace scenemixer {

namespace {

std::atomic<int> g_counting{0};
std::atomic<std::uint64_t> g_macs{0};
std::atomic<std::uint64_t> g_bias_adds{0};

void record_ops(std::uint64_t macs, std::uint64_t bias_adds) {
  if (g_counting.load(std::memory_order_relaxed) == 0) return;
  g_macs.fetch_add(macs, std::memory_order_relaxed);
  g_bias_adds.fetch_add(bias_adds, std::memory_order_relaxed);
}

template <typename T>
inline void axpy(std::size_t n, T a, const T* __restrict x, T* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// out[r, :] = init + a[r, :] . b for `rows` rows; b is (k, n) row-major.
/// Returns the number of multiplies executed.
template <typename T>
std::uint64_t matmul_rows(const T* a, std::size_t rows, std::size_t k, const T* b, std::size_t n, const T* init,
                          T* out) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    const T* a0 = a + (r + 0) * k;
    const T* a1 = a + (r + 1) * k;
    const T* a2 = a + (r + 2) * k;
    const T* a3 = a + (r + 3) * k;
    T* __restrict o0 = out + (r + 0) * n;
    T* __restrict o1 = out + (r + 1) * n;
    T* __restrict o2 = out + (r + 2) * n;
    T* __restrict o3 = out + (r + 3) * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T v = init ? init[j] : T{0};
      o0[j] = v;
      o1[j] = v;
      o2[j] = v;
      o3[j] = v;
    }
    for (std::size_t i = 0; i < k; ++i) {
      const T* __restrict bi = b + i * n;
      const T s0 = a0[i], s1 = a1[i], s2 = a2[i], s3 = a3[i];
      for (std::size_t j = 0; j < n; ++j) {
        const T w = bi[j];
        o0[j] += s0 * w;
        o1[j] += s1 * w;
        o2[j] += s2 * w;
        o3[j] += s3 * w;
      }
    }
  }
  for (; r < rows; ++r) {
    T* o = out + r * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = init ? init[j] : T{0};
    for (std::size_t i = 0; i < k; ++i) axpy(n, a[r * k + i], b + i * n, o);
  }
  return static_cast<std::uint64_t>(rows) * k * n;
}

/// acc += a^T . g, with a (rows, k) and g (rows, n); acc is (k, n).
template <typename T>
void accumulate_outer(const T* a, const T* g, std::size_t rows, std::size_t k, std::size_t n, T* acc) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    const T* g0 = g + (r + 0) * n;
    const T* g1 = g + (r + 1) * n;
    const T* g2 = g + (r + 2) * n;
    const T* g3 = g + (r + 3) * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T s0 = a[(r + 0) * k + i], s1 = a[(r + 1) * k + i], s2 = a[(r + 2) * k + i], s3 = a[(r + 3) * k + i];
      T* __restrict row = acc + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s0 * g0[j] + s1 * g1[j] + s2 * g2[j] + s3 * g3[j];
    }
  }
  for (; r < rows; ++r) {
    for (std::size_t i = 0; i < k; ++i) axpy(n, a[r * k + i], g + r * n, acc + i * n);
  }
}

template <typename T>
std::vector<T> transpose(const BasicTensor<T>& w) {
  const std::size_t rows = w.dim(0);
  const std::size_t cols = w.size() / rows;
  std::vector<T> t(w.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = w[i * cols + j];
  }
  return t;
}

/// Sums per-sample partial buffers in sample order.
template <typename T>
BasicTensor<T> sum_partials(const std::vector<T>& partials, std::size_t samples, const Shape& shape) {
  BasicTensor<T> out(shape);
  const std::size_t len = out.size();
  for (std::size_t s = 0; s < samples; ++s) {
    const T* src = partials.data() + s * len;
    T* dst = out.ptr();
    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
  }
  return out;
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " + s.str());
  }
}

template <typename T>
void check_bias(const ConvParams<T>& p, std::size_t channels, const char* what) {
  if (p.bias.rank() != 1 || p.bias.size() != channels) {
    throw ShapeError(std::string(what) + " bias " + p.bias.shape().str() + " does not match " +
                     std::to_string(channels) + " output channels");
  }
}

template <typename T>
void begin_cache(LayerCache<T>* cache, LayerKind kind, Mode mode = Mode::infer) {
  if (!cache) return;
  *cache = LayerCache<T>{};
  cache->kind = kind;
  cache->mode = mode;
}

template <typename T>
void finish_cache(LayerCache<T>* cache, const BasicTensor<T>& out) {
  if (!cache) return;
  cache->output_shape = out.shape();
  cache->filled = true;
}

/// Zero-padded copy of one (h, w, C) sample with `r` pixels on every side.
template <typename T>
void pad_sample(const T* src, std::size_t h, std::size_t w, std::size_t c, std::size_t r, std::vector<T>& dst) {
  const std::size_t pw = w + 2 * r;
  dst.assign((h + 2 * r) * pw * c, T{0});
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(src + y * w * c, w * c, dst.data() + ((y + r) * pw + r) * c);
  }
}

template <typename T>
T cdf(T x) {
  return T(0.5) * std::erfc(-x * T(std::numbers::sqrt2 / 2));
}

template <typename T>
T pdf(T x) {
  return T(std::numbers::inv_sqrtpi / std::numbers::sqrt2) * std::exp(T(-0.5) * x * x);
}

// ---------------------------------------------------------------------------
// Backward kernels

template <typename T>
LayerGrads<T> patch_embed_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& x = cache.input;
  const BasicTensor<T>& w = cache.weights;
  const std::size_t n = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  const std::size_t p = cache.window, d = w.dim(3);
  const std::size_t gh = H / p, gw = W / p, k = p * p * cin;
  const std::vector<T> wt = transpose(w.reshaped(Shape{k, d}));

  BasicTensor<T> dx(x.shape());
  std::vector<T> dw_part(n * k * d, T{0});
  std::vector<T> db_part(n * d, T{0});
  parallel_for(n, [&](std::size_t s) {
    std::vector<T> patch(k);
    std::vector<T> dpatch(k);
    T* dw = dw_part.data() + s * k * d;
    T* db = db_part.data() + s * d;
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        const T* g = up.ptr() + ((s * gh + gy) * gw + gx) * d;
        for (std::size_t py = 0; py < p; ++py) {
          std::copy_n(x.ptr() + ((s * H + gy * p + py) * W + gx * p) * cin, p * cin, patch.data() + py * p * cin);
        }
        for (std::size_t j = 0; j < d; ++j) db[j] += g[j];
        accumulate_outer(patch.data(), g, 1, k, d, dw);
        std::fill(dpatch.begin(), dpatch.end(), T{0});
        for (std::size_t j = 0; j < d; ++j) axpy(k, g[j], wt.data() + j * k, dpatch.data());
        for (std::size_t py = 0; py < p; ++py) {
          std::copy_n(dpatch.data() + py * p * cin, p * cin, dx.ptr() + ((s * H + gy * p + py) * W + gx * p) * cin);
        }
      }
    }
  });
  return {std::move(dx), {sum_partials(dw_part, n, w.shape()), sum_partials(db_part, n, Shape{d})}};
}

template <typename T>
LayerGrads<T> depthwise_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& x = cache.input;
  const BasicTensor<T>& w = cache.weights;
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  const std::size_t k = cache.window, r = k / 2, pw = wd + 2 * r;

  BasicTensor<T> dx(x.shape());
  std::vector<T> dw_part(n * k * k * c, T{0});
  std::vector<T> db_part(n * c, T{0});
  parallel_for(n, [&](std::size_t s) {
    std::vector<T> pad;
    pad_sample(x.ptr() + s * h * wd * c, h, wd, c, r, pad);
    std::vector<T> dpad(pad.size(), T{0});
    T* dw = dw_part.data() + s * k * k * c;
    T* db = db_part.data() + s * c;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < wd; ++xx) {
        const T* __restrict g = up.ptr() + ((s * h + y) * wd + xx) * c;
        for (std::size_t ch = 0; ch < c; ++ch) db[ch] += g[ch];
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dxx = 0; dxx < k; ++dxx) {
            const std::size_t off = ((y + dy) * pw + xx + dxx) * c;
            const T* __restrict src = pad.data() + off;
            T* __restrict dsrc = dpad.data() + off;
            const T* __restrict wk = w.ptr() + (dy * k + dxx) * c;
            T* __restrict dwk = dw + (dy * k + dxx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              dwk[ch] += g[ch] * src[ch];
              dsrc[ch] += wk[ch] * g[ch];
            }
          }
        }
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(dpad.data() + ((y + r) * pw + r) * c, wd * c, dx.ptr() + (s * h + y) * wd * c);
    }
  });
  return {std::move(dx), {sum_partials(dw_part, n, w.shape()), sum_partials(db_part, n, Shape{c})}};
}

template <typename T>
LayerGrads<T> pointwise_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& x = cache.input;
  const BasicTensor<T>& w = cache.weights;
  const std::size_t n = x.dim(0), rows = x.dim(1) * x.dim(2), cin = w.dim(0), cout = w.dim(1);
  const std::vector<T> wt = transpose(w);

  BasicTensor<T> dx(x.shape());
  std::vector<T> dw_part(n * cin * cout, T{0});
  std::vector<T> db_part(n * cout, T{0});
  parallel_for(n, [&](std::size_t s) {
    const T* g = up.ptr() + s * rows * cout;
    const T* xs = x.ptr() + s * rows * cin;
    matmul_rows<T>(g, rows, cout, wt.data(), cin, nullptr, dx.ptr() + s * rows * cin);
    accumulate_outer(xs, g, rows, cin, cout, dw_part.data() + s * cin * cout);
    T* db = db_part.data() + s * cout;
    for (std::size_t q = 0; q < rows; ++q) {
      for (std::size_t j = 0; j < cout; ++j) db[j] += g[q * cout + j];
    }
  });
  return {std::move(dx), {sum_partials(dw_part, n, w.shape()), sum_partials(db_part, n, Shape{cout})}};
}

template <typename T>
LayerGrads<T> dense_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& x = cache.input;
  const BasicTensor<T>& w = cache.weights;
  const std::size_t n = x.dim(0), f = w.dim(0), k = w.dim(1);
  const std::vector<T> wt = transpose(w);

  BasicTensor<T> dx(x.shape());
  matmul_rows<T>(up.ptr(), n, k, wt.data(), f, nullptr, dx.ptr());
  BasicTensor<T> dw(w.shape());
  accumulate_outer(x.ptr(), up.ptr(), n, f, k, dw.ptr());
  BasicTensor<T> db(Shape{k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) db[j] += up[i * k + j];
  }
  return {std::move(dx), {std::move(dw), std::move(db)}};
}

template <typename T>
LayerGrads<T> gelu_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& x = cache.input;
  BasicTensor<T> dx(x.shape());
  const std::size_t chunks = x.dim(0);
  const std::size_t len = x.size() / chunks;
  parallel_for(chunks, [&](std::size_t s) {
    for (std::size_t i = s * len; i < (s + 1) * len; ++i) {
      const T v = x[i];
      dx[i] = up[i] * (cdf(v) + v * pdf(v));
    }
  });
  return {std::move(dx), {}};
}

template <typename T>
LayerGrads<T> batch_norm_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& xhat = cache.normalized;
  const BasicTensor<T>& gamma = cache.weights;
  const std::size_t c = gamma.size();
  const std::size_t m = xhat.size() / c;

  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t q = 0; q < m; ++q) {
    const T* g = up.ptr() + q * c;
    const T* xh = xhat.ptr() + q * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      sum_dy[ch] += g[ch];
      sum_dy_xhat[ch] += static_cast<double>(g[ch]) * xh[ch];
    }
  }
  BasicTensor<T> dgamma(Shape{c}), dbeta(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    dgamma[ch] = static_cast<T>(sum_dy_xhat[ch]);
    dbeta[ch] = static_cast<T>(sum_dy[ch]);
  }

  BasicTensor<T> dx(xhat.shape());
  if (cache.mode == Mode::train) {
    std::vector<T> scale(c), mean_dy(c), mean_dy_xhat(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      scale[ch] = gamma[ch] * cache.inv_std[ch];
      mean_dy[ch] = static_cast<T>(sum_dy[ch] / static_cast<double>(m));
      mean_dy_xhat[ch] = static_cast<T>(sum_dy_xhat[ch] / static_cast<double>(m));
    }
    for (std::size_t q = 0; q < m; ++q) {
      const T* g = up.ptr() + q * c;
      const T* xh = xhat.ptr() + q * c;
      T* o = dx.ptr() + q * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] = scale[ch] * (g[ch] - mean_dy[ch] - xh[ch] * mean_dy_xhat[ch]);
    }
  } else {
    for (std::size_t q = 0; q < m; ++q) {
      for (std::size_t ch = 0; ch < c; ++ch) dx[q * c + ch] = up[q * c + ch] * gamma[ch] * cache.inv_std[ch];
    }
  }
  return {std::move(dx), {std::move(dgamma), std::move(dbeta)}};
}

template <typename T>
LayerGrads<T> gap_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const Shape& s = cache.input.shape();
  const std::size_t n = s[0], positions = s[1] * s[2], c = s[3];
  const T inv = T(1) / static_cast<T>(positions);
  BasicTensor<T> dx(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < positions; ++q) {
      for (std::size_t ch = 0; ch < c; ++ch) dx[(i * positions + q) * c + ch] = up[i * c + ch] * inv;
    }
  }
  return {std::move(dx), {}};
}

template <typename T>
LayerGrads<T> softmax_backward(const LayerCache<T>& cache, const BasicTensor<T>& up) {
  const BasicTensor<T>& probs = cache.output;
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  BasicTensor<T> dx(probs.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(probs[i * k + j]) * up[i * k + j];
    for (std::size_t j = 0; j < k; ++j) {
      dx[i * k + j] = static_cast<T>(probs[i * k + j] * (up[i * k + j] - dot));
    }
  }
  return {std::move(dx), {}};
}

}  // namespace

std::string_view layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::patch_embed: return "patch_embed";
    case LayerKind::depthwise_conv: return "depthwise_conv";
    case LayerKind::pointwise_conv: return "pointwise_conv";
    case LayerKind::gelu: return "gelu";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

double standard_normal_cdf(double x) { return cdf(x); }

ScopedOpCounter::ScopedOpCounter() {
  g_macs.store(0);
  g_bias_adds.store(0);
  g_counting.fetch_add(1);
}

ScopedOpCounter::~ScopedOpCounter() { g_counting.fetch_sub(1); }

OpCounts ScopedOpCounter::counts() const { return {g_macs.load(), g_bias_adds.load()}; }

template <typename T>
BatchNormState<T> BatchNormState<T>::fresh(std::size_t channels, double momentum, double epsilon) {
  BatchNormState s;
  s.gamma = BasicTensor<T>(Shape{channels}, T{1});
  s.beta = BasicTensor<T>(Shape{channels}, T{0});
  s.running_mean = BasicTensor<T>(Shape{channels}, T{0});
  s.running_var = BasicTensor<T>(Shape{channels}, T{1});
  s.momentum = momentum;
  s.epsilon = epsilon;
  s.validate();
  return s;
}

template <typename T>
void BatchNormState<T>::validate() const {
  const std::size_t c = gamma.size();
  if (c == 0 || beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch-norm vectors must share one channel count");
  }
  if (!(epsilon > 0.0)) throw Error("batch-norm epsilon must be positive");
  if (!(momentum > 0.0 && momentum < 1.0)) throw Error("batch-norm momentum must lie in (0, 1)");
  for (T v : running_var.data()) {
    if (v < T{0}) throw Error("batch-norm running variance must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
BasicTensor<T> patch_embed(const BasicTensor<T>& x, const ConvParams<T>& p, std::size_t patch, LayerCache<T>* cache) {
  require_rank(x.shape(), 4, "patch_embed input");
  require_rank(p.weights.shape(), 4, "patch_embed weights");
  const std::size_t n = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ShapeError("patch_embed: input " + x.shape().str() + " is not divisible into " + std::to_string(patch) +
                     "x" + std::to_string(patch) + " patches");
  }
  if (p.weights.dim(0) != patch || p.weights.dim(1) != patch || p.weights.dim(2) != cin) {
    throw ShapeError("patch_embed weights " + p.weights.shape().str() + " do not match patch " +
                     std::to_string(patch) + " and input " + x.shape().str());
  }
  const std::size_t d = p.weights.dim(3);
  check_bias(p, d, "patch_embed");
  const std::size_t gh = H / patch, gw = W / patch, k = patch * patch * cin;

  BasicTensor<T> out(Shape{n, gh, gw, d});
  parallel_for(n, [&](std::size_t s) {
    std::vector<T> buf(k);
    std::uint64_t macs = 0;
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        for (std::size_t py = 0; py < patch; ++py) {
          std::copy_n(x.ptr() + ((s * H + gy * patch + py) * W + gx * patch) * cin, patch * cin,
                      buf.data() + py * patch * cin);
        }
        macs += matmul_rows<T>(buf.data(), 1, k, p.weights.ptr(), d, p.bias.ptr(),
                               out.ptr() + ((s * gh + gy) * gw + gx) * d);
      }
    }
    record_ops(macs, gh * gw * d);
  });

  begin_cache(cache, LayerKind::patch_embed);
  if (cache) {
    cache->window = patch;
    cache->input = x;
    cache->weights = p.weights;
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> depthwise_conv(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache) {
  require_rank(x.shape(), 4, "depthwise_conv input");
  require_rank(p.weights.shape(), 3, "depthwise_conv weights");
  const std::size_t k = p.weights.dim(0);
  if (p.weights.dim(1) != k) throw ShapeError("depthwise_conv kernel must be square, got " + p.weights.shape().str());
  if (k % 2 == 0) throw ShapeError("depthwise_conv kernel size must be odd, got " + std::to_string(k));
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (p.weights.dim(2) != c) {
    throw ShapeError("depthwise_conv weights " + p.weights.shape().str() + " do not match input channels of " +
                     x.shape().str());
  }
  check_bias(p, c, "depthwise_conv");
  const std::size_t r = k / 2, pw = w + 2 * r;

  BasicTensor<T> out(x.shape());
  parallel_for(n, [&](std::size_t s) {
    std::vector<T> pad;
    pad_sample(x.ptr() + s * h * w * c, h, w, c, r, pad);
    std::uint64_t macs = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        T* __restrict o = out.ptr() + ((s * h + y) * w + xx) * c;
        std::copy_n(p.bias.ptr(), c, o);
        // Every tap is evaluated, including those landing in the zero border.
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const T* __restrict src = pad.data() + ((y + dy) * pw + xx + dx) * c;
            const T* __restrict wk = p.weights.ptr() + (dy * k + dx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wk[ch] * src[ch];
            macs += c;
          }
        }
      }
    }
    record_ops(macs, h * w * c);
  });

  begin_cache(cache, LayerKind::depthwise_conv);
  if (cache) {
    cache->window = k;
    cache->input = x;
    cache->weights = p.weights;
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> pointwise_conv(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache) {
  require_rank(x.shape(), 4, "pointwise_conv input");
  require_rank(p.weights.shape(), 2, "pointwise_conv weights");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  if (p.weights.dim(0) != cin) {
    throw ShapeError("pointwise_conv weights " + p.weights.shape().str() + " do not match input channels of " +
                     x.shape().str());
  }
  const std::size_t cout = p.weights.dim(1);
  check_bias(p, cout, "pointwise_conv");
  const std::size_t rows = h * w;

  BasicTensor<T> out(Shape{n, h, w, cout});
  parallel_for(n, [&](std::size_t s) {
    const std::uint64_t macs = matmul_rows<T>(x.ptr() + s * rows * cin, rows, cin, p.weights.ptr(), cout,
                                              p.bias.ptr(), out.ptr() + s * rows * cout);
    record_ops(macs, rows * cout);
  });

  begin_cache(cache, LayerKind::pointwise_conv);
  if (cache) {
    cache->input = x;
    cache->weights = p.weights;
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x, LayerCache<T>* cache) {
  BasicTensor<T> out(x.shape());
  const std::size_t chunks = x.dim(0);
  const std::size_t len = x.size() / chunks;
  parallel_for(chunks, [&](std::size_t s) {
    for (std::size_t i = s * len; i < (s + 1) * len; ++i) out[i] = x[i] * cdf(x[i]);
  });
  begin_cache(cache, LayerKind::gelu);
  if (cache) cache->input = x;
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, BatchNormState<T>& s, Mode mode, LayerCache<T>* cache) {
  if (mode == Mode::infer) return batch_norm_infer(x, s, cache);

  const std::size_t c = s.channels();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != c) {
    throw ShapeError("batch_norm input " + x.shape().str() + " does not end in " + std::to_string(c) + " channels");
  }
  const std::size_t m = x.size() / c;
  if (m < 2) throw Error("batch_norm in train mode needs at least two values per channel, got " + std::to_string(m));

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[q * c + ch];
  }
  for (auto& v : mean) v /= static_cast<double>(m);
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = x[q * c + ch] - mean[ch];
      var[ch] += d * d;
    }
  }
  for (auto& v : var) v /= static_cast<double>(m);

  std::vector<T> inv_std(c), mean_t(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] + s.epsilon));
    mean_t[ch] = static_cast<T>(mean[ch]);
  }

  BasicTensor<T> xhat(x.shape());
  BasicTensor<T> out(x.shape());
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = q * c + ch;
      xhat[i] = (x[i] - mean_t[ch]) * inv_std[ch];
      out[i] = s.gamma[ch] * xhat[i] + s.beta[ch];
    }
  }

  const T keep = static_cast<T>(s.momentum);
  const T take = static_cast<T>(1.0 - s.momentum);
  for (std::size_t ch = 0; ch < c; ++ch) {
    s.running_mean[ch] = keep * s.running_mean[ch] + take * static_cast<T>(mean[ch]);
    s.running_var[ch] = keep * s.running_var[ch] + take * static_cast<T>(var[ch]);
  }

  begin_cache(cache, LayerKind::batch_norm, Mode::train);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->weights = s.gamma;
    cache->inv_std = std::move(inv_std);
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& x, const BatchNormState<T>& s, LayerCache<T>* cache) {
  const std::size_t c = s.channels();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != c) {
    throw ShapeError("batch_norm input " + x.shape().str() + " does not end in " + std::to_string(c) + " channels");
  }
  const std::size_t m = x.size() / c;
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(s.running_var[ch]) + s.epsilon));
  }
  BasicTensor<T> xhat(x.shape());
  BasicTensor<T> out(x.shape());
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = q * c + ch;
      xhat[i] = (x[i] - s.running_mean[ch]) * inv_std[ch];
      out[i] = s.gamma[ch] * xhat[i] + s.beta[ch];
    }
  }
  begin_cache(cache, LayerKind::batch_norm, Mode::infer);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->weights = s.gamma;
    cache->inv_std = std::move(inv_std);
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x, LayerCache<T>* cache) {
  require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), positions = x.dim(1) * x.dim(2), c = x.dim(3);
  BasicTensor<T> out(Shape{n, c});
  std::vector<double> acc(c);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t q = 0; q < positions; ++q) {
      const T* row = x.ptr() + (i * positions + q) * c;
      for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += static_cast<double>(row[ch]);
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = static_cast<T>(acc[ch] / static_cast<double>(positions));
  }
  begin_cache(cache, LayerKind::global_avg_pool);
  if (cache) cache->input = BasicTensor<T>(x.shape());  // only the shape is needed
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const ConvParams<T>& p, LayerCache<T>* cache) {
  require_rank(x.shape(), 2, "dense input");
  require_rank(p.weights.shape(), 2, "dense weights");
  const std::size_t n = x.dim(0), f = x.dim(1);
  if (p.weights.dim(0) != f) {
    throw ShapeError("dense weights " + p.weights.shape().str() + " do not match input " + x.shape().str());
  }
  const std::size_t k = p.weights.dim(1);
  check_bias(p, k, "dense");
  BasicTensor<T> out(Shape{n, k});
  const std::uint64_t macs = matmul_rows<T>(x.ptr(), n, f, p.weights.ptr(), k, p.bias.ptr(), out.ptr());
  record_ops(macs, n * k);
  begin_cache(cache, LayerKind::dense);
  if (cache) {
    cache->input = x;
    cache->weights = p.weights;
  }
  finish_cache(cache, out);
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, LayerCache<T>* cache) {
  require_rank(x.shape(), 2, "softmax input");
  const std::size_t n = x.dim(0), k = x.dim(1);
  BasicTensor<T> out(x.shape());
  std::vector<double> e(k);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.ptr() + i * k;
    const T top = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - static_cast<double>(top));
      total += e[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = static_cast<T>(e[j] / total);
  }
  begin_cache(cache, LayerKind::softmax);
  if (cache) cache->output = out;
  finish_cache(cache, out);
  return out;
}

template <typename T>
LayerGrads<T> layer_backward(LayerCache<T>& cache, const BasicTensor<T>& upstream) {
  if (!cache.filled) throw Error("layer_backward: cache was never filled by a forward pass");
  if (cache.consumed) throw Error(std::string("layer_backward: ") + std::string(layer_name(cache.kind)) +
                                  " cache was already consumed by an earlier backward");
  if (upstream.shape() != cache.output_shape) {
    throw ShapeError(std::string(layer_name(cache.kind)) + " backward: upstream " + upstream.shape().str() +
                     " does not match forward output " + cache.output_shape.str());
  }
  cache.consumed = true;
  switch (cache.kind) {
    case LayerKind::patch_embed: return patch_embed_backward(cache, upstream);
    case LayerKind::depthwise_conv: return depthwise_backward(cache, upstream);
    case LayerKind::pointwise_conv: return pointwise_backward(cache, upstream);
    case LayerKind::gelu: return gelu_backward(cache, upstream);
    case LayerKind::batch_norm: return batch_norm_backward(cache, upstream);
    case LayerKind::global_avg_pool: return gap_backward(cache, upstream);
    case LayerKind::dense: return dense_backward(cache, upstream);
    case LayerKind::softmax: return softmax_backward(cache, upstream);
  }
  throw Error("layer_backward: unknown layer kind");
}

#define SCENEMIXER_INSTANTIATE_LAYERS(T)                                                                         \
  template struct BatchNormState<T>;                                                                             \
  template BasicTensor<T> patch_embed(const BasicTensor<T>&, const ConvParams<T>&, std::size_t, LayerCache<T>*); \
  template BasicTensor<T> depthwise_conv(const BasicTensor<T>&, const ConvParams<T>&, LayerCache<T>*);           \
  template BasicTensor<T> pointwise_conv(const BasicTensor<T>&, const ConvParams<T>&, LayerCache<T>*);           \
  template BasicTensor<T> gelu(const BasicTensor<T>&, LayerCache<T>*);                                           \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, BatchNormState<T>&, Mode, LayerCache<T>*);           \
  template BasicTensor<T> batch_norm_infer(const BasicTensor<T>&, const BatchNormState<T>&, LayerCache<T>*);     \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&, LayerCache<T>*);                                \
  template BasicTensor<T> dense(const BasicTensor<T>&, const ConvParams<T>&, LayerCache<T>*);                    \
  template BasicTensor<T> softmax(const BasicTensor<T>&, LayerCache<T>*);                                        \
  template LayerGrads<T> layer_backward(LayerCache<T>&, const BasicTensor<T>&);

SCENEMIXER_INSTANTIATE_LAYERS(float)
SCENEMIXER_INSTANTIATE_LAYERS(double)

}  // namespace scenemixer
