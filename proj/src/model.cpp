#include "scenemixer/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <type_traits>

#include "scenemixer/rng.hpp"

namespace scenemixer {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (input_h == 0 || input_w == 0 || input_c == 0) throw ConfigError("input extents must be positive");
  if (patch == 0) throw ConfigError("patch size must be positive");
  if (input_h % patch != 0 || input_w % patch != 0) {
    throw ConfigError(fmt::format("input {}x{} is not divisible by patch size {}", input_h, input_w, patch));
  }
  if (embed_dim == 0) throw ConfigError("embed_dim must be at least 1");
  if (depth == 0) throw ConfigError("depth must be at least 1");
  if (kernels.empty()) throw ConfigError("at least one depthwise kernel size is required");
  for (std::size_t k : kernels) {
    if (k % 2 == 0) throw ConfigError(fmt::format("depthwise kernel size {} is not odd", k));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in (0, 1)");
  if (!class_names.empty() && class_names.size() != num_classes) {
    throw ConfigError(fmt::format("{} class names given for {} classes", class_names.size(), num_classes));
  }
  for (const auto& name : class_names) {
    if (name.empty() || name.find_first_of(",\n\r=") != std::string::npos) {
      throw ConfigError("class name '" + name + "' is empty or contains ',', '=' or a line break");
    }
  }
}

ModelConfig eurosat_config() { return ModelConfig{}; }

ModelConfig aid_config() {
  ModelConfig c;
  c.num_classes = 30;
  return c;
}

ModelConfig parse_config(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("config line {}: expected key=value", line_no));
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));

    if (key == "input") {
      const auto dims = split(value, 'x');
      if (dims.size() != 3) throw ConfigError("config key 'input': expected HxWxC, got '" + value + "'");
      c.input_h = parse_count(key, dims[0]);
      c.input_w = parse_count(key, dims[1]);
      c.input_c = parse_count(key, dims[2]);
    } else if (key == "patch") {
      c.patch = parse_count(key, value);
    } else if (key == "embed_dim") {
      c.embed_dim = parse_count(key, value);
    } else if (key == "depth") {
      c.depth = parse_count(key, value);
    } else if (key == "kernels") {
      c.kernels.clear();
      for (const auto& k : split(value, ',')) c.kernels.push_back(parse_count(key, k));
    } else if (key == "merge") {
      if (value != "sum") throw ConfigError("config key 'merge': only 'sum' is supported, got '" + value + "'");
      c.merge = MergeMode::sum;
    } else if (key == "num_classes") {
      c.num_classes = parse_count(key, value);
    } else if (key == "bn_eps") {
      c.bn_eps = parse_real(key, value);
    } else if (key == "bn_momentum") {
      c.bn_momentum = parse_real(key, value);
    } else if (key == "residual") {
      c.residual = parse_bool(key, value);
    } else if (key == "class_names") {
      c.class_names = split(value, ',');
    } else {
      throw ConfigError(fmt::format("config line {}: unknown key '{}'", line_no, key));
    }
  }
  c.validate();
  return c;
}

std::string format_config(const ModelConfig& c) {
  std::string kernels;
  for (std::size_t i = 0; i < c.kernels.size(); ++i) kernels += (i ? "," : "") + std::to_string(c.kernels[i]);
  std::string out = fmt::format(
      "input={}x{}x{}\npatch={}\nembed_dim={}\ndepth={}\nkernels={}\nmerge=sum\nnum_classes={}\nbn_eps={}\n"
      "bn_momentum={}\nresidual={}\n",
      c.input_h, c.input_w, c.input_c, c.patch, c.embed_dim, c.depth, kernels, c.num_classes, c.bn_eps, c.bn_momentum,
      c.residual ? "true" : "false");
  if (!c.class_names.empty()) {
    out += "class_names=";
    for (std::size_t i = 0; i < c.class_names.size(); ++i) out += (i ? "," : "") + c.class_names[i];
    out += "\n";
  }
  return out;
}

ModelConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

// ---------------------------------------------------------------------------
// Model structure

template <typename T>
std::vector<NamedTensor<T>> SceneMixerModel<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  out.push_back({"embed.weight", &embed.weights});
  out.push_back({"embed.bias", &embed.bias});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = blocks[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    for (std::size_t i = 0; i < blk.depthwise.size(); ++i) {
      const std::string dw = prefix + "dw" + std::to_string(blk.depthwise[i].weights.dim(0));
      out.push_back({dw + ".weight", &blk.depthwise[i].weights});
      out.push_back({dw + ".bias", &blk.depthwise[i].bias});
    }
    out.push_back({prefix + "pw.weight", &blk.pointwise.weights});
    out.push_back({prefix + "pw.bias", &blk.pointwise.bias});
    out.push_back({prefix + "bn.gamma", &blk.norm.gamma});
    out.push_back({prefix + "bn.beta", &blk.norm.beta});
  }
  out.push_back({"head.weight", &head.weights});
  out.push_back({"head.bias", &head.bias});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> SceneMixerModel<T>::buffers() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".bn.";
    out.push_back({prefix + "running_mean", &blocks[b].norm.running_mean});
    out.push_back({prefix + "running_var", &blocks[b].norm.running_var});
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> SceneMixerModel<T>::state() {
  auto out = parameters();
  auto buf = buffers();
  out.insert(out.end(), buf.begin(), buf.end());
  return out;
}

template <typename T>
std::size_t SceneMixerModel<T>::scalar_count() const {
  std::size_t total = 0;
  for (const auto& named : const_cast<SceneMixerModel*>(this)->state()) total += named.tensor->size();
  return total;
}

template <typename T>
template <typename U>
SceneMixerModel<U> SceneMixerModel<T>::cast() const {
  auto conv = [](const ConvParams<T>& p) { return ConvParams<U>{p.weights.template cast<U>(), p.bias.template cast<U>()}; };
  SceneMixerModel<U> out;
  out.config = config;
  out.embed = conv(embed);
  out.head = conv(head);
  for (const auto& blk : blocks) {
    MixerBlock<U> b;
    for (const auto& dw : blk.depthwise) b.depthwise.push_back(conv(dw));
    b.pointwise = conv(blk.pointwise);
    b.norm.gamma = blk.norm.gamma.template cast<U>();
    b.norm.beta = blk.norm.beta.template cast<U>();
    b.norm.running_mean = blk.norm.running_mean.template cast<U>();
    b.norm.running_var = blk.norm.running_var.template cast<U>();
    b.norm.momentum = blk.norm.momentum;
    b.norm.epsilon = blk.norm.epsilon;
    out.blocks.push_back(std::move(b));
  }
  return out;
}

namespace {

template <typename T>
BasicTensor<T> glorot(Rng& rng, Shape shape, double fan_in, double fan_out) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  BasicTensor<T> w(std::move(shape));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return w;
}

template <typename T>
SceneMixerModel<T> skeleton(const ModelConfig& c) {
  const std::size_t d = c.embed_dim;
  SceneMixerModel<T> m;
  m.config = c;
  m.embed = {BasicTensor<T>(Shape{c.patch, c.patch, c.input_c, d}), BasicTensor<T>(Shape{d})};
  for (std::size_t b = 0; b < c.depth; ++b) {
    MixerBlock<T> blk;
    for (std::size_t k : c.kernels) blk.depthwise.push_back({BasicTensor<T>(Shape{k, k, d}), BasicTensor<T>(Shape{d})});
    blk.pointwise = {BasicTensor<T>(Shape{d, d}), BasicTensor<T>(Shape{d})};
    blk.norm = BatchNormState<T>::fresh(d, c.bn_momentum, c.bn_eps);
    m.blocks.push_back(std::move(blk));
  }
  m.head = {BasicTensor<T>(Shape{d, c.num_classes}), BasicTensor<T>(Shape{c.num_classes})};
  return m;
}

}  // namespace

template <typename T>
SceneMixerModel<T> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SceneMixerModel<T> m = skeleton<T>(config);
  Rng rng(seed);
  const double p2 = static_cast<double>(config.patch * config.patch);
  const double d = static_cast<double>(config.embed_dim);
  m.embed.weights = glorot<T>(rng, m.embed.weights.shape(), p2 * config.input_c, p2 * d);
  for (auto& blk : m.blocks) {
    for (auto& dw : blk.depthwise) {
      // Each channel owns a k x k filter; fans are counted per channel.
      const double k2 = static_cast<double>(dw.weights.dim(0) * dw.weights.dim(0));
      dw.weights = glorot<T>(rng, dw.weights.shape(), k2, k2);
    }
    blk.pointwise.weights = glorot<T>(rng, blk.pointwise.weights.shape(), d, d);
  }
  m.head.weights = glorot<T>(rng, m.head.weights.shape(), d, static_cast<double>(config.num_classes));
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename ModelRef, typename T>
ForwardResult<T> forward_impl(ModelRef& model, const BasicTensor<T>& x, Mode mode, bool keep_trace) {
  const ModelConfig& c = model.config;
  if (x.rank() != 4 || x.dim(1) != c.input_h || x.dim(2) != c.input_w || x.dim(3) != c.input_c) {
    throw ShapeError(fmt::format("model expects input (n,{},{},{}), got {}", c.input_h, c.input_w, c.input_c,
                                 x.shape().str()));
  }
  ForwardResult<T> result;
  ForwardTrace<T>* trace = keep_trace ? &result.trace : nullptr;
  if (trace) trace->blocks.resize(model.blocks.size());

  BasicTensor<T> h = patch_embed(x, model.embed, c.patch, trace ? &trace->embed : nullptr);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& blk = model.blocks[b];
    BlockTrace<T>* bt = trace ? &trace->blocks[b] : nullptr;
    if (bt) bt->depthwise.resize(blk.depthwise.size());

    BasicTensor<T> merged;
    for (std::size_t i = 0; i < blk.depthwise.size(); ++i) {
      BasicTensor<T> branch = depthwise_conv(h, blk.depthwise[i], bt ? &bt->depthwise[i] : nullptr);
      merged = i == 0 ? std::move(branch) : add(merged, branch);
    }
    BasicTensor<T> mixed = pointwise_conv(merged, blk.pointwise, bt ? &bt->pointwise : nullptr);
    BasicTensor<T> act = gelu(mixed, bt ? &bt->gelu : nullptr);
    BasicTensor<T> out;
    if constexpr (std::is_const_v<ModelRef>) {
      out = batch_norm_infer(act, blk.norm, bt ? &bt->norm : nullptr);
    } else {
      out = batch_norm(act, blk.norm, mode, bt ? &bt->norm : nullptr);
    }
    if (c.residual) out = add(out, h);
    h = std::move(out);
  }
  BasicTensor<T> pooled = global_avg_pool(h, trace ? &trace->pool : nullptr);
  result.logits = dense(pooled, model.head, trace ? &trace->head : nullptr);
  result.probs = softmax(result.logits);
  return result;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(SceneMixerModel<T>& model, const BasicTensor<T>& x, Mode mode, bool keep_trace) {
  return forward_impl(model, x, mode, keep_trace);
}

template <typename T>
BasicTensor<T> infer(const SceneMixerModel<T>& model, const BasicTensor<T>& x) {
  return forward_impl(model, x, Mode::infer, false).probs;
}

template <typename T>
std::vector<BasicTensor<T>> backward(const SceneMixerModel<T>& model, ForwardTrace<T>& trace,
                                     const BasicTensor<T>& grad_logits) {
  if (trace.blocks.size() != model.blocks.size()) throw Error("backward: trace does not belong to this model");

  LayerGrads<T> head = layer_backward(trace.head, grad_logits);
  BasicTensor<T> g = layer_backward(trace.pool, head.input).input;

  std::vector<std::vector<BasicTensor<T>>> block_grads(model.blocks.size());
  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    BlockTrace<T>& bt = trace.blocks[b];
    LayerGrads<T> norm = layer_backward(bt.norm, g);
    LayerGrads<T> act = layer_backward(bt.gelu, norm.input);
    LayerGrads<T> mix = layer_backward(bt.pointwise, act.input);
    BasicTensor<T> dx;
    auto& out = block_grads[b];
    for (std::size_t i = 0; i < bt.depthwise.size(); ++i) {
      LayerGrads<T> branch = layer_backward(bt.depthwise[i], mix.input);
      dx = i == 0 ? std::move(branch.input) : add(dx, branch.input);
      out.push_back(std::move(branch.params[0]));
      out.push_back(std::move(branch.params[1]));
    }
    out.push_back(std::move(mix.params[0]));
    out.push_back(std::move(mix.params[1]));
    out.push_back(std::move(norm.params[0]));
    out.push_back(std::move(norm.params[1]));
    if (model.config.residual) dx = add(dx, g);
    g = std::move(dx);
  }
  LayerGrads<T> embed = layer_backward(trace.embed, g);

  std::vector<BasicTensor<T>> grads;
  grads.push_back(std::move(embed.params[0]));
  grads.push_back(std::move(embed.params[1]));
  for (auto& bg : block_grads) {
    for (auto& t : bg) grads.push_back(std::move(t));
  }
  grads.push_back(std::move(head.params[0]));
  grads.push_back(std::move(head.params[1]));
  return grads;
}

template <typename T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& probs) {
  if (probs.rank() != 2) throw ShapeError("argmax_rows expects (n, C), got " + probs.shape().str());
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    }
    labels[i] = best;
  }
  return labels;
}

template <typename T>
std::vector<std::size_t> predict(const SceneMixerModel<T>& model, const BasicTensor<T>& x) {
  return argmax_rows(infer(model, x));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'M', 'X', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(fmt::format("checkpoint truncated while reading {} (offset {}, need {} bytes)", what, pos_, n));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(width, what));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  std::string string(const char* what) {
    const auto len = uint(4, what);
    return std::string(take(len, what), len);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Model& model) {
  Model& m = const_cast<Model&>(model);
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_string(out, format_config(model.config));
  const auto tensors = m.state();
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape().dims()) put_u64(out, d);
    for (float v : t->data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Model decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (std::memcmp(in.take(4, "magic"), kMagic, 4) != 0) throw Error("not a checkpoint: bad magic bytes");
  const auto version = in.uint(4, "format version");
  if (version != kVersion) throw Error(fmt::format("unsupported checkpoint version {}", version));
  const ModelConfig config = parse_config(in.string("config block"));

  Model m = skeleton<float>(config);
  auto tensors = m.state();
  const auto count = in.uint(4, "tensor count");
  if (count != tensors.size()) {
    throw Error(fmt::format("checkpoint holds {} tensors but its config implies {}", count, tensors.size()));
  }
  for (auto& [expected_name, t] : tensors) {
    const std::string name = in.string("tensor name");
    if (name != expected_name) throw Error("checkpoint tensor '" + name + "' found where '" + expected_name + "' was expected");
    const auto rank = in.uint(4, "tensor rank");
    std::vector<std::size_t> dims;
    for (std::uint64_t i = 0; i < rank; ++i) dims.push_back(in.uint(8, "tensor extent"));
    if (dims != t->shape().dims()) {
      throw Error("checkpoint tensor '" + name + "' has shape " + Shape(dims).str() + " but the config implies " +
                  t->shape().str());
    }
    for (auto& v : t->data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4, "tensor data")));
  }
  if (!in.done()) throw Error("checkpoint has trailing bytes after the last tensor");
  for (const auto& blk : m.blocks) blk.norm.validate();
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

#define SCENEMIXER_INSTANTIATE_MODEL(T)                                                                      \
  template struct SceneMixerModel<T>;                                                                        \
  template SceneMixerModel<T> build(const ModelConfig&, std::uint64_t);                                      \
  template ForwardResult<T> forward(SceneMixerModel<T>&, const BasicTensor<T>&, Mode, bool);                 \
  template BasicTensor<T> infer(const SceneMixerModel<T>&, const BasicTensor<T>&);                           \
  template std::vector<BasicTensor<T>> backward(const SceneMixerModel<T>&, ForwardTrace<T>&,                 \
                                                const BasicTensor<T>&);                                      \
  template std::vector<std::size_t> predict(const SceneMixerModel<T>&, const BasicTensor<T>&);               \
  template std::vector<std::size_t> argmax_rows(const BasicTensor<T>&);

SCENEMIXER_INSTANTIATE_MODEL(float)
SCENEMIXER_INSTANTIATE_MODEL(double)

template SceneMixerModel<double> SceneMixerModel<float>::cast<double>() const;
template SceneMixerModel<float> SceneMixerModel<double>::cast<float>() const;

}  // namespace scenemixer
