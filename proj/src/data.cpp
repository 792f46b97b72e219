#include "scenemixer/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "scenemixer/parallel.hpp"
#include "scenemixer/rng.hpp"

namespace scenemixer {

namespace fs = std::filesystem;

std::string_view split_name(Split split) {
  switch (split) {
    case Split::unassigned: return "unassigned";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unassigned";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::unassigned, Split::train, Split::val, Split::test}) {
    if (split_name(s) == name) return s;
  }
  throw Error("unknown split '" + std::string(name) + "' (expected train, val, test or unassigned)");
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.split == split; }));
}

std::vector<std::size_t> DatasetManifest::class_counts(Split split) const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& s : samples) {
    if (s.split == split) ++counts[s.label];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Directory loading

DatasetManifest load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("dataset root " + root.string() + " is not a directory");
  DatasetManifest m;
  m.root = root;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) m.class_names.push_back(entry.path().filename().string());
  }
  std::sort(m.class_names.begin(), m.class_names.end());
  if (m.class_names.size() < 2) {
    throw Error(fmt::format("dataset root {} has {} class folders; at least 2 are required", root.string(),
                            m.class_names.size()));
  }
  for (std::size_t label = 0; label < m.class_names.size(); ++label) {
    const auto& cls = m.class_names[label];
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(root / cls)) {
      if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path().filename().string());
    }
    if (files.empty()) throw Error("class folder " + (root / cls).string() + " contains no .ppm images");
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream probe(root / cls / f, std::ios::binary);
      if (!probe) throw Error("cannot read image " + (root / cls / f).string());
      m.samples.push_back({cls + "/" + f, label, Split::unassigned, {}});
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// PPM

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1u << 24)) throw Error(fmt::format("PPM {} is implausibly large", what));
      ++pos;
    }
    if (pos == start) throw Error(fmt::format("PPM header: missing {}", what));
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P') throw Error("not a PPM image: missing 'P' magic");
  if (bytes[1] != '6') {
    throw Error(fmt::format("unsupported PPM format 'P{}': only binary P6 is supported", static_cast<char>(bytes[1])));
  }
  pos = 2;
  const std::size_t width = number("width");
  const std::size_t height = number("height");
  const std::size_t maxval = number("maxval");
  if (width == 0 || height == 0) throw Error("PPM image has a zero dimension");
  if (maxval != 255) throw Error(fmt::format("unsupported PPM maxval {} (only 255)", maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw Error("PPM header: missing separator before pixel data");
  ++pos;

  const std::size_t need = width * height * 3;
  if (bytes.size() - pos < need) {
    throw Error(fmt::format("truncated PPM payload: {} bytes present, {} required", bytes.size() - pos, need));
  }
  Tensor img(Shape{height, width, 3});
  for (std::size_t i = 0; i < need; ++i) img[i] = static_cast<float>(bytes[pos + i]);
  return img;
}

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("encode_ppm expects (h, w, 3), got " + image.shape().str());
  std::string out = fmt::format("P6\n{} {}\n255\n", image.dim(1), image.dim(0));
  out.reserve(out.size() + image.size());
  for (float v : image.data()) out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L))));
  return out;
}

void write_ppm(const fs::path& path, const Tensor& image) {
  const std::string bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write image " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Preprocessing

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear expects (h, w, c), got " + image.shape().str());
  if (out_h == 0 || out_w == 0) throw Error("resize_bilinear target dimensions must be positive");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (out_h == h && out_w == w) return image;

  auto taps = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    const double clamped = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(clamped));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, clamped - static_cast<double>(lo)};
  };

  Tensor out(Shape{out_h, out_w, c});
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = taps(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = taps(x, w, out_w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1.0 - fx) * image[(y0 * w + x0) * c + ch] + fx * image[(y0 * w + x1) * c + ch];
        const double bottom = (1.0 - fx) * image[(y1 * w + x0) * c + ch] + fx * image[(y1 * w + x1) * c + ch];
        out[(y * out_w + x) * c + ch] = static_cast<float>((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor normalize(const Tensor& image) {
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = image[i] / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

DatasetManifest stratified_split(DatasetManifest manifest, const SplitSpec& spec) {
  if (!(spec.val_fraction > 0.0) || !(spec.test_fraction > 0.0) || spec.val_fraction + spec.test_fraction >= 1.0) {
    throw Error("split fractions must be positive and leave a positive training share");
  }
  std::vector<std::vector<std::size_t>> members(manifest.class_names.size());
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) members.at(manifest.samples[i].label).push_back(i);

  // Guards against 0.15 * 20 landing just below 3 in binary floating point.
  auto share = [](double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  };

  for (std::size_t label = 0; label < members.size(); ++label) {
    auto& idx = members[label];
    if (idx.size() < 3) {
      throw Error(fmt::format("class '{}' has {} samples; at least 3 are needed to split",
                              manifest.class_names[label], idx.size()));
    }
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return manifest.samples[a].id < manifest.samples[b].id; });
    Rng rng(spec.seed ^ static_cast<std::uint64_t>(label));
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t n_val = share(spec.val_fraction, idx.size());
    const std::size_t n_test = share(spec.test_fraction, idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Split s = Split::train;
      if (i < n_val) {
        s = Split::val;
      } else if (i < n_val + n_test) {
        s = Split::test;
      }
      manifest.samples[idx[i]].split = s;
    }
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

const std::vector<std::string>& synth_patterns() {
  static const std::vector<std::string> names{"horizontal_stripes", "checkerboard",     "radial_gradient",
                                              "random_blobs",       "diagonal_stripes", "rings"};
  return names;
}

namespace {

/// Intensity in [0, 1] for pattern `kind` at pixel (y, x).
class PatternSampler {
 public:
  PatternSampler(std::size_t kind, std::size_t side, Rng& rng, bool jitter) : kind_(kind), side_(side) {
    const double s = static_cast<double>(side);
    auto pick = [&](double lo, double hi, double fixed) { return jitter ? rng.uniform(lo, hi) : fixed; };
    period_ = pick(6.0, 12.0, 8.0);
    phase_ = pick(0.0, 2.0 * std::numbers::pi, 0.0);
    cy_ = pick(0.3 * s, 0.7 * s, 0.5 * s);
    cx_ = pick(0.3 * s, 0.7 * s, 0.5 * s);
    if (kind_ == 3) {
      for (int b = 0; b < 5; ++b) {
        // Fixed template: blobs on a diagonal with a common radius.
        const double t = (b + 0.5) / 5.0;
        blobs_.push_back({pick(0.1 * s, 0.9 * s, t * s), pick(0.1 * s, 0.9 * s, (1.0 - t) * s), pick(4.0, 9.0, 6.0)});
      }
    }
  }

  double operator()(std::size_t yi, std::size_t xi) const {
    const double y = static_cast<double>(yi), x = static_cast<double>(xi);
    constexpr double tau = 2.0 * std::numbers::pi;
    switch (kind_) {
      case 0: return 0.5 + 0.5 * std::sin(tau * y / period_ + phase_);
      case 1: {
        const double off = phase_ / tau * period_;
        const auto cy = static_cast<long>(std::floor((y + off) / period_));
        const auto cx = static_cast<long>(std::floor((x + off) / period_));
        return ((cy + cx) % 2 == 0) ? 1.0 : 0.0;
      }
      case 2: {
        const double r = std::hypot(y - cy_, x - cx_);
        return std::max(0.0, 1.0 - r / static_cast<double>(side_));
      }
      case 3: {
        double v = 0.0;
        for (const auto& b : blobs_) {
          const double d2 = (y - b.y) * (y - b.y) + (x - b.x) * (x - b.x);
          v += std::exp(-d2 / (2.0 * b.radius * b.radius));
        }
        return std::min(1.0, v);
      }
      case 4: return 0.5 + 0.5 * std::sin(tau * (x + y) / (period_ * std::numbers::sqrt2) + phase_);
      default: return 0.5 + 0.5 * std::sin(tau * std::hypot(y - cy_, x - cx_) / period_ + phase_);
    }
  }

 private:
  struct Blob {
    double y, x, radius;
  };
  std::size_t kind_;
  std::size_t side_;
  double period_ = 8.0, phase_ = 0.0, cy_ = 0.0, cx_ = 0.0;
  std::vector<Blob> blobs_;
};

}  // namespace

DatasetManifest synth_generate(const SynthOptions& options) {
  const auto& patterns = synth_patterns();
  if (options.classes < 2) throw Error("synthetic data needs at least 2 classes");
  if (options.classes > patterns.size()) {
    throw Error(fmt::format("{} classes requested but only {} synthetic patterns exist", options.classes,
                            patterns.size()));
  }
  if (options.per_class < 1) throw Error("synthetic data needs at least one sample per class");
  if (options.side < 1) throw Error("synthetic image side must be positive");

  DatasetManifest m;
  std::vector<std::size_t> kinds(options.classes);
  for (std::size_t k = 0; k < options.classes; ++k) kinds[k] = k;
  std::sort(kinds.begin(), kinds.end(), [&](std::size_t a, std::size_t b) { return patterns[a] < patterns[b]; });
  for (std::size_t k : kinds) m.class_names.push_back(patterns[k]);

  const std::size_t side = options.side;
  m.samples.resize(options.classes * options.per_class);
  parallel_for(m.samples.size(), [&](std::size_t i) {
    const std::size_t label = i / options.per_class;
    const std::size_t index = i % options.per_class;
    // One stream per sample keeps generation independent of thread count.
    Rng rng(options.seed * 0x9E3779B97F4A7C15ULL + i);
    const PatternSampler pattern(kinds[label], side, rng, options.jitter);
    double gain[3] = {1.0, 1.0, 1.0};
    if (options.jitter) {
      for (double& g : gain) g = rng.uniform(0.85, 1.15);
    }
    Tensor img(Shape{side, side, 3});
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double base = 0.15 + 0.7 * pattern(y, x);
        for (std::size_t c = 0; c < 3; ++c) {
          double v = base * gain[c];
          if (options.noise_sigma > 0.0) v += options.noise_sigma * rng.normal();
          img[(y * side + x) * 3 + c] = static_cast<float>(std::clamp(std::round(v * 255.0), 0.0, 255.0));
        }
      }
    }
    m.samples[i] = {fmt::format("{}/{}_{:05d}.ppm", m.class_names[label], m.class_names[label], index), label,
                    Split::unassigned, std::move(img)};
  });
  return m;
}

void write_dataset(const DatasetManifest& manifest, const fs::path& root) {
  for (const auto& cls : manifest.class_names) fs::create_directories(root / cls);
  for (const auto& s : manifest.samples) {
    if (s.pixels.empty()) throw Error("sample " + s.id + " has no in-memory pixels to write");
    write_ppm(root / s.id, s.pixels);
  }
}

// ---------------------------------------------------------------------------
// Manifest CSV

std::string manifest_csv(const DatasetManifest& manifest) {
  std::string out = "path,class,split\n";
  for (const auto& s : manifest.samples) {
    out += fmt::format("{},{},{}\n", s.id, manifest.class_names[s.label], split_name(s.split));
  }
  return out;
}

DatasetManifest apply_manifest_csv(DatasetManifest manifest, const std::string& csv) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) by_id[manifest.samples[i].id] = i;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line != "path,class,split") throw Error("manifest CSV must start with header 'path,class,split'");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    if (a == std::string::npos || a == b) throw Error(fmt::format("manifest line {}: expected path,class,split", line_no));
    const std::string id = line.substr(0, a);
    const std::string cls = line.substr(a + 1, b - a - 1);
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("manifest lists unknown sample '" + id + "'");
    Sample& s = manifest.samples[it->second];
    if (manifest.class_names[s.label] != cls) throw Error("manifest class for '" + id + "' disagrees with its folder");
    s.split = parse_split(line.substr(b + 1));
  }
  return manifest;
}

LabeledImages gather(const DatasetManifest& manifest, Split split, std::size_t height, std::size_t width) {
  std::vector<const Sample*> picked;
  for (const auto& s : manifest.samples) {
    if (s.split == split) picked.push_back(&s);
  }
  if (picked.empty()) throw Error(fmt::format("split '{}' is empty", split_name(split)));

  LabeledImages out;
  out.images = Tensor(Shape{picked.size(), height, width, 3});
  out.labels.resize(picked.size());
  const std::size_t stride = height * width * 3;
  parallel_for(picked.size(), [&](std::size_t i) {
    const Sample& s = *picked[i];
    const Tensor raw = s.pixels.empty() ? read_ppm(manifest.root / s.id) : s.pixels;
    const Tensor img = normalize(resize_bilinear(raw, height, width));
    std::copy(img.data().begin(), img.data().end(), out.images.ptr() + i * stride);
    out.labels[i] = s.label;
  });
  return out;
}

}  // namespace scenemixer
