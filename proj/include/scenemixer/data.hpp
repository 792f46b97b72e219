#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scenemixer/tensor.hpp"

namespace scenemixer {

enum class Split { unassigned, train, val, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Sample {
  /// Stable identity: `<class>/<file>` for on-disk samples, a generated name
  /// for synthetic ones. Split assignment depends only on this and the seed.
  std::string id;
  std::size_t label = 0;
  Split split = Split::unassigned;
  /// In-memory pixels (h, w, 3), values in [0, 255]. Empty for on-disk samples.
  Tensor pixels;
};

struct DatasetManifest {
  std::filesystem::path root;          // empty for in-memory datasets
  std::vector<std::string> class_names;  // sorted
  std::vector<Sample> samples;

  std::size_t count(Split split) const;
  std::vector<std::size_t> class_counts(Split split) const;
};

/// One folder per class under `root`, each holding `.ppm` images. Classes
/// and samples are enumerated in sorted order.
DatasetManifest load_dataset(const std::filesystem::path& root);

/// Binary PPM (P6, maxval 255) to an (h, w, 3) tensor of byte values.
Tensor decode_ppm(std::span<const std::uint8_t> bytes);
Tensor read_ppm(const std::filesystem::path& path);
/// Values are rounded and clamped to [0, 255].
std::string encode_ppm(const Tensor& image);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

/// Half-pixel-centred bilinear resampling of an (h, w, c) image.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

/// Scales byte-valued pixels into [0, 1].
Tensor normalize(const Tensor& image);

struct SplitSpec {
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 42;
};

/// Per class: sort by id, shuffle with a generator seeded by seed ^ class,
/// then floor(val_fraction * n) samples go to validation, floor(test_fraction
/// * n) to test, and the remainder to training.
DatasetManifest stratified_split(DatasetManifest manifest, const SplitSpec& spec);

struct SynthOptions {
  std::size_t classes = 4;
  std::size_t per_class = 250;
  std::size_t side = 64;
  std::uint64_t seed = 42;
  double noise_sigma = 10.0 / 255.0;  // on the [0, 1] intensity scale
  bool jitter = true;
};

/// Pattern names in generation order; the first `classes` are used.
const std::vector<std::string>& synth_patterns();

DatasetManifest synth_generate(const SynthOptions& options);

/// Writes `root/<id>` (that is, `root/<class>/<name>.ppm`) for every in-memory sample.
void write_dataset(const DatasetManifest& manifest, const std::filesystem::path& root);

std::string manifest_csv(const DatasetManifest& manifest);
/// Applies `path,class,split` rows to a manifest loaded from the same tree.
DatasetManifest apply_manifest_csv(DatasetManifest manifest, const std::string& csv);

/// Images of one split, resized to (h, w) and normalized, stacked as
/// (n, h, w, 3) in manifest order.
struct LabeledImages {
  Tensor images;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

LabeledImages gather(const DatasetManifest& manifest, Split split, std::size_t height, std::size_t width);

}  // namespace scenemixer
