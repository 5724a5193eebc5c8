#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "strokenext/image.hpp"
#include "strokenext/rng.hpp"
#include "strokenext/tensor.hpp"

namespace strokenext::data {

enum class Task { presence, subtype };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);  // throws ConfigError

struct Sample {
  std::filesystem::path path;
  std::size_t label = 0;
  std::string class_name;  // source directory name

  // Path relative to the dataset root with '/' separators; the identity used
  // to align prediction logs.
  std::string id;

  bool operator==(const Sample&) const = default;
};

struct DatasetIndex {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  Task task = Task::presence;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  bool operator==(const DatasetIndex&) const = default;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  bool stratified = false;

  void validate() const;  // throws ConfigError
};

struct Splits {
  DatasetIndex train;
  DatasetIndex val;
  DatasetIndex test;
};

struct AugmentConfig {
  double hflip_prob = 0.5;
  double max_rotation_deg = 10.0;
  double jitter_brightness = 0.2;
  double jitter_contrast = 0.2;
  double jitter_saturation = 0.2;
  bool enabled = true;

  void validate() const;  // throws ConfigError
};

inline constexpr int kImageSize = 224;
inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

// Square 3-channel standardized image, stored channels-last.
struct NormalizedImage {
  int size = kImageSize;
  std::vector<float> values;  // size * size * 3

  float at(int x, int y, int c) const {
    return values[(static_cast<std::size_t>(y) * size + x) * 3 + c];
  }
};

// Scans root/<class>/<image>.png. For Task::presence a tree holding
// hemorrhage/ischemia directories next to a negative directory is collapsed
// to [negative, "stroke"]; for Task::subtype a tree with both subtype
// directories keeps only those. Other trees are used as-is.
DatasetIndex scan_dataset(const std::filesystem::path& root, Task task);

Splits split(const DatasetIndex& index, const SplitSpec& spec);

// Partition sizes under the floor/remainder rule.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios);

Image augment(const Image& image, const AugmentConfig& cfg, Rng& rng);

NormalizedImage preprocess(const Image& image, int size = kImageSize);

struct SyntheticManifest {
  std::uint64_t seed = 0;
  Task task = Task::subtype;
  std::size_t n_per_class = 0;
  int image_size = 0;
  std::vector<std::string> class_names;
};

inline constexpr int kSyntheticImageSize = 128;

// Writes grayscale CT-like slices with class-dependent lesions plus
// manifest.json. Deterministic for a fixed seed.
DatasetIndex generate_synthetic(std::size_t n_per_class, Task task, std::uint64_t seed,
                                const std::filesystem::path& out,
                                int image_size = kSyntheticImageSize);

// Index into class_names of the positive class used for AUROC/AUPRC/Brier.
std::size_t default_positive_class(const DatasetIndex& index);

// Decoded source images for one index, loaded once. Decoding fans out over
// `threads` workers (0 = STROKENEXT_THREADS or 1).
class ImageCache {
 public:
  ImageCache(const DatasetIndex& index, unsigned threads = 0);
  const Image& operator[](std::size_t i) const { return images_[i]; }
  std::size_t size() const { return images_.size(); }

 private:
  std::vector<Image> images_;
};

// Assembles a network input batch from cached images. When augmentation is
// enabled, sample `positions[k]`'s draws come from derive_seed(seed, epoch,
// positions[k]) so results do not depend on worker scheduling.
FeatureMap<float> make_batch(const ImageCache& cache, std::span<const std::size_t> positions,
                             const AugmentConfig& augment_cfg, std::uint64_t seed,
                             std::uint64_t epoch, int image_size);

unsigned worker_threads();  // STROKENEXT_THREADS, default 1

}  // namespace strokenext::data
