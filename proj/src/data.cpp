#include "strokenext/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "strokenext/errors.hpp"
#include "strokenext/io.hpp"
#include "strokenext/parallel.hpp"

namespace strokenext::data {

namespace fs = std::filesystem;

std::string_view to_string(Task task) {
  return task == Task::presence ? "presence" : "subtype";
}

Task parse_task(std::string_view text) {
  if (text == "presence") return Task::presence;
  if (text == "subtype") return Task::subtype;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected presence|subtype)");
}

void SplitSpec::validate() const {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("split ratios must lie in (0, 1)");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

void AugmentConfig::validate() const {
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) {
    throw ConfigError("hflip probability must lie in [0, 1]");
  }
  if (max_rotation_deg < 0.0) throw ConfigError("max rotation must be >= 0");
  if (jitter_brightness < 0.0 || jitter_contrast < 0.0 || jitter_saturation < 0.0) {
    throw ConfigError("jitter ranges must be >= 0");
  }
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool is_hemorrhage(const std::string& name) {
  const auto n = lower(name);
  return n.starts_with("hemorrhag") || n.starts_with("haemorrhag");
}

bool is_ischemia(const std::string& name) {
  const auto n = lower(name);
  return n.starts_with("ischem") || n.starts_with("ischaem");
}

bool is_subtype_dir(const std::string& name) {
  return is_hemorrhage(name) || is_ischemia(name);
}

bool is_image_file(const fs::path& p) {
  return fs::is_regular_file(p) && lower(p.extension().string()) == ".png";
}

}  // namespace

DatasetIndex scan_dataset(const fs::path& root, Task task) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw ConfigError("dataset root '" + root.string() + "' does not exist");
  }
  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path().filename().string());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw DatasetError("dataset root '" + root.string() + "' has no class directories");
  }

  const bool has_hem = std::any_of(dirs.begin(), dirs.end(), is_hemorrhage);
  const bool has_isc = std::any_of(dirs.begin(), dirs.end(), is_ischemia);
  const bool has_other = std::any_of(dirs.begin(), dirs.end(),
                                     [](const auto& d) { return !is_subtype_dir(d); });

  // Directory name -> class name (empty: excluded).
  std::map<std::string, std::string> dir_class;
  if (task == Task::presence && (has_hem || has_isc) && has_other) {
    for (const auto& d : dirs) dir_class[d] = is_subtype_dir(d) ? "stroke" : d;
  } else if (task == Task::subtype && has_hem && has_isc) {
    for (const auto& d : dirs) dir_class[d] = is_subtype_dir(d) ? d : "";
  } else {
    for (const auto& d : dirs) dir_class[d] = d;
  }

  DatasetIndex index;
  index.task = task;
  std::set<std::string> names;
  for (const auto& [dir, cls] : dir_class) {
    if (!cls.empty()) names.insert(cls);
  }
  index.class_names.assign(names.begin(), names.end());

  std::map<std::string, std::size_t> per_dir_count;
  for (const auto& [dir, cls] : dir_class) {
    if (cls.empty()) continue;
    const auto label = static_cast<std::size_t>(
        std::lower_bound(index.class_names.begin(), index.class_names.end(), cls) -
        index.class_names.begin());
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(root / dir)) {
      if (!is_image_file(entry.path())) continue;
      Sample s;
      s.path = entry.path();
      s.label = label;
      s.class_name = dir;
      s.id = dir + "/" + entry.path().filename().string();
      index.samples.push_back(std::move(s));
      ++count;
    }
    if (count == 0) {
      throw DatasetError("class directory '" + (root / dir).string() +
                         "' contains no readable images");
    }
  }
  std::sort(index.samples.begin(), index.samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return index;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  const auto train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[0]));
  const auto val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[1]));
  const std::size_t test = n >= train + val ? n - train - val : 0;
  return {train, val, test};
}

Splits split(const DatasetIndex& index, const SplitSpec& spec) {
  spec.validate();
  if (index.samples.empty()) throw DatasetError("cannot split an empty dataset");

  std::array<std::vector<std::size_t>, 3> part;
  Rng rng(spec.seed);
  if (!spec.stratified) {
    std::vector<std::size_t> perm(index.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    const auto sizes = split_sizes(index.size(), spec.ratios);
    auto it = perm.begin();
    for (int p = 0; p < 3; ++p) {
      part[p].assign(it, it + static_cast<std::ptrdiff_t>(sizes[p]));
      it += static_cast<std::ptrdiff_t>(sizes[p]);
    }
  } else {
    for (std::size_t k = 0; k < index.num_classes(); ++k) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < index.size(); ++i) {
        if (index.samples[i].label == k) members.push_back(i);
      }
      rng.shuffle(members.begin(), members.end());
      const auto sizes = split_sizes(members.size(), spec.ratios);
      auto it = members.begin();
      for (int p = 0; p < 3; ++p) {
        part[p].insert(part[p].end(), it, it + static_cast<std::ptrdiff_t>(sizes[p]));
        it += static_cast<std::ptrdiff_t>(sizes[p]);
      }
    }
  }

  static constexpr const char* kNames[3] = {"train", "val", "test"};
  std::array<DatasetIndex, 3> out;
  for (int p = 0; p < 3; ++p) {
    if (part[p].empty()) {
      throw DatasetError(std::string("split leaves the ") + kNames[p] + " partition empty (n=" +
                         std::to_string(index.size()) + ")");
    }
    std::sort(part[p].begin(), part[p].end());
    out[p].class_names = index.class_names;
    out[p].task = index.task;
    for (auto i : part[p]) out[p].samples.push_back(index.samples[i]);
  }
  return {std::move(out[0]), std::move(out[1]), std::move(out[2])};
}

Image augment(const Image& image, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return image;
  // Every draw is made unconditionally so the stream layout is fixed.
  const bool flip = rng.bernoulli(cfg.hflip_prob);
  const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  const double brightness = rng.uniform(1.0 - cfg.jitter_brightness, 1.0 + cfg.jitter_brightness);
  const double contrast = rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast);
  const double saturation = rng.uniform(1.0 - cfg.jitter_saturation, 1.0 + cfg.jitter_saturation);

  Image out = flip ? flip_horizontal(image) : image;
  if (cfg.max_rotation_deg > 0.0) out = rotate_bilinear(out, angle);

  auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  const std::size_t npix = static_cast<std::size_t>(out.width) * out.height;
  auto gray_of = [&](std::size_t i) -> double {
    if (out.channels == 1) return out.pixels[i];
    const float* p = &out.pixels[i * 3];
    return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  };

  if (cfg.jitter_brightness > 0.0) {
    for (auto& v : out.pixels) v = clamp01(v * brightness);
  }
  if (cfg.jitter_contrast > 0.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < npix; ++i) mean += gray_of(i);
    mean /= static_cast<double>(npix);
    for (auto& v : out.pixels) v = clamp01(mean + (v - mean) * contrast);
  }
  if (cfg.jitter_saturation > 0.0 && out.channels == 3) {
    for (std::size_t i = 0; i < npix; ++i) {
      const double g = gray_of(i);
      for (int c = 0; c < 3; ++c) {
        float& v = out.pixels[i * 3 + c];
        v = clamp01(g + (v - g) * saturation);
      }
    }
  }
  return out;
}

NormalizedImage preprocess(const Image& image, int size) {
  if (image.channels != 1 && image.channels != 3) {
    throw ShapeError("preprocess expects 1 or 3 channels, got " +
                     std::to_string(image.channels));
  }
  const Image resized = resize_bilinear(image, size, size);
  NormalizedImage out;
  out.size = size;
  out.values.resize(static_cast<std::size_t>(size) * size * 3);
  const std::size_t npix = static_cast<std::size_t>(size) * size;
  for (std::size_t i = 0; i < npix; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = resized.channels == 1 ? resized.pixels[i] : resized.pixels[i * 3 + c];
      out.values[i * 3 + c] = (v - kImageNetMean[c]) / kImageNetStd[c];
    }
  }
  return out;
}

namespace {

enum class Lesion { none, bright_compact, dark_diffuse };

Image synth_slice(Lesion lesion, int size, Rng& rng) {
  Image img(size, size, 1, 0.0f);
  const double s = size / 128.0;
  const double cx = size * 0.5 + rng.uniform(-3.0, 3.0) * s;
  const double cy = size * 0.5 + rng.uniform(-3.0, 3.0) * s;
  const double ax = (46.0 + rng.uniform(-2.0, 2.0)) * s;
  const double ay = (56.0 + rng.uniform(-2.0, 2.0)) * s;
  const double skull = 4.0 * s;
  const double phase = rng.uniform(0.0, 6.283185307179586);

  double lx = 0.0, ly = 0.0, lr = 0.0;
  if (lesion != Lesion::none) {
    // Lesion center inside the inner half of the brain ellipse.
    const double t = rng.uniform(0.0, 6.283185307179586);
    const double rho = std::sqrt(rng.uniform()) * 0.45;
    lx = cx + std::cos(t) * rho * ax;
    ly = cy + std::sin(t) * rho * ay;
    lr = (lesion == Lesion::bright_compact ? rng.uniform(9.0, 14.0) : rng.uniform(18.0, 28.0)) * s;
  }

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double ux = (x - cx) / ax;
      const double uy = (y - cy) / ay;
      const double r = std::sqrt(ux * ux + uy * uy);
      const double ring = skull / std::min(ax, ay);
      double v = 0.0;
      if (r <= 1.0 - ring) {
        v = 0.45 + 0.03 * std::sin(0.11 * x / s + phase) * std::cos(0.07 * y / s - phase);
        if (lesion != Lesion::none) {
          const double d = std::hypot(x - lx, y - ly) / lr;
          if (lesion == Lesion::bright_compact) {
            // Sharp-edged bright blob.
            const double w = 1.0 / (1.0 + std::exp((d - 1.0) * 12.0));
            v += (0.95 - v) * w;
          } else {
            // Soft hypodense region.
            const double w = std::exp(-d * d * 1.5);
            v += (0.18 - v) * w;
          }
        }
      } else if (r <= 1.0) {
        v = 0.95;
      }
      v += rng.normal() * 0.03;
      img.at(x, y, 0) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace

DatasetIndex generate_synthetic(std::size_t n_per_class, Task task, std::uint64_t seed,
                                const fs::path& out, int image_size) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  if (image_size < 32) throw ConfigError("synthetic image size must be >= 32");

  struct ClassPlan {
    std::string name;
    Lesion lesion;
    std::size_t count;
  };
  std::vector<ClassPlan> plan;
  if (task == Task::subtype) {
    plan = {{"hemorrhage", Lesion::bright_compact, n_per_class},
            {"ischemia", Lesion::dark_diffuse, n_per_class}};
  } else {
    // The positive class is split across both subtype directories so the
    // three-class layout is preserved.
    plan = {{"hemorrhage", Lesion::bright_compact, (n_per_class + 1) / 2},
            {"ischemia", Lesion::dark_diffuse, n_per_class / 2},
            {"nonstroke", Lesion::none, n_per_class}};
  }

  try {
    fs::create_directories(out);
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t k = 0; k < plan.size(); ++k) {
      const auto& cls = plan[k];
      if (cls.count == 0) continue;
      fs::create_directories(out / cls.name);
      for (std::size_t i = 0; i < cls.count; ++i) {
        Rng rng(derive_seed(seed, k, i));
        const Image img = synth_slice(cls.lesion, image_size, rng);
        char name[64];
        std::snprintf(name, sizeof name, "%s_%05zu.png", cls.name.c_str(), i);
        write_png(out / cls.name / name, img);
      }
      counts[cls.name] = cls.count;
    }
    nlohmann::json manifest = {
        {"generator", "strokenext-synth"},
        {"tool_version", kToolVersion},
        {"schema_version", 1},
        {"seed", seed},
        {"task", std::string(to_string(task))},
        {"n_per_class", n_per_class},
        {"image_size", image_size},
        {"counts", counts},
    };
    write_text_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot write synthetic dataset: ") + e.what());
  }
  return scan_dataset(out, task);
}

std::size_t default_positive_class(const DatasetIndex& index) {
  const auto& names = index.class_names;
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (index.task == Task::presence && names[k] == "stroke") return k;
    if (index.task == Task::subtype && is_hemorrhage(names[k])) return k;
  }
  return names.size() > 1 ? 1 : 0;
}

unsigned worker_threads() {
  if (const char* env = std::getenv("STROKENEXT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return 1;
}

ImageCache::ImageCache(const DatasetIndex& index, unsigned threads) {
  images_.resize(index.size());
  parallel_for(index.size(), threads == 0 ? worker_threads() : threads,
               [&](std::size_t i) { images_[i] = read_png(index.samples[i].path); });
}

FeatureMap<float> make_batch(const ImageCache& cache, std::span<const std::size_t> positions,
                             const AugmentConfig& augment_cfg, std::uint64_t seed,
                             std::uint64_t epoch, int image_size) {
  const auto s = static_cast<std::size_t>(image_size);
  FeatureMap<float> batch(positions.size(), 3, s, s);
  const std::size_t stride = s * s * 3;
  parallel_for(positions.size(), worker_threads(), [&](std::size_t b) {
    const std::size_t p = positions[b];
    NormalizedImage ni;
    if (augment_cfg.enabled) {
      Rng rng(derive_seed(seed, epoch, p));
      ni = preprocess(augment(cache[p], augment_cfg, rng), image_size);
    } else {
      ni = preprocess(cache[p], image_size);
    }
    std::memcpy(batch.values.data() + b * stride, ni.values.data(), stride * sizeof(float));
  });
  return batch;
}

}  // namespace strokenext::data
