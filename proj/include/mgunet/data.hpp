#pragma once

// Labelled samples, the layered-retina phantom generator, augmentation,
// subject-level splits and the on-disk dataset layout:
//
//   <root>/images/<id>.png   16-bit grayscale, intensity = value / 65535
//   <root>/labels/<id>.png   8-bit, class ids 0..10
//   <root>/manifest.tsv      id, subject, split

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mgunet/classes.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/png_io.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

struct LabeledSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> image;  // row-major, values in [0, 1]
  LabelMap label;
  std::string id;
  std::string subject;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

/// [1, 1, H, W] tensor view of a sample's image.
inline Tensor image_tensor(const LabeledSample& s) {
  return Tensor::from_values({1, 1, s.height, s.width}, s.image);
}

inline void validate_sample(const LabeledSample& s, const std::string& where) {
  if (s.image.size() != s.height * s.width || s.label.height != s.height ||
      s.label.width != s.width) {
    throw DataError(where + ": image and label shapes differ");
  }
  validate_labels(s.label, where);
}

// ------------------------------------------------------------------ phantoms

/// Geometry and appearance of synthetic peripapillary B-scans. Lengths are
/// in pixels; the disc centre is a fraction of the width.
struct PhantomSpec {
  std::size_t height = 128;
  std::size_t width = 256;
  std::size_t scans_per_subject = 2;
  double top_min = 18.0;  // retinal surface depth range
  double top_max = 28.0;
  std::array<double, 9> thickness_min{4, 4, 4, 3, 3, 6, 2, 3, 10};
  std::array<double, 9> thickness_max{9, 8, 8, 6, 6, 11, 4, 5, 16};
  double disc_center_min = 0.42;
  double disc_center_max = 0.58;
  double disc_half_width_min = 14.0;
  double disc_half_width_max = 26.0;
  double disc_depth_min = 2.0;  // extent of the disc into the choroid
  double disc_depth_max = 7.0;
  std::array<double, kNumClasses> intensity{0.08, 0.72, 0.42, 0.60, 0.28, 0.55,
                                            0.18, 0.80, 0.92, 0.48, 0.33};
  double noise_sigma = 0.05;
  double wiggle_amplitude = 3.0;
  double wiggle_cycles_min = 0.5;  // surface undulations per image width
  double wiggle_cycles_max = 1.5;
  std::uint64_t seed = 1;

  double max_stack() const {
    double s = 0.0;
    for (double t : thickness_max) s += t;
    return s;
  }

  void validate() const {
    if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
      throw ConfigError("phantom size must be a positive multiple of 16, got " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
    if (scans_per_subject == 0) throw ConfigError("phantom: scans_per_subject must be >= 1");
    for (std::size_t k = 0; k < 9; ++k) {
      if (!(thickness_min[k] > 0.0) || thickness_min[k] > thickness_max[k]) {
        throw ConfigError("phantom: infeasible thickness range for layer " +
                          std::to_string(k + 1));
      }
    }
    if (top_min < 0.0 || top_min > top_max || wiggle_amplitude < 0.0) {
      throw ConfigError("phantom: infeasible surface depth range");
    }
    if (top_max + wiggle_amplitude + max_stack() >= static_cast<double>(height)) {
      throw ConfigError("phantom: layer stack (" + std::to_string(max_stack()) +
                        " px below a surface at up to " +
                        std::to_string(top_max + wiggle_amplitude) +
                        " px) does not fit in height " + std::to_string(height));
    }
    if (disc_half_width_min <= 0.0 || disc_half_width_min > disc_half_width_max ||
        disc_depth_min < 0.0 || disc_depth_min > disc_depth_max ||
        disc_depth_max >= thickness_min[8]) {
      throw ConfigError("phantom: infeasible disc size/depth range");
    }
    const double w = static_cast<double>(width);
    if (disc_center_min > disc_center_max ||
        disc_center_min * w - disc_half_width_max < 1.0 ||
        disc_center_max * w + disc_half_width_max > w - 1.0) {
      throw ConfigError("phantom: disc must lie horizontally inside the image");
    }
    if (noise_sigma < 0.0 || wiggle_cycles_min > wiggle_cycles_max) {
      throw ConfigError("phantom: invalid noise or wiggle parameters");
    }
  }
};

/// Reads a flat `key = value` file; unknown keys are rejected. Array keys
/// take comma-separated values.
inline PhantomSpec read_phantom_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open phantom spec " + path.string());
  PhantomSpec spec;
  std::string line;
  std::size_t lineno = 0;
  auto parse_list = [&](const std::string& v, auto& arr, const std::string& key) {
    std::stringstream ss(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
      if (i >= arr.size()) throw ConfigError(path.string() + ": too many values for " + key);
      arr[i++] = std::stod(item);
    }
    if (i != arr.size()) throw ConfigError(path.string() + ": too few values for " + key);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      if (key == "height") spec.height = std::stoul(value);
      else if (key == "width") spec.width = std::stoul(value);
      else if (key == "scans_per_subject") spec.scans_per_subject = std::stoul(value);
      else if (key == "top_min") spec.top_min = std::stod(value);
      else if (key == "top_max") spec.top_max = std::stod(value);
      else if (key == "thickness_min") parse_list(value, spec.thickness_min, key);
      else if (key == "thickness_max") parse_list(value, spec.thickness_max, key);
      else if (key == "disc_center_min") spec.disc_center_min = std::stod(value);
      else if (key == "disc_center_max") spec.disc_center_max = std::stod(value);
      else if (key == "disc_half_width_min") spec.disc_half_width_min = std::stod(value);
      else if (key == "disc_half_width_max") spec.disc_half_width_max = std::stod(value);
      else if (key == "disc_depth_min") spec.disc_depth_min = std::stod(value);
      else if (key == "disc_depth_max") spec.disc_depth_max = std::stod(value);
      else if (key == "intensity") parse_list(value, spec.intensity, key);
      else if (key == "noise_sigma") spec.noise_sigma = std::stod(value);
      else if (key == "wiggle_amplitude") spec.wiggle_amplitude = std::stod(value);
      else if (key == "wiggle_cycles_min") spec.wiggle_cycles_min = std::stod(value);
      else if (key == "wiggle_cycles_max") spec.wiggle_cycles_max = std::stod(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

/// Per-column layer boundaries of one phantom: boundary[0] is the retinal
/// surface, boundary[k] the bottom of layer k (1..9).
struct PhantomGeometry {
  std::vector<std::array<double, 10>> boundary;  // per column
  double disc_center = 0.0;
  double disc_half_width = 0.0;
  double disc_depth = 0.0;

  /// Lower edge of the disc at column centre `x`, or a negative value
  /// outside the disc.
  double disc_bottom(double x, std::size_t column) const {
    const double u = (x - disc_center) / disc_half_width;
    if (std::abs(u) > 1.0) return -1.0;
    return boundary[column][8] + disc_depth * (1.0 - u * u);
  }
};

inline LabelMap rasterize(const PhantomGeometry& g, std::size_t height, std::size_t width) {
  LabelMap map(height, width);
  for (std::size_t x = 0; x < width; ++x) {
    const auto& b = g.boundary[x];
    const double xc = static_cast<double>(x) + 0.5;
    const double disc_bottom = g.disc_bottom(xc, x);
    for (std::size_t y = 0; y < height; ++y) {
      const double yc = static_cast<double>(y) + 0.5;
      std::uint8_t label = 0;
      if (yc >= b[0] && yc < b[9]) {
        label = 9;
        for (std::uint8_t k = 1; k <= 9; ++k) {
          if (yc < b[k]) {
            label = k;
            break;
          }
        }
      }
      if (disc_bottom >= 0.0 && yc >= b[0] && yc < disc_bottom) label = kDiscLabel;
      map.at(y, x) = label;
    }
  }
  return map;
}

inline double quantize16(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0;
}

/// Generates `n` phantoms; sample i belongs to subject i / scans_per_subject.
/// Subject-level draws fix the disc size and layer thickness profile; each
/// scan draws its own surface undulation, disc position and noise.
inline std::vector<LabeledSample> gen_phantom(const PhantomSpec& spec, std::size_t n) {
  spec.validate();
  std::vector<LabeledSample> out;
  out.reserve(n);
  const double w = static_cast<double>(spec.width);
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t subject = i / spec.scans_per_subject;
    const std::size_t scan = i % spec.scans_per_subject;
    std::seed_seq subject_seq{spec.seed, static_cast<std::uint64_t>(subject), std::uint64_t{0x5eed}};
    std::seed_seq scan_seq{spec.seed, static_cast<std::uint64_t>(subject),
                           static_cast<std::uint64_t>(scan)};
    Rng subject_rng(subject_seq);
    Rng rng(scan_seq);
    auto uniform = [](Rng& r, double lo, double hi) {
      return std::uniform_real_distribution<double>(lo, hi)(r);
    };

    PhantomGeometry g;
    g.disc_half_width = uniform(subject_rng, spec.disc_half_width_min, spec.disc_half_width_max);
    g.disc_depth = uniform(subject_rng, spec.disc_depth_min, spec.disc_depth_max);
    std::array<double, 9> cycles{}, phase{};
    for (std::size_t k = 0; k < 9; ++k) {
      cycles[k] = uniform(subject_rng, 0.5, 2.0);
      phase[k] = uniform(subject_rng, 0.0, kTwoPi);
    }
    g.disc_center = w * uniform(rng, spec.disc_center_min, spec.disc_center_max);
    const double top = uniform(rng, spec.top_min, spec.top_max);
    const double wiggle_cycles = uniform(rng, spec.wiggle_cycles_min, spec.wiggle_cycles_max);
    const double wiggle_phase = uniform(rng, 0.0, kTwoPi);
    const double scan_shift = uniform(rng, 0.0, kTwoPi);

    g.boundary.resize(spec.width);
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double xc = (static_cast<double>(x) + 0.5) / w;
      auto& b = g.boundary[x];
      b[0] = top + spec.wiggle_amplitude * std::sin(kTwoPi * wiggle_cycles * xc + wiggle_phase);
      for (std::size_t k = 0; k < 9; ++k) {
        const double s = 0.5 + 0.5 * std::sin(kTwoPi * cycles[k] * xc + phase[k] + scan_shift);
        b[k + 1] = b[k] + spec.thickness_min[k] + (spec.thickness_max[k] - spec.thickness_min[k]) * s;
      }
    }

    LabeledSample sample;
    sample.height = spec.height;
    sample.width = spec.width;
    sample.label = rasterize(g, spec.height, spec.width);
    sample.subject = "s" + std::string(3 - std::min<std::size_t>(3, std::to_string(subject).size()), '0') +
                     std::to_string(subject);
    sample.id = sample.subject + "_" + std::to_string(scan);

    // Piecewise-constant tissue intensities, softened across boundaries by a
    // vertical [1 2 1] / 4 filter, plus white noise.
    std::vector<double> clean(spec.height * spec.width);
    for (std::size_t p = 0; p < clean.size(); ++p) clean[p] = spec.intensity[sample.label.labels[p]];
    sample.image.resize(clean.size());
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t y = 0; y < spec.height; ++y) {
      const auto up = y == 0 ? 0 : y - 1;
      const auto down = std::min(y + 1, spec.height - 1);
      for (std::size_t x = 0; x < spec.width; ++x) {
        const double v = 0.25 * clean[up * spec.width + x] + 0.5 * clean[y * spec.width + x] +
                         0.25 * clean[down * spec.width + x];
        sample.image[y * spec.width + x] = quantize16(v + spec.noise_sigma * noise(rng));
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

// --------------------------------------------------------------- augmentation

struct AugmentParams {
  bool flip = false;
  double noise_sigma = 0.0;
  double contrast = 1.0;
};

inline constexpr double kAugmentMaxNoise = 0.03;
inline constexpr double kAugmentContrastMin = 0.8;
inline constexpr double kAugmentContrastMax = 1.2;

inline LabeledSample flip_horizontal(const LabeledSample& s) {
  LabeledSample out = s;
  for (std::size_t y = 0; y < s.height; ++y) {
    std::reverse(out.image.begin() + static_cast<std::ptrdiff_t>(y * s.width),
                 out.image.begin() + static_cast<std::ptrdiff_t>((y + 1) * s.width));
    std::reverse(out.label.labels.begin() + static_cast<std::ptrdiff_t>(y * s.width),
                 out.label.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * s.width));
  }
  return out;
}

/// Applies flip, additive Gaussian noise and contrast scaling about the image
/// mean, in that order. Intensities are clamped to [0, 1]; labels only move
/// with the flip.
inline LabeledSample augment_with(const LabeledSample& s, const AugmentParams& params, Rng& rng) {
  LabeledSample out = params.flip ? flip_horizontal(s) : s;
  if (params.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    for (auto& v : out.image) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
  if (params.contrast != 1.0) {
    double mean = 0.0;
    for (double v : out.image) mean += v;
    mean /= static_cast<double>(out.image.size());
    for (auto& v : out.image) v = std::clamp(mean + params.contrast * (v - mean), 0.0, 1.0);
  }
  return out;
}

/// Random training-time augmentation: flip with p = 0.5, noise sigma in
/// [0, 0.03], contrast in [0.8, 1.2].
inline LabeledSample augment(const LabeledSample& s, Rng& rng) {
  AugmentParams p;
  p.flip = std::bernoulli_distribution(0.5)(rng);
  p.noise_sigma = std::uniform_real_distribution<double>(0.0, kAugmentMaxNoise)(rng);
  p.contrast = std::uniform_real_distribution<double>(kAugmentContrastMin, kAugmentContrastMax)(rng);
  return augment_with(s, p, rng);
}

// --------------------------------------------------------------------- splits

enum class Split { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

struct SplitSpec {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t seed = 0;

  Split of(const std::string& subject) const {
    if (std::find(train.begin(), train.end(), subject) != train.end()) return Split::kTrain;
    if (std::find(val.begin(), val.end(), subject) != val.end()) return Split::kVal;
    if (std::find(test.begin(), test.end(), subject) != test.end()) return Split::kTest;
    throw DataError("subject '" + subject + "' is not assigned to any split");
  }
};

/// Shuffles the distinct subjects with `seed` and assigns floor(20%) each to
/// validation and test, the remainder (at least 60%) to training.
inline SplitSpec make_split(const std::vector<LabeledSample>& samples, std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& s : samples) unique.insert(s.subject);
  if (unique.size() < 5) {
    throw ConfigError("a 6:2:2 split needs at least 5 subjects, got " + std::to_string(unique.size()));
  }
  std::vector<std::string> subjects(unique.begin(), unique.end());
  Rng rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  const auto n = subjects.size();
  const auto n_val = n / 5;
  const auto n_test = n / 5;
  SplitSpec split;
  split.seed = seed;
  auto it = subjects.begin();
  split.val.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  it += static_cast<std::ptrdiff_t>(n_val);
  split.test.assign(it, it + static_cast<std::ptrdiff_t>(n_test));
  it += static_cast<std::ptrdiff_t>(n_test);
  split.train.assign(it, subjects.end());
  for (auto* v : {&split.train, &split.val, &split.test}) std::sort(v->begin(), v->end());
  return split;
}

inline std::vector<LabeledSample> select_split(const std::vector<LabeledSample>& samples,
                                               const SplitSpec& split, Split which) {
  std::vector<LabeledSample> out;
  for (const auto& s : samples) {
    if (split.of(s.subject) == which) out.push_back(s);
  }
  return out;
}

// ------------------------------------------------------------------ disk I/O

struct Dataset {
  std::vector<LabeledSample> samples;
  std::map<std::string, std::string> split_of_id;  // from the manifest, may be "-"
};

inline void save_dataset(const std::filesystem::path& root, const std::vector<LabeledSample>& samples,
                         const SplitSpec* split = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "labels", ec);
  if (ec) throw IoError("cannot create dataset directories under " + root.string() + ": " + ec.message());
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw IoError("cannot write " + (root / "manifest.tsv").string());
  manifest << "id\tsubject\tsplit\n";
  for (const auto& s : samples) {
    validate_sample(s, s.id);
    PngImage img{s.width, s.height, 1, 16, {}};
    img.samples.resize(s.image.size());
    for (std::size_t i = 0; i < s.image.size(); ++i) {
      img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(s.image[i], 0.0, 1.0) * 65535.0));
    }
    write_png(root / "images" / (s.id + ".png"), img);
    PngImage lab{s.width, s.height, 1, 8, {s.label.labels.begin(), s.label.labels.end()}};
    write_png(root / "labels" / (s.id + ".png"), lab);
    manifest << s.id << '\t' << s.subject << '\t' << (split ? split_name(split->of(s.subject)) : "-")
             << '\n';
  }
  if (!manifest) throw IoError("failed writing " + (root / "manifest.tsv").string());
}

/// Loads every image/label pair. With a manifest, sample order and subjects
/// come from it; otherwise ids are taken from images/ in sorted order and the
/// subject is the id up to its last '_'.
inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  Dataset ds;
  std::vector<std::pair<std::string, std::string>> entries;  // id, subject
  const auto manifest_path = root / "manifest.tsv";
  if (fs::exists(manifest_path)) {
    std::ifstream is(manifest_path);
    std::string line;
    std::getline(is, line);
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string id, subject, split;
      if (!std::getline(ss, id, '\t') || !std::getline(ss, subject, '\t')) {
        throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": malformed row");
      }
      std::getline(ss, split, '\t');
      entries.emplace_back(id, subject);
      ds.split_of_id[id] = split.empty() ? "-" : split;
    }
  } else if (fs::exists(root / "images")) {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(root / "images")) {
      if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      const auto cut = id.rfind('_');
      entries.emplace_back(id, cut == std::string::npos ? id : id.substr(0, cut));
    }
  } else if (!fs::exists(root)) {
    throw IoError("dataset root " + root.string() + " does not exist");
  }
  for (const auto& [id, subject] : entries) {
    const auto image_path = root / "images" / (id + ".png");
    const auto label_path = root / "labels" / (id + ".png");
    if (!fs::exists(image_path)) throw DataError(image_path.string() + ": missing image");
    if (!fs::exists(label_path)) throw DataError(label_path.string() + ": missing label map");
    const auto img = read_png(image_path);
    const auto lab = read_png(label_path);
    if (img.channels != 1) throw DataError(image_path.string() + ": expected grayscale image");
    if (lab.channels != 1 || lab.bit_depth != 8) {
      throw DataError(label_path.string() + ": expected 8-bit single-channel labels");
    }
    if (img.width != lab.width || img.height != lab.height) {
      throw DataError(label_path.string() + ": label size " + std::to_string(lab.height) + "x" +
                      std::to_string(lab.width) + " differs from image " +
                      std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    LabeledSample s;
    s.height = img.height;
    s.width = img.width;
    s.id = id;
    s.subject = subject;
    const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
    s.image.resize(img.samples.size());
    for (std::size_t i = 0; i < img.samples.size(); ++i) s.image[i] = img.samples[i] / scale;
    s.label = LabelMap(s.height, s.width);
    for (std::size_t i = 0; i < lab.samples.size(); ++i) {
      s.label.labels[i] = static_cast<std::uint8_t>(lab.samples[i]);
    }
    validate_labels(s.label, label_path.string());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Split recorded in the manifest, or a fresh seeded split when the manifest
/// has none.
inline SplitSpec dataset_split(const Dataset& ds, std::uint64_t seed) {
  bool recorded = !ds.samples.empty();
  for (const auto& s : ds.samples) {
    auto it = ds.split_of_id.find(s.id);
    if (it == ds.split_of_id.end() || it->second == "-") recorded = false;
  }
  if (!recorded) return make_split(ds.samples, seed);
  SplitSpec split;
  split.seed = seed;
  std::map<std::string, std::string> subject_split;
  for (const auto& s : ds.samples) {
    const auto& name = ds.split_of_id.at(s.id);
    auto [it, inserted] = subject_split.emplace(s.subject, name);
    if (!inserted && it->second != name) {
      throw DataError("manifest puts subject '" + s.subject + "' in several splits");
    }
  }
  for (const auto& [subject, name] : subject_split) {
    switch (parse_split(name)) {
      case Split::kTrain: split.train.push_back(subject); break;
      case Split::kVal: split.val.push_back(subject); break;
      case Split::kTest: split.test.push_back(subject); break;
    }
  }
  return split;
}

}  // namespace mgu
