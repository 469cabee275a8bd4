#pragma once

// The command-line workflows, independent of argument parsing.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mgunet/data.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/gradcheck_suite.hpp"
#include "mgunet/metrics.hpp"
#include "mgunet/pipeline.hpp"
#include "mgunet/png_io.hpp"
#include "mgunet/trainer.hpp"

namespace mgu {

struct RunConfig {
  std::string command;
  std::filesystem::path data;
  std::filesystem::path out;
  std::filesystem::path spec;        // phantom spec file (key=value)
  std::filesystem::path checkpoint;  // model to load, or last.ckpt to resume
  std::filesystem::path image;
  std::optional<std::uint64_t> seed;
  std::size_t count = 160;  // phantom images
  std::size_t epochs = 50;
  double lr = 1e-3;
  double lambda = 2.0;
  std::string ablation = "two-stage";
  bool grb = true;
  bool msp = true;
  std::size_t base = 32;
  std::size_t max_train = 0;  // 0: whole split
  std::size_t max_val = 0;
  bool augment = true;
  std::string split = "test";
  std::string scope = "op";
  double tol = 0.0;  // 0: scope default
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !is.eof()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

}  // namespace detail

/// Applies `key = value` lines (blank lines and '#' comments ignored). Keys
/// are the long flag names; `grb`/`msp`/`augment` take booleans.
inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    using detail::parse_number;
    if (key == "data") c.data = value;
    else if (key == "out") c.out = value;
    else if (key == "spec") c.spec = value;
    else if (key == "checkpoint") c.checkpoint = value;
    else if (key == "image") c.image = value;
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "n") c.count = parse_number<std::size_t>(key, value);
    else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, value);
    else if (key == "lr") c.lr = parse_number<double>(key, value);
    else if (key == "lambda") c.lambda = parse_number<double>(key, value);
    else if (key == "ablation") c.ablation = value;
    else if (key == "grb") c.grb = detail::parse_bool(key, value);
    else if (key == "msp") c.msp = detail::parse_bool(key, value);
    else if (key == "augment") c.augment = detail::parse_bool(key, value);
    else if (key == "base") c.base = parse_number<std::size_t>(key, value);
    else if (key == "max-train") c.max_train = parse_number<std::size_t>(key, value);
    else if (key == "max-val") c.max_val = parse_number<std::size_t>(key, value);
    else if (key == "split") c.split = value;
    else if (key == "scope") c.scope = value;
    else if (key == "tol") c.tol = parse_number<double>(key, value);
    else throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

/// Model topology selected by the ablation switches. `one-stage` is the
/// plain U-shape baseline, without the reasoning module.
inline ModelConfig model_config_for(const RunConfig& c) {
  ModelConfig m;
  m.base_channels = c.base;
  if (c.ablation == "one-stage") {
    m.two_stage = false;
    m.grb = false;
    m.msp = false;
  } else if (c.ablation == "two-stage") {
    m.grb = c.grb;
    m.msp = c.msp;
  } else {
    throw ConfigError("unknown ablation '" + c.ablation + "' (one-stage, two-stage)");
  }
  if (c.base == 0) throw ConfigError("base channel width must be positive");
  return m;
}

namespace detail {

inline std::uint64_t require_seed(const RunConfig& c) {
  if (!c.seed) throw ConfigError(c.command + " needs --seed");
  return *c.seed;
}

inline void require_out(const RunConfig& c) {
  if (c.out.empty()) throw ConfigError(c.command + " needs --out");
}

inline void require_dir(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("missing --") + what);
  if (!std::filesystem::is_directory(p)) throw IoError(p.string() + " is not a directory");
}

inline void require_file(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("missing --") + what);
  if (!std::filesystem::is_regular_file(p)) throw IoError(p.string() + ": no such file");
}

inline void make_out_dir(const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec || !std::filesystem::is_directory(out)) {
    throw IoError("cannot create output directory " + out.string());
  }
}

inline std::vector<LabeledSample> first_n(std::vector<LabeledSample> v, std::size_t n) {
  if (n && v.size() > n) v.resize(n);
  return v;
}

}  // namespace detail

// --------------------------------------------------------------- gen-phantom

inline std::array<std::uint64_t, kNumClasses> class_histogram(const std::vector<LabeledSample>& samples) {
  std::array<std::uint64_t, kNumClasses> h{};
  for (const auto& s : samples) {
    for (auto l : s.label.labels) ++h[l];
  }
  return h;
}

inline int cmd_gen_phantom(const RunConfig& c, std::ostream& os) {
  const auto seed = detail::require_seed(c);
  detail::require_out(c);
  PhantomSpec spec;
  if (!c.spec.empty()) spec = read_phantom_spec(c.spec);
  spec.seed = seed;
  spec.validate();
  if (c.count == 0) throw ConfigError("gen-phantom needs n >= 1");
  const auto samples = gen_phantom(spec, c.count);
  detail::make_out_dir(c.out);
  std::set<std::string> subjects;
  for (const auto& s : samples) subjects.insert(s.subject);
  std::optional<SplitSpec> split;
  if (subjects.size() >= 5) split = make_split(samples, seed);
  save_dataset(c.out, samples, split ? &*split : nullptr);

  os << "wrote " << samples.size() << " phantom scans (" << subjects.size() << " subjects, "
     << spec.height << "x" << spec.width << ") to " << c.out.string() << "\n";
  if (split) {
    os << "split: " << split->train.size() << " train / " << split->val.size() << " val / "
       << split->test.size() << " test subjects\n";
  }
  const auto hist = class_histogram(samples);
  const double total = static_cast<double>(samples.size() * spec.height * spec.width);
  os << "class\tpixels\tfraction\n";
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    os << kClassNames[k] << '\t' << hist[k] << '\t' << std::fixed << std::setprecision(4)
       << hist[k] / total << '\n';
  }
  os.unsetf(std::ios::fixed);
  return 0;
}

// --------------------------------------------------------------------- train

inline int cmd_train(const RunConfig& c, std::ostream& os) {
  const auto seed = detail::require_seed(c);
  detail::require_out(c);
  detail::require_dir(c.data, "data");
  if (!c.checkpoint.empty()) detail::require_file(c.checkpoint, "checkpoint");
  const auto model_config = model_config_for(c);
  TrainConfig tc;
  tc.epochs = c.epochs;
  tc.lr0 = c.lr;
  tc.lambda = c.lambda;
  tc.seed = seed;
  tc.augment = c.augment;
  tc.validate();

  const auto ds = load_dataset(c.data);
  if (ds.samples.empty()) throw DataError(c.data.string() + ": dataset is empty");
  const auto split = dataset_split(ds, seed);
  const auto train_set = detail::first_n(select_split(ds.samples, split, Split::kTrain), c.max_train);
  const auto val_set = detail::first_n(select_split(ds.samples, split, Split::kVal), c.max_val);
  detail::make_out_dir(c.out);

  Rng rng(seed);
  TwoStageModel model(model_config, rng);
  os << "model: " << model_config.describe() << ", " << count_values(model.parameters())
     << " parameters\n";
  os << "train " << train_set.size() << " scans, val " << val_set.size() << " scans, "
     << tc.epochs << " epochs\n";
  TrainOptions options;
  options.out_dir = c.out;
  if (!c.checkpoint.empty()) options.resume = c.checkpoint;
  options.on_epoch = [&os](const EpochLog& e) {
    os << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.total << " val_mean_dice "
       << e.val_mean_dice << std::endl;
  };
  const auto result = train(model, train_set, val_set, tc, options);
  os << "best val mean Dice " << result.best_val_dice << " at epoch " << result.best_epoch << "\n";
  return 0;
}

// ---------------------------------------------------------------------- eval

inline int cmd_eval(const RunConfig& c, std::ostream& os) {
  detail::require_file(c.checkpoint, "checkpoint");
  detail::require_dir(c.data, "data");
  detail::require_out(c);
  const auto which = parse_split(c.split);
  const auto model = load_model(c.checkpoint);
  const auto ds = load_dataset(c.data);
  if (ds.samples.empty()) throw DataError(c.data.string() + ": dataset is empty");
  const auto split = dataset_split(ds, c.seed.value_or(0));
  const auto samples = select_split(ds.samples, split, which);
  if (samples.empty()) throw DataError("split '" + c.split + "' has no samples");
  const auto multiple = model.config().required_multiple();
  for (const auto& s : samples) {
    if (s.height % multiple || s.width % multiple) {
      throw DimensionError("sample '" + s.id + "' is " + std::to_string(s.height) + "x" +
                           std::to_string(s.width) + "; the model needs multiples of " +
                           std::to_string(multiple));
    }
  }
  const auto report = evaluate(model, samples);
  detail::make_out_dir(c.out);
  write_report_tsv(c.out / "report.tsv", report);
  const auto table = format_report(report);
  std::ofstream(c.out / "report.txt") << table;
  os << model.config().describe() << " on " << samples.size() << " " << c.split << " scans\n"
     << table;
  return 0;
}

// ------------------------------------------------------------------- predict

/// Overlay colours, indexed by class.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kPalette{{
    {0x00, 0x00, 0x00},  // background
    {0xE6, 0x19, 0x4B},  // RNFL
    {0x3C, 0xB4, 0x4B},  // GCL
    {0xFF, 0xE1, 0x19},  // IPL
    {0x43, 0x63, 0xD8},  // INL
    {0xF5, 0x82, 0x31},  // OPL
    {0x91, 0x1E, 0xB4},  // ONL
    {0x46, 0xF0, 0xF0},  // IS/OS
    {0xF0, 0x32, 0xE6},  // RPE
    {0xBC, 0xF6, 0x0C},  // choroid
    {0xFF, 0xFF, 0xFF},  // disc
}};

/// Blend weight of the class colour over the grayscale image; background
/// pixels keep the image.
inline constexpr double kOverlayAlpha = 0.5;

inline std::uint8_t overlay_channel(double gray, std::uint8_t label, std::size_t channel) {
  const double g = std::clamp(gray, 0.0, 1.0) * 255.0;
  if (label == 0) return static_cast<std::uint8_t>(std::lround(g));
  return static_cast<std::uint8_t>(
      std::lround((1.0 - kOverlayAlpha) * g + kOverlayAlpha * kPalette[label][channel]));
}

/// Grayscale intensities in [0, 1]; RGB inputs are averaged.
inline std::vector<double> png_to_gray(const PngImage& img) {
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<double> out(img.width * img.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < img.channels; ++k) sum += img.samples[i * img.channels + k];
    out[i] = sum / static_cast<double>(img.channels) / scale;
  }
  return out;
}

struct Prediction {
  LabelMap labels;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
};

/// Replicate-pads to the model's required multiple, predicts, crops back.
inline Prediction predict_padded(const TwoStageModel& model, const std::vector<double>& gray,
                                 std::size_t height, std::size_t width) {
  const auto m = model.config().required_multiple();
  Prediction p;
  p.pad_bottom = (m - height % m) % m;
  p.pad_right = (m - width % m) % m;
  NoGradGuard guard;
  auto image = Tensor::from_values({1, 1, height, width}, gray);
  if (p.pad_bottom || p.pad_right) image = replicate_pad(image, p.pad_bottom, p.pad_right);
  const auto full = predict(model, image);
  p.labels = LabelMap(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) p.labels.at(y, x) = full.at(y, x);
  }
  return p;
}

inline int cmd_predict(const RunConfig& c, std::ostream& os) {
  detail::require_file(c.checkpoint, "checkpoint");
  detail::require_file(c.image, "image");
  detail::require_out(c);
  const auto model = load_model(c.checkpoint);
  const auto img = read_png(c.image);
  const auto gray = png_to_gray(img);
  const auto pred = predict_padded(model, gray, img.height, img.width);
  detail::make_out_dir(c.out);
  const auto stem = c.image.stem().string();

  PngImage classes{img.width, img.height, 1, 8, {pred.labels.labels.begin(), pred.labels.labels.end()}};
  write_png(c.out / (stem + "_classes.png"), classes);
  PngImage overlay{img.width, img.height, 3, 8, {}};
  overlay.samples.resize(img.width * img.height * 3);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      overlay.samples[3 * i + k] = overlay_channel(gray[i], pred.labels.labels[i], k);
    }
  }
  write_png(c.out / (stem + "_overlay.png"), overlay);

  std::array<std::uint64_t, kNumClasses> hist{};
  for (auto l : pred.labels.labels) ++hist[l];
  nlohmann::json meta;
  meta["image"] = c.image.string();
  meta["checkpoint"] = c.checkpoint.string();
  meta["model"] = model.config().describe();
  meta["height"] = img.height;
  meta["width"] = img.width;
  meta["pad_bottom"] = pred.pad_bottom;
  meta["pad_right"] = pred.pad_right;
  meta["padding"] = (pred.pad_bottom || pred.pad_right) ? "replicate" : "none";
  meta["class_pixels"] = hist;
  std::ofstream(c.out / (stem + "_meta.json")) << meta.dump(2) << "\n";
  os << "wrote " << stem << "_classes.png, " << stem << "_overlay.png and " << stem
     << "_meta.json to " << c.out.string();
  if (pred.pad_bottom || pred.pad_right) {
    os << " (input padded by " << pred.pad_bottom << " rows, " << pred.pad_right << " columns)";
  }
  os << "\n";
  return 0;
}

// ----------------------------------------------------------------- gradcheck

inline int cmd_gradcheck(const RunConfig& c, std::ostream& os) {
  const auto scope = parse_grad_scope(c.scope);
  const auto reports = run_gradcheck_suite(scope, c.tol, c.seed.value_or(0));
  bool ok = true;
  for (const auto& r : reports) {
    os << format_gradcheck(r) << "\n";
    ok = ok && r.passed;
  }
  os << (ok ? "all passed" : "FAILED") << " (" << reports.size() << " checks, scope " << c.scope
     << ")\n";
  return ok ? 0 : 4;
}

inline int run_command(const RunConfig& c, std::ostream& os) {
  if (c.command == "gen-phantom") return cmd_gen_phantom(c, os);
  if (c.command == "train") return cmd_train(c, os);
  if (c.command == "eval") return cmd_eval(c, os);
  if (c.command == "predict") return cmd_predict(c, os);
  if (c.command == "gradcheck") return cmd_gradcheck(c, os);
  throw ConfigError("unknown command '" + c.command + "'");
}

}  // namespace mgu
