#pragma once

// Tissue classes and per-pixel label maps.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"

namespace mgu {

/// Final labelling: background, nine retinal layers top to bottom, optic disc.
enum class Tissue : std::uint8_t {
  kBackground = 0,
  kRnfl = 1,
  kGcl = 2,
  kIpl = 3,
  kInl = 4,
  kOpl = 5,
  kOnl = 6,
  kIsOs = 7,
  kRpe = 8,
  kChoroid = 9,
  kDisc = 10,
};

inline constexpr std::size_t kNumClasses = 11;
inline constexpr std::size_t kLayerNetClasses = 10;  // background + 9 layers
inline constexpr std::size_t kDiscNetClasses = 2;    // non-disc / disc
inline constexpr std::uint8_t kDiscLabel = 10;

inline const std::array<const char*, kNumClasses> kClassNames{
    "background", "RNFL", "GCL", "IPL", "INL", "OPL", "ONL", "IS/OS", "RPE", "choroid", "disc"};

/// Projections from the 11-class labelling onto the two stage-specific schemes.
struct ClassScheme {
  /// {0 non-disc, 1 disc}
  static constexpr std::uint8_t to_disc_stage(std::uint8_t label) {
    return label == kDiscLabel ? 1 : 0;
  }
  /// {0 background, 1..9 layers}; the disc folds into background.
  static constexpr std::uint8_t to_layer_stage(std::uint8_t label) {
    return label == kDiscLabel ? 0 : label;
  }
};

/// H x W map of class ids, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline void validate_labels(const LabelMap& map, const std::string& where) {
  if (map.labels.size() != map.height * map.width) {
    throw DataError(where + ": label buffer does not match " + std::to_string(map.height) + "x" +
                    std::to_string(map.width));
  }
  for (auto v : map.labels) {
    if (v >= kNumClasses) {
      throw DataError(where + ": label value " + std::to_string(v) + " outside 0.." +
                      std::to_string(kNumClasses - 1));
    }
  }
}

}  // namespace mgu
