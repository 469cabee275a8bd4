#pragma once

// Minimal PNG reading/writing on top of libpng: 8/16-bit grayscale and
// 8-bit RGB.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"

namespace mgu {

/// Decoded image: `samples` holds height * width * channels values in the
/// file's bit depth (8 or 16), row-major, interleaved.
struct PngImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp message) {
  auto* where = static_cast<std::string*>(png_get_error_ptr(png));
  throw DataError(*where + ": " + message);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const PngImage& image) {
  std::string where = path.string();
  if (image.samples.size() != image.width * image.height * image.channels) {
    throw DataError(where + ": sample buffer does not match image size");
  }
  detail::FilePtr file(std::fopen(where.c_str(), "wb"));
  if (!file) throw IoError("cannot open " + where + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &where,
                                            detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Cleanup {
    png_structp* png;
    png_infop* info;
    ~Cleanup() { png_destroy_write_struct(png, info); }
  } cleanup{&png, &info};

  png_init_io(png, file.get());
  const int color = image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), image.bit_depth, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t bytes_per_sample = image.bit_depth == 16 ? 2 : 1;
  std::vector<png_byte> row(image.width * image.channels * bytes_per_sample);
  for (std::size_t y = 0; y < image.height; ++y) {
    const auto* src = image.samples.data() + y * image.width * image.channels;
    for (std::size_t i = 0; i < image.width * image.channels; ++i) {
      if (bytes_per_sample == 2) {
        row[2 * i] = static_cast<png_byte>(src[i] >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<png_byte>(src[i] & 0xff);
      } else {
        row[i] = static_cast<png_byte>(src[i]);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

/// Reads grayscale or RGB(A) PNGs; palette images are expanded to RGB and
/// alpha is dropped.
inline PngImage read_png(const std::filesystem::path& path) {
  std::string where = path.string();
  detail::FilePtr file(std::fopen(where.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + where);
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw DataError(where + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &where,
                                           detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Cleanup {
    png_structp* png;
    png_infop* info;
    ~Cleanup() { png_destroy_read_struct(png, info, nullptr); }
  } cleanup{&png, &info};

  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngImage image;
  image.width = png_get_image_width(png, info);
  image.height = png_get_image_height(png, info);
  image.channels = png_get_channels(png, info);
  image.bit_depth = png_get_bit_depth(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  image.samples.resize(image.width * image.height * image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    auto* dst = image.samples.data() + y * image.width * image.channels;
    for (std::size_t i = 0; i < image.width * image.channels; ++i) {
      dst[i] = image.bit_depth == 16
                   ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1])
                   : row[i];
    }
  }
  png_read_end(png, nullptr);
  return image;
}

}  // namespace mgu
