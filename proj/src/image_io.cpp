#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "umt/common.hpp"
#include "umt/image.hpp"

namespace umt {

static_assert(std::endian::native == std::endian::little, "raw sidecar assumes little-endian host");

namespace {

constexpr std::array<char, 8> kRawMagic = {'U', 'M', 'T', 'R', 'A', 'W', '0', '1'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void Image::clip01() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(image.width()) * Image::kChannels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < Image::kChannels; ++c) {
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        row[static_cast<std::size_t>(x) * Image::kChannels + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw MissingArtifactError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng read failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  Image image(height, width);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < Image::kChannels; ++c)
        image.at(y, x, c) = row[static_cast<std::size_t>(x) * Image::kChannels + c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_raw(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::int32_t dims[3] = {image.height(), image.width(), Image::kChannels};
  out.write(kRawMagic.data(), kRawMagic.size());
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(image.data().data()),
            static_cast<std::streamsize>(image.data().size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write on " + path.string());
}

Image read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::array<char, 8> magic{};
  std::int32_t dims[3] = {0, 0, 0};
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in || magic != kRawMagic || dims[2] != Image::kChannels || dims[0] <= 0 || dims[1] <= 0)
    throw std::runtime_error("not a raw image tensor: " + path.string());
  Image image(dims[0], dims[1]);
  in.read(reinterpret_cast<char*>(image.data().data()),
          static_cast<std::streamsize>(image.data().size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated raw image tensor: " + path.string());
  return image;
}

}  // namespace umt
