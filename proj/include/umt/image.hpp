#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace umt {

/// Dense H x W x 3 image, row-major with interleaved channels, values
/// nominally in [0, 1].
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * width * kChannels, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void clip01();

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// 8-bit RGB PNG, values clipped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Lossless sidecar: "UMTRAW01", int32 height, int32 width, int32 channels,
/// then little-endian float64 samples in HWC order.
void write_raw(const std::filesystem::path& path, const Image& image);
Image read_raw(const std::filesystem::path& path);

}  // namespace umt
