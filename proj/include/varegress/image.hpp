#pragma once

#include <cstddef>
#include <string>

namespace varegress {

// Images are flattened row-major with the channel index fastest (H x W x C).
struct ImageShape {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;

  std::size_t pixels() const noexcept { return height * width * channels; }
  std::size_t index(std::size_t row, std::size_t col, std::size_t ch = 0) const noexcept {
    return (row * width + col) * channels + ch;
  }

  std::string to_string() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
  }

  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

}  // namespace varegress
