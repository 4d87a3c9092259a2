#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cwfalab/errors.hpp"
#include "cwfalab/tensor.hpp"

namespace cwfalab {

// 8-bit single-channel raster, used for class-id masks
struct MaskImage {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> data;  // row-major, h*w entries
};

// Binary PPM (P6, maxval 255). Images are (3,H,W) float tensors in [0,1];
// writing clamps and rounds to 8 bits, so a read-back equals the original
// only if the original was already quantized to k/255 values.
void write_ppm(const std::string& path, const Tensor& img);
Tensor read_ppm(const std::string& path);

// Binary PGM (P5, maxval 255) for masks.
void write_pgm(const std::string& path, const MaskImage& mask);
MaskImage read_pgm(const std::string& path);

inline std::uint8_t quantize_u8(float v) {
  v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(v * 255.0f + 0.5f);
}

}  // namespace cwfalab
