#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cwfalab/rng.hpp"
#include "cwfalab/tensor.hpp"

namespace cwfalab {

enum class CorruptionKind : int {
  GaussianNoise,
  ImpulseNoise,
  ShotNoise,
  SpeckleNoise,
  GaussianBlur,
  DefocusBlur,
  MotionBlur,
  Brightness,
  Contrast,
  Saturate,
  JpegLike,
  Snow,
  Fog,
  // zero-shot set: structurally unlike the kinds above (spatially correlated
  // procedural fields rather than per-pixel noise / kernels / tone curves)
  PerlinNoise,
  PlasmaNoise,
  CheckerboardCutout,
  SineWaves,
};

enum class CorruptionFamily : int { Noise, Blur, Digital, Weather, HeldOut };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 1;  // 1 mild .. 5 most severe
};

CorruptionFamily family_of(CorruptionKind kind);
const char* kind_name(CorruptionKind kind);
const char* family_name(CorruptionFamily family);
CorruptionKind kind_from_name(const std::string& name);  // FormatError if unknown

const std::vector<CorruptionKind>& visible_kinds();   // the 13 evaluation-grid kinds
const std::vector<CorruptionKind>& held_out_kinds();  // the 4 zero-shot kinds
std::vector<CorruptionKind> all_kinds();              // visible then held-out

// Applies one corruption to a (3,H,W) image with values in [0,1]. Pure in
// (img, spec, rng): same inputs give bit-identical output. Result is clamped
// to [0,1]. Throws ShapeError for a non-image tensor or severity outside 1..5.
Tensor corrupt(const Tensor& img, const CorruptionSpec& spec, RngStream rng);

// 10*log10(1/MSE) in dB for images in [0,1]; +infinity when a == b.
double psnr(const Tensor& a, const Tensor& b);

// Stream for one grid cell, a pure function of (seed, image index, kind,
// severity): cells can be produced in any order, or in parallel, and still
// match a sequential pass.
RngStream grid_cell_stream(std::uint64_t seed, std::size_t image_index,
                           CorruptionKind kind, int severity);

// Runs the full kinds x severities grid over the image list, handing each
// corrupted cell to the sink in canonical (image, kind, severity) order.
void corruption_grid(
    const std::vector<Tensor>& images, const std::vector<CorruptionKind>& kinds,
    const std::vector<int>& severities, std::uint64_t seed,
    const std::function<void(std::size_t image_index, const CorruptionSpec&,
                             const Tensor&)>& sink);

// Disk form of the grid: out_dir/<kind>/s<severity>/<image_id>.ppm plus a
// manifest.json listing every cell with the stream it was seeded with.
// Returns the manifest path.
std::string write_corruption_grid(const std::vector<Tensor>& images,
                                  const std::vector<std::string>& image_ids,
                                  const std::vector<CorruptionKind>& kinds,
                                  const std::vector<int>& severities,
                                  std::uint64_t seed, const std::string& out_dir);

}  // namespace cwfalab
