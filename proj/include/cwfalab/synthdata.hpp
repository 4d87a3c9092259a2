#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cwfalab/corruptions.hpp"
#include "cwfalab/image_io.hpp"
#include "cwfalab/rng.hpp"
#include "cwfalab/tensor.hpp"

namespace cwfalab {

struct DatasetSpec {
  std::size_t num_classes = 5;  // background + one geometry per foreground class
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t train_count = 1000;
  std::size_t val_count = 200;
  std::uint64_t seed = 1;
};

// One generated example. Image values live on the 8-bit grid (k/255), so a
// PPM round trip reproduces them bit-exactly.
struct Scene {
  Tensor image;              // (3,H,W) in [0,1]
  MaskImage mask;            // class ids < num_classes, pixel-aligned with image
  std::uint64_t stream = 0;  // sub-stream id the scene was drawn from
};

struct AugmentOptions {
  bool flip = true;             // horizontal mirror with probability 1/2
  std::size_t crop_height = 0;  // 0 keeps the full scene
  std::size_t crop_width = 0;
  std::optional<CorruptionSpec> image_corruption;  // never touches the mask
  double corruption_prob = 0.5;                    // per-sample gate for the slot above
};

// Pure in (spec, index): background gradient plus 2..6 anti-aliased textured
// shapes, mask labeled by center-of-pixel coverage in draw order, so the mask
// always matches the visible surface.
Scene generate_scene(const DatasetSpec& spec, std::size_t index);

// Train split is indices [0, train_count), validation the next val_count.
std::vector<Scene> generate_split(const DatasetSpec& spec, bool validation);

// Mirrors image and mask jointly; building block of augment_train.
Scene hflip(const Scene& scene);

Scene augment_train(const Scene& scene, RngStream& rng, const AugmentOptions& options);

// Persists both splits as <out_dir>/<split>/<index>.ppm/.pgm pairs plus a
// manifest.json echoing the spec and per-index streams. Returns manifest path.
std::string write_dataset(const DatasetSpec& spec, const std::string& out_dir);

}  // namespace cwfalab
