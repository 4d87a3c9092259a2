#include "cwfalab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cwfalab/errors.hpp"
#include "json.hpp"

namespace cwfalab {
namespace {

void validate(const DatasetSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > 256)
    throw ShapeError("dataset: num_classes must be in [2,256]");
  if (spec.train_count < 1 || spec.val_count < 1)
    throw ShapeError("dataset: split counts must be >= 1");
  if (spec.height < 16 || spec.width < 16) throw ShapeError("dataset: scenes smaller than 16px");
}

// Base colors per foreground class; classes beyond the four geometries reuse
// the palette darkened, so class identity stays color-separable.
constexpr float kPalette[4][3] = {
    {0.80f, 0.25f, 0.20f},
    {0.20f, 0.75f, 0.30f},
    {0.25f, 0.35f, 0.85f},
    {0.85f, 0.80f, 0.20f},
};

struct ShapeInstance {
  int geometry = 0;  // 0 circle, 1 rectangle, 2 triangle, 3 annulus
  std::uint8_t cls = 1;
  double cy = 0, cx = 0, r = 1;
  double theta = 0;       // rotation
  double aspect = 0.7;    // rectangle short side / long side
  double inner = 0.5;     // annulus hole radius as a fraction of r
  double stripe_len = 6;  // texture stripe wavelength, pixels
  double stripe_dir = 0;
  float color[3] = {0, 0, 0};
};

bool inside(const ShapeInstance& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  switch (s.geometry) {
    case 0:
      return dy * dy + dx * dx <= s.r * s.r;
    case 1: {
      const double c = std::cos(s.theta), sn = std::sin(s.theta);
      const double u = dx * c + dy * sn, v = -dx * sn + dy * c;
      return std::abs(u) <= s.r && std::abs(v) <= s.r * s.aspect;
    }
    case 2: {
      double vy[3], vx[3];
      for (int k = 0; k < 3; ++k) {
        const double a = s.theta + k * (2.0 * M_PI / 3.0);
        vy[k] = s.cy + s.r * std::sin(a);
        vx[k] = s.cx + s.r * std::cos(a);
      }
      double cross[3];
      for (int k = 0; k < 3; ++k) {
        const int k2 = (k + 1) % 3;
        cross[k] = (vx[k2] - vx[k]) * (y - vy[k]) - (vy[k2] - vy[k]) * (x - vx[k]);
      }
      return (cross[0] >= 0 && cross[1] >= 0 && cross[2] >= 0) ||
             (cross[0] <= 0 && cross[1] <= 0 && cross[2] <= 0);
    }
    default: {
      const double d2 = dy * dy + dx * dx;
      const double ri = s.r * s.inner;
      return d2 <= s.r * s.r && d2 >= ri * ri;
    }
  }
}

void render(Scene& scene, const ShapeInstance& s) {
  const std::size_t h = scene.mask.h, w = scene.mask.w;
  const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(s.cy - s.r - 1)));
  const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(s.cx - s.r - 1)));
  const auto y1 = std::min(h, static_cast<std::size_t>(std::max(0.0, std::ceil(s.cy + s.r + 1))));
  const auto x1 = std::min(w, static_cast<std::size_t>(std::max(0.0, std::ceil(s.cx + s.r + 1))));
  const double sd = s.stripe_dir, sl = s.stripe_len;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      // 4x4 supersampled coverage for the image, center-of-pixel for the mask
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          hits += inside(s, y + (sy + 0.5) / 4.0, x + (sx + 0.5) / 4.0);
      if (hits == 0) continue;
      const double stripe =
          std::sin(2.0 * M_PI * ((x + 0.5) * std::cos(sd) + (y + 0.5) * std::sin(sd)) / sl);
      const auto cov = static_cast<float>(hits / 16.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const auto tex = static_cast<float>(s.color[c] * (1.0 + 0.10 * stripe));
        float& px = scene.image.at(c, y, x);
        px = px * (1.0f - cov) + tex * cov;
      }
      if (inside(s, y + 0.5, x + 0.5)) scene.mask.data[y * w + x] = s.cls;
    }
}

}  // namespace

Scene generate_scene(const DatasetSpec& spec, std::size_t index) {
  validate(spec);
  if (index >= spec.train_count + spec.val_count)
    throw ShapeError("generate_scene: index beyond the dataset");
  RngStream rng = RngStream(spec.seed, 0x7363656e65ULL).derive(index);
  const std::size_t h = spec.height, w = spec.width;

  Scene scene;
  scene.stream = rng.stream();
  scene.mask.h = h;
  scene.mask.w = w;
  scene.mask.data.assign(h * w, 0);

  // background: low-frequency color gradient plus mild grain
  Tensor coarse({3, 4, 4});
  for (std::size_t i = 0; i < coarse.numel(); ++i)
    coarse.data()[i] = static_cast<float>(rng.uniform(0.25, 0.75));
  scene.image = bilinear_resize(coarse, h, w);
  for (std::size_t i = 0; i < scene.image.numel(); ++i)
    scene.image.data()[i] += static_cast<float>(rng.uniform(-0.02, 0.02));

  const std::size_t fg_classes = spec.num_classes - 1;
  const auto nshapes = static_cast<std::size_t>(2 + rng.uniform_int(5));  // 2..6

  // first shapes cover distinct classes (shuffled round robin), extras are
  // uniform; keeps per-class scene presence high without forcing every class
  std::vector<std::uint8_t> order(fg_classes);
  for (std::size_t i = 0; i < fg_classes; ++i) order[i] = static_cast<std::uint8_t>(1 + i);
  for (std::size_t i = fg_classes - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(i + 1)]);

  const double scale = static_cast<double>(std::min(h, w)) / 64.0;
  for (std::size_t j = 0; j < nshapes; ++j) {
    ShapeInstance s;
    s.cls = j < fg_classes ? order[j]
                           : static_cast<std::uint8_t>(1 + rng.uniform_int(fg_classes));
    s.geometry = (s.cls - 1) % 4;
    s.r = rng.uniform(6.0, 14.0) * scale;
    s.cy = rng.uniform(0.15 * h, 0.85 * h);
    s.cx = rng.uniform(0.15 * w, 0.85 * w);
    s.theta = rng.uniform(0.0, 2.0 * M_PI);
    s.aspect = rng.uniform(0.5, 0.9);
    s.inner = rng.uniform(0.35, 0.6);
    s.stripe_len = rng.uniform(4.0, 8.0);
    s.stripe_dir = rng.uniform(0.0, M_PI);
    const float* base = kPalette[(s.cls - 1) % 4];
    const auto shade = static_cast<float>(1.0 - 0.15 * ((s.cls - 1) / 4));
    for (std::size_t c = 0; c < 3; ++c) {
      const auto jit = static_cast<float>(rng.uniform(-0.10, 0.10));
      s.color[c] = std::clamp(base[c] * shade + jit, 0.05f, 0.95f);
    }
    render(scene, s);
  }

  // pin to the 8-bit grid so the PPM pair on disk reproduces this exactly
  for (std::size_t i = 0; i < scene.image.numel(); ++i)
    scene.image.data()[i] = static_cast<float>(quantize_u8(scene.image.data()[i])) / 255.0f;
  return scene;
}

std::vector<Scene> generate_split(const DatasetSpec& spec, bool validation) {
  validate(spec);
  const std::size_t begin = validation ? spec.train_count : 0;
  const std::size_t count = validation ? spec.val_count : spec.train_count;
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(spec, begin + i));
  return scenes;
}

Scene hflip(const Scene& scene) {
  const std::size_t h = scene.mask.h, w = scene.mask.w;
  Scene out;
  out.stream = scene.stream;
  out.image = Tensor::uninit(scene.image.shape());
  out.mask.h = h;
  out.mask.w = w;
  out.mask.data.resize(h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image.at(c, y, x) = scene.image.at(c, y, w - 1 - x);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.mask.data[y * w + x] = scene.mask.data[y * w + w - 1 - x];
  return out;
}

Scene augment_train(const Scene& scene, RngStream& rng, const AugmentOptions& options) {
  const std::size_t h = scene.mask.h, w = scene.mask.w;
  const std::size_t ch = options.crop_height ? options.crop_height : h;
  const std::size_t cw = options.crop_width ? options.crop_width : w;
  if (ch > h || cw > w) throw ShapeError("augment_train: crop larger than the scene");

  Scene out = scene;
  if (options.flip && rng.bernoulli(0.5)) out = hflip(out);
  if (options.crop_height || options.crop_width) {
    const std::size_t oy = rng.uniform_int(h - ch + 1);
    const std::size_t ox = rng.uniform_int(w - cw + 1);
    Scene cropped;
    cropped.stream = out.stream;
    cropped.image = Tensor::uninit({3, ch, cw});
    cropped.mask.h = ch;
    cropped.mask.w = cw;
    cropped.mask.data.resize(ch * cw);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x)
          cropped.image.at(c, y, x) = out.image.at(c, oy + y, ox + x);
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x)
        cropped.mask.data[y * cw + x] = out.mask.data[(oy + y) * w + ox + x];
    out = std::move(cropped);
  }
  if (options.image_corruption && rng.bernoulli(options.corruption_prob)) {
    const std::uint64_t key = rng.next_u64();
    out.image = corrupt(out.image, *options.image_corruption, rng.derive(key));
  }
  return out;
}

std::string write_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  validate(spec);
  namespace fs = std::filesystem;
  nlohmann::json scenes_json = nlohmann::json::array();
  for (const bool validation : {false, true}) {
    const char* split = validation ? "val" : "train";
    fs::create_directories(fs::path(out_dir) / split);
    const std::size_t begin = validation ? spec.train_count : 0;
    const std::size_t count = validation ? spec.val_count : spec.train_count;
    for (std::size_t i = 0; i < count; ++i) {
      const Scene scene = generate_scene(spec, begin + i);
      char name[32];
      std::snprintf(name, sizeof name, "%05zu", i);
      write_ppm((fs::path(out_dir) / split / (std::string(name) + ".ppm")).string(), scene.image);
      write_pgm((fs::path(out_dir) / split / (std::string(name) + ".pgm")).string(), scene.mask);
      scenes_json.push_back({{"split", split},
                             {"index", begin + i},
                             {"name", name},
                             {"stream", scene.stream}});
    }
  }
  nlohmann::json manifest{{"num_classes", spec.num_classes},
                          {"height", spec.height},
                          {"width", spec.width},
                          {"train_count", spec.train_count},
                          {"val_count", spec.val_count},
                          {"seed", spec.seed},
                          {"scenes", scenes_json}};
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  std::ofstream out(manifest_path);
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError("write_dataset: cannot write " + manifest_path);
  return manifest_path;
}

}  // namespace cwfalab
