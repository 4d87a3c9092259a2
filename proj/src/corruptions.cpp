#include "cwfalab/corruptions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cwfalab/errors.hpp"
#include "cwfalab/image_io.hpp"
#include "json.hpp"

namespace cwfalab {
namespace {

// Severity tables, 5 entries each, strictly monotone toward heavier
// degradation. Calibrated for [0,1] images at the 64x64 scale this project
// trains on; severity-vs-PSNR monotonicity is enforced by test, exact values
// are otherwise free choices.
constexpr double kGaussianSigma[5] = {0.04, 0.08, 0.12, 0.18, 0.26};
constexpr double kImpulseFraction[5] = {0.01, 0.03, 0.06, 0.10, 0.17};
constexpr double kShotPhotons[5] = {60.0, 25.0, 12.0, 5.0, 3.0};  // fewer photons = noisier
constexpr double kSpeckleSigma[5] = {0.12, 0.20, 0.32, 0.45, 0.62};
constexpr int kBlurRadius[5] = {1, 2, 3, 4, 6};
constexpr int kMotionLength[5] = {3, 5, 7, 9, 13};
constexpr double kBrightnessShift[5] = {0.08, 0.14, 0.20, 0.28, 0.38};
constexpr double kContrastFactor[5] = {0.75, 0.60, 0.45, 0.30, 0.18};
constexpr double kSaturateFactor[5] = {1.6, 2.2, 2.8, 3.6, 4.6};
constexpr double kJpegQuantStep[5] = {0.03, 0.06, 0.10, 0.16, 0.26};
constexpr double kSnowDensity[5] = {0.010, 0.020, 0.032, 0.048, 0.072};
constexpr int kSnowStreakLen[5] = {5, 7, 9, 11, 13};
constexpr double kSnowLift[5] = {0.02, 0.04, 0.06, 0.09, 0.12};
constexpr double kFogStrength[5] = {0.25, 0.40, 0.52, 0.65, 0.80};
constexpr double kPerlinAmp[5] = {0.10, 0.17, 0.25, 0.35, 0.48};
constexpr double kPlasmaAmp[5] = {0.12, 0.20, 0.29, 0.40, 0.55};
constexpr double kCheckerAlpha[5] = {0.30, 0.45, 0.60, 0.80, 1.00};
constexpr double kSineAmp[5] = {0.08, 0.13, 0.19, 0.27, 0.38};

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

void clamp01_inplace(Tensor& t) {
  float* d = t.data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = clamp01(d[i]);
}

struct Tap {
  int dy;
  int dx;
  float w;
};

// Convolution with an arbitrary tap list; edges replicate.
Tensor conv_taps(const Tensor& x, const std::vector<Tap>& taps) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = Tensor::uninit({c, h, w});
  const auto hi = static_cast<long>(h) - 1;
  const auto wi = static_cast<long>(w) - 1;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        float acc = 0.0f;
        for (const Tap& t : taps) {
          const long sy = std::clamp(static_cast<long>(y) + t.dy, 0L, hi);
          const long sx = std::clamp(static_cast<long>(xx) + t.dx, 0L, wi);
          acc += t.w * x.at(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
        out.at(ci, y, xx) = acc;
      }
  return out;
}

std::vector<Tap> gaussian_taps_1d(int radius, bool vertical) {
  const double sigma = 0.6 * radius;
  std::vector<Tap> taps;
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (int i = -radius; i <= radius; ++i) {
    const auto w = static_cast<float>(std::exp(-(i * i) / (2.0 * sigma * sigma)) / sum);
    taps.push_back(vertical ? Tap{i, 0, w} : Tap{0, i, w});
  }
  return taps;
}

// Line kernel through the origin at angle theta; rounded offsets can collide
// at shallow angles, so weights accumulate per unique offset.
std::vector<Tap> line_taps(int length, double theta) {
  const double dy = std::sin(theta), dx = std::cos(theta);
  std::vector<Tap> taps;
  const int half = (length - 1) / 2;
  for (int t = -half; t <= half; ++t) {
    const int oy = static_cast<int>(std::lround(t * dy));
    const int ox = static_cast<int>(std::lround(t * dx));
    bool merged = false;
    for (Tap& tap : taps)
      if (tap.dy == oy && tap.dx == ox) {
        tap.w += 1.0f;
        merged = true;
        break;
      }
    if (!merged) taps.push_back({oy, ox, 1.0f});
  }
  for (Tap& tap : taps) tap.w /= static_cast<float>(length);
  return taps;
}

std::uint64_t poisson_knuth(RngStream& rng, double lambda) {
  // exact for the small photon counts used here (lambda <= 60)
  const double limit = std::exp(-lambda);
  std::uint64_t k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= rng.uniform();
  } while (p > limit);
  return k - 1;
}

// ---- procedural fields ----

// Diamond-square midpoint displacement on a (2^k+1)^2 grid, min-max
// normalized to [0,1].
std::vector<float> diamond_square(RngStream& rng, std::size_t n) {
  std::vector<float> f(n * n, 0.0f);
  auto at = [&](std::size_t y, std::size_t x) -> float& { return f[y * n + x]; };
  at(0, 0) = static_cast<float>(rng.uniform());
  at(0, n - 1) = static_cast<float>(rng.uniform());
  at(n - 1, 0) = static_cast<float>(rng.uniform());
  at(n - 1, n - 1) = static_cast<float>(rng.uniform());
  double amp = 0.5;
  for (std::size_t step = n - 1; step > 1; step /= 2, amp *= 0.5) {
    const std::size_t half = step / 2;
    for (std::size_t y = half; y < n; y += step)
      for (std::size_t x = half; x < n; x += step) {
        const float avg = 0.25f * (at(y - half, x - half) + at(y - half, x + half) +
                                   at(y + half, x - half) + at(y + half, x + half));
        at(y, x) = avg + static_cast<float>(rng.uniform(-amp, amp));
      }
    for (std::size_t y = 0; y < n; y += half)
      for (std::size_t x = (y / half % 2 == 0) ? half : 0; x < n; x += step) {
        float sum = 0.0f;
        int cnt = 0;
        if (y >= half) sum += at(y - half, x), ++cnt;
        if (y + half < n) sum += at(y + half, x), ++cnt;
        if (x >= half) sum += at(y, x - half), ++cnt;
        if (x + half < n) sum += at(y, x + half), ++cnt;
        at(y, x) = sum / static_cast<float>(cnt) + static_cast<float>(rng.uniform(-amp, amp));
      }
  }
  const auto [mn, mx] = std::minmax_element(f.begin(), f.end());
  const float lo = *mn, span = *mx - *mn;
  for (float& v : f) v = span > 0.0f ? (v - lo) / span : 0.5f;
  return f;
}

// Classic gradient noise: hashed lattice gradients, quintic fade, value
// roughly in [-1,1].
struct PerlinField {
  std::uint8_t perm[512];
  explicit PerlinField(RngStream& rng) {
    std::uint8_t p[256];
    for (int i = 0; i < 256; ++i) p[i] = static_cast<std::uint8_t>(i);
    for (int i = 255; i > 0; --i)
      std::swap(p[i], p[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    for (int i = 0; i < 512; ++i) perm[i] = p[i & 255];
  }
  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
  static double grad_dot(std::uint8_t h, double x, double y) {
    static const double gx[8] = {1, -1, 1, -1, M_SQRT2, -M_SQRT2, 0, 0};
    static const double gy[8] = {1, 1, -1, -1, 0, 0, M_SQRT2, -M_SQRT2};
    return gx[h & 7] * x + gy[h & 7] * y;
  }
  double operator()(double x, double y) const {
    const int xi = static_cast<int>(std::floor(x)) & 255;
    const int yi = static_cast<int>(std::floor(y)) & 255;
    const double xf = x - std::floor(x), yf = y - std::floor(y);
    const double u = fade(xf), v = fade(yf);
    const std::uint8_t aa = perm[perm[xi] + yi], ab = perm[perm[xi] + yi + 1];
    const std::uint8_t ba = perm[perm[xi + 1] + yi], bb = perm[perm[xi + 1] + yi + 1];
    const double x1 = grad_dot(aa, xf, yf) + u * (grad_dot(ba, xf - 1, yf) - grad_dot(aa, xf, yf));
    const double x2 =
        grad_dot(ab, xf, yf - 1) + u * (grad_dot(bb, xf - 1, yf - 1) - grad_dot(ab, xf, yf - 1));
    return x1 + v * (x2 - x1);
  }
};

// Multi-octave bilinear value noise (random lattice values, not gradients;
// structurally distinct from both Perlin and diamond-square). Output within
// [-1,1] before amplitude scaling.
std::vector<float> value_noise_field(RngStream& rng, std::size_t h, std::size_t w) {
  std::vector<float> field(h * w, 0.0f);
  const std::size_t spacings[4] = {32, 16, 8, 4};
  double amp = 0.5;
  for (std::size_t o = 0; o < 4; ++o, amp *= 0.5) {
    const std::size_t sp = spacings[o];
    const std::size_t gh = h / sp + 2, gw = w / sp + 2;
    std::vector<float> grid(gh * gw);
    for (float& g : grid) g = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (std::size_t y = 0; y < h; ++y) {
      const double fy = static_cast<double>(y) / sp;
      const auto y0 = static_cast<std::size_t>(fy);
      const auto ty = static_cast<float>(fy - y0);
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = static_cast<double>(x) / sp;
        const auto x0 = static_cast<std::size_t>(fx);
        const auto tx = static_cast<float>(fx - x0);
        const float top = grid[y0 * gw + x0] * (1 - tx) + grid[y0 * gw + x0 + 1] * tx;
        const float bot = grid[(y0 + 1) * gw + x0] * (1 - tx) + grid[(y0 + 1) * gw + x0 + 1] * tx;
        field[y * w + x] += static_cast<float>(amp) * (top * (1 - ty) + bot * ty);
      }
    }
  }
  return field;
}

// ---- per-kind transforms (img is (3,h,w), values already validated) ----

Tensor add_iid_noise(const Tensor& img, RngStream& rng, double sigma, bool multiplicative) {
  Tensor out = Tensor::uninit(img.shape());
  const float* in = img.data();
  float* o = out.data();
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const auto n = static_cast<float>(rng.normal() * sigma);
    o[i] = clamp01(multiplicative ? in[i] * (1.0f + n) : in[i] + n);
  }
  return out;
}

Tensor impulse_noise(const Tensor& img, RngStream& rng, double fraction) {
  Tensor out = img;
  const std::size_t h = img.dim(1), w = img.dim(2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (rng.bernoulli(fraction)) {
        const float v = rng.bernoulli(0.5) ? 1.0f : 0.0f;  // salt or pepper, whole pixel
        for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = v;
      }
  return out;
}

Tensor shot_noise(const Tensor& img, RngStream& rng, double photons) {
  Tensor out = Tensor::uninit(img.shape());
  const float* in = img.data();
  float* o = out.data();
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const double counted = static_cast<double>(poisson_knuth(rng, in[i] * photons));
    o[i] = clamp01(static_cast<float>(counted / photons));
  }
  return out;
}

Tensor defocus_blur(const Tensor& img, int radius) {
  std::vector<Tap> taps;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) taps.push_back({dy, dx, 1.0f});
  for (Tap& t : taps) t.w /= static_cast<float>(taps.size());
  return conv_taps(img, taps);
}

Tensor tone_map(const Tensor& img, const std::function<float(float, float)>& fn) {
  // fn(value, pixel_gray) -> new value
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::uninit(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const float g = (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0f;
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = clamp01(fn(img.at(c, y, x), g));
    }
  return out;
}

Tensor jpeg_like(const Tensor& img, double quant) {
  // 8x8 block DCT, quantize with a step growing toward high frequencies,
  // invert. Not a codec; reproduces the blocking + ringing artifact class.
  double dct[8][8];
  for (int k = 0; k < 8; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int n = 0; n < 8; ++n) dct[k][n] = s * std::cos(M_PI * (2 * n + 1) * k / 16.0);
  }
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::uninit(img.shape());
  const auto hi = h - 1, wi = w - 1;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t by = 0; by < h; by += 8)
      for (std::size_t bx = 0; bx < w; bx += 8) {
        double blk[8][8], tmp[8][8];
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            blk[y][x] = img.at(c, std::min(by + y, hi), std::min(bx + x, wi));
        // Y = D blk D^T, quantize, blk' = D^T Y D
        for (int k = 0; k < 8; ++k)
          for (int x = 0; x < 8; ++x) {
            double a = 0;
            for (int n = 0; n < 8; ++n) a += dct[k][n] * blk[n][x];
            tmp[k][x] = a;
          }
        for (int k = 0; k < 8; ++k)
          for (int j = 0; j < 8; ++j) {
            double a = 0;
            for (int n = 0; n < 8; ++n) a += dct[j][n] * tmp[k][n];
            const double step = quant * (1.0 + 0.5 * (k + j));
            blk[k][j] = std::round(a / step) * step;
          }
        for (int n = 0; n < 8; ++n)
          for (int j = 0; j < 8; ++j) {
            double a = 0;
            for (int k = 0; k < 8; ++k) a += dct[k][n] * blk[k][j];
            tmp[n][j] = a;
          }
        for (int y = 0; y < 8; ++y) {
          if (by + y > hi) break;
          for (int x = 0; x < 8 && bx + x <= wi; ++x) {
            double a = 0;
            for (int j = 0; j < 8; ++j) a += dct[j][x] * tmp[y][j];
            out.at(c, by + y, bx + x) = clamp01(static_cast<float>(a));
          }
        }
      }
  return out;
}

Tensor snow(const Tensor& img, RngStream& rng, int severity_idx) {
  const double density = kSnowDensity[severity_idx];
  const int length = kSnowStreakLen[severity_idx];
  const double lift = kSnowLift[severity_idx];
  const std::size_t h = img.dim(1), w = img.dim(2);
  // sparse bright flakes, smeared into streaks along a near-vertical direction
  Tensor flakes({1, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    if (rng.bernoulli(density)) flakes.data()[i] = static_cast<float>(rng.uniform(0.6, 1.0));
  const double theta = M_PI / 2 + rng.uniform(-M_PI / 5, M_PI / 5);  // from horizontal axis
  Tensor streaks = conv_taps(flakes, line_taps(length, theta));
  const auto gain = static_cast<float>(0.7 * length);
  for (std::size_t i = 0; i < h * w; ++i)
    streaks.data()[i] = clamp01(streaks.data()[i] * gain);
  Tensor out = Tensor::uninit(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) {
      const float s = streaks.data()[i];
      const float lifted =
          img.data()[c * h * w + i] + static_cast<float>(lift) * (1.0f - img.data()[c * h * w + i]);
      out.data()[c * h * w + i] = clamp01(lifted * (1.0f - s) + s);
    }
  return out;
}

Tensor fog(const Tensor& img, RngStream& rng, double strength) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::size_t n = 2;
  while (n + 1 < std::max(h, w)) n *= 2;
  n += 1;
  const std::vector<float> field = diamond_square(rng, n);
  constexpr float kFogLum = 0.92f;
  Tensor out = Tensor::uninit(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        // transmittance 1 - t*F attenuates the scene, fog luminance fills the rest
        const auto a = static_cast<float>(strength) * field[(y % n) * n + (x % n)];
        out.at(c, y, x) = clamp01(img.at(c, y, x) * (1.0f - a) + kFogLum * a);
      }
  return out;
}

Tensor add_shared_field(const Tensor& img, const std::function<float(std::size_t, std::size_t)>& f) {
  // one scalar field added to all three channels
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::uninit(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const float v = f(y, x);
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = clamp01(img.at(c, y, x) + v);
    }
  return out;
}

Tensor checkerboard_cutout(const Tensor& img, RngStream& rng, double alpha) {
  constexpr std::size_t kCell = 8;
  const std::size_t oy = rng.uniform_int(2 * kCell), ox = rng.uniform_int(2 * kCell);
  const std::size_t parity = rng.uniform_int(2);
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor out = img;
  const auto keep = static_cast<float>(1.0 - alpha);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if ((((y + oy) / kCell + (x + ox) / kCell) & 1) == parity)
        for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) *= keep;
  return out;
}

}  // namespace

CorruptionFamily family_of(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::GaussianNoise:
    case CorruptionKind::ImpulseNoise:
    case CorruptionKind::ShotNoise:
    case CorruptionKind::SpeckleNoise:
      return CorruptionFamily::Noise;
    case CorruptionKind::GaussianBlur:
    case CorruptionKind::DefocusBlur:
    case CorruptionKind::MotionBlur:
      return CorruptionFamily::Blur;
    case CorruptionKind::Brightness:
    case CorruptionKind::Contrast:
    case CorruptionKind::Saturate:
    case CorruptionKind::JpegLike:
      return CorruptionFamily::Digital;
    case CorruptionKind::Snow:
    case CorruptionKind::Fog:
      return CorruptionFamily::Weather;
    case CorruptionKind::PerlinNoise:
    case CorruptionKind::PlasmaNoise:
    case CorruptionKind::CheckerboardCutout:
    case CorruptionKind::SineWaves:
      return CorruptionFamily::HeldOut;
  }
  throw ShapeError("family_of: unknown corruption kind");
}

namespace {
constexpr const char* kKindNames[] = {
    "GaussianNoise", "ImpulseNoise", "ShotNoise",  "SpeckleNoise", "GaussianBlur",
    "DefocusBlur",   "MotionBlur",   "Brightness", "Contrast",     "Saturate",
    "JpegLike",      "Snow",         "Fog",        "PerlinNoise",  "PlasmaNoise",
    "CheckerboardCutout", "SineWaves"};
constexpr int kKindCount = 17;
}  // namespace

const char* kind_name(CorruptionKind kind) {
  const int i = static_cast<int>(kind);
  if (i < 0 || i >= kKindCount) throw ShapeError("kind_name: unknown corruption kind");
  return kKindNames[i];
}

const char* family_name(CorruptionFamily family) {
  switch (family) {
    case CorruptionFamily::Noise: return "Noise";
    case CorruptionFamily::Blur: return "Blur";
    case CorruptionFamily::Digital: return "Digital";
    case CorruptionFamily::Weather: return "Weather";
    case CorruptionFamily::HeldOut: return "HeldOut";
  }
  throw ShapeError("family_name: unknown corruption family");
}

CorruptionKind kind_from_name(const std::string& name) {
  for (int i = 0; i < kKindCount; ++i)
    if (name == kKindNames[i]) return static_cast<CorruptionKind>(i);
  throw FormatError("unknown corruption kind: " + name);
}

const std::vector<CorruptionKind>& visible_kinds() {
  static const std::vector<CorruptionKind> kinds = [] {
    std::vector<CorruptionKind> v;
    for (int i = 0; i < kKindCount; ++i)
      if (family_of(static_cast<CorruptionKind>(i)) != CorruptionFamily::HeldOut)
        v.push_back(static_cast<CorruptionKind>(i));
    return v;
  }();
  return kinds;
}

const std::vector<CorruptionKind>& held_out_kinds() {
  static const std::vector<CorruptionKind> kinds = [] {
    std::vector<CorruptionKind> v;
    for (int i = 0; i < kKindCount; ++i)
      if (family_of(static_cast<CorruptionKind>(i)) == CorruptionFamily::HeldOut)
        v.push_back(static_cast<CorruptionKind>(i));
    return v;
  }();
  return kinds;
}

std::vector<CorruptionKind> all_kinds() {
  std::vector<CorruptionKind> v = visible_kinds();
  const auto& ho = held_out_kinds();
  v.insert(v.end(), ho.begin(), ho.end());
  return v;
}

Tensor corrupt(const Tensor& img, const CorruptionSpec& spec, RngStream rng) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("corrupt: need a (3,H,W) image");
  if (spec.severity < 1 || spec.severity > 5) throw ShapeError("corrupt: severity must be 1..5");
  const int s = spec.severity - 1;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise:
      return add_iid_noise(img, rng, kGaussianSigma[s], false);
    case CorruptionKind::ImpulseNoise:
      return impulse_noise(img, rng, kImpulseFraction[s]);
    case CorruptionKind::ShotNoise:
      return shot_noise(img, rng, kShotPhotons[s]);
    case CorruptionKind::SpeckleNoise:
      return add_iid_noise(img, rng, kSpeckleSigma[s], true);
    case CorruptionKind::GaussianBlur: {
      Tensor t = conv_taps(img, gaussian_taps_1d(kBlurRadius[s], false));
      t = conv_taps(t, gaussian_taps_1d(kBlurRadius[s], true));
      clamp01_inplace(t);
      return t;
    }
    case CorruptionKind::DefocusBlur: {
      Tensor t = defocus_blur(img, kBlurRadius[s]);
      clamp01_inplace(t);
      return t;
    }
    case CorruptionKind::MotionBlur: {
      const double theta = rng.uniform(0.0, M_PI);
      Tensor t = conv_taps(img, line_taps(kMotionLength[s], theta));
      clamp01_inplace(t);
      return t;
    }
    case CorruptionKind::Brightness: {
      const auto d = static_cast<float>(kBrightnessShift[s]);
      return tone_map(img, [d](float v, float) { return v + d; });
    }
    case CorruptionKind::Contrast: {
      double m = 0.0;
      for (std::size_t i = 0; i < img.numel(); ++i) m += img.data()[i];
      const auto mean = static_cast<float>(m / static_cast<double>(img.numel()));
      const auto f = static_cast<float>(kContrastFactor[s]);
      return tone_map(img, [mean, f](float v, float) { return (v - mean) * f + mean; });
    }
    case CorruptionKind::Saturate: {
      const auto f = static_cast<float>(kSaturateFactor[s]);
      return tone_map(img, [f](float v, float g) { return g + (v - g) * f; });
    }
    case CorruptionKind::JpegLike:
      return jpeg_like(img, kJpegQuantStep[s]);
    case CorruptionKind::Snow:
      return snow(img, rng, s);
    case CorruptionKind::Fog:
      return fog(img, rng, kFogStrength[s]);
    case CorruptionKind::PerlinNoise: {
      const PerlinField field(rng);
      const auto amp = static_cast<float>(kPerlinAmp[s]);
      constexpr double kCell = 12.0;  // lattice spacing in pixels
      return add_shared_field(img, [&](std::size_t y, std::size_t x) {
        return amp * static_cast<float>(field(x / kCell, y / kCell));
      });
    }
    case CorruptionKind::PlasmaNoise: {
      const std::vector<float> field = value_noise_field(rng, img.dim(1), img.dim(2));
      const auto amp = static_cast<float>(kPlasmaAmp[s]);
      const std::size_t w = img.dim(2);
      return add_shared_field(
          img, [&](std::size_t y, std::size_t x) { return amp * field[y * w + x]; });
    }
    case CorruptionKind::CheckerboardCutout:
      return checkerboard_cutout(img, rng, kCheckerAlpha[s]);
    case CorruptionKind::SineWaves: {
      const double theta = rng.uniform(0.0, M_PI);
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const auto amp = static_cast<float>(kSineAmp[s]);
      constexpr double kWavelength = 8.0;  // pixels
      const double kx = 2.0 * M_PI * std::cos(theta) / kWavelength;
      const double ky = 2.0 * M_PI * std::sin(theta) / kWavelength;
      return add_shared_field(img, [&](std::size_t y, std::size_t x) {
        return amp * static_cast<float>(std::sin(kx * static_cast<double>(x) +
                                                 ky * static_cast<double>(y) + phase));
      });
    }
  }
  throw ShapeError("corrupt: unknown corruption kind");
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(se / static_cast<double>(a.numel()));
}

RngStream grid_cell_stream(std::uint64_t seed, std::size_t image_index, CorruptionKind kind,
                           int severity) {
  return RngStream(seed, 0x636f7272757074ULL)
      .derive(image_index)
      .derive(static_cast<std::uint64_t>(kind) * 8 + static_cast<std::uint64_t>(severity));
}

void corruption_grid(
    const std::vector<Tensor>& images, const std::vector<CorruptionKind>& kinds,
    const std::vector<int>& severities, std::uint64_t seed,
    const std::function<void(std::size_t, const CorruptionSpec&, const Tensor&)>& sink) {
  if (images.empty() || kinds.empty() || severities.empty())
    throw ShapeError("corruption_grid: empty input list");
  for (std::size_t i = 0; i < images.size(); ++i)
    for (const CorruptionKind kind : kinds)
      for (const int severity : severities) {
        const CorruptionSpec spec{kind, severity};
        sink(i, spec, corrupt(images[i], spec, grid_cell_stream(seed, i, kind, severity)));
      }
}

std::string write_corruption_grid(const std::vector<Tensor>& images,
                                  const std::vector<std::string>& image_ids,
                                  const std::vector<CorruptionKind>& kinds,
                                  const std::vector<int>& severities, std::uint64_t seed,
                                  const std::string& out_dir) {
  if (image_ids.size() != images.size())
    throw ShapeError("write_corruption_grid: ids and images differ in length");
  namespace fs = std::filesystem;
  for (const CorruptionKind kind : kinds)
    for (const int severity : severities)
      fs::create_directories(fs::path(out_dir) / kind_name(kind) / ("s" + std::to_string(severity)));
  nlohmann::json cells = nlohmann::json::array();
  corruption_grid(images, kinds, severities, seed,
                  [&](std::size_t i, const CorruptionSpec& spec, const Tensor& out) {
                    const std::string rel = std::string(kind_name(spec.kind)) + "/s" +
                                            std::to_string(spec.severity) + "/" + image_ids[i] +
                                            ".ppm";
                    write_ppm((fs::path(out_dir) / rel).string(), out);
                    const RngStream cell = grid_cell_stream(seed, i, spec.kind, spec.severity);
                    cells.push_back({{"image", image_ids[i]},
                                     {"image_index", i},
                                     {"kind", kind_name(spec.kind)},
                                     {"severity", spec.severity},
                                     {"path", rel},
                                     {"stream_seed", cell.seed()},
                                     {"stream", cell.stream()}});
                  });
  nlohmann::json manifest;
  manifest["seed"] = seed;
  nlohmann::json kind_names = nlohmann::json::array();
  for (const CorruptionKind kind : kinds) kind_names.push_back(kind_name(kind));
  manifest["kinds"] = kind_names;
  manifest["severities"] = severities;
  manifest["cells"] = cells;
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  std::ofstream out(manifest_path);
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError("write_corruption_grid: cannot write " + manifest_path);
  return manifest_path;
}

}  // namespace cwfalab
