#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "cwfalab/corruptions.hpp"
#include "cwfalab/errors.hpp"
#include "cwfalab/image_io.hpp"
#include "cwfalab/rng.hpp"
#include "cwfalab/tensor.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cwfalab;

namespace {

// Colored textured field: coarse random color gradients plus per-pixel grain,
// so every corruption kind has chroma and high-frequency content to act on.
// Values kept inside (0,1) so impulse flips are unambiguous.
Tensor make_test_image(RngStream& rng, std::size_t h = 64, std::size_t w = 64) {
  Tensor coarse({3, 8, 8});
  for (std::size_t i = 0; i < coarse.numel(); ++i)
    coarse.data()[i] = static_cast<float>(rng.uniform(0.15, 0.85));
  Tensor img = bilinear_resize(coarse, h, w);
  for (std::size_t i = 0; i < img.numel(); ++i) {
    float v = img.data()[i] + static_cast<float>(rng.uniform(-0.08, 0.08));
    img.data()[i] = v < 0.02f ? 0.02f : (v > 0.98f ? 0.98f : v);
  }
  return img;
}

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("psnr formula and sentinels") {
  Tensor a({3, 4, 4}, 0.3f);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);

  Tensor zero({3, 4, 4}, 0.0f);
  Tensor one({3, 4, 4}, 1.0f);
  CHECK(psnr(zero, one) == doctest::Approx(0.0).epsilon(1e-12));

  Tensor b({3, 4, 4}, 0.4f);  // MSE = 0.01 exactly in double
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));

  Tensor c({3, 4, 5}, 0.3f);
  CHECK_THROWS_AS(psnr(a, c), ShapeError);
}

TEST_CASE("kind lists, names, families") {
  CHECK(visible_kinds().size() == 13);
  CHECK(held_out_kinds().size() == 4);
  CHECK(all_kinds().size() == 17);
  for (CorruptionKind k : visible_kinds()) CHECK(family_of(k) != CorruptionFamily::HeldOut);
  for (CorruptionKind k : held_out_kinds()) CHECK(family_of(k) == CorruptionFamily::HeldOut);

  CHECK(family_of(CorruptionKind::GaussianNoise) == CorruptionFamily::Noise);
  CHECK(family_of(CorruptionKind::ImpulseNoise) == CorruptionFamily::Noise);
  CHECK(family_of(CorruptionKind::ShotNoise) == CorruptionFamily::Noise);
  CHECK(family_of(CorruptionKind::SpeckleNoise) == CorruptionFamily::Noise);
  CHECK(family_of(CorruptionKind::GaussianBlur) == CorruptionFamily::Blur);
  CHECK(family_of(CorruptionKind::DefocusBlur) == CorruptionFamily::Blur);
  CHECK(family_of(CorruptionKind::MotionBlur) == CorruptionFamily::Blur);
  CHECK(family_of(CorruptionKind::Brightness) == CorruptionFamily::Digital);
  CHECK(family_of(CorruptionKind::Contrast) == CorruptionFamily::Digital);
  CHECK(family_of(CorruptionKind::Saturate) == CorruptionFamily::Digital);
  CHECK(family_of(CorruptionKind::JpegLike) == CorruptionFamily::Digital);
  CHECK(family_of(CorruptionKind::Snow) == CorruptionFamily::Weather);
  CHECK(family_of(CorruptionKind::Fog) == CorruptionFamily::Weather);

  for (CorruptionKind k : all_kinds()) CHECK(kind_from_name(kind_name(k)) == k);
  CHECK_THROWS_AS(kind_from_name("Frost"), FormatError);
  CHECK(std::string(family_name(CorruptionFamily::Noise)) == "Noise");
  CHECK(std::string(family_name(CorruptionFamily::HeldOut)) == "HeldOut");
}

TEST_CASE("precondition violations are rejected") {
  RngStream rng(1, 1);
  Tensor img = make_test_image(rng);
  CHECK_THROWS_AS(corrupt(img, {CorruptionKind::GaussianNoise, 0}, rng), ShapeError);
  CHECK_THROWS_AS(corrupt(img, {CorruptionKind::GaussianNoise, 6}, rng), ShapeError);
  Tensor gray({1, 8, 8}, 0.5f);
  CHECK_THROWS_AS(corrupt(gray, {CorruptionKind::GaussianNoise, 1}, rng), ShapeError);
}

TEST_CASE("same stream gives identical bytes for every kind and severity") {
  RngStream imgrng(3, 9);
  const Tensor img = make_test_image(imgrng);
  for (CorruptionKind kind : all_kinds())
    for (int s = 1; s <= 5; ++s) {
      const CorruptionSpec spec{kind, s};
      const RngStream cell(11, static_cast<std::uint64_t>(kind) * 8 + s);
      const Tensor a = corrupt(img, spec, cell);
      const Tensor b = corrupt(img, spec, cell);
      REQUIRE(same_bytes(a, b));
    }
}

TEST_CASE("outputs stay inside [0,1] and finite") {
  RngStream imgrng(4, 0);
  for (int rep = 0; rep < 2; ++rep) {
    const Tensor img = make_test_image(imgrng);
    for (CorruptionKind kind : all_kinds())
      for (int s = 1; s <= 5; ++s) {
        const Tensor out =
            corrupt(img, {kind, s}, RngStream(20 + rep, static_cast<std::uint64_t>(kind) * 8 + s));
        for (std::size_t i = 0; i < out.numel(); ++i) {
          REQUIRE(std::isfinite(out.data()[i]));
          REQUIRE(out.data()[i] >= 0.0f);
          REQUIRE(out.data()[i] <= 1.0f);
        }
      }
  }
}

TEST_CASE("brightness on a constant image is a uniform shift") {
  const double shift[5] = {0.08, 0.14, 0.20, 0.28, 0.38};  // frozen severity table
  Tensor img({3, 16, 16}, 0.5f);
  for (int s = 1; s <= 5; ++s) {
    const Tensor out = corrupt(img, {CorruptionKind::Brightness, s}, RngStream(0, 0));
    for (std::size_t i = 0; i < out.numel(); ++i)
      CHECK(out.data()[i] == doctest::Approx(0.5 + shift[s - 1]).epsilon(1e-6));
  }
}

TEST_CASE("gaussian noise severity 1 has near-zero sample mean") {
  // mid-gray input, sigma 0.04: no clamping, so mean(out - in) estimates the
  // noise mean; bound from the pinned statistical oracle (3 sigma / 64)
  Tensor img({3, 64, 64}, 0.5f);
  const Tensor out = corrupt(img, {CorruptionKind::GaussianNoise, 1}, RngStream(5, 77));
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) mean += out.data()[i] - 0.5;
  mean /= static_cast<double>(out.numel());
  CHECK(std::abs(mean) <= 3.0 * 0.04 / 64.0);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double d = out.data()[i] - 0.5 - mean;
    var += d * d;
  }
  const double stddev = std::sqrt(var / static_cast<double>(out.numel()));
  CHECK(stddev == doctest::Approx(0.04).epsilon(0.08));
}

TEST_CASE("impulse noise flips whole pixels at the table rate") {
  const double frac[5] = {0.01, 0.03, 0.06, 0.10, 0.17};  // frozen severity table
  RngStream imgrng(6, 6);
  const Tensor img = make_test_image(imgrng);  // values inside (0,1)
  const std::size_t n = 64 * 64;
  for (int s = 1; s <= 5; ++s) {
    const Tensor out = corrupt(img, {CorruptionKind::ImpulseNoise, s}, RngStream(13, s));
    std::size_t flipped = 0;
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        const float r = out.at(0, y, x), g = out.at(1, y, x), b = out.at(2, y, x);
        const bool is_flip = (r == 0.0f || r == 1.0f) && g == r && b == r;
        if (is_flip) {
          ++flipped;
        } else {
          REQUIRE(r == img.at(0, y, x));
          REQUIRE(g == img.at(1, y, x));
          REQUIRE(b == img.at(2, y, x));
        }
      }
    const double f = frac[s - 1];
    const double tol = 3.0 * std::sqrt(static_cast<double>(n) * f * (1.0 - f));
    CHECK(std::abs(static_cast<double>(flipped) - f * static_cast<double>(n)) <= tol);
  }
}

TEST_CASE("grid cells are independent of generation order") {
  RngStream imgrng(8, 1);
  std::vector<Tensor> images{make_test_image(imgrng), make_test_image(imgrng)};
  const std::vector<CorruptionKind> kinds{CorruptionKind::GaussianNoise, CorruptionKind::Snow};
  const std::vector<int> severities{1, 2, 3, 4, 5};
  const std::uint64_t seed = 99;

  std::map<std::tuple<std::size_t, int, int>, Tensor> canonical;
  corruption_grid(images, kinds, severities, seed,
                  [&](std::size_t i, const CorruptionSpec& spec, const Tensor& out) {
                    canonical.emplace(std::make_tuple(i, static_cast<int>(spec.kind), spec.severity),
                                      out);
                  });
  CHECK(canonical.size() == 2 * 2 * 5);

  // regenerate every cell in reverse order straight from its stream
  for (auto it = canonical.rbegin(); it != canonical.rend(); ++it) {
    const auto [i, kind_i, s] = it->first;
    const auto kind = static_cast<CorruptionKind>(kind_i);
    const Tensor again = corrupt(images[i], {kind, s}, grid_cell_stream(seed, i, kind, s));
    REQUIRE(same_bytes(again, it->second));
  }

  CHECK_THROWS_AS(corruption_grid({}, kinds, severities, seed,
                                  [](std::size_t, const CorruptionSpec&, const Tensor&) {}),
                  ShapeError);
}

TEST_CASE("grid on disk: layout, manifest, reproducible files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cwfa_corruption_grid_test";
  fs::remove_all(dir);

  RngStream imgrng(9, 2);
  std::vector<Tensor> images{make_test_image(imgrng), make_test_image(imgrng)};
  const std::vector<std::string> ids{"img_000", "img_001"};
  const std::vector<CorruptionKind> kinds{CorruptionKind::GaussianNoise, CorruptionKind::Fog};
  const std::vector<int> severities{1, 3};

  const std::string manifest_path =
      write_corruption_grid(images, ids, kinds, severities, 7, dir.string());

  std::ifstream in(manifest_path);
  REQUIRE(in.good());
  nlohmann::json manifest;
  in >> manifest;
  CHECK(manifest["seed"] == 7);
  CHECK(manifest["cells"].size() == 2 * 2 * 2);
  for (const auto& cell : manifest["cells"]) {
    const fs::path p = dir / cell["path"].get<std::string>();
    REQUIRE(fs::exists(p));
  }
  CHECK(fs::exists(dir / "GaussianNoise" / "s1" / "img_000.ppm"));
  CHECK(fs::exists(dir / "Fog" / "s3" / "img_001.ppm"));

  // a written cell equals the quantized form of regenerating that cell
  const Tensor again = corrupt(images[0], {CorruptionKind::GaussianNoise, 1},
                               grid_cell_stream(7, 0, CorruptionKind::GaussianNoise, 1));
  const Tensor readback = read_ppm((dir / "GaussianNoise" / "s1" / "img_000.ppm").string());
  REQUIRE(readback.shape() == again.shape());
  for (std::size_t i = 0; i < again.numel(); ++i)
    CHECK(readback.data()[i] ==
          doctest::Approx(quantize_u8(again.data()[i]) / 255.0f).epsilon(1e-9));

  fs::remove_all(dir);
}

TEST_CASE("mean psnr strictly decreases with severity for every kind") {
  RngStream imgrng(123, 0);
  std::vector<Tensor> images;
  for (int i = 0; i < 20; ++i) images.push_back(make_test_image(imgrng));

  for (CorruptionKind kind : all_kinds()) {
    double prev = std::numeric_limits<double>::infinity();
    for (int s = 1; s <= 5; ++s) {
      double sum = 0.0;
      for (std::size_t i = 0; i < images.size(); ++i) {
        const double v =
            psnr(images[i], corrupt(images[i], {kind, s}, grid_cell_stream(321, i, kind, s)));
        REQUIRE(std::isfinite(v));
        sum += v;
      }
      const double mean = sum / static_cast<double>(images.size());
      INFO("kind ", kind_name(kind), " severity ", s, " mean psnr ", mean);
      CHECK(mean < prev);
      prev = mean;
    }
  }
}
