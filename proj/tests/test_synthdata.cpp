#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "cwfalab/errors.hpp"
#include "cwfalab/synthdata.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cwfalab;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
  return a.image.shape() == b.image.shape() &&
         std::memcmp(a.image.data(), b.image.data(), a.image.numel() * sizeof(float)) == 0 &&
         a.mask.h == b.mask.h && a.mask.w == b.mask.w && a.mask.data == b.mask.data;
}

}  // namespace

TEST_CASE("scene generation is pure in (seed, index)") {
  DatasetSpec spec;
  const Scene a = generate_scene(spec, 7);
  const Scene b = generate_scene(spec, 7);
  CHECK(same_scene(a, b));
  CHECK(a.stream == b.stream);

  const Scene c = generate_scene(spec, 8);
  CHECK_FALSE(same_scene(a, c));

  DatasetSpec other = spec;
  other.seed = 2;
  CHECK_FALSE(same_scene(a, generate_scene(other, 7)));

  CHECK_THROWS_AS(generate_scene(spec, spec.train_count + spec.val_count), ShapeError);
}

TEST_CASE("scenes are valid: ids in range, image quantized in [0,1], foreground present") {
  DatasetSpec spec;
  for (std::size_t i = 0; i < 40; ++i) {
    const Scene s = generate_scene(spec, i * 17);
    bool any_fg = false;
    for (std::uint8_t id : s.mask.data) {
      REQUIRE(id < spec.num_classes);
      any_fg |= id != 0;
    }
    CHECK(any_fg);  // the last-drawn shape is never occluded, so 2+ shapes guarantee foreground
    for (std::size_t j = 0; j < s.image.numel(); ++j) {
      const float v = s.image.data()[j];
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
      // on the 8-bit grid: v*255 is an integer
      REQUIRE(std::abs(v * 255.0f - std::round(v * 255.0f)) < 1e-4f);
    }
  }
}

TEST_CASE("every foreground class appears in at least 60% of scenes") {
  DatasetSpec spec;
  std::size_t present[5] = {0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < 200; ++i) {
    const Scene s = generate_scene(spec, i);
    bool seen[5] = {false, false, false, false, false};
    for (std::uint8_t id : s.mask.data) seen[id] = true;
    for (int k = 1; k < 5; ++k) present[k] += seen[k];
  }
  for (int k = 1; k < 5; ++k) {
    INFO("class ", k, " present in ", present[k], " of 200 scenes");
    CHECK(present[k] >= 120);
  }
}

TEST_CASE("splits partition the index space") {
  DatasetSpec spec;
  spec.train_count = 6;
  spec.val_count = 3;
  const std::vector<Scene> train = generate_split(spec, false);
  const std::vector<Scene> val = generate_split(spec, true);
  CHECK(train.size() == 6);
  CHECK(val.size() == 3);
  CHECK(same_scene(val[0], generate_scene(spec, 6)));

  std::set<std::uint64_t> streams;
  for (const Scene& s : train) streams.insert(s.stream);
  for (const Scene& s : val) streams.insert(s.stream);
  CHECK(streams.size() == 9);  // all sub-streams distinct
}

TEST_CASE("hflip is an involution and keeps image and mask aligned") {
  DatasetSpec spec;
  const Scene s = generate_scene(spec, 3);
  const Scene f = hflip(s);
  CHECK_FALSE(same_scene(s, f));
  CHECK(same_scene(s, hflip(f)));
  CHECK(f.mask.data[0 * f.mask.w + (f.mask.w - 1)] == s.mask.data[0]);
  CHECK(f.image.at(1, 5, 2) == s.image.at(1, 5, s.mask.w - 1 - 2));
}

TEST_CASE("augment with full-size crop, no flip, no corruption is the identity") {
  DatasetSpec spec;
  const Scene s = generate_scene(spec, 11);
  AugmentOptions opt;
  opt.flip = false;
  opt.crop_height = spec.height;
  opt.crop_width = spec.width;
  RngStream rng(4, 4);
  CHECK(same_scene(s, augment_train(s, rng, opt)));
}

TEST_CASE("augment rejects crops larger than the scene") {
  DatasetSpec spec;
  const Scene s = generate_scene(spec, 0);
  AugmentOptions opt;
  opt.crop_height = spec.height + 1;
  RngStream rng(1, 1);
  CHECK_THROWS_AS(augment_train(s, rng, opt), ShapeError);
}

TEST_CASE("flip and crop move image and mask jointly") {
  // color-code the classes into channel 0, augment, then re-derive the mask
  // from the augmented image; any misalignment between the two transforms
  // would break the equality
  DatasetSpec spec;
  Scene coded = generate_scene(spec, 21);
  for (std::size_t y = 0; y < coded.mask.h; ++y)
    for (std::size_t x = 0; x < coded.mask.w; ++x) {
      coded.image.at(0, y, x) = static_cast<float>(coded.mask.data[y * coded.mask.w + x]) / 4.0f;
      coded.image.at(1, y, x) = 0.3f;
      coded.image.at(2, y, x) = 0.7f;
    }
  AugmentOptions opt;
  opt.flip = true;
  opt.crop_height = 48;
  opt.crop_width = 40;
  for (std::uint64_t t = 0; t < 20; ++t) {
    RngStream rng(50, t);
    const Scene aug = augment_train(coded, rng, opt);
    REQUIRE(aug.mask.h == 48);
    REQUIRE(aug.mask.w == 40);
    REQUIRE(aug.image.dim(1) == 48);
    REQUIRE(aug.image.dim(2) == 40);
    for (std::size_t y = 0; y < aug.mask.h; ++y)
      for (std::size_t x = 0; x < aug.mask.w; ++x) {
        const auto derived =
            static_cast<std::uint8_t>(std::lround(aug.image.at(0, y, x) * 4.0f));
        REQUIRE(derived == aug.mask.data[y * aug.mask.w + x]);
      }
  }
}

TEST_CASE("the corruption slot touches the image and never the mask") {
  DatasetSpec spec;
  const Scene s = generate_scene(spec, 2);
  AugmentOptions with;
  with.crop_height = 56;
  with.crop_width = 56;
  with.image_corruption = CorruptionSpec{CorruptionKind::GaussianNoise, 2};
  with.corruption_prob = 1.0;
  AugmentOptions without = with;
  without.image_corruption.reset();

  // identical fresh streams: flip and crop draws happen first in both calls,
  // so the geometric outcome matches and only the corruption differs
  RngStream ra(77, 0), rb(77, 0);
  const Scene a = augment_train(s, ra, with);
  const Scene b = augment_train(s, rb, without);
  CHECK(a.mask.data == b.mask.data);
  CHECK(std::memcmp(a.image.data(), b.image.data(), a.image.numel() * sizeof(float)) != 0);

  AugmentOptions gated = with;
  gated.corruption_prob = 0.0;
  RngStream rc(77, 0);
  const Scene c = augment_train(s, rc, gated);
  CHECK(std::memcmp(c.image.data(), b.image.data(), c.image.numel() * sizeof(float)) == 0);
}

TEST_CASE("dataset on disk round-trips bit-exactly with a manifest") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cwfa_synthdata_test";
  fs::remove_all(dir);

  DatasetSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.train_count = 3;
  spec.val_count = 2;
  spec.seed = 9;
  const std::string manifest_path = write_dataset(spec, dir.string());

  std::ifstream in(manifest_path);
  REQUIRE(in.good());
  nlohmann::json manifest;
  in >> manifest;
  CHECK(manifest["train_count"] == 3);
  CHECK(manifest["val_count"] == 2);
  CHECK(manifest["scenes"].size() == 5);

  const Scene s2 = generate_scene(spec, 2);
  const Tensor img = read_ppm((dir / "train" / "00002.ppm").string());
  REQUIRE(img.shape() == s2.image.shape());
  CHECK(std::memcmp(img.data(), s2.image.data(), img.numel() * sizeof(float)) == 0);

  const Scene v0 = generate_scene(spec, 3);  // val index 0 is global index train_count
  const MaskImage mask = read_pgm((dir / "val" / "00000.pgm").string());
  CHECK(mask.data == v0.mask.data);

  fs::remove_all(dir);
}
