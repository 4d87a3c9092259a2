#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "cwfalab/image_io.hpp"
#include "cwfalab/rng.hpp"

using namespace cwfalab;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/cwfa_io_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("ppm round trip is exact for quantized images") {
  RngStream rng(91, 0);
  Tensor img({3, 13, 21});
  for (auto& v : img.vec())
    v = static_cast<float>(rng.uniform_int(256)) / 255.0f;
  TempFile f("rt.ppm");
  write_ppm(f.path, img);
  const Tensor back = read_ppm(f.path);
  REQUIRE(back.shape() == img.shape());
  CHECK(std::memcmp(back.data(), img.data(), img.numel() * sizeof(float)) == 0);
}

TEST_CASE("ppm write clamps out-of-range values") {
  Tensor img({3, 1, 2});
  img.fill(0.5f);
  img.at(0, 0, 0) = -3.0f;
  img.at(1, 0, 1) = 7.5f;
  TempFile f("clamp.ppm");
  write_ppm(f.path, img);
  const Tensor back = read_ppm(f.path);
  CHECK(back.at(0, 0, 0) == 0.0f);
  CHECK(back.at(1, 0, 1) == 1.0f);
}

TEST_CASE("quantize_u8 rounds to nearest level") {
  CHECK(quantize_u8(0.0f) == 0);
  CHECK(quantize_u8(1.0f) == 255);
  CHECK(quantize_u8(127.4f / 255.0f) == 127);
  CHECK(quantize_u8(127.6f / 255.0f) == 128);
}

TEST_CASE("ppm header comments and whitespace are tolerated") {
  TempFile f("comment.ppm");
  std::string body = "P6 # a comment\n# full line comment\n 2\t1 \n255\n";
  body += std::string("\x10\x20\x30\x40\x50\x60", 6);
  write_bytes(f.path, body);
  const Tensor img = read_ppm(f.path);
  REQUIRE(img.shape() == Shape{3, 1, 2});
  CHECK(img.at(0, 0, 0) == doctest::Approx(0x10 / 255.0));
  CHECK(img.at(2, 0, 1) == doctest::Approx(0x60 / 255.0));
}

TEST_CASE("ppm read rejects malformed files") {
  TempFile f("bad.ppm");

  write_bytes(f.path, "P5\n2 1\n255\n??");
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  write_bytes(f.path, "P6\n2 1\n65535\n" + std::string(12, 'a'));
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  write_bytes(f.path, "P6\n2 1\n255\nabc");  // needs 6 raster bytes
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  write_bytes(f.path, "P6\n2 x\n255\n" + std::string(6, 'a'));
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  write_bytes(f.path, "P6\n0 2\n255\n");
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  write_bytes(f.path, "P6\n2");
  CHECK_THROWS_AS((void)read_ppm(f.path), FormatError);

  CHECK_THROWS_AS((void)read_ppm("/tmp/cwfa_io_does_not_exist.ppm"), FormatError);
}

TEST_CASE("ppm write rejects non-rgb tensors") {
  Tensor flat({2, 4, 4});
  TempFile f("shape.ppm");
  CHECK_THROWS_AS(write_ppm(f.path, flat), ShapeError);
  Tensor rank2({4, 4});
  CHECK_THROWS_AS(write_ppm(f.path, rank2), ShapeError);
}

TEST_CASE("pgm round trip preserves class ids") {
  MaskImage mask;
  mask.h = 3;
  mask.w = 5;
  mask.data = {0, 1, 2, 3, 4, 4, 3, 2, 1, 0, 9, 8, 7, 255, 0};
  TempFile f("rt.pgm");
  write_pgm(f.path, mask);
  const MaskImage back = read_pgm(f.path);
  CHECK(back.h == mask.h);
  CHECK(back.w == mask.w);
  CHECK(back.data == mask.data);
}

TEST_CASE("pgm rejects inconsistent dimensions and bad headers") {
  MaskImage mask;
  mask.h = 2;
  mask.w = 2;
  mask.data = {1, 2, 3};  // wrong size
  TempFile f("bad.pgm");
  CHECK_THROWS_AS(write_pgm(f.path, mask), ShapeError);

  write_bytes(f.path, "P6\n2 2\n255\n" + std::string(12, 'a'));
  CHECK_THROWS_AS((void)read_pgm(f.path), FormatError);

  write_bytes(f.path, "P5\n2 2\n255\nab");
  CHECK_THROWS_AS((void)read_pgm(f.path), FormatError);
}
