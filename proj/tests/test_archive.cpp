#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "cwfalab/archive.hpp"
#include "cwfalab/errors.hpp"
#include "cwfalab/rng.hpp"

using namespace cwfalab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cwfa_archive_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_all(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

TEST_CASE("archive round trip preserves order, shapes, bits") {
  TempDir tmp;
  RngStream rng(77, 0);
  NamedTensors entries;
  entries.emplace_back("zeta.weight", Tensor(Shape{3, 4}, 0.5f));
  Tensor noisy(Shape{2, 3, 5});
  for (std::size_t i = 0; i < noisy.numel(); ++i) noisy[i] = rng.normal_float();
  entries.emplace_back("alpha.bias", noisy);
  entries.emplace_back("scalar", Tensor(Shape{1}, -7.25f));
  entries.emplace_back("empty_rank1", Tensor(Shape{0}));

  const auto p = (tmp.path / "model.cwft").string();
  save_archive(p, entries);
  const auto loaded = load_archive(p);

  REQUIRE(loaded.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(loaded[i].first == entries[i].first);
    REQUIRE(loaded[i].second.shape() == entries[i].second.shape());
    for (std::size_t j = 0; j < entries[i].second.numel(); ++j)
      CHECK(std::memcmp(&loaded[i].second[j], &entries[i].second[j], sizeof(float)) == 0);
  }
  CHECK(find_entry(loaded, "alpha.bias") != nullptr);
  CHECK(find_entry(loaded, "missing") == nullptr);
}

TEST_CASE("archive rejects bad magic") {
  TempDir tmp;
  const auto p = (tmp.path / "bad.cwft").string();
  save_archive(p, {{"t", Tensor(Shape{2}, 1.0f)}});
  auto raw = read_all(p);
  raw[0] = 'X';
  write_all(p, raw);
  CHECK_THROWS_AS((void)load_archive(p), FormatError);
}

TEST_CASE("archive rejects truncation at several cut points") {
  TempDir tmp;
  const auto p = (tmp.path / "full.cwft").string();
  save_archive(p, {{"weights", Tensor(Shape{4, 4}, 2.0f)}});
  const auto raw = read_all(p);
  for (std::size_t cut : {2ul, 9ul, 14ul, raw.size() - 1}) {
    const auto q = (tmp.path / "cut.cwft").string();
    write_all(q, raw.substr(0, cut));
    CHECK_THROWS_AS((void)load_archive(q), FormatError);
  }
}

TEST_CASE("archive rejects duplicate names") {
  TempDir tmp;
  const auto p = (tmp.path / "dup.cwft").string();
  save_archive(p, {{"w", Tensor(Shape{1}, 1.0f)}, {"x", Tensor(Shape{1}, 2.0f)}});
  auto raw = read_all(p);
  // patch the second entry's single-char name "x" to "w"
  const auto pw = raw.find('w', 12);
  const auto px = raw.find('x', pw + 1);
  REQUIRE(px != std::string::npos);
  raw[px] = 'w';
  write_all(p, raw);
  CHECK_THROWS_AS((void)load_archive(p), FormatError);
}

TEST_CASE("archive rejects trailing bytes and missing file") {
  TempDir tmp;
  const auto p = (tmp.path / "t.cwft").string();
  save_archive(p, {{"t", Tensor(Shape{1}, 1.0f)}});
  auto raw = read_all(p);
  raw += "junk";
  write_all(p, raw);
  CHECK_THROWS_AS((void)load_archive(p), FormatError);
  CHECK_THROWS_AS((void)load_archive((tmp.path / "nope.cwft").string()), FormatError);
}

TEST_CASE("empty archive round trips") {
  TempDir tmp;
  const auto p = (tmp.path / "empty.cwft").string();
  save_archive(p, {});
  CHECK(load_archive(p).empty());
}
