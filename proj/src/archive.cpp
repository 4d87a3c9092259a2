#include "cwfalab/archive.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "cwfalab/errors.hpp"

namespace cwfalab {
namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  buf.append(b, 4);
}

struct Reader {
  const unsigned char* p;
  std::size_t left;
  std::string what;

  void need(std::size_t n) const {
    if (left < n) throw FormatError("truncated archive: " + what);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                      (static_cast<std::uint32_t>(p[2]) << 16) |
                      (static_cast<std::uint32_t>(p[3]) << 24);
    p += 4;
    left -= 4;
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
};

static_assert(sizeof(float) == 4, "archive payload assumes 32-bit float");

}  // namespace

void save_archive(const std::string& path, const NamedTensors& entries) {
  std::string buf;
  buf.append("CWFT", 4);
  put_u32(buf, kArchiveVersion);
  put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    // int->float byte layout is little-endian on every supported target
    buf.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("short write: " + path);
}

NamedTensors load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open archive: " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r{reinterpret_cast<const unsigned char*>(raw.data()), raw.size(), path};
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CWFT", 4) != 0) throw FormatError("bad archive magic: " + path);
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion)
    throw FormatError("unsupported archive version " + std::to_string(version) + ": " + path);
  const std::uint32_t count = r.u32();

  NamedTensors entries;
  entries.reserve(count);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    if (!seen.insert(name).second)
      throw FormatError("duplicate archive entry '" + name + "': " + path);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = r.u32();
      numel *= shape[d];
    }
    std::vector<float> data(numel);
    r.bytes(data.data(), numel * sizeof(float));
    entries.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (r.left != 0) throw FormatError("trailing bytes after last entry: " + path);
  return entries;
}

const Tensor* find_entry(const NamedTensors& entries, const std::string& name) {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace cwfalab
