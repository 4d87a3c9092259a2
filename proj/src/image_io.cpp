#include "cwfalab/image_io.hpp"

#include <fstream>

namespace cwfalab {
namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  if (tok.empty()) throw FormatError(path + ": truncated header");
  return tok;
}

std::size_t parse_dim(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = next_token(in, path);
  std::size_t v = 0;
  for (char c : tok) {
    if (c < '0' || c > '9') throw FormatError(path + ": bad " + what + " '" + tok + "'");
    v = v * 10 + static_cast<std::size_t>(c - '0');
    if (v > (1u << 20)) throw FormatError(path + ": unreasonable " + what);
  }
  if (v == 0) throw FormatError(path + std::string(": zero ") + what);
  return v;
}

// Header for both formats: magic, width, height, maxval (must be 255), then
// a single whitespace byte before the raster.
std::pair<std::size_t, std::size_t> read_header(std::istream& in, const std::string& path,
                                                const char* magic) {
  const std::string m = next_token(in, path);
  if (m != magic)
    throw FormatError(path + ": expected " + magic + " magic, got '" + m + "'");
  const std::size_t w = parse_dim(in, path, "width");
  const std::size_t h = parse_dim(in, path, "height");
  const std::string maxval = next_token(in, path);
  if (maxval != "255") throw FormatError(path + ": unsupported maxval " + maxval);
  return {w, h};
}

std::vector<std::uint8_t> read_raster(std::istream& in, const std::string& path,
                                      std::size_t n) {
  std::vector<std::uint8_t> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError(path + ": truncated pixel data");
  return bytes;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("write_ppm: need a (3,H,W) tensor");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        row[x * 3 + c] = quantize_u8(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw FormatError(path + ": write failed");
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  const auto [w, h] = read_header(in, path, "P6");
  const auto bytes = read_raster(in, path, w * h * 3);
  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(bytes[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

void write_pgm(const std::string& path, const MaskImage& mask) {
  if (mask.h == 0 || mask.w == 0 || mask.data.size() != mask.h * mask.w)
    throw ShapeError("write_pgm: inconsistent mask dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.data.data()),
            static_cast<std::streamsize>(mask.data.size()));
  if (!out) throw FormatError(path + ": write failed");
}

MaskImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  const auto [w, h] = read_header(in, path, "P5");
  MaskImage mask;
  mask.h = h;
  mask.w = w;
  mask.data = read_raster(in, path, w * h);
  return mask;
}

}  // namespace cwfalab
