#include "osr/image_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "osr/common.hpp"

namespace osr {

Plane resize_bilinear(const Plane& src, int out_h, int out_w) {
  Plane dst(out_h, out_w);
  const double sy_scale = static_cast<double>(src.height) / out_h;
  const double sx_scale = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double sy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      double sx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = sx - x0;
      dst.at(y, x) = static_cast<float>((1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                                        wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1)));
    }
  }
  return dst;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing image: " + path.string());
}

namespace {
// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}
}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing image file: " + path.string());
  if (next_token(in) != "P6") throw DataError("not a binary PPM: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw DataError("corrupt PPM header: " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM layout: " + path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("truncated PPM data: " + path.string());
  }
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

namespace {
void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}
std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_mask(const std::filesystem::path& path, const LabelMap& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write mask: " + path.string());
  out.write(kMaskMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(MaskDtype::u8));
  put_u32(out, static_cast<std::uint32_t>(labels.height));
  put_u32(out, static_cast<std::uint32_t>(labels.width));
  out.write(reinterpret_cast<const char*>(labels.data.data()), static_cast<std::streamsize>(labels.data.size()));
  if (!out) throw DataError("failed writing mask: " + path.string());
}

LabelMap read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing mask file: " + path.string());
  std::array<unsigned char, 16> header{};
  in.read(reinterpret_cast<char*>(header.data()), 16);
  if (in.gcount() != 16 || std::memcmp(header.data(), kMaskMagic, 4) != 0) {
    throw DataError("corrupt mask header: " + path.string());
  }
  const auto dtype = get_u32(header.data() + 4);
  const auto h = get_u32(header.data() + 8);
  const auto w = get_u32(header.data() + 12);
  if (h == 0 || w == 0 || h > 65536 || w > 65536) throw DataError("bad mask dimensions: " + path.string());
  std::size_t width_bytes = 0;
  switch (dtype) {
    case 1: width_bytes = 1; break;
    case 2: width_bytes = 2; break;
    case 3: width_bytes = 4; break;
    default: throw DataError("unknown mask dtype " + std::to_string(dtype) + ": " + path.string());
  }
  const std::size_t count = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> raw(count * width_bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("truncated mask data: " + path.string());
  LabelMap labels(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < count; ++i) {
    std::int64_t v = 0;
    if (width_bytes == 1) {
      v = raw[i];
    } else if (width_bytes == 2) {
      v = raw[2 * i] | (raw[2 * i + 1] << 8);
    } else {
      v = static_cast<std::int32_t>(get_u32(&raw[4 * i]));
    }
    if (v < 0 || v > 255) throw DataError("mask label out of range in " + path.string());
    labels.data[i] = static_cast<std::uint8_t>(v);
  }
  return labels;
}

}  // namespace osr
