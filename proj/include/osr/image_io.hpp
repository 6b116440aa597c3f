#pragma once

#include <cstdint>
#include <filesystem>

#include "osr/image.hpp"
#include "osr/scenegen.hpp"

namespace osr {

// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Label-mask file: 16-byte little-endian header followed by H*W row-major values.
//   bytes 0-3   magic "OSRM"
//   bytes 4-7   dtype code (1 = uint8, 2 = uint16, 3 = int32)
//   bytes 8-11  height
//   bytes 12-15 width
inline constexpr char kMaskMagic[4] = {'O', 'S', 'R', 'M'};
enum class MaskDtype : std::uint32_t { u8 = 1, u16 = 2, i32 = 3 };

void write_mask(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_mask(const std::filesystem::path& path);

}  // namespace osr
