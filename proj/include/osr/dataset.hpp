#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "osr/scenegen.hpp"

namespace osr {

struct SplitSpec {
  std::string name;
  double fraction = 0.0;
};

// Samples in manifest order plus contiguous named splits.
struct Dataset {
  std::vector<SceneSample> samples;
  std::vector<SplitSpec> split_specs;
  std::vector<std::string> split_of;  // per sample

  std::vector<const SceneSample*> split(const std::string& name) const;
  std::size_t split_size(const std::string& name) const;
};

// Contiguous split sizes for n samples: every split but the last gets round(fraction * n), the
// last takes the remainder. Fractions must be positive and sum to 1 (within 1e-6).
std::vector<std::size_t> split_sizes(const std::vector<SplitSpec>& specs, std::size_t n);

// Synthetic dataset: sample i is generated from derive_seed(seed, i).
Dataset generate_dataset(const GeneratorSpec& spec, std::size_t count, std::uint64_t seed,
                         const std::vector<SplitSpec>& splits);

// On-disk layout:
//   <root>/manifest            JSON: {"format": "osr-scenes", "version": 1,
//                                     "splits": [{"name", "fraction"}...],
//                                     "samples": [{"id", "split", "image", "mask",
//                                                  "attributes": [[size, color, material, shape]...]}]}
//   <root>/images/<id>.ppm     8-bit binary PPM
//   <root>/masks/<id>.mask     label mask (see image_io.hpp)
void save_dataset(const std::filesystem::path& root, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& root);

inline constexpr int kDatasetFormatVersion = 1;

}  // namespace osr
