#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "osr/common.hpp"
#include "osr/image.hpp"

namespace osr {

// Attribute vocabulary: 2 sizes x 8 colors x 2 materials x 3 shapes = 96 combinations.
inline constexpr int kNumSizes = 2;
inline constexpr int kNumColors = 8;
inline constexpr int kNumMaterials = 2;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumQuestions = kNumSizes * kNumColors * kNumMaterials * kNumShapes;

inline constexpr std::array<const char*, kNumSizes> kSizeNames{"large", "small"};
inline constexpr std::array<const char*, kNumColors> kColorNames{
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"};
inline constexpr std::array<const char*, kNumMaterials> kMaterialNames{"solid", "striped"};
inline constexpr std::array<const char*, kNumShapes> kShapeNames{"circle", "square", "triangle"};

// 8-bit palette, so rendered images survive a lossless 8-bit round trip exactly.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumColors> kPalette{{{220, 30, 30},
                                                                               {30, 180, 30},
                                                                               {30, 60, 220},
                                                                               {230, 210, 20},
                                                                               {20, 200, 210},
                                                                               {210, 30, 200},
                                                                               {240, 130, 20},
                                                                               {120, 40, 180}}};
inline constexpr std::uint8_t kBackgroundLevel = 128;

struct ObjectAttributes {
  int size = 0;
  int color = 0;
  int material = 0;
  int shape = 0;

  // Position in the fixed lexicographic (size, color, material, shape) question order.
  int question_index() const { return ((size * kNumColors + color) * kNumMaterials + material) * kNumShapes + shape; }
  bool operator==(const ObjectAttributes&) const = default;
};

ObjectAttributes attributes_from_question(int q);
std::array<std::string, 4> attribute_names(const ObjectAttributes& a);
ObjectAttributes parse_attributes(const std::array<std::string, 4>& names);

// Per-pixel object label (0 = background, i = object i, 1-based).
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  int max_label() const;
  bool operator==(const LabelMap&) const = default;
};

struct SceneSample {
  std::int64_t id = 0;
  Image image;  // values in [0, 1]
  LabelMap labels;
  std::vector<ObjectAttributes> attributes;

  int num_objects() const { return static_cast<int>(attributes.size()); }
  // index 0 = background, 1..n = objects
  Plane mask(int index) const;
  std::vector<Plane> masks() const;
  // Throws DataError on mask/attribute inconsistencies.
  void validate() const;
  bool operator==(const SceneSample&) const = default;
};

struct GeneratorSpec {
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 6;
  int small_radius = 5;
  int large_radius = 8;
  double max_overlap = 0.25;  // of either object's area
  int max_retries = 1000;
};

// Deterministic in (seed, spec). Throws DataError naming the seed when placement fails.
SceneSample generate_scene(std::uint64_t seed, const GeneratorSpec& spec, std::int64_t id = 0);

// ---------------------------------------------------------------------------- augmentation

struct AugmentConfig {
  double crop_scale_min = 0.3;
  double crop_scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  int output_size = 64;
  double flip_prob = 0.5;
  double brightness = 0.2;
  double saturation = 0.2;
  double hue = 0.05;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  void validate() const;
};

// Axis-aligned rectangle in source pixel units (x, y = top-left corner).
struct CropBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct AugmentedPair {
  Image view0, view1;
  std::int64_t source_id = 0;
  std::array<CropBox, 2> crop_boxes;
  std::array<bool, 2> flip_flags{false, false};
};

// Flip, area/aspect-constrained crop, resize, color jitter and normalization, independently per
// view. Deterministic in (sample, cfg, seed).
AugmentedPair augment(const SceneSample& sample, const AugmentConfig& cfg, std::uint64_t seed);

// Single augmented view; `view` selects the random stream.
Image augment_view(const Image& source, const AugmentConfig& cfg, std::uint64_t seed, int view,
                   CropBox* box_out = nullptr, bool* flip_out = nullptr);

// Evaluation input: full-frame resize + normalization, no randomness.
Image prepare_eval_image(const Image& source, const AugmentConfig& cfg);

// Applies a recorded crop/flip to a label map with nearest-neighbour sampling so ground truth
// aligns with the augmented view.
LabelMap replay_labels(const LabelMap& labels, const CropBox& box, bool flip, int output_size);

CropBox sample_crop(std::uint64_t seed, int height, int width, const AugmentConfig& cfg);

void normalize_channels(Image& img, const std::array<float, 3>& mean, const std::array<float, 3>& std);

}  // namespace osr
