#include "osr/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace osr {

ObjectAttributes attributes_from_question(int q) {
  if (q < 0 || q >= kNumQuestions) throw ConfigError("question index out of range");
  ObjectAttributes a;
  a.shape = q % kNumShapes;
  q /= kNumShapes;
  a.material = q % kNumMaterials;
  q /= kNumMaterials;
  a.color = q % kNumColors;
  a.size = q / kNumColors;
  return a;
}

std::array<std::string, 4> attribute_names(const ObjectAttributes& a) {
  return {kSizeNames[static_cast<std::size_t>(a.size)], kColorNames[static_cast<std::size_t>(a.color)],
          kMaterialNames[static_cast<std::size_t>(a.material)], kShapeNames[static_cast<std::size_t>(a.shape)]};
}

namespace {
template <std::size_t N>
int index_of(const std::array<const char*, N>& names, const std::string& v, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (v == names[i]) return static_cast<int>(i);
  }
  throw DataError(std::string("unknown ") + what + " '" + v + "'");
}
}  // namespace

ObjectAttributes parse_attributes(const std::array<std::string, 4>& names) {
  ObjectAttributes a;
  a.size = index_of(kSizeNames, names[0], "size");
  a.color = index_of(kColorNames, names[1], "color");
  a.material = index_of(kMaterialNames, names[2], "material");
  a.shape = index_of(kShapeNames, names[3], "shape");
  return a;
}

int LabelMap::max_label() const {
  int m = 0;
  for (auto v : data) m = std::max(m, static_cast<int>(v));
  return m;
}

Plane SceneSample::mask(int index) const {
  Plane p(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    p.data[i] = labels.data[i] == index ? 1.0f : 0.0f;
  }
  return p;
}

std::vector<Plane> SceneSample::masks() const {
  std::vector<Plane> out;
  for (int i = 0; i <= num_objects(); ++i) out.push_back(mask(i));
  return out;
}

void SceneSample::validate() const {
  if (labels.height != image.height || labels.width != image.width) {
    throw DataError("sample " + std::to_string(id) + ": mask size differs from image size");
  }
  const int max_label = labels.max_label();
  if (max_label != num_objects()) {
    throw DataError("sample " + std::to_string(id) + ": " + std::to_string(max_label) +
                    " object masks but " + std::to_string(num_objects()) + " attribute tuples");
  }
  for (const auto& a : attributes) {
    if (a.size < 0 || a.size >= kNumSizes || a.color < 0 || a.color >= kNumColors ||
        a.material < 0 || a.material >= kNumMaterials || a.shape < 0 || a.shape >= kNumShapes) {
      throw DataError("sample " + std::to_string(id) + ": attribute out of vocabulary");
    }
  }
}

// ---------------------------------------------------------------------------- generator

namespace {

bool inside_shape(int shape, double r, double dx, double dy) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    default: {
      // upward isosceles triangle, apex at -r, base at +0.8r
      if (dy < -r || dy > 0.8 * r) return false;
      const double half = 1.2 * r * (dy + r) / (1.8 * r);
      return std::abs(dx) <= half;
    }
  }
}

std::vector<int> rasterize(int shape, double r, double cx, double cy, int size) {
  std::vector<int> pixels;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + r + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - 1.3 * r - 1)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + 1.3 * r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (inside_shape(shape, r, x + 0.5 - cx, y + 0.5 - cy)) pixels.push_back(y * size + x);
    }
  }
  return pixels;
}

std::size_t intersection_size(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t n = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++n;
      ++ia;
      ++ib;
    }
  }
  return n;
}

}  // namespace

SceneSample generate_scene(std::uint64_t seed, const GeneratorSpec& spec, std::int64_t id) {
  if (spec.image_size <= 0 || spec.min_objects < 0 || spec.max_objects < spec.min_objects) {
    throw ConfigError("generator: invalid object-count range or image size");
  }
  if (spec.max_objects > 254) throw ConfigError("generator: at most 254 objects per scene");
  const int size = spec.image_size;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<int> q_dist(0, kNumQuestions - 1);
  const int count = count_dist(rng);

  SceneSample s;
  s.id = id;
  s.image = Image(size, size, kBackgroundLevel / 255.0f);
  s.labels = LabelMap(size, size);

  std::vector<std::vector<int>> placed;
  for (int o = 0; o < count; ++o) {
    const ObjectAttributes attr = attributes_from_question(q_dist(rng));
    const double r = attr.size == 0 ? spec.large_radius : spec.small_radius;
    if (2 * r + 2 > size) throw ConfigError("generator: object radius too large for image");
    std::uniform_real_distribution<double> pos(r + 0.5, size - r - 0.5);
    std::vector<int> pixels;
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
      const double cx = pos(rng);
      const double cy = pos(rng);
      pixels = rasterize(attr.shape, r, cx, cy, size);
      if (pixels.empty()) continue;
      ok = true;
      for (const auto& other : placed) {
        const double inter = static_cast<double>(intersection_size(pixels, other));
        if (inter >= spec.max_overlap * static_cast<double>(std::min(pixels.size(), other.size()))) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) {
      throw DataError("generator: could not place object " + std::to_string(o) + " after " +
                      std::to_string(spec.max_retries) + " retries (seed " + std::to_string(seed) + ")");
    }
    const auto& base = kPalette[static_cast<std::size_t>(attr.color)];
    for (int p : pixels) {
      const int y = p / size;
      const int x = p % size;
      const bool stripe = attr.material == 1 && y % 3 == 2;
      for (int c = 0; c < 3; ++c) {
        const int v = stripe ? (base[static_cast<std::size_t>(c)] + 255) / 2 : base[static_cast<std::size_t>(c)];
        s.image.at(y, x, c) = static_cast<float>(v) / 255.0f;
      }
      s.labels.at(y, x) = static_cast<std::uint8_t>(o + 1);
    }
    placed.push_back(std::move(pixels));
    s.attributes.push_back(attr);
  }
  return s;
}

// ---------------------------------------------------------------------------- augmentation

void AugmentConfig::validate() const {
  if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0) {
    throw ConfigError("augment: need 0 < crop_scale_min <= crop_scale_max <= 1");
  }
  if (!(aspect_min > 0.0) || aspect_min > aspect_max) throw ConfigError("augment: invalid aspect range");
  if (output_size <= 0) throw ConfigError("augment: output_size must be > 0");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("augment: flip_prob must be in [0, 1]");
  if (brightness < 0.0 || saturation < 0.0 || hue < 0.0 || hue > 0.5) {
    throw ConfigError("augment: jitter magnitudes must be non-negative (hue <= 0.5)");
  }
  for (float s : std) {
    if (!(s > 0.0f)) throw ConfigError("augment: normalization std must be > 0");
  }
}

CropBox sample_crop(std::uint64_t seed, int height, int width, const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> area_dist(cfg.crop_scale_min, cfg.crop_scale_max);
  std::uniform_real_distribution<double> log_ratio(std::log(cfg.aspect_min), std::log(cfg.aspect_max));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double total = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = area_dist(rng) * total;
    const double ratio = std::exp(log_ratio(rng));
    const double w = std::sqrt(area * ratio);
    const double h = std::sqrt(area / ratio);
    if (w <= width && h <= height) {
      return {unit(rng) * (width - w), unit(rng) * (height - h), w, h};
    }
  }
  // Fall back to the largest square-ish crop that fits with an in-range area.
  const double area = area_dist(rng) * total;
  double w = std::sqrt(area);
  double h = w;
  if (w > width || h > height) {
    w = std::min<double>(width, area / height);
    h = area / w;
  }
  return {unit(rng) * (width - w), unit(rng) * (height - h), w, h};
}

namespace {

float sample_bilinear(const Image& img, double sy, double sx, int c) {
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double wy = sy - y0;
  const double wx = sx - x0;
  const double v = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                   wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
  return static_cast<float>(v);
}

// Source-pixel coordinate for output index `o` of an `out`-wide resampling of [start, start+len).
double source_coord(int o, int out, double start, double len, bool flip) {
  double t = (o + 0.5) / out;
  if (flip) t = 1.0 - t;
  return start + t * len - 0.5;
}

Image crop_resize(const Image& src, const CropBox& box, bool flip, int out) {
  Image dst(out, out);
  for (int y = 0; y < out; ++y) {
    const double sy = source_coord(y, out, box.y, box.h, false);
    for (int x = 0; x < out; ++x) {
      const double sx = source_coord(x, out, box.x, box.w, flip);
      for (int c = 0; c < 3; ++c) dst.at(y, x, c) = sample_bilinear(src, sy, sx, c);
    }
  }
  return dst;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0f + (b - r) / d;
  } else {
    h = 4.0f + (r - g) / d;
  }
  h /= 6.0f;
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = h * 6.0f;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s);
  const float q = v * (1 - s * f);
  const float t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void color_jitter(Image& img, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> bdist(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  std::uniform_real_distribution<double> sdist(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  std::uniform_real_distribution<double> hdist(-cfg.hue, cfg.hue);
  const double bf = cfg.brightness > 0 ? bdist(rng) : 1.0;
  const double sf = cfg.saturation > 0 ? sdist(rng) : 1.0;
  const double hs = cfg.hue > 0 ? hdist(rng) : 0.0;
  const std::size_t npix = img.data.size() / 3;
  if (cfg.brightness > 0) {
    for (auto& v : img.data) v = std::clamp(static_cast<float>(v * bf), 0.0f, 1.0f);
  }
  if (cfg.saturation > 0) {
    for (std::size_t p = 0; p < npix; ++p) {
      float* px = &img.data[p * 3];
      const float gray = 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
      for (int c = 0; c < 3; ++c) {
        px[c] = std::clamp(static_cast<float>(gray + sf * (px[c] - gray)), 0.0f, 1.0f);
      }
    }
  }
  if (cfg.hue > 0) {
    for (std::size_t p = 0; p < npix; ++p) {
      float* px = &img.data[p * 3];
      float h, s, v;
      rgb_to_hsv(px[0], px[1], px[2], h, s, v);
      h = static_cast<float>(h + hs);
      h -= std::floor(h);
      hsv_to_rgb(h, s, v, px[0], px[1], px[2]);
    }
  }
}

}  // namespace

void normalize_channels(Image& img, const std::array<float, 3>& mean, const std::array<float, 3>& std) {
  const std::size_t npix = img.data.size() / 3;
  for (std::size_t p = 0; p < npix; ++p) {
    for (std::size_t c = 0; c < 3; ++c) img.data[p * 3 + c] = (img.data[p * 3 + c] - mean[c]) / std[c];
  }
}

Image augment_view(const Image& source, const AugmentConfig& cfg, std::uint64_t seed, int view,
                   CropBox* box_out, bool* flip_out) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(view) + 1));
  std::bernoulli_distribution flip_dist(cfg.flip_prob);
  const bool flip = cfg.flip_prob > 0.0 && flip_dist(rng);
  const CropBox box = sample_crop(rng(), source.height, source.width, cfg);
  Image out = crop_resize(source, box, flip, cfg.output_size);
  color_jitter(out, cfg, rng);
  normalize_channels(out, cfg.mean, cfg.std);
  if (box_out != nullptr) *box_out = box;
  if (flip_out != nullptr) *flip_out = flip;
  return out;
}

AugmentedPair augment(const SceneSample& sample, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  AugmentedPair pair;
  pair.source_id = sample.id;
  bool f0 = false, f1 = false;
  pair.view0 = augment_view(sample.image, cfg, seed, 0, &pair.crop_boxes[0], &f0);
  pair.view1 = augment_view(sample.image, cfg, seed, 1, &pair.crop_boxes[1], &f1);
  pair.flip_flags = {f0, f1};
  return pair;
}

Image prepare_eval_image(const Image& source, const AugmentConfig& cfg) {
  const CropBox full{0.0, 0.0, static_cast<double>(source.width), static_cast<double>(source.height)};
  Image out = crop_resize(source, full, false, cfg.output_size);
  normalize_channels(out, cfg.mean, cfg.std);
  return out;
}

LabelMap replay_labels(const LabelMap& labels, const CropBox& box, bool flip, int output_size) {
  LabelMap out(output_size, output_size);
  for (int y = 0; y < output_size; ++y) {
    const double sy = source_coord(y, output_size, box.y, box.h, false);
    const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, labels.height - 1);
    for (int x = 0; x < output_size; ++x) {
      const double sx = source_coord(x, output_size, box.x, box.w, flip);
      const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, labels.width - 1);
      out.at(y, x) = labels.at(iy, ix);
    }
  }
  return out;
}

}  // namespace osr
