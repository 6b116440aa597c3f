#include "osr/dataset.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "osr/common.hpp"
#include "osr/image_io.hpp"

namespace osr {

using nlohmann::json;

std::vector<const SceneSample*> Dataset::split(const std::string& name) const {
  std::vector<const SceneSample*> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (split_of[i] == name) out.push_back(&samples[i]);
  }
  return out;
}

std::size_t Dataset::split_size(const std::string& name) const {
  std::size_t n = 0;
  for (const auto& s : split_of) n += s == name ? 1 : 0;
  return n;
}

std::vector<std::size_t> split_sizes(const std::vector<SplitSpec>& specs, std::size_t n) {
  if (specs.empty()) throw ConfigError("splits: at least one split required");
  double sum = 0.0;
  for (const auto& s : specs) {
    if (!(s.fraction > 0.0)) throw ConfigError("splits: fraction of '" + s.name + "' must be > 0");
    sum += s.fraction;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("splits: fractions must sum to 1");
  std::vector<std::size_t> sizes;
  std::size_t used = 0;
  for (std::size_t i = 0; i + 1 < specs.size(); ++i) {
    auto k = static_cast<std::size_t>(std::llround(specs[i].fraction * static_cast<double>(n)));
    k = std::min(k, n - used);
    sizes.push_back(k);
    used += k;
  }
  sizes.push_back(n - used);
  return sizes;
}

namespace {
std::vector<std::string> assign_splits(const std::vector<SplitSpec>& specs, std::size_t n) {
  const auto sizes = split_sizes(specs, n);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t s = 0; s < specs.size(); ++s) {
    for (std::size_t k = 0; k < sizes[s]; ++k) out.push_back(specs[s].name);
  }
  return out;
}

std::string sample_stem(std::int64_t id) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id;
  return os.str();
}
}  // namespace

Dataset generate_dataset(const GeneratorSpec& spec, std::size_t count, std::uint64_t seed,
                         const std::vector<SplitSpec>& splits) {
  Dataset d;
  d.split_specs = splits;
  d.split_of = assign_splits(splits, count);
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    d.samples.push_back(generate_scene(derive_seed(seed, i), spec, static_cast<std::int64_t>(i)));
  }
  return d;
}

void save_dataset(const std::filesystem::path& root, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  json manifest;
  manifest["format"] = "osr-scenes";
  manifest["version"] = kDatasetFormatVersion;
  json splits = json::array();
  for (const auto& s : data.split_specs) splits.push_back({{"name", s.name}, {"fraction", s.fraction}});
  manifest["splits"] = splits;
  json samples = json::array();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const std::string stem = sample_stem(s.id);
    write_ppm(root / "images" / (stem + ".ppm"), s.image);
    write_mask(root / "masks" / (stem + ".mask"), s.labels);
    json attrs = json::array();
    for (const auto& a : s.attributes) attrs.push_back(attribute_names(a));
    samples.push_back({{"id", s.id},
                       {"split", data.split_of[i]},
                       {"image", "images/" + stem + ".ppm"},
                       {"mask", "masks/" + stem + ".mask"},
                       {"attributes", attrs}});
  }
  manifest["samples"] = samples;
  std::ofstream out(root / "manifest");
  if (!out) throw DataError("cannot write manifest under " + root.string());
  out << manifest.dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  try {
    if (manifest.at("format").get<std::string>() != "osr-scenes") {
      throw DataError("unexpected manifest format in " + manifest_path.string());
    }
    if (manifest.at("version").get<int>() != kDatasetFormatVersion) {
      throw DataError("unsupported manifest version in " + manifest_path.string());
    }
    for (const auto& s : manifest.at("splits")) {
      d.split_specs.push_back({s.at("name").get<std::string>(), s.at("fraction").get<double>()});
    }
    const auto& entries = manifest.at("samples");
    d.split_of = assign_splits(d.split_specs, entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      SceneSample s;
      s.id = e.at("id").get<std::int64_t>();
      if (e.contains("split") && e.at("split").get<std::string>() != d.split_of[i]) {
        throw DataError("sample " + std::to_string(s.id) + ": split '" + e.at("split").get<std::string>() +
                        "' disagrees with manifest fractions ('" + d.split_of[i] + "')");
      }
      s.image = read_ppm(root / e.at("image").get<std::string>());
      s.labels = read_mask(root / e.at("mask").get<std::string>());
      for (const auto& a : e.at("attributes")) s.attributes.push_back(parse_attributes(a.get<std::array<std::string, 4>>()));
      s.validate();
      d.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace osr
