#include "osr/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace osr {

namespace {
constexpr char kMagic[8] = {'O', 'S', 'R', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw DataError("truncated checkpoint: " + path.string());
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& in, std::size_t n, const std::filesystem::path& path) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) throw DataError("truncated checkpoint: " + path.string());
  return s;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + tmp.string());
    out.write(kMagic, 8);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string meta = ckpt.meta.dump();
    put<std::uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
      put<std::uint32_t>(out, 1);
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, t.data() + i, 4);
        put<std::uint32_t>(out, bits);
      }
    }
    if (!out) throw DataError("failed writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint: " + path.string());
  if (get_bytes(in, 8, path) != std::string(kMagic, 8)) throw DataError("not a checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  Checkpoint ckpt;
  const auto meta_len = get<std::uint64_t>(in, path);
  if (meta_len > (1u << 26)) throw DataError("corrupt checkpoint metadata: " + path.string());
  try {
    ckpt.meta = nlohmann::json::parse(get_bytes(in, meta_len, path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
  }
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = get<std::uint32_t>(in, path);
    if (name_len > 4096) throw DataError("corrupt tensor name in " + path.string());
    std::string name = get_bytes(in, name_len, path);
    const auto rows = get<std::uint32_t>(in, path);
    const auto cols = get<std::uint32_t>(in, path);
    const auto dtype = get<std::uint32_t>(in, path);
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) throw DataError("tensor too large in " + path.string());
    MatF t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (dtype == 1) {
        const auto bits = get<std::uint32_t>(in, path);
        std::memcpy(t.data() + i, &bits, 4);
      } else if (dtype == 2) {
        const auto bits = get<std::uint64_t>(in, path);
        double d;
        std::memcpy(&d, &bits, 8);
        t.data()[i] = static_cast<float>(d);
      } else {
        throw DataError("unknown tensor dtype in " + path.string());
      }
    }
    ckpt.tensors.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace osr
