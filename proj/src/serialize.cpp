#include "acme/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace acme {

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; byte swapping is not implemented");

namespace {
constexpr char kMagic[6] = {'A', 'C', 'M', 'E', 'W', '1'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw StateError("weight file: truncated read");
  return v;
}
}  // namespace

void save_params(const ParamStore& store, const std::string& file, std::uint64_t config_hash) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw StateError("weight file: cannot open '" + file + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(os, config_hash);
  put<std::uint64_t>(os, store.entries().size());
  for (const auto& [path, t] : store.entries()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw StateError("weight file: write failure on '" + file + "'");
}

std::uint64_t load_params(ParamStore& store, const std::string& file,
                          std::uint64_t expected_hash) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw StateError("weight file: cannot open '" + file + "'");
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw StateError("weight file: bad magic in '" + file + "'");
  std::uint64_t hash = get<std::uint64_t>(is);
  if (expected_hash != 0 && hash != expected_hash)
    throw StateError("weight file: config hash mismatch in '" + file + "'");
  std::uint64_t count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t plen = get<std::uint32_t>(is);
    std::string path(plen, '\0');
    is.read(path.data(), plen);
    if (!is) throw StateError("weight file: truncated path record");
    std::uint32_t nd = get<std::uint32_t>(is);
    std::vector<int> shape(nd);
    for (std::uint32_t d = 0; d < nd; ++d) shape[d] = get<std::int32_t>(is);
    TensorBuf t = TensorBuf::zeros(shape);
    is.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw StateError("weight file: truncated payload for '" + path + "'");
    if (store.has(path)) {
      TensorBuf& dst = store.at(path);
      if (!same_shape(dst.shape, shape))
        throw ShapeError("weight file: '" + path + "' shape " + shape_str(shape) +
                         " vs existing " + shape_str(dst.shape));
      dst.values = t.values;
    } else {
      store.get_or_create(path, shape, Init::Zeros).values = t.values;
    }
  }
  return hash;
}

}  // namespace acme
