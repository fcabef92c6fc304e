#include <zlib.h>

#include <array>

#include "apt/data.hpp"

namespace apt::detail {

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes;
  std::array<std::uint8_t, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw DataError("read error in " + path.string());
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return bytes;
}

void write_maybe_gzip(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const bool gz = path.extension() == ".gz";
  gzFile f = gzopen(path.string().c_str(), gz ? "wb9" : "wbT");
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  const int n = bytes.empty() ? 0 : gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
  if (n != static_cast<int>(bytes.size())) throw DataError("write error in " + path.string());
}

}  // namespace apt::detail
