#include "archive.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "dualnorm/errors.hpp"

namespace dualnorm::archive {

namespace {

constexpr char kMagic[8] = {'D', 'N', 'O', 'R', 'M', 'A', 'R', '1'};

static_assert(std::endian::native == std::endian::little, "blob encoding assumes a little-endian host");

std::uint32_t crc(const unsigned char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace

const Blob& Archive::find(std::string_view name) const {
  for (const auto& b : blobs)
    if (b.name == name) return b;
  throw FormatError("archive has no tensor '" + std::string(name) + "'");
}

void write(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json manifest;
  manifest["format"] = "dualnorm";
  manifest["kind"] = archive.kind;
  manifest["version"] = kVersion;
  manifest["meta"] = archive.meta;
  auto tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& b : archive.blobs) {
    if (b.data.size() != shape_size(b.shape)) throw PreconditionError("blob '" + b.name + "' size does not match shape");
    const std::uint64_t bytes = b.data.size() * sizeof(float);
    tensors.push_back({{"name", b.name},
                       {"shape", b.shape},
                       {"offset", offset},
                       {"bytes", bytes},
                       {"crc32", crc(reinterpret_cast<const unsigned char*>(b.data.data()), bytes)}});
    offset += bytes;
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : archive.blobs)
    out.write(reinterpret_cast<const char*>(b.data.data()), static_cast<std::streamsize>(b.data.size() * sizeof(float)));
  if (!out) throw FormatError("short write to " + path.string());
}

Archive read(const std::filesystem::path& path, std::string_view expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError(where + ": not a dualnorm archive");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
  const std::size_t head = sizeof kMagic + sizeof len;
  if (len > bytes.size() - head) throw FormatError(where + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(head),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(head + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": unreadable manifest: " + e.what());
  }

  Archive a;
  try {
    if (manifest.at("format") != "dualnorm") throw FormatError(where + ": unknown format");
    const int version = manifest.at("version").get<int>();
    if (version != kVersion) {
      throw FormatError(where + ": version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kVersion) + ")");
    }
    a.kind = manifest.at("kind").get<std::string>();
    if (a.kind != expected_kind) throw FormatError(where + ": holds a " + a.kind + ", expected " + std::string(expected_kind));
    a.meta = manifest.at("meta");
    const std::size_t base = head + len;
    for (const auto& t : manifest.at("tensors")) {
      Blob b;
      b.name = t.at("name").get<std::string>();
      b.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_size(b.shape) * sizeof(float)) throw FormatError(where + ": tensor '" + b.name + "' shape mismatch");
      if (offset > bytes.size() - base || nbytes > bytes.size() - base - offset) {
        throw FormatError(where + ": tensor '" + b.name + "' is truncated");
      }
      const unsigned char* p = bytes.data() + base + offset;
      if (crc(p, nbytes) != t.at("crc32").get<std::uint32_t>()) {
        throw FormatError(where + ": checksum mismatch in tensor '" + b.name + "'");
      }
      b.data.resize(nbytes / sizeof(float));
      std::memcpy(b.data.data(), p, nbytes);
      a.blobs.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed manifest: " + e.what());
  }
  return a;
}

}  // namespace dualnorm::archive
