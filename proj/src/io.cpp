#include "pele/io.hpp"

#include <cstring>
#include <fstream>

namespace pele {

namespace {

constexpr char kMagic[8] = {'P', 'E', 'L', 'E', 'A', 'R', 'T', '\n'};
constexpr int kFormatVersion = 1;

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_double_le(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64_le(out, bits);
}

double read_double_le(const unsigned char* p) {
  std::uint64_t bits = get_u64_le(p);
  double d;
  std::memcpy(&d, &bits, sizeof(d));
  return d;
}

}  // namespace

std::uint64_t fnv1a(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_doubles(const std::vector<double>& values, std::uint64_t state) {
  std::uint64_t h = state;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string checksum_hex(std::uint64_t checksum) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int i = 15; i >= 0; --i) s.push_back(digits[(checksum >> (4 * i)) & 0xf]);
  return s;
}

const Tensor& Artifact::find(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw IoError("artifact parameter not found: " + name);
}

void write_artifact(const std::string& path, const std::string& kind,
                    const nlohmann::json& meta,
                    const std::vector<NamedTensor>& params) {
  std::string blob;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& p : params) {
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    entry["offset"] = blob.size();
    plist.push_back(entry);
    for (double v : p.tensor.values()) append_double_le(blob, v);
  }
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = kind;
  manifest["meta"] = meta;
  manifest["params"] = plist;
  manifest["blob_checksum"] = checksum_hex(
      fnv1a(reinterpret_cast<const unsigned char*>(blob.data()), blob.size()));

  const std::string mjson = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  std::string len;
  put_u64_le(len, mjson.size());
  out.write(len.data(), len.size());
  out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("write failed: " + path);
}

namespace {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

nlohmann::json parse_manifest(const std::vector<unsigned char>& bytes,
                              std::size_t* blob_start) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError("not a pele artifact file");
  }
  const std::uint64_t msize = get_u64_le(bytes.data() + 8);
  if (16 + msize > bytes.size()) throw IoError("truncated artifact manifest");
  nlohmann::json manifest = nlohmann::json::parse(
      bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(msize));
  if (manifest.value("format_version", -1) != kFormatVersion) {
    throw IoError("unsupported artifact format version");
  }
  if (blob_start) *blob_start = 16 + msize;
  return manifest;
}

}  // namespace

nlohmann::json read_artifact_manifest(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return parse_manifest(bytes, nullptr);
}

Artifact read_artifact(const std::string& path) {
  auto bytes = read_file_bytes(path);
  std::size_t blob_start = 0;
  nlohmann::json manifest = parse_manifest(bytes, &blob_start);

  const unsigned char* blob = bytes.data() + blob_start;
  const std::size_t blob_size = bytes.size() - blob_start;
  const std::string checksum = checksum_hex(fnv1a(blob, blob_size));
  if (checksum != manifest.at("blob_checksum").get<std::string>()) {
    throw IoError("artifact blob checksum mismatch: " + path);
  }

  Artifact art;
  art.kind = manifest.at("kind").get<std::string>();
  art.meta = manifest.value("meta", nlohmann::json::object());
  art.blob_checksum = checksum;
  for (const auto& entry : manifest.at("params")) {
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    std::size_t numel = 1;
    for (std::size_t d : shape) numel *= d;
    if (offset + numel * 8 > blob_size) throw IoError("artifact blob out of range");
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = read_double_le(blob + offset + 8 * i);
    art.params.push_back({entry.at("name").get<std::string>(),
                          Tensor::from(shape, std::move(values))});
  }
  return art;
}

}  // namespace pele
