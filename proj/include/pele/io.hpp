#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pele/tensor.hpp"

namespace pele {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(const unsigned char* data, std::size_t n);
std::uint64_t fnv1a_doubles(const std::vector<double>& values,
                            std::uint64_t state = 0xcbf29ce484222325ULL);
std::string checksum_hex(std::uint64_t checksum);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// On-disk artifact container shared by model checkpoints, language bundles
// and LID models: 8-byte magic, u64 manifest size, JSON manifest, then the
// raw little-endian f64 blob with parameters in manifest order. The manifest
// records kind, per-parameter shapes and byte offsets, and an FNV-1a
// checksum of the blob.
struct Artifact {
  std::string kind;
  nlohmann::json meta;
  std::vector<NamedTensor> params;
  std::string blob_checksum;

  const Tensor& find(const std::string& name) const;
};

void write_artifact(const std::string& path, const std::string& kind,
                    const nlohmann::json& meta,
                    const std::vector<NamedTensor>& params);

Artifact read_artifact(const std::string& path);

// Parses the manifest only (cheap identity/compatibility probe).
nlohmann::json read_artifact_manifest(const std::string& path);

}  // namespace pele
