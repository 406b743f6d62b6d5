#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctsft/model.hpp"

namespace ctsft {

// On-disk format shared by checkpoints and the baseline-means cache: a text
// manifest of `meta` key/value lines and `tensor` entries (name, shape, byte
// offset, byte length) next to a raw little-endian float32 blob named by the
// manifest's `blob` line.

struct NamedTensor {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
};

struct TensorFile {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedTensor> tensors;

  /// Value of `key`, or throws IoError.
  [[nodiscard]] const std::string& meta(const std::string& key) const;
  [[nodiscard]] const NamedTensor& find(const std::string& name) const;
};

/// Writes `manifest` and `<manifest>.bin`.
void write_tensor_file(const std::filesystem::path& manifest, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& manifest);

void save_checkpoint(const Parameters& params, const std::filesystem::path& manifest);
Parameters load_checkpoint(const std::filesystem::path& manifest);

/// Fingerprint over config and every parameter bit.
std::string checkpoint_hash(const Parameters& params);

/// `key value` lines describing a ModelConfig (used by manifests and run records).
std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& config);
ModelConfig config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace ctsft
