#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mha2gqa/matrix.hpp"
#include "mha2gqa/model.hpp"

namespace mha2gqa {

// Named-tensor container on disk:
//
//   bytes 0..7    magic "MHA2GQA\0"
//   bytes 8..11   format version (u32, little-endian)
//   bytes 12..19  header length in bytes (u64, little-endian)
//   bytes 20..23  CRC-32 of the header bytes (u32, little-endian)
//   header        UTF-8 JSON: kind, meta, data_crc32 and one entry per tensor
//                 {name, shape: [rows, cols], dtype: "f64", offset, nbytes}
//   data          raw little-endian float64 buffers in header order; offsets are
//                 relative to the first data byte
inline constexpr char kTensorFileMagic[8] = {'M', 'H', 'A', '2', 'G', 'Q', 'A', '\0'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

struct TensorFile {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix& at(const std::string& name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

struct Checkpoint {
  ModelConfig config;
  ModelWeights weights;
};

void save_checkpoint(const ModelWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_kv_cache(const KVCacheSet& cache, const std::filesystem::path& path);
KVCacheSet load_kv_cache(const std::filesystem::path& path);

}  // namespace mha2gqa
