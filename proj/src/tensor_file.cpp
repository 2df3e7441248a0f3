#include "mha2gqa/tensor_file.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "mha2gqa/error.hpp"

namespace mha2gqa {

using nlohmann::json;
using Detail = FormatError::Detail;

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

std::uint32_t crc32_of(const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

void encode_doubles(std::span<const double> values, std::string& out) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 8);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values.data(), values.size() * 8);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(values[i]);
      for (int b = 0; b < 8; ++b) out[start + i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

void decode_doubles(const unsigned char* p, std::span<double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), p, values.size() * 8);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + i * 8));
  }
}

constexpr std::size_t kPreambleBytes = 24;

}  // namespace

const Matrix& TensorFile::at(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw FormatError(Detail::kShapeMismatch, "missing tensor '" + name + "'");
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::string data;
  json entries = json::array();
  for (const auto& [name, m] : file.tensors) {
    entries.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"dtype", "f64"},
                       {"offset", data.size()},
                       {"nbytes", m.size() * 8}});
    encode_doubles(m.data(), data);
  }
  const json header = {{"kind", file.kind},
                       {"meta", file.meta},
                       {"data_crc32", crc32_of(data.data(), data.size())},
                       {"tensors", entries}};
  const std::string hdr = header.dump();

  std::string pre(kTensorFileMagic, sizeof(kTensorFileMagic));
  put_le<std::uint32_t>(pre, kTensorFileVersion);
  put_le<std::uint64_t>(pre, hdr.size());
  put_le<std::uint32_t>(pre, crc32_of(hdr.data(), hdr.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(pre.data(), static_cast<std::streamsize>(pre.size()));
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string where = " in '" + path.string() + "'";

  if (bytes.size() < kPreambleBytes) throw FormatError(Detail::kTruncated, "file shorter than preamble" + where);
  if (std::memcmp(p, kTensorFileMagic, sizeof(kTensorFileMagic)) != 0) {
    throw FormatError(Detail::kCorruptHeader, "bad magic bytes" + where);
  }
  const auto version = get_le<std::uint32_t>(p + 8);
  if (version != kTensorFileVersion) {
    throw FormatError(Detail::kCorruptHeader, "unsupported format version " + std::to_string(version) + where);
  }
  const auto hdr_len = get_le<std::uint64_t>(p + 12);
  const auto hdr_crc = get_le<std::uint32_t>(p + 20);
  if (hdr_len > bytes.size() - kPreambleBytes) throw FormatError(Detail::kTruncated, "header truncated" + where);
  if (crc32_of(p + kPreambleBytes, hdr_len) != hdr_crc) {
    throw FormatError(Detail::kCorruptHeader, "header checksum mismatch" + where);
  }

  TensorFile file;
  std::uint32_t data_crc = 0;
  std::vector<std::tuple<std::string, std::size_t, std::size_t, std::size_t, std::size_t>> layout;
  try {
    const json header = json::parse(bytes.begin() + kPreambleBytes,
                                    bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleBytes + hdr_len));
    file.kind = header.at("kind").get<std::string>();
    file.meta = header.at("meta");
    data_crc = header.at("data_crc32").get<std::uint32_t>();
    for (const auto& e : header.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f64") throw FormatError(Detail::kCorruptHeader, "unsupported dtype" + where);
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw FormatError(Detail::kCorruptHeader, "tensor shape must be 2-D" + where);
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != shape[0] * shape[1] * 8) {
        throw FormatError(Detail::kShapeMismatch, "tensor '" + e.at("name").get<std::string>() +
                                                      "' byte count disagrees with its shape" + where);
      }
      layout.emplace_back(e.at("name").get<std::string>(), shape[0], shape[1], e.at("offset").get<std::size_t>(),
                          nbytes);
    }
  } catch (const json::exception& ex) {
    throw FormatError(Detail::kCorruptHeader, std::string("malformed header: ") + ex.what() + where);
  }

  const std::size_t data_start = kPreambleBytes + hdr_len;
  const std::size_t data_len = bytes.size() - data_start;
  for (const auto& [name, rows, cols, offset, nbytes] : layout) {
    if (offset + nbytes > data_len) throw FormatError(Detail::kTruncated, "tensor '" + name + "' data truncated" + where);
    Matrix m(rows, cols);
    decode_doubles(p + data_start + offset, m.data());
    file.tensors.emplace_back(name, std::move(m));
  }
  if (crc32_of(p + data_start, data_len) != data_crc) {
    throw FormatError(Detail::kOther, "data checksum mismatch" + where);
  }
  return file;
}

json config_to_json(const ModelConfig& cfg) {
  return {{"d_model", cfg.d_model},   {"n_heads", cfg.n_heads},       {"head_dim", cfg.head_dim},
          {"n_layers", cfg.n_layers}, {"d_ff", cfg.d_ff},             {"vocab_size", cfg.vocab_size},
          {"n_kv_heads", cfg.n_kv_heads}, {"rope_base", cfg.rope_base}, {"norm_eps", cfg.norm_eps},
          {"rope_pairing", to_string(cfg.rope_pairing)}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  try {
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.head_dim = j.at("head_dim").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.d_ff = j.at("d_ff").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
    cfg.rope_base = j.at("rope_base").get<double>();
    cfg.norm_eps = j.at("norm_eps").get<double>();
    cfg.rope_pairing = pairing_from_string(j.at("rope_pairing").get<std::string>());
  } catch (const json::exception& ex) {
    throw FormatError(Detail::kCorruptHeader, std::string("malformed model config: ") + ex.what());
  } catch (const InvalidArgument& ex) {
    throw FormatError(Detail::kCorruptHeader, ex.what());
  }
  try {
    cfg.validate();
  } catch (const InvalidArgument& ex) {
    throw FormatError(Detail::kShapeMismatch, ex.what());
  }
  return cfg;
}

void save_checkpoint(const ModelWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path) {
  cfg.validate();
  weights.check_shapes(cfg);
  TensorFile file;
  file.kind = "checkpoint";
  file.meta = {{"config", config_to_json(cfg)}, {"rope_pairing", to_string(cfg.rope_pairing)}};
  weights.for_each_tensor([&](const std::string& name, const Matrix& m) { file.tensors.emplace_back(name, m); });
  write_tensor_file(path, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  if (file.kind != "checkpoint") throw FormatError(Detail::kOther, "'" + path.string() + "' is not a checkpoint");
  Checkpoint ck;
  if (!file.meta.contains("config")) throw FormatError(Detail::kCorruptHeader, "checkpoint header lacks a config");
  ck.config = config_from_json(file.meta.at("config"));
  ck.weights = ModelWeights::zeros(ck.config);
  ck.weights.for_each_tensor([&](const std::string& name, Matrix& m) {
    const Matrix& src = file.at(name);
    if (src.rows() != m.rows() || src.cols() != m.cols()) {
      throw FormatError(Detail::kShapeMismatch, "tensor '" + name + "' shape does not match the stored config");
    }
    m = src;
  });
  if (file.tensors.size() != [&] {
        std::size_t n = 0;
        ck.weights.for_each_tensor([&](const std::string&, const Matrix&) { ++n; });
        return n;
      }()) {
    throw FormatError(Detail::kShapeMismatch, "unexpected extra tensors in '" + path.string() + "'");
  }
  return ck;
}

void save_kv_cache(const KVCacheSet& cache, const std::filesystem::path& path) {
  TensorFile file;
  file.kind = "kv_cache";
  file.meta = {{"n_layers", cache.n_layers()}, {"n_heads", cache.n_heads()}, {"n_tokens", cache.n_tokens}};
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
      const std::string p = "layers." + std::to_string(l) + ".heads." + std::to_string(h) + ".";
      file.tensors.emplace_back(p + "keys", cache.keys[l][h]);
      file.tensors.emplace_back(p + "values", cache.values[l][h]);
    }
  }
  write_tensor_file(path, file);
}

KVCacheSet load_kv_cache(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  if (file.kind != "kv_cache") throw FormatError(Detail::kOther, "'" + path.string() + "' is not a KV cache file");
  KVCacheSet cache;
  std::size_t n_layers = 0, n_heads = 0;
  try {
    n_layers = file.meta.at("n_layers").get<std::size_t>();
    n_heads = file.meta.at("n_heads").get<std::size_t>();
    cache.n_tokens = file.meta.at("n_tokens").get<std::size_t>();
  } catch (const json::exception& ex) {
    throw FormatError(Detail::kCorruptHeader, std::string("malformed cache header: ") + ex.what());
  }
  cache.keys.assign(n_layers, std::vector<Matrix>(n_heads));
  cache.values = cache.keys;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::string p = "layers." + std::to_string(l) + ".heads." + std::to_string(h) + ".";
      cache.keys[l][h] = file.at(p + "keys");
      cache.values[l][h] = file.at(p + "values");
      if (cache.keys[l][h].cols() != cache.n_tokens || cache.values[l][h].cols() != cache.n_tokens) {
        throw FormatError(Detail::kShapeMismatch, "cache token count disagrees with header");
      }
    }
  }
  return cache;
}

}  // namespace mha2gqa
