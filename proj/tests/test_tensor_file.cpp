#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "mha2gqa/error.hpp"
#include "mha2gqa/tensor_file.hpp"

namespace mha2gqa {
namespace {

namespace fs = std::filesystem;

class TensorFileTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mha2gqa_tf_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  static void dump(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  fs::path dir_;
};

FormatError::Detail load_failure(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const FormatError& e) {
    return e.detail;
  }
  ADD_FAILURE() << "load_checkpoint unexpectedly succeeded";
  return FormatError::Detail::kOther;
}

TEST_F(TensorFileTest, CheckpointRoundTripIsBitIdentical) {
  ModelConfig cfg = toy_config();
  cfg.n_kv_heads = 4;
  const auto w = init_random_weights(cfg, 21);
  save_checkpoint(w, cfg, dir_ / "m.ckpt");
  const auto ck = load_checkpoint(dir_ / "m.ckpt");
  EXPECT_EQ(ck.config, cfg);
  EXPECT_TRUE(ck.weights == w);
  // Re-saving reproduces the same bytes.
  save_checkpoint(ck.weights, ck.config, dir_ / "m2.ckpt");
  EXPECT_EQ(slurp(dir_ / "m.ckpt"), slurp(dir_ / "m2.ckpt"));
}

TEST_F(TensorFileTest, TamperedHeaderByteIsFormatError) {
  const auto cfg = toy_config();
  save_checkpoint(init_random_weights(cfg, 22), cfg, dir_ / "m.ckpt");
  std::string bytes = slurp(dir_ / "m.ckpt");
  for (std::size_t pos : {std::size_t{0}, std::size_t{9}, std::size_t{40}, std::size_t{100}}) {
    std::string t = bytes;
    t[pos] = static_cast<char>(t[pos] ^ 0x01);
    dump(dir_ / "t.ckpt", t);
    EXPECT_EQ(load_failure(dir_ / "t.ckpt"), FormatError::Detail::kCorruptHeader) << "byte " << pos;
  }
}

TEST_F(TensorFileTest, TruncatedDataIsDistinct) {
  const auto cfg = toy_config();
  save_checkpoint(init_random_weights(cfg, 23), cfg, dir_ / "m.ckpt");
  const std::string bytes = slurp(dir_ / "m.ckpt");
  dump(dir_ / "t.ckpt", bytes.substr(0, bytes.size() - 100));
  EXPECT_EQ(load_failure(dir_ / "t.ckpt"), FormatError::Detail::kTruncated);
  dump(dir_ / "t.ckpt", bytes.substr(0, 10));
  EXPECT_EQ(load_failure(dir_ / "t.ckpt"), FormatError::Detail::kTruncated);
}

TEST_F(TensorFileTest, ShapeMismatchIsDistinct) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 24);
  TensorFile file;
  file.kind = "checkpoint";
  file.meta = {{"config", config_to_json(cfg)}};
  w.for_each_tensor([&](const std::string& name, const Matrix& m) {
    file.tensors.emplace_back(name, name == "layers.1.wk" ? Matrix(4, 64) : m);
  });
  write_tensor_file(dir_ / "bad.ckpt", file);
  EXPECT_EQ(load_failure(dir_ / "bad.ckpt"), FormatError::Detail::kShapeMismatch);
}

TEST_F(TensorFileTest, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint(dir_ / "nope.ckpt"), IoError);
}

TEST_F(TensorFileTest, KvCacheRoundTrip) {
  const auto cfg = toy_config();
  const auto w = init_random_weights(cfg, 25);
  const auto cache = collect_kv(w, cfg, std::vector<TokenSeq>{{1, 2, 3, 4}, {9, 8}});
  save_kv_cache(cache, dir_ / "kv.bin");
  EXPECT_TRUE(load_kv_cache(dir_ / "kv.bin") == cache);
  EXPECT_THROW(load_checkpoint(dir_ / "kv.bin"), FormatError);
}

}  // namespace
}  // namespace mha2gqa
