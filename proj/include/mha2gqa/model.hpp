#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mha2gqa/linalg.hpp"
#include "mha2gqa/matrix.hpp"

namespace mha2gqa {

using TokenSeq = std::vector<int>;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t head_dim = 8;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t n_kv_heads = 8;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  RotationPairing rope_pairing = RotationPairing::kHalfSplit;

  // Throws InvalidArgument when the shape invariants do not hold.
  void validate() const;
  std::size_t group_size() const { return n_heads / n_kv_heads; }
  bool is_mha() const { return n_kv_heads == n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

ModelConfig toy_config();

// Per-head projections are stacked along rows: wq is (n_heads*head_dim) x d_model,
// head h occupying rows [h*head_dim, (h+1)*head_dim). wo stacks the per-head
// d_model x head_dim slices along columns. Norm scales are stored as 1 x d rows.
struct LayerWeights {
  Matrix attn_norm;
  Matrix wq;
  Matrix wk;
  Matrix wv;
  Matrix wo;
  Matrix ffn_norm;
  Matrix w_gate;
  Matrix w_up;
  Matrix w_down;
  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  Matrix embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Matrix final_norm;
  Matrix lm_head;  // vocab x d_model
  bool operator==(const ModelWeights&) const = default;

  static ModelWeights zeros(const ModelConfig& cfg);
  // Visits every tensor in a fixed order with its canonical name.
  void for_each_tensor(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  // Throws FormatError(kShapeMismatch) when any tensor disagrees with cfg.
  void check_shapes(const ModelConfig& cfg) const;
  bool all_finite() const;
};

ModelWeights init_random_weights(const ModelConfig& cfg, std::uint64_t seed);

// Angle table for rotary position embedding with the model's pairing.
class RopeTable {
 public:
  RopeTable(std::size_t head_dim, double base, RotationPairing pairing);
  double angle(std::size_t position, std::size_t plane) const;
  BlockRotation rotation(std::size_t position) const;
  // Rotates column t of x (head_dim x T, rows [row0, row0+head_dim)) by position t.
  // inverse=true applies the transpose rotation.
  void apply(Matrix& x, std::size_t row0, bool inverse = false) const;

 private:
  std::size_t head_dim_;
  RotationPairing pairing_;
  std::vector<double> inv_freq_;
};

// Logits as vocab x positions.
Matrix forward(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens);

// Independent per-token implementation that evaluates attention as the explicit sum
// over heads; used to cross-check `forward`.
Matrix forward_reference(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens);

// Pre-RoPE keys and values per layer and head, head_dim x N with N the total token count.
struct KVCacheSet {
  std::size_t n_tokens = 0;
  std::vector<std::vector<Matrix>> keys;    // [layer][head]
  std::vector<std::vector<Matrix>> values;  // [layer][head]
  std::size_t n_layers() const { return keys.size(); }
  std::size_t n_heads() const { return keys.empty() ? 0 : keys[0].size(); }
  bool operator==(const KVCacheSet&) const = default;
};

KVCacheSet collect_kv(const ModelWeights& w, const ModelConfig& cfg, std::span<const TokenSeq> calib);

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens);

}  // namespace mha2gqa
