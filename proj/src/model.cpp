#include "mha2gqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "mha2gqa/error.hpp"
#include "mha2gqa/kernels.hpp"
#include "mha2gqa/model_internal.hpp"

namespace mha2gqa {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || head_dim == 0 || n_layers == 0 || d_ff == 0 || vocab_size == 0 ||
      n_kv_heads == 0) {
    throw InvalidArgument("ModelConfig: all dimensions must be positive");
  }
  if (d_model != n_heads * head_dim) throw InvalidArgument("ModelConfig: d_model must equal n_heads * head_dim");
  if (head_dim % 2 != 0) throw InvalidArgument("ModelConfig: head_dim must be even");
  if (n_heads % n_kv_heads != 0) throw InvalidArgument("ModelConfig: n_heads must be divisible by n_kv_heads");
  if (!(rope_base > 0.0) || !(norm_eps > 0.0)) throw InvalidArgument("ModelConfig: rope_base and norm_eps must be positive");
}

ModelConfig toy_config() { return ModelConfig{}; }

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t q_rows = cfg.n_heads * cfg.head_dim;
  const std::size_t kv_rows = cfg.n_kv_heads * cfg.head_dim;
  ModelWeights w;
  w.embedding = Matrix(cfg.vocab_size, d);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = Matrix(1, d);
    l.wq = Matrix(q_rows, d);
    l.wk = Matrix(kv_rows, d);
    l.wv = Matrix(kv_rows, d);
    l.wo = Matrix(d, q_rows);
    l.ffn_norm = Matrix(1, d);
    l.w_gate = Matrix(cfg.d_ff, d);
    l.w_up = Matrix(cfg.d_ff, d);
    l.w_down = Matrix(d, cfg.d_ff);
  }
  w.final_norm = Matrix(1, d);
  w.lm_head = Matrix(cfg.vocab_size, d);
  return w;
}

namespace {

template <typename Self, typename Fn>
void visit_tensors(Self& w, Fn&& fn) {
  fn("embedding", w.embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "attn_norm", l.attn_norm);
    fn(p + "wq", l.wq);
    fn(p + "wk", l.wk);
    fn(p + "wv", l.wv);
    fn(p + "wo", l.wo);
    fn(p + "ffn_norm", l.ffn_norm);
    fn(p + "w_gate", l.w_gate);
    fn(p + "w_up", l.w_up);
    fn(p + "w_down", l.w_down);
  }
  fn("final_norm", w.final_norm);
  fn("lm_head", w.lm_head);
}

}  // namespace

void ModelWeights::for_each_tensor(const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_tensors(*this, fn);
}

void ModelWeights::for_each_tensor(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  visit_tensors(*this, fn);
}

void ModelWeights::check_shapes(const ModelConfig& cfg) const {
  const ModelWeights ref = zeros(cfg);
  if (layers.size() != ref.layers.size()) {
    throw FormatError(FormatError::Detail::kShapeMismatch, "layer count does not match config");
  }
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  ref.for_each_tensor([&](const std::string&, const Matrix& m) { shapes.emplace_back(m.rows(), m.cols()); });
  std::size_t i = 0;
  for_each_tensor([&](const std::string& name, const Matrix& m) {
    if (m.rows() != shapes[i].first || m.cols() != shapes[i].second) {
      throw FormatError(FormatError::Detail::kShapeMismatch,
                        "tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", expected " + std::to_string(shapes[i].first) + "x" +
                            std::to_string(shapes[i].second));
    }
    ++i;
  });
}

bool ModelWeights::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, const Matrix& m) { ok = ok && m.all_finite(); });
  return ok;
}

ModelWeights init_random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights w = ModelWeights::zeros(cfg);
  std::mt19937_64 rng(seed);
  auto fill_normal = [&](Matrix& m, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : m.data()) v = dist(rng);
  };
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  fill_normal(w.embedding, 1.0);
  for (auto& l : w.layers) {
    l.attn_norm.fill(1.0);
    l.ffn_norm.fill(1.0);
    fill_normal(l.wq, in_scale);
    fill_normal(l.wk, in_scale);
    fill_normal(l.wv, in_scale);
    fill_normal(l.wo, 1.0 / std::sqrt(static_cast<double>(cfg.n_heads * cfg.head_dim)));
    fill_normal(l.w_gate, in_scale);
    fill_normal(l.w_up, in_scale);
    fill_normal(l.w_down, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)));
  }
  w.final_norm.fill(1.0);
  fill_normal(w.lm_head, in_scale);
  return w;
}

RopeTable::RopeTable(std::size_t head_dim, double base, RotationPairing pairing)
    : head_dim_(head_dim), pairing_(pairing), inv_freq_(head_dim / 2) {
  if (head_dim % 2 != 0) throw InvalidArgument("RopeTable: head_dim must be even");
  for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
    inv_freq_[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
}

double RopeTable::angle(std::size_t position, std::size_t plane) const {
  return static_cast<double>(position) * inv_freq_[plane];
}

BlockRotation RopeTable::rotation(std::size_t position) const {
  std::vector<double> a(inv_freq_.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = angle(position, i);
  return BlockRotation(std::move(a), pairing_);
}

void RopeTable::apply(Matrix& x, std::size_t row0, bool inverse) const {
  const BlockRotation frame = BlockRotation::identity(head_dim_, pairing_);
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
    const auto [pa, pb] = frame.plane(i);
    auto ra = x.row(row0 + pa);
    auto rb = x.row(row0 + pb);
    for (std::size_t t = 0; t < x.cols(); ++t) {
      const double th = sign * angle(t, i);
      const double c = std::cos(th);
      const double s = std::sin(th);
      const double xa = ra[t];
      const double xb = rb[t];
      ra[t] = c * xa - s * xb;
      rb[t] = s * xa + c * xb;
    }
  }
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(t) + " out of range for vocab size " +
                            std::to_string(cfg.vocab_size));
    }
  }
}

namespace detail {

Matrix embed(const Matrix& embedding, std::span<const int> tokens) {
  const std::size_t d = embedding.cols();
  Matrix x(d, tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto e = embedding.row(static_cast<std::size_t>(tokens[t]));
    for (std::size_t i = 0; i < d; ++i) x(i, t) = e[i];
  }
  return x;
}

Matrix rms_norm(const Matrix& x, const Matrix& scale, double eps, std::vector<double>* inv_rms) {
  const std::size_t d = x.rows();
  const std::size_t n = x.cols();
  std::vector<double> ss(n, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const auto r = x.row(i);
    for (std::size_t t = 0; t < n; ++t) ss[t] += r[t] * r[t];
  }
  for (auto& v : ss) v = 1.0 / std::sqrt(v / static_cast<double>(d) + eps);
  Matrix y(d, n);
  for (std::size_t i = 0; i < d; ++i) {
    const auto r = x.row(i);
    auto out = y.row(i);
    const double g = scale(0, i);
    for (std::size_t t = 0; t < n; ++t) out[t] = r[t] * ss[t] * g;
  }
  if (inv_rms) *inv_rms = std::move(ss);
  return y;
}

void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, const ModelConfig& cfg, Matrix& out,
                      std::vector<Matrix>* probs) {
  const std::size_t n = q.cols();
  const std::size_t hd = cfg.head_dim;
  const std::size_t group = cfg.group_size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  out = Matrix(cfg.n_heads * hd, n);
  if (probs) probs->assign(cfg.n_heads, Matrix(n, n));
  const auto n_heads = static_cast<long>(cfg.n_heads);
#pragma omp parallel for schedule(static)
  for (long hl = 0; hl < n_heads; ++hl) {
    const auto h = static_cast<std::size_t>(hl);
    const std::size_t kvh = h / group;
    Matrix p(n, n);
    std::vector<double> col(hd);
    for (std::size_t t = 0; t < n; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      auto prow = p.row(t);
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < hd; ++i) dot += q(h * hd + i, t) * k(kvh * hd + i, s);
        prow[s] = dot * scale;
        mx = std::max(mx, prow[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        prow[s] = std::exp(prow[s] - mx);
        z += prow[s];
      }
      for (std::size_t s = 0; s <= t; ++s) prow[s] /= z;
      std::fill(col.begin(), col.end(), 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        for (std::size_t i = 0; i < hd; ++i) col[i] += prow[s] * v(kvh * hd + i, s);
      }
      for (std::size_t i = 0; i < hd; ++i) out(h * hd + i, t) = col[i];
    }
    if (probs) (*probs)[h] = std::move(p);
  }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

namespace {

using KvHook = std::function<void(std::size_t layer, const Matrix& keys, const Matrix& values)>;

Matrix run_forward(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens, const KvHook* hook) {
  const RopeTable rope(cfg.head_dim, cfg.rope_base, cfg.rope_pairing);
  Matrix x = detail::embed(w.embedding, tokens);
  Matrix u, q, k, v, attn;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    u = detail::rms_norm(x, layer.attn_norm, cfg.norm_eps, nullptr);
    kernels::gemm_nn(layer.wq, u, q);
    kernels::gemm_nn(layer.wk, u, k);
    kernels::gemm_nn(layer.wv, u, v);
    if (hook) (*hook)(l, k, v);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) rope.apply(q, h * cfg.head_dim);
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) rope.apply(k, h * cfg.head_dim);
    detail::causal_attention(q, k, v, cfg, attn, nullptr);
    kernels::gemm_nn(layer.wo, attn, x, /*accumulate=*/true);

    u = detail::rms_norm(x, layer.ffn_norm, cfg.norm_eps, nullptr);
    Matrix gate = kernels::matmul(layer.w_gate, u);
    const Matrix up = kernels::matmul(layer.w_up, u);
    for (std::size_t i = 0; i < gate.size(); ++i) gate.data()[i] = detail::silu(gate.data()[i]) * up.data()[i];
    kernels::gemm_nn(layer.w_down, gate, x, /*accumulate=*/true);
  }
  u = detail::rms_norm(x, w.final_norm, cfg.norm_eps, nullptr);
  return kernels::matmul(w.lm_head, u);
}

}  // namespace

Matrix forward(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens) {
  cfg.validate();
  check_tokens(cfg, tokens);
  return run_forward(w, cfg, tokens, nullptr);
}

Matrix forward_reference(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens) {
  cfg.validate();
  check_tokens(cfg, tokens);
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim;
  const std::size_t n = tokens.size();
  const RopeTable rope(hd, cfg.rope_base, cfg.rope_pairing);

  auto norm_vec = [&](const std::vector<double>& x, const Matrix& g) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + cfg.norm_eps);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = x[i] * inv * g(0, i);
    return y;
  };
  auto project = [](const Matrix& m, std::size_t row0, std::size_t nrows, const std::vector<double>& x) {
    std::vector<double> y(nrows, 0.0);
    for (std::size_t r = 0; r < nrows; ++r)
      for (std::size_t c = 0; c < x.size(); ++c) y[r] += m(row0 + r, c) * x[c];
    return y;
  };
  auto rotate = [&](std::vector<double> v, std::size_t pos) {
    const BlockRotation r = rope.rotation(pos);
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const auto [a, b] = r.plane(i);
      const double c = std::cos(r.angles()[i]), s = std::sin(r.angles()[i]);
      const double va = v[a], vb = v[b];
      v[a] = c * va - s * vb;
      v[b] = s * va + c * vb;
    }
    return v;
  };

  std::vector<std::vector<double>> hs(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t) {
    const auto e = w.embedding.row(static_cast<std::size_t>(tokens[t]));
    hs[t].assign(e.begin(), e.end());
  }
  for (const auto& layer : w.layers) {
    std::vector<std::vector<double>> us(n);
    for (std::size_t t = 0; t < n; ++t) us[t] = norm_vec(hs[t], layer.attn_norm);
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> out(d, 0.0);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t kvh = h / cfg.group_size();
        const auto qv = rotate(project(layer.wq, h * hd, hd, us[t]), t);
        std::vector<double> scores(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          const auto kv = rotate(project(layer.wk, kvh * hd, hd, us[s]), s);
          double dot = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dot += qv[i] * kv[i];
          scores[s] = dot / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(scores.begin(), scores.end());
        double z = 0.0;
        for (auto& sc : scores) z += (sc = std::exp(sc - mx));
        std::vector<double> head(hd, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          const auto vv = project(layer.wv, kvh * hd, hd, us[s]);
          for (std::size_t i = 0; i < hd; ++i) head[i] += scores[s] / z * vv[i];
        }
        // W_O_h * head, the per-head term of the attention sum
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t i = 0; i < hd; ++i) out[r] += layer.wo(r, h * hd + i) * head[i];
      }
      for (std::size_t r = 0; r < d; ++r) hs[t][r] += out[r];
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto u2 = norm_vec(hs[t], layer.ffn_norm);
      const auto g = project(layer.w_gate, 0, cfg.d_ff, u2);
      const auto up = project(layer.w_up, 0, cfg.d_ff, u2);
      std::vector<double> act(cfg.d_ff);
      for (std::size_t i = 0; i < cfg.d_ff; ++i) act[i] = detail::silu(g[i]) * up[i];
      const auto f = project(layer.w_down, 0, d, act);
      for (std::size_t r = 0; r < d; ++r) hs[t][r] += f[r];
    }
  }
  Matrix logits(cfg.vocab_size, n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto lv = project(w.lm_head, 0, cfg.vocab_size, norm_vec(hs[t], w.final_norm));
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) logits(v, t) = lv[v];
  }
  return logits;
}

KVCacheSet collect_kv(const ModelWeights& w, const ModelConfig& cfg, std::span<const TokenSeq> calib) {
  cfg.validate();
  if (calib.empty()) throw InvalidArgument("collect_kv: empty calibration set");
  std::size_t total = 0;
  for (const auto& seq : calib) {
    check_tokens(cfg, seq);
    total += seq.size();
  }
  const std::size_t hd = cfg.head_dim;
  KVCacheSet cache;
  cache.n_tokens = total;
  cache.keys.assign(cfg.n_layers, std::vector<Matrix>(cfg.n_kv_heads, Matrix(hd, total)));
  cache.values = cache.keys;

  std::size_t offset = 0;
  const KvHook hook = [&](std::size_t l, const Matrix& k, const Matrix& v) {
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
      for (std::size_t i = 0; i < hd; ++i) {
        std::copy(k.row(h * hd + i).begin(), k.row(h * hd + i).end(),
                  cache.keys[l][h].row(i).begin() + static_cast<std::ptrdiff_t>(offset));
        std::copy(v.row(h * hd + i).begin(), v.row(h * hd + i).end(),
                  cache.values[l][h].row(i).begin() + static_cast<std::ptrdiff_t>(offset));
      }
    }
  };
  for (const auto& seq : calib) {
    run_forward(w, cfg, seq, &hook);
    offset += seq.size();
  }
  return cache;
}

}  // namespace mha2gqa
