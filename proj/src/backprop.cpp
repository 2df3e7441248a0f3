#include "mha2gqa/backprop.hpp"

#include <cmath>
#include <vector>

#include "mha2gqa/error.hpp"
#include "mha2gqa/kernels.hpp"
#include "mha2gqa/model_internal.hpp"

namespace mha2gqa {

namespace {

struct LayerTrace {
  Matrix x_in;
  std::vector<double> inv1;
  Matrix u1;
  Matrix q, k, v;  // q and k after RoPE
  std::vector<Matrix> probs;
  Matrix attn;
  Matrix x_mid;
  std::vector<double> inv2;
  Matrix u2;
  Matrix gate_pre, up, act;
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Adds d/dx and d/dscale of y = rms_norm(x, scale) given dy into dx and dscale.
void rms_norm_backward(const Matrix& x, const Matrix& scale, const std::vector<double>& inv, const Matrix& dy,
                       Matrix& dx, Matrix& dscale) {
  const std::size_t d = x.rows();
  const std::size_t n = x.cols();
  std::vector<double> proj(n, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double s = scale(0, i);
    double ds = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      ds += dy(i, t) * x(i, t) * inv[t];
      proj[t] += dy(i, t) * s * x(i, t);
    }
    dscale(0, i) += ds;
  }
  for (std::size_t i = 0; i < d; ++i) {
    const double s = scale(0, i);
    for (std::size_t t = 0; t < n; ++t) {
      const double r = inv[t];
      dx(i, t) += r * s * dy(i, t) - r * r * r / static_cast<double>(d) * x(i, t) * proj[t];
    }
  }
}

// Gradients of causal attention for rotated q/k and v; parallel over KV heads so that
// query heads sharing a KV head accumulate into it from one thread.
void attention_backward(const LayerTrace& tr, const Matrix& dattn, const ModelConfig& cfg, Matrix& dq, Matrix& dk,
                        Matrix& dv) {
  const std::size_t n = tr.q.cols();
  const std::size_t hd = cfg.head_dim;
  const std::size_t group = cfg.group_size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  dq = Matrix(tr.q.rows(), n);
  dk = Matrix(tr.k.rows(), n);
  dv = Matrix(tr.v.rows(), n);
  const auto n_kv = static_cast<long>(cfg.n_kv_heads);
#pragma omp parallel for schedule(static)
  for (long kl = 0; kl < n_kv; ++kl) {
    const auto kvh = static_cast<std::size_t>(kl);
    std::vector<double> dp(n);
    for (std::size_t h = kvh * group; h < (kvh + 1) * group; ++h) {
      const Matrix& p = tr.probs[h];
      for (std::size_t t = 0; t < n; ++t) {
        double row_dot = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hd; ++i) acc += dattn(h * hd + i, t) * tr.v(kvh * hd + i, s);
          dp[s] = acc;
          row_dot += p(t, s) * acc;
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const double pts = p(t, s);
          const double ds = pts * (dp[s] - row_dot) * scale;
          for (std::size_t i = 0; i < hd; ++i) {
            dq(h * hd + i, t) += ds * tr.k(kvh * hd + i, s);
            dk(kvh * hd + i, s) += ds * tr.q(h * hd + i, t);
            dv(kvh * hd + i, s) += pts * dattn(h * hd + i, t);
          }
        }
      }
    }
  }
}

}  // namespace

double loss_and_grad(const ModelWeights& w, const ModelConfig& cfg, std::span<const int> tokens,
                     const LogitLoss& loss, ModelWeights& grad) {
  cfg.validate();
  check_tokens(cfg, tokens);
  const RopeTable rope(cfg.head_dim, cfg.rope_base, cfg.rope_pairing);
  const std::size_t hd = cfg.head_dim;

  std::vector<LayerTrace> trace(w.layers.size());
  Matrix x = detail::embed(w.embedding, tokens);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    auto& tr = trace[l];
    tr.x_in = x;
    tr.u1 = detail::rms_norm(x, layer.attn_norm, cfg.norm_eps, &tr.inv1);
    kernels::gemm_nn(layer.wq, tr.u1, tr.q);
    kernels::gemm_nn(layer.wk, tr.u1, tr.k);
    kernels::gemm_nn(layer.wv, tr.u1, tr.v);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) rope.apply(tr.q, h * hd);
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) rope.apply(tr.k, h * hd);
    detail::causal_attention(tr.q, tr.k, tr.v, cfg, tr.attn, &tr.probs);
    kernels::gemm_nn(layer.wo, tr.attn, x, /*accumulate=*/true);
    tr.x_mid = x;

    tr.u2 = detail::rms_norm(x, layer.ffn_norm, cfg.norm_eps, &tr.inv2);
    tr.gate_pre = kernels::matmul(layer.w_gate, tr.u2);
    tr.up = kernels::matmul(layer.w_up, tr.u2);
    tr.act = Matrix(tr.up.rows(), tr.up.cols());
    for (std::size_t i = 0; i < tr.act.size(); ++i)
      tr.act.data()[i] = detail::silu(tr.gate_pre.data()[i]) * tr.up.data()[i];
    kernels::gemm_nn(layer.w_down, tr.act, x, /*accumulate=*/true);
  }
  std::vector<double> inv_f;
  const Matrix uf = detail::rms_norm(x, w.final_norm, cfg.norm_eps, &inv_f);
  const Matrix logits = kernels::matmul(w.lm_head, uf);

  Matrix dlogits(logits.rows(), logits.cols());
  const double value = loss(logits, dlogits);
  if (dlogits.rows() != logits.rows() || dlogits.cols() != logits.cols()) {
    throw InvalidArgument("loss returned a gradient of the wrong shape");
  }

  kernels::gemm_nt(dlogits, uf, grad.lm_head, /*accumulate=*/true);
  const Matrix duf = kernels::matmul_tn(w.lm_head, dlogits);
  Matrix dx(x.rows(), x.cols());
  rms_norm_backward(x, w.final_norm, inv_f, duf, dx, grad.final_norm);

  Matrix dq, dk, dv;
  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& layer = w.layers[li];
    const auto& tr = trace[li];
    auto& g = grad.layers[li];

    kernels::gemm_nt(dx, tr.act, g.w_down, true);
    const Matrix dact = kernels::matmul_tn(layer.w_down, dx);
    Matrix dgate(dact.rows(), dact.cols()), dup(dact.rows(), dact.cols());
    for (std::size_t i = 0; i < dact.size(); ++i) {
      const double a = tr.gate_pre.data()[i];
      const double sg = sigmoid(a);
      dup.data()[i] = dact.data()[i] * a * sg;
      dgate.data()[i] = dact.data()[i] * tr.up.data()[i] * sg * (1.0 + a * (1.0 - sg));
    }
    kernels::gemm_nt(dgate, tr.u2, g.w_gate, true);
    kernels::gemm_nt(dup, tr.u2, g.w_up, true);
    Matrix du2 = kernels::matmul_tn(layer.w_gate, dgate);
    kernels::gemm_tn(layer.w_up, dup, du2, true);
    rms_norm_backward(tr.x_mid, layer.ffn_norm, tr.inv2, du2, dx, g.ffn_norm);

    kernels::gemm_nt(dx, tr.attn, g.wo, true);
    const Matrix dattn = kernels::matmul_tn(layer.wo, dx);
    attention_backward(tr, dattn, cfg, dq, dk, dv);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) rope.apply(dq, h * hd, /*inverse=*/true);
    for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) rope.apply(dk, h * hd, /*inverse=*/true);
    kernels::gemm_nt(dq, tr.u1, g.wq, true);
    kernels::gemm_nt(dk, tr.u1, g.wk, true);
    kernels::gemm_nt(dv, tr.u1, g.wv, true);
    Matrix du1 = kernels::matmul_tn(layer.wq, dq);
    kernels::gemm_tn(layer.wk, dk, du1, true);
    kernels::gemm_tn(layer.wv, dv, du1, true);
    rms_norm_backward(tr.x_in, layer.attn_norm, tr.inv1, du1, dx, g.attn_norm);
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto row = grad.embedding.row(static_cast<std::size_t>(tokens[t]));
    for (std::size_t i = 0; i < dx.rows(); ++i) row[i] += dx(i, t);
  }
  return value;
}

void axpy(double alpha, const ModelWeights& x, ModelWeights& y) {
  std::vector<const Matrix*> xs;
  x.for_each_tensor([&](const std::string&, const Matrix& m) { xs.push_back(&m); });
  std::size_t i = 0;
  y.for_each_tensor([&](const std::string& name, Matrix& m) {
    const Matrix& src = *xs.at(i++);
    if (src.rows() != m.rows() || src.cols() != m.cols()) throw InvalidArgument("axpy: shape mismatch at " + name);
    for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] += alpha * src.data()[k];
  });
}

double dot(const ModelWeights& a, const ModelWeights& b) {
  std::vector<const Matrix*> as;
  a.for_each_tensor([&](const std::string&, const Matrix& m) { as.push_back(&m); });
  std::size_t i = 0;
  double total = 0.0;
  b.for_each_tensor([&](const std::string& name, const Matrix& m) {
    const Matrix& src = *as.at(i++);
    if (src.rows() != m.rows() || src.cols() != m.cols()) throw InvalidArgument("dot: shape mismatch at " + name);
    for (std::size_t k = 0; k < m.size(); ++k) total += src.data()[k] * m.data()[k];
  });
  return total;
}

}  // namespace mha2gqa
