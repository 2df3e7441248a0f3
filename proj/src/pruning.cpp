#include "mha2gqa/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "mha2gqa/backprop.hpp"
#include "mha2gqa/error.hpp"
#include "mha2gqa/hard_concrete.hpp"
#include "mha2gqa/losses.hpp"

namespace mha2gqa {

MaskState MaskState::init(std::size_t n_layers, std::size_t n_heads, double log_alpha0) {
  return MaskState{std::vector<std::vector<double>>(n_layers, std::vector<double>(n_heads, log_alpha0))};
}

std::size_t MaskState::n_gates() const {
  std::size_t n = 0;
  for (const auto& l : log_alpha) n += l.size();
  return n;
}

std::vector<std::vector<double>> MaskState::deterministic_gates() const {
  auto z = log_alpha;
  for (auto& l : z)
    for (auto& v : l) v = hard_concrete::deterministic(v);
  return z;
}

double MaskState::mean_deterministic_gate() const {
  double s = 0.0;
  for (const auto& l : log_alpha)
    for (double a : l) s += hard_concrete::deterministic(a);
  return n_gates() ? s / static_cast<double>(n_gates()) : 0.0;
}

double MaskState::layer_mean_deterministic_gate(std::size_t layer) const {
  const auto& l = log_alpha.at(layer);
  double s = 0.0;
  for (double a : l) s += hard_concrete::deterministic(a);
  return l.empty() ? 0.0 : s / static_cast<double>(l.size());
}

double MaskState::mean_expected_gate() const {
  double s = 0.0;
  for (const auto& l : log_alpha)
    for (double a : l) s += hard_concrete::expected(a);
  return n_gates() ? s / static_cast<double>(n_gates()) : 0.0;
}

GroupHeads mean_pool_init(const ModelWeights& w, const ModelConfig& cfg, std::size_t n_groups) {
  if (!cfg.is_mha()) throw InvalidArgument("mean_pool_init: source model must be MHA");
  if (n_groups == 0 || cfg.n_heads % n_groups != 0) {
    throw InvalidArgument("mean_pool_init: " + std::to_string(n_groups) + " groups do not divide " +
                          std::to_string(cfg.n_heads) + " heads");
  }
  w.check_shapes(cfg);
  const std::size_t hd = cfg.head_dim;
  const std::size_t d = cfg.n_heads / n_groups;
  GroupHeads out;
  out.n_groups = n_groups;
  out.wk.resize(cfg.n_layers);
  out.wv.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t g = 0; g < n_groups; ++g) {
      Matrix k(hd, cfg.d_model), v(hd, cfg.d_model);
      for (std::size_t m = 0; m < d; ++m) {
        k += w.layers[l].wk.block((g * d + m) * hd, 0, hd, cfg.d_model);
        v += w.layers[l].wv.block((g * d + m) * hd, 0, hd, cfg.d_model);
      }
      k *= 1.0 / static_cast<double>(d);
      v *= 1.0 / static_cast<double>(d);
      out.wk[l].push_back(std::move(k));
      out.wv[l].push_back(std::move(v));
    }
  }
  return out;
}

GroupHeads mean_pool_init(const ModelWeights& w, const ModelConfig& cfg, const GroupingPlan& plan) {
  if (plan.n_heads != cfg.n_heads || plan.layers.size() != cfg.n_layers) {
    throw InvalidArgument("mean_pool_init: plan does not match the model");
  }
  for (const auto& l : plan.layers) {
    validate_partition(l.groups, plan.n_heads, plan.n_groups);
    if (!is_contiguous(l.groups)) throw InvalidArgument("mean_pool_init: plan groups are not contiguous; regroup first");
  }
  return mean_pool_init(w, cfg, plan.n_groups);
}

namespace {

void check_heads(const ModelConfig& cfg, const GroupHeads& heads) {
  if (heads.n_groups == 0 || cfg.n_heads % heads.n_groups != 0 || heads.wk.size() != cfg.n_layers ||
      heads.wv.size() != cfg.n_layers) {
    throw InvalidArgument("group heads do not match the model");
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (heads.wk[l].size() != heads.n_groups || heads.wv[l].size() != heads.n_groups) {
      throw InvalidArgument("group heads do not match the model");
    }
  }
}

}  // namespace

std::pair<Matrix, Matrix> apply_masks(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                                      std::size_t layer, std::size_t head, double z) {
  check_heads(cfg, heads);
  if (layer >= cfg.n_layers || head >= cfg.n_heads) throw InvalidArgument("apply_masks: index out of range");
  const std::size_t hd = cfg.head_dim;
  const std::size_t g = head / (cfg.n_heads / heads.n_groups);
  Matrix k = w.layers[layer].wk.block(head * hd, 0, hd, cfg.d_model) * z + heads.wk[layer][g] * (1.0 - z);
  Matrix v = w.layers[layer].wv.block(head * hd, 0, hd, cfg.d_model) * z + heads.wv[layer][g] * (1.0 - z);
  return {std::move(k), std::move(v)};
}

ModelWeights apply_masks(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                         const std::vector<std::vector<double>>& z) {
  check_heads(cfg, heads);
  if (z.size() != cfg.n_layers) throw InvalidArgument("apply_masks: gate table has the wrong shape");
  ModelWeights out = w;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (z[l].size() != cfg.n_heads) throw InvalidArgument("apply_masks: gate table has the wrong shape");
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      auto [k, v] = apply_masks(w, cfg, heads, l, h, z[l][h]);
      out.layers[l].wk.set_block(h * cfg.head_dim, 0, k);
      out.layers[l].wv.set_block(h * cfg.head_dim, 0, v);
    }
  }
  return out;
}

void TrainSchedule::validate() const {
  if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw InvalidArgument("schedule: warmup_frac must be in [0, 1]");
  if (!(freeze_frac >= warmup_frac && freeze_frac <= 1.0)) {
    throw InvalidArgument("schedule: freeze_frac must be in [warmup_frac, 1]");
  }
  if (!(lr_model >= 0.0) || !(lr_mask >= 0.0)) throw InvalidArgument("schedule: learning rates must be >= 0");
  if (batch_size == 0) throw InvalidArgument("schedule: batch_size must be >= 1");
  if (bild_k < 2) throw InvalidArgument("schedule: bild_k must be >= 2");
  if (!std::isfinite(gate_init)) throw InvalidArgument("schedule: gate_init must be finite");
}

double TrainSchedule::target(std::size_t step) const {
  const double warm = warmup_frac * static_cast<double>(total_steps);
  if (static_cast<double>(step) >= warm) return 0.0;
  return 1.0 - static_cast<double>(step) / warm;
}

bool TrainSchedule::masks_frozen(std::size_t step) const {
  return static_cast<double>(step) >= freeze_frac * static_cast<double>(total_steps);
}

double TrainSchedule::lr_scale(std::size_t step) const {
  if (total_steps == 0) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

nlohmann::json schedule_to_json(const TrainSchedule& s) {
  return {{"total_steps", s.total_steps}, {"warmup_frac", s.warmup_frac}, {"freeze_frac", s.freeze_frac},
          {"lr_model", s.lr_model},       {"lr_mask", s.lr_mask},         {"batch_size", s.batch_size},
          {"bild_k", s.bild_k},           {"gate_init", s.gate_init},     {"seed", s.seed}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
  TrainSchedule s;
  try {
    s.total_steps = j.value("total_steps", s.total_steps);
    s.warmup_frac = j.value("warmup_frac", s.warmup_frac);
    s.freeze_frac = j.value("freeze_frac", s.freeze_frac);
    s.lr_model = j.value("lr_model", s.lr_model);
    s.lr_mask = j.value("lr_mask", s.lr_mask);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.bild_k = j.value("bild_k", s.bild_k);
    s.gate_init = j.value("gate_init", s.gate_init);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad training schedule: ") + e.what());
  }
  s.validate();
  return s;
}

MaskedLoss masked_loss_and_grad(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                                const MaskState& masks, const std::vector<std::vector<double>>& noise,
                                double target, std::span<const TokenSeq> seqs,
                                std::span<const Matrix> teacher_logits, std::size_t bild_k, MaskedGrad* grad) {
  check_heads(cfg, heads);
  if (seqs.empty() || seqs.size() != teacher_logits.size()) {
    throw InvalidArgument("masked loss: need one teacher logit matrix per sequence");
  }
  if (masks.log_alpha.size() != cfg.n_layers) throw InvalidArgument("masked loss: mask table has the wrong shape");
  const bool stochastic = !noise.empty();
  const std::size_t hd = cfg.head_dim;
  const std::size_t group = cfg.n_heads / heads.n_groups;

  std::vector<std::vector<double>> z = masks.log_alpha;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (masks.log_alpha[l].size() != cfg.n_heads) throw InvalidArgument("masked loss: mask table has the wrong shape");
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const double a = masks.log_alpha[l][h];
      z[l][h] = stochastic ? hard_concrete::sample(a, noise.at(l).at(h)) : hard_concrete::deterministic(a);
    }
  }
  const ModelWeights eff = apply_masks(w, cfg, heads, z);

  MaskedLoss out;
  ModelWeights geff = ModelWeights::zeros(cfg);
  const double inv_n = 1.0 / static_cast<double>(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Matrix& teacher = teacher_logits[i];
    const LogitLoss loss = [&](const Matrix& logits, Matrix& dlogits) {
      const double v = distill_loss(logits, teacher, bild_k, &dlogits);
      dlogits *= inv_n;
      return v;
    };
    out.distill += inv_n * loss_and_grad(eff, cfg, seqs[i], loss, geff);
  }

  const std::size_t n_gates = masks.n_gates();
  double mean_e = 0.0;
  std::vector<std::vector<double>> de = masks.log_alpha;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) mean_e += hard_concrete::expected(masks.log_alpha[l][h], &de[l][h]);
  mean_e /= static_cast<double>(n_gates);
  double dmean = 0.0;
  out.l0 = l0_loss(mean_e, target, &dmean);

  if (!grad) return out;
  grad->weights = geff;
  grad->heads.n_groups = heads.n_groups;
  grad->heads.wk.assign(cfg.n_layers, std::vector<Matrix>(heads.n_groups, Matrix(hd, cfg.d_model)));
  grad->heads.wv = grad->heads.wk;
  grad->log_alpha = masks.log_alpha;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& src = w.layers[l];
    const auto& ge = geff.layers[l];
    auto& gw = grad->weights.layers[l];
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t g = h / group;
      const double zh = z[l][h];
      const Matrix gk = ge.wk.block(h * hd, 0, hd, cfg.d_model);
      const Matrix gv = ge.wv.block(h * hd, 0, hd, cfg.d_model);
      gw.wk.set_block(h * hd, 0, gk * zh);
      gw.wv.set_block(h * hd, 0, gv * zh);
      grad->heads.wk[l][g] += gk * (1.0 - zh);
      grad->heads.wv[l][g] += gv * (1.0 - zh);

      double dz = 0.0;
      const Matrix wk = src.wk.block(h * hd, 0, hd, cfg.d_model);
      const Matrix wv = src.wv.block(h * hd, 0, hd, cfg.d_model);
      for (std::size_t k = 0; k < wk.size(); ++k) {
        dz += gk.data()[k] * (wk.data()[k] - heads.wk[l][g].data()[k]);
        dz += gv.data()[k] * (wv.data()[k] - heads.wv[l][g].data()[k]);
      }
      const double a = masks.log_alpha[l][h];
      const double dz_da = stochastic ? hard_concrete::sample_grad(a, noise[l][h]) : 0.0;
      grad->log_alpha[l][h] = dz * dz_da + dmean * de[l][h] / static_cast<double>(n_gates);
    }
  }
  return out;
}

PruneResult prune_train(const ModelWeights& student, const ModelConfig& cfg, GroupHeads heads, MaskState masks,
                        const TrainSchedule& schedule, const ModelWeights& teacher, const ModelConfig& teacher_cfg,
                        const std::vector<TokenSeq>& data) {
  schedule.validate();
  cfg.validate();
  if (!cfg.is_mha()) throw InvalidArgument("prune_train: student must be MHA while masks are active");
  if (teacher_cfg.vocab_size != cfg.vocab_size) throw InvalidArgument("prune_train: teacher vocabulary differs");
  if (data.empty()) throw InvalidArgument("prune_train: no training sequences");
  student.check_shapes(cfg);
  teacher.check_shapes(teacher_cfg);
  check_heads(cfg, heads);

  std::vector<Matrix> teacher_logits;
  teacher_logits.reserve(data.size());
  for (const auto& seq : data) teacher_logits.push_back(forward(teacher, teacher_cfg, seq));

  const auto ceiling = masks.log_alpha;
  PruneResult res{student, std::move(heads), std::move(masks), {}, {}};
  std::mt19937_64 rng(schedule.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<TokenSeq> batch(schedule.batch_size);
  std::vector<Matrix> batch_logits(schedule.batch_size);

  for (std::size_t step = 0; step < schedule.total_steps; ++step) {
    for (std::size_t b = 0; b < schedule.batch_size; ++b) {
      const std::size_t i = pick(rng);
      batch[b] = data[i];
      batch_logits[b] = teacher_logits[i];
    }
    const bool frozen = schedule.masks_frozen(step);
    std::vector<std::vector<double>> noise;
    if (!frozen) {
      noise = res.masks.log_alpha;
      for (auto& l : noise)
        for (auto& u : l) u = hard_concrete::draw_noise(rng);
    }
    MaskedGrad g;
    const auto loss = masked_loss_and_grad(res.weights, cfg, res.heads, res.masks, noise, schedule.target(step), batch,
                                           batch_logits, schedule.bild_k, &g);
    if (!std::isfinite(loss.total())) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " +
                            std::to_string(loss.total()));
    }
    const double scale = schedule.lr_scale(step);
    const double lr_w = schedule.lr_model * scale;
    axpy(-lr_w, g.weights, res.weights);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t k = 0; k < res.heads.n_groups; ++k) {
        res.heads.wk[l][k] += g.heads.wk[l][k] * -lr_w;
        res.heads.wv[l][k] += g.heads.wv[l][k] * -lr_w;
      }
      if (!frozen)
        for (std::size_t h = 0; h < cfg.n_heads; ++h)
          res.masks.log_alpha[l][h] = std::clamp(res.masks.log_alpha[l][h] - schedule.lr_mask * scale * g.log_alpha[l][h],
                                                 kLogAlphaMin, std::max(kLogAlphaMin, ceiling[l][h]));
    }
    bool finite = res.weights.all_finite();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t k = 0; k < res.heads.n_groups; ++k)
        finite = finite && res.heads.wk[l][k].all_finite() && res.heads.wv[l][k].all_finite();
      for (double a : res.masks.log_alpha[l]) finite = finite && std::isfinite(a);
    }
    if (!finite) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": non-finite weights");
    }
    res.losses.push_back(loss.total());
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      res.trajectory.push_back({step, l, res.masks.layer_mean_deterministic_gate(l)});
  }
  return res;
}

GqaExport finalize_gqa(const ModelWeights& w, const ModelConfig& cfg, const GroupHeads& heads,
                       const MaskState& masks) {
  check_heads(cfg, heads);
  w.check_shapes(cfg);
  GqaExport out;
  out.config = cfg;
  out.config.n_kv_heads = heads.n_groups;
  out.config.validate();
  out.weights = w;
  const std::size_t hd = cfg.head_dim;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& lw = out.weights.layers[l];
    lw.wk = Matrix(heads.n_groups * hd, cfg.d_model);
    lw.wv = Matrix(heads.n_groups * hd, cfg.d_model);
    for (std::size_t g = 0; g < heads.n_groups; ++g) {
      lw.wk.set_block(g * hd, 0, heads.wk[l][g]);
      lw.wv.set_block(g * hd, 0, heads.wv[l][g]);
    }
  }
  const auto z = masks.deterministic_gates();
  for (std::size_t l = 0; l < z.size(); ++l)
    for (std::size_t h = 0; h < z[l].size(); ++h) {
      out.max_residual_gate = std::max(out.max_residual_gate, z[l][h]);
      if (z[l][h] > kResidualGateThreshold) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "layer %zu head %zu: gate %.4f above %.2f; its original KV weights are dropped",
                      l, h, z[l][h], kResidualGateThreshold);
        out.warnings.emplace_back(buf);
      }
    }
  return out;
}

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "step,layer,mean_gate\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_gate);
    out << r.step << ',' << r.layer << ',' << buf << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

double evaluate_distill(const ModelWeights& student, const ModelConfig& student_cfg, const ModelWeights& teacher,
                        const ModelConfig& teacher_cfg, std::span<const TokenSeq> seqs, std::size_t bild_k) {
  if (seqs.empty()) throw InvalidArgument("evaluate_distill: no sequences");
  double total = 0.0;
  for (const auto& s : seqs)
    total += distill_loss(forward(student, student_cfg, s), forward(teacher, teacher_cfg, s), bild_k);
  return total / static_cast<double>(seqs.size());
}

}  // namespace mha2gqa
