#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "castlab/autograd.hpp"
#include "castlab/checkpoint.hpp"
#include "castlab/data.hpp"
#include "castlab/metrics.hpp"
#include "castlab/nn.hpp"
#include "castlab/optim.hpp"
#include "castlab/scaling.hpp"
#include "castlab/sparsity.hpp"

namespace castlab {

enum class Method { Dense, Cast, Srste, Naive };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Dense: return "dense";
    case Method::Cast: return "cast";
    case Method::Srste: return "srste";
    case Method::Naive: return "naive";
  }
  return "?";
}

struct TrainPlan {
  Method method = Method::Dense;
  ModelSpec model;
  NMConfig nm;                      // default 2:4
  std::size_t scaling_groups = 2;   // n
  double eta = 2.0 / 3.0;           // KD coefficient (small-model default)
  bool kd = true;                   // distillation on (CAST default; SR-STE toggle)
  double lambda = -1.0;             // <0: auto, median |g| over 100 dense steps
  double srste_lambda = 2e-4;       // L2 decay on masked entries
  Schedule lr{Schedule::Kind::Constant, 1e-3, 0};
  double srste_lr = 0.05;           // plain SGD rate
  std::uint64_t steps = 3000;       // T
  std::uint64_t mask_refresh = 10;  // T1
  std::uint64_t eval_every = 50;
  std::size_t batch_size = 8;
  std::size_t val_batches = 4;
  std::uint64_t seed = 0;

  void validate() const {
    nm.validate();
    model.validate(nm.m_group, scaling_groups);
    if (steps < 1) throw std::invalid_argument("TrainPlan: steps >= 1");
    if (eta < 0.0 || eta > 1.0)
      throw std::invalid_argument("TrainPlan: eta out of [0,1]");
  }
};

/// Matched-budget protocol: KD costs ~4/3 FLOPs per step, so non-KD runs
/// get 4/3 the steps.
inline std::uint64_t matched_steps(std::uint64_t kd_steps, bool kd) {
  return kd ? kd_steps : kd_steps * 4 / 3;
}

/// Relative FLOP weight per step under the budget accounting.
inline double flop_weight(bool kd) { return kd ? 4.0 / 3.0 : 1.0; }

struct TrainData {
  TokenStream stream;  // LM corpus
  MlpTask task;        // MLP regression
};

inline std::vector<Batch> make_validation_set(const TrainPlan& plan,
                                              const TrainData& data) {
  if (plan.model.family == ModelFamily::TinyTransformer)
    return validation_batches(data.stream, plan.batch_size, plan.model.ctx,
                              plan.val_batches);
  Rng rng(plan.seed ^ 0x5EEDull);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < plan.val_batches; ++i)
    out.push_back(data.task.sample(plan.batch_size, rng));
  return out;
}

inline Batch next_train_batch(const TrainPlan& plan, const TrainData& data,
                              Rng& rng) {
  if (plan.model.family == ModelFamily::TinyTransformer)
    return sample_lm_batch(data.stream, plan.batch_size, plan.model.ctx, rng);
  return data.task.sample(plan.batch_size, rng);
}

/// Mean data loss (CE in nats/token for LM, MSE for MLP) over a validation
/// set, under the given forward options.
inline double eval_loss(const ParameterCollection& pc,
                        const std::vector<Batch>& val, ForwardOptions opt) {
  opt.record_params = false;
  double num = 0.0, den = 0.0;
  for (const Batch& b : val) {
    Tape tape;
    ForwardResult fr = forward_model(tape, pc, b, opt);
    double w, loss;
    if (pc.spec.family == ModelFamily::TinyTransformer) {
      w = double(b.targets.size());
      loss = tape.val(tape.ce_with_logits(fr.output, b.targets))[0];
    } else {
      w = double(b.targets_real.size());
      loss = tape.val(tape.mse_to(fr.output, b.targets_real))[0];
    }
    num += loss * w;
    den += w;
  }
  return num / den;
}

/// lambda ~= median |g| over the first 100 dense forward/backward passes,
/// restricted to sparsifiable entries (median of per-pass medians).
inline double auto_lambda(const ParameterCollection& pc, const TrainPlan& plan,
                          const TrainData& data) {
  Rng rng(plan.seed * 2654435761ull + 17ull);
  std::vector<double> pass_medians;
  for (int pass = 0; pass < 100; ++pass) {
    Batch b = next_train_batch(plan, data, rng);
    Tape tape;
    ForwardOptions opt;  // dense, no scaling
    ForwardResult fr = forward_model(tape, pc, b, opt);
    Var loss = pc.spec.family == ModelFamily::TinyTransformer
                   ? tape.ce_with_logits(fr.output, b.targets)
                   : tape.mse_to(fr.output, b.targets_real);
    tape.backward(loss);
    std::vector<double> mags;
    for (std::size_t i = 0; i < pc.params.size(); ++i) {
      if (!pc.params[i].sparsifiable) continue;
      const Tensor& g = tape.grad(fr.param_vars[i]);
      for (double v : g.data) mags.push_back(std::abs(v));
    }
    auto mid = mags.begin() + std::ptrdiff_t(mags.size() / 2);
    std::nth_element(mags.begin(), mid, mags.end());
    pass_medians.push_back(*mid);
  }
  auto mid = pass_medians.begin() + std::ptrdiff_t(pass_medians.size() / 2);
  std::nth_element(pass_medians.begin(), mid, pass_medians.end());
  return *mid;
}

struct TrainOutput {
  Checkpoint checkpoint;      // exported result (pruned/folded for sparse runs)
  RunMetrics metrics;
  bool export_refused = false;
  std::string refusal_reason;
  double final_sparse_ratio = 1.0;    // S_T
  double resolved_lambda = 0.0;       // after auto-calibration
  double preprune_val_ce = 0.0;       // dense(-scaled) forward before hard prune
  double postprune_val_ce = 0.0;      // sparse forward after hard prune
  double flip_mag_event_avg = 0.0;    // avg |w| over every mask flip of the run
  double flip_mag_refresh_avg = 0.0;  // per-refresh flip-magnitude averages,
                                      // averaged over refreshes with flips
  std::uint64_t flip_event_count = 0;
};

/// Hard prune then fold the scaling factors; idempotent. The result carries
/// masks but no scaling factors and passes validate_mask on its nonzero
/// pattern.
inline Checkpoint final_prune_and_fold(Checkpoint ckpt, const NMConfig& nm) {
  std::size_t sk = 0;
  for (auto& p : ckpt.params.params) {
    if (!p.sparsifiable) continue;
    if (sk >= ckpt.masks.size())
      throw std::invalid_argument("final_prune_and_fold: missing masks");
    auto vr = validate_mask(ckpt.masks[sk], nm);
    if (!vr.ok)
      throw std::invalid_argument("final_prune_and_fold: invalid mask");
    p.value = apply_mask(p.value, ckpt.masks[sk]);
    if (!ckpt.scaling.empty())
      p.value = fold_scaling(p.value, ckpt.scaling.factors[sk]);
    ++sk;
  }
  ckpt.scaling = ScalingFactors{};
  ckpt.moments.clear();
  ckpt.scaling_moments.clear();
  return ckpt;
}

namespace trainer_detail {

inline void record_eval_row(RunMetrics& metrics, const TrainPlan& plan,
                            const ParameterCollection& pc,
                            const std::vector<Batch>& val,
                            const std::vector<Mask>* masks,
                            const ScalingFactors* scaling, std::uint64_t step,
                            double train_loss, const MaskStats& stats,
                            double alpha, double lr) {
  MetricsRow r;
  r.step = step;
  r.train_loss = train_loss;
  ForwardOptions sparse_opt;
  if (masks) {
    sparse_opt.sparse = true;
    sparse_opt.masks = masks;
  }
  if (scaling && !scaling->empty()) sparse_opt.scaling = scaling;
  r.val_ce = eval_loss(pc, val, sparse_opt);
  r.val_ppl = perplexity(r.val_ce);
  ForwardOptions dense_opt;  // dense-forward probe (scaling still applies)
  if (scaling && !scaling->empty()) dense_opt.scaling = scaling;
  r.dense_ppl = perplexity(eval_loss(pc, val, dense_opt));
  r.r_t = stats.flip_rate;
  r.i_t = stats.init_flip_rate;
  r.s_t = stats.sparse_weight_ratio;
  r.avg_unmasked_mag = stats.avg_unmasked_magnitude;
  r.avg_mag_at_flip = stats.avg_magnitude_at_flip;
  r.prog_at_last_flip = stats.avg_progress_at_last_flip;
  r.alpha = alpha;
  r.lr = lr;
  metrics.rows.push_back(r);
}

inline std::vector<std::pair<std::size_t, std::size_t>> sparsifiable_shapes(
    const ParameterCollection& pc) {
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (const auto& p : pc.params)
    if (p.sparsifiable) shapes.push_back({p.value.rows(), p.value.cols()});
  return shapes;
}

}  // namespace trainer_detail

/// Plain-Adam dense pretraining; deterministic given the seed.
inline TrainOutput pretrain_dense(const TrainPlan& plan, const TrainData& data) {
  plan.validate();
  Rng init_rng(plan.model.seed);
  ParameterCollection pc = init_params(plan.model, init_rng);
  std::vector<MomentState> moments;
  for (const auto& p : pc.params) moments.push_back(MomentState::zeros_like(p.value));
  Rng rng(plan.seed);
  std::vector<Batch> val = make_validation_set(plan, data);
  TrainOutput out;
  MaskStats no_stats;
  no_stats.sparse_weight_ratio = 1.0;
  trainer_detail::record_eval_row(out.metrics, plan, pc, val, nullptr, nullptr,
                                  0, 0.0, no_stats, 0.0,
                                  lr_at(plan.lr, 0, plan.steps));
  for (std::uint64_t t = 1; t <= plan.steps; ++t) {
    Batch b = next_train_batch(plan, data, rng);
    Tape tape;
    ForwardOptions opt;
    ForwardResult fr = forward_model(tape, pc, b, opt);
    Var loss = pc.spec.family == ModelFamily::TinyTransformer
                   ? tape.ce_with_logits(fr.output, b.targets)
                   : tape.mse_to(fr.output, b.targets_real);
    double loss_v = tape.val(loss)[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("pretrain_dense diverged at step " +
                               std::to_string(t));
    tape.backward(loss);
    double lr = lr_at(plan.lr, t - 1, plan.steps);
    for (std::size_t i = 0; i < pc.params.size(); ++i)
      adam_step(pc.params[i].value, tape.grad(fr.param_vars[i]), moments[i],
                0.9, 0.999, 1e-8, lr);
    if (t % plan.eval_every == 0 || t == plan.steps)
      trainer_detail::record_eval_row(out.metrics, plan, pc, val, nullptr,
                                      nullptr, t, loss_v, no_stats, 0.0, lr);
  }
  out.checkpoint.params = std::move(pc);
  out.checkpoint.step = plan.steps;
  out.checkpoint.moments = std::move(moments);
  out.checkpoint.rng_state = rng.state();
  return out;
}

/// CAST: scaled dense forward, distillation loss, AdamS with per-entry mask
/// bits, masks refreshed from raw weights every T1, final prune + fold.
inline TrainOutput cast_train(const TrainPlan& plan, const Checkpoint& dense,
                              const TrainData& data) {
  plan.validate();
  ParameterCollection teacher = dense.params;
  ParameterCollection pc = dense.params;
  auto sp_idx = pc.sparsifiable_indices();

  std::vector<Mask> masks;
  for (auto i : sp_idx)
    masks.push_back(compute_nm_mask(pc.params[i].value, plan.nm));
  FlipLedger ledger = FlipLedger::start(masks);
  ScalingFactors scaling = init_scaling(trainer_detail::sparsifiable_shapes(pc),
                                        plan.scaling_groups, plan.nm.m_group);

  AdamSConfig cfg;
  cfg.lambda = plan.lambda < 0.0 ? auto_lambda(pc, plan, data) : plan.lambda;
  cfg.total_steps = plan.steps;
  cfg.mask_refresh = plan.mask_refresh;

  std::vector<MomentState> moments;
  for (const auto& p : pc.params) moments.push_back(MomentState::zeros_like(p.value));
  std::vector<MomentState> sc_moments;
  for (const auto& a : scaling.factors) sc_moments.push_back(MomentState::zeros_like(a));

  Rng rng(plan.seed);
  std::vector<Batch> val = make_validation_set(plan, data);
  TrainOutput out;
  out.resolved_lambda = cfg.lambda;
  MaskStats stats;
  stats.sparse_weight_ratio =
      sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks, &scaling,
                                  0, 0.0, stats, 0.0,
                                  lr_at(plan.lr, 0, plan.steps));

  for (std::uint64_t t = 1; t <= plan.steps; ++t) {
    if (t % plan.mask_refresh == 0) {
      std::vector<Mask> cur;
      for (auto i : sp_idx)
        cur.push_back(compute_nm_mask(pc.params[i].value, plan.nm));
      stats = record_flips(ledger, cur, pc.sparsifiable_weights(), t, plan.steps);
      masks = std::move(cur);
    }
    Batch b = next_train_batch(plan, data, rng);

    Tensor teacher_out;
    if (plan.kd) {
      Tape ttape;
      ForwardOptions topt;
      topt.record_params = false;
      teacher_out = ttape.val(forward_model(ttape, teacher, b, topt).output);
    }

    Tape tape;
    ForwardOptions opt;
    opt.scaling = &scaling;  // scaled dense forward
    ForwardResult fr = forward_model(tape, pc, b, opt);
    Var loss;
    if (pc.spec.family == ModelFamily::TinyTransformer) {
      Var ce = tape.ce_with_logits(fr.output, b.targets);
      loss = plan.kd
                 ? combined_loss(tape, tape.kl_to_teacher(fr.output, teacher_out),
                                 ce, plan.eta)
                 : ce;
    } else {
      Var fit = tape.mse_to(fr.output, b.targets_real);
      loss = plan.kd
                 ? combined_loss(tape, tape.mse_to(fr.output, teacher_out), fit,
                                 plan.eta)
                 : fit;
    }
    double loss_v = tape.val(loss)[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("cast_train diverged at step " + std::to_string(t));
    tape.backward(loss);
    double lr = lr_at(plan.lr, t - 1, plan.steps);
    std::size_t sk = 0;
    for (std::size_t i = 0; i < pc.params.size(); ++i) {
      const Mask* m = nullptr;
      if (pc.params[i].sparsifiable) m = &masks[sk++];
      adams_step(pc.params[i].value, tape.grad(fr.param_vars[i]), m, moments[i],
                 cfg, t, lr);
    }
    // scaling factors: plain Adam, model learning rate, no decay, never masked
    for (std::size_t k = 0; k < scaling.factors.size(); ++k)
      adam_step(scaling.factors[k], tape.grad(fr.scaling_vars[k]),
                sc_moments[k], 0.9, 0.999, 1e-8, lr);
    if (t % plan.eval_every == 0 || t == plan.steps)
      trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks,
                                      &scaling, t, loss_v, stats,
                                      alpha_at(t, plan.steps), lr);
  }

  out.final_sparse_ratio = sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  out.flip_mag_event_avg = ledger.event_avg_flip_magnitude();
  out.flip_mag_refresh_avg = ledger.refresh_avg_flip_magnitude();
  out.flip_event_count = ledger.flip_events;

  Checkpoint pre;
  pre.params = pc;
  pre.step = plan.steps;
  pre.masks = masks;
  pre.scaling = scaling;
  pre.rng_state = rng.state();

  ForwardOptions dense_opt;
  dense_opt.scaling = &scaling;
  out.preprune_val_ce = eval_loss(pc, val, dense_opt);

  if (out.final_sparse_ratio < 0.999) {
    out.export_refused = true;
    out.refusal_reason = "S_T = " + std::to_string(out.final_sparse_ratio) +
                         " < 0.999 (lambda too small); export refused";
    out.checkpoint = std::move(pre);  // unexported state, for diagnostics
    return out;
  }

  out.checkpoint = final_prune_and_fold(std::move(pre), plan.nm);
  ForwardOptions pruned_opt;
  pruned_opt.sparse = true;
  pruned_opt.masks = &out.checkpoint.masks;
  out.postprune_val_ce = eval_loss(out.checkpoint.params, val, pruned_opt);
  return out;
}

/// SR-STE: sparse forward, STE-proxied gradients applied to the dense
/// weights by plain SGD, L2 decay on masked entries.
inline TrainOutput srste_train(const TrainPlan& plan, const Checkpoint& dense,
                               const TrainData& data) {
  plan.validate();
  ParameterCollection teacher = dense.params;
  ParameterCollection pc = dense.params;
  auto sp_idx = pc.sparsifiable_indices();
  std::vector<Mask> masks;
  for (auto i : sp_idx)
    masks.push_back(compute_nm_mask(pc.params[i].value, plan.nm));
  FlipLedger ledger = FlipLedger::start(masks);

  Rng rng(plan.seed);
  std::vector<Batch> val = make_validation_set(plan, data);
  TrainOutput out;
  MaskStats stats;
  stats.sparse_weight_ratio =
      sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks, nullptr,
                                  0, 0.0, stats, 0.0, plan.srste_lr);

  for (std::uint64_t t = 1; t <= plan.steps; ++t) {
    if (t % plan.mask_refresh == 0) {
      std::vector<Mask> cur;
      for (auto i : sp_idx)
        cur.push_back(compute_nm_mask(pc.params[i].value, plan.nm));
      stats = record_flips(ledger, cur, pc.sparsifiable_weights(), t, plan.steps);
      masks = std::move(cur);
    }
    Batch b = next_train_batch(plan, data, rng);
    Tensor teacher_out;
    if (plan.kd) {
      Tape ttape;
      ForwardOptions topt;
      topt.record_params = false;
      teacher_out = ttape.val(forward_model(ttape, teacher, b, topt).output);
    }
    Tape tape;
    ForwardOptions opt;
    opt.sparse = true;  // forward on W (x) M; recorded grads are STE proxies
    opt.masks = &masks;
    ForwardResult fr = forward_model(tape, pc, b, opt);
    Var loss;
    if (pc.spec.family == ModelFamily::TinyTransformer) {
      Var ce = tape.ce_with_logits(fr.output, b.targets);
      loss = plan.kd
                 ? combined_loss(tape, tape.kl_to_teacher(fr.output, teacher_out),
                                 ce, plan.eta)
                 : ce;
    } else {
      Var fit = tape.mse_to(fr.output, b.targets_real);
      loss = plan.kd
                 ? combined_loss(tape, tape.mse_to(fr.output, teacher_out), fit,
                                 plan.eta)
                 : fit;
    }
    double loss_v = tape.val(loss)[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("srste_train diverged at step " + std::to_string(t));
    tape.backward(loss);
    std::size_t sk = 0;
    for (std::size_t i = 0; i < pc.params.size(); ++i) {
      const Tensor& g = tape.grad(fr.param_vars[i]);
      if (pc.params[i].sparsifiable) {
        srste_step(pc.params[i].value, g, &masks[sk++], plan.srste_lambda,
                   plan.srste_lr);
      } else {
        for (std::size_t j = 0; j < g.size(); ++j)
          pc.params[i].value[j] -= plan.srste_lr * g[j];
      }
    }
    if (t % plan.eval_every == 0 || t == plan.steps)
      trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks,
                                      nullptr, t, loss_v, stats, 0.0,
                                      plan.srste_lr);
  }

  out.final_sparse_ratio = sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  out.flip_mag_event_avg = ledger.event_avg_flip_magnitude();
  out.flip_mag_refresh_avg = ledger.refresh_avg_flip_magnitude();
  out.flip_event_count = ledger.flip_events;
  Checkpoint pre;
  pre.params = pc;
  pre.step = plan.steps;
  pre.masks = masks;
  pre.rng_state = rng.state();
  ForwardOptions dense_opt;
  out.preprune_val_ce = eval_loss(pc, val, dense_opt);
  out.checkpoint = final_prune_and_fold(std::move(pre), plan.nm);
  ForwardOptions pruned_opt;
  pruned_opt.sparse = true;
  pruned_opt.masks = &out.checkpoint.masks;
  out.postprune_val_ce = eval_loss(out.checkpoint.params, val, pruned_opt);
  return out;
}

/// Naive retraining: one-shot magnitude masks, frozen; sparse forward;
/// masked gradients zeroed post-backward; plain Adam on survivors.
inline TrainOutput naive_retrain(const TrainPlan& plan, const Checkpoint& dense,
                                 const TrainData& data) {
  plan.validate();
  ParameterCollection teacher = dense.params;
  ParameterCollection pc = dense.params;
  auto sp_idx = pc.sparsifiable_indices();
  std::vector<Mask> masks =
      one_shot_magnitude_prune(pc.sparsifiable_weights(), plan.nm);
  FlipLedger ledger = FlipLedger::start(masks);

  std::vector<MomentState> moments;
  for (const auto& p : pc.params) moments.push_back(MomentState::zeros_like(p.value));
  Rng rng(plan.seed);
  std::vector<Batch> val = make_validation_set(plan, data);
  TrainOutput out;
  MaskStats stats;
  stats.sparse_weight_ratio =
      sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks, nullptr,
                                  0, 0.0, stats, 0.0,
                                  lr_at(plan.lr, 0, plan.steps));

  for (std::uint64_t t = 1; t <= plan.steps; ++t) {
    if (t % plan.mask_refresh == 0)  // frozen masks: r_t stays 0
      stats = record_flips(ledger, masks, pc.sparsifiable_weights(), t, plan.steps);
    Batch b = next_train_batch(plan, data, rng);
    Tensor teacher_out;
    if (plan.kd) {
      Tape ttape;
      ForwardOptions topt;
      topt.record_params = false;
      teacher_out = ttape.val(forward_model(ttape, teacher, b, topt).output);
    }
    Tape tape;
    ForwardOptions opt;
    opt.sparse = true;
    opt.masks = &masks;
    ForwardResult fr = forward_model(tape, pc, b, opt);
    Var loss;
    if (pc.spec.family == ModelFamily::TinyTransformer) {
      Var ce = tape.ce_with_logits(fr.output, b.targets);
      loss = plan.kd
                 ? combined_loss(tape, tape.kl_to_teacher(fr.output, teacher_out),
                                 ce, plan.eta)
                 : ce;
    } else {
      Var fit = tape.mse_to(fr.output, b.targets_real);
      loss = plan.kd
                 ? combined_loss(tape, tape.mse_to(fr.output, teacher_out), fit,
                                 plan.eta)
                 : fit;
    }
    double loss_v = tape.val(loss)[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("naive_retrain diverged at step " +
                               std::to_string(t));
    tape.backward(loss);
    double lr = lr_at(plan.lr, t - 1, plan.steps);
    std::size_t sk = 0;
    for (std::size_t i = 0; i < pc.params.size(); ++i) {
      Tensor g = tape.grad(fr.param_vars[i]);
      if (pc.params[i].sparsifiable) {
        const Mask& m = masks[sk++];
        for (std::size_t j = 0; j < g.size(); ++j)
          if (!m.bits[j]) g[j] = 0.0;  // frozen masked weights, bit-exactly
      }
      adam_step(pc.params[i].value, g, moments[i], 0.9, 0.999, 1e-8, lr);
    }
    if (t % plan.eval_every == 0 || t == plan.steps)
      trainer_detail::record_eval_row(out.metrics, plan, pc, val, &masks,
                                      nullptr, t, loss_v, stats, 0.0, lr);
  }

  out.final_sparse_ratio = sparse_weight_ratio(pc.sparsifiable_weights(), masks);
  out.flip_mag_event_avg = ledger.event_avg_flip_magnitude();
  out.flip_mag_refresh_avg = ledger.refresh_avg_flip_magnitude();
  out.flip_event_count = ledger.flip_events;
  Checkpoint pre;
  pre.params = pc;
  pre.step = plan.steps;
  pre.masks = masks;
  pre.rng_state = rng.state();
  ForwardOptions dense_opt;
  out.preprune_val_ce = eval_loss(pc, val, dense_opt);
  out.checkpoint = final_prune_and_fold(std::move(pre), plan.nm);
  ForwardOptions pruned_opt;
  pruned_opt.sparse = true;
  pruned_opt.masks = &out.checkpoint.masks;
  out.postprune_val_ce = eval_loss(out.checkpoint.params, val, pruned_opt);
  return out;
}

inline TrainOutput run_sparsify(const TrainPlan& plan, const Checkpoint& dense,
                                const TrainData& data) {
  switch (plan.method) {
    case Method::Cast: return cast_train(plan, dense, data);
    case Method::Srste: return srste_train(plan, dense, data);
    case Method::Naive: return naive_retrain(plan, dense, data);
    default:
      throw std::invalid_argument("run_sparsify: method must be cast/srste/naive");
  }
}

/// STE gradient-error probe: per masked entry, Delta = |g(theta) -
/// g(theta_hat) - lambda*theta| on one batch, plus the least-squares slope
/// of Delta against |theta| and their Pearson correlation.
struct SteErrorProbe {
  std::vector<std::pair<double, double>> points;  // (|theta|, Delta)
  double slope = 0.0;
  double intercept = 0.0;
  double pearson = 0.0;
};

inline SteErrorProbe ste_error_probe(const ParameterCollection& pc,
                                     const std::vector<Mask>& masks,
                                     const Batch& batch, double lambda) {
  auto run = [&](bool sparse) {
    Tape tape;
    ForwardOptions opt;
    opt.sparse = sparse;
    if (sparse) opt.masks = &masks;
    ForwardResult fr = forward_model(tape, pc, batch, opt);
    Var loss = pc.spec.family == ModelFamily::TinyTransformer
                   ? tape.ce_with_logits(fr.output, batch.targets)
                   : tape.mse_to(fr.output, batch.targets_real);
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < pc.params.size(); ++i)
      if (pc.params[i].sparsifiable)
        grads.push_back(tape.grad(fr.param_vars[i]));
    return grads;
  };
  std::vector<Tensor> g_dense = run(false);
  std::vector<Tensor> g_sparse = run(true);

  SteErrorProbe probe;
  std::size_t sk = 0;
  for (std::size_t i = 0; i < pc.params.size(); ++i) {
    if (!pc.params[i].sparsifiable) continue;
    const Tensor& w = pc.params[i].value;
    const Mask& m = masks[sk];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (m.bits[j]) continue;
      double delta =
          std::abs(g_dense[sk][j] - g_sparse[sk][j] - lambda * w[j]);
      probe.points.push_back({std::abs(w[j]), delta});
    }
    ++sk;
  }
  double n = double(probe.points.size());
  if (n >= 2) {
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (auto [x, y] : probe.points) {
      sx += x;
      sy += y;
      sxx += x * x;
      syy += y * y;
      sxy += x * y;
    }
    double vx = n * sxx - sx * sx;
    double vy = n * syy - sy * sy;
    probe.slope = vx != 0.0 ? (n * sxy - sx * sy) / vx : 0.0;
    probe.intercept = (sy - probe.slope * sx) / n;
    probe.pearson =
        (vx > 0 && vy > 0) ? (n * sxy - sx * sy) / std::sqrt(vx * vy) : 0.0;
  }
  return probe;
}

}  // namespace castlab
