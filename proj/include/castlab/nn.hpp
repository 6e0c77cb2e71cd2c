#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "castlab/autograd.hpp"
#include "castlab/rng.hpp"
#include "castlab/scaling.hpp"
#include "castlab/sparsity.hpp"
#include "castlab/tensor.hpp"

namespace castlab {

enum class ModelFamily { Mlp, TinyTransformer };

struct ModelSpec {
  ModelFamily family = ModelFamily::TinyTransformer;
  // mlp
  std::vector<std::size_t> mlp_widths;  // in, hidden..., out
  // transformer
  std::size_t vocab = 64;
  std::size_t width = 64;   // d
  std::size_t heads = 4;
  std::size_t layers = 2;   // transformer blocks
  std::size_t ctx = 64;
  std::uint64_t seed = 0;

  void validate(std::size_t m_group, std::size_t scaling_groups) const {
    std::size_t mn = m_group * scaling_groups;
    if (family == ModelFamily::TinyTransformer) {
      if (width % heads != 0)
        throw std::invalid_argument("ModelSpec: d % h != 0");
      if (width % mn != 0 || (4 * width) % mn != 0 || vocab % mn != 0)
        throw std::invalid_argument(
            "ModelSpec: widths must be multiples of M*n");
    } else {
      if (mlp_widths.size() < 2)
        throw std::invalid_argument("ModelSpec: mlp needs >= 2 widths");
      for (std::size_t i = 1; i + 1 < mlp_widths.size(); ++i)
        if (mlp_widths[i] % mn != 0)
          throw std::invalid_argument(
              "ModelSpec: mlp hidden widths must be multiples of M*n");
    }
  }
};

struct Param {
  std::string name;
  Tensor value;
  bool sparsifiable = false;
};

struct ParameterCollection {
  ModelSpec spec;
  std::vector<Param> params;

  std::vector<std::size_t> sparsifiable_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].sparsifiable) idx.push_back(i);
    return idx;
  }

  std::vector<Tensor> sparsifiable_weights() const {
    std::vector<Tensor> w;
    for (const auto& p : params)
      if (p.sparsifiable) w.push_back(p.value);
    return w;
  }

  const Param& by_name(const std::string& n) const {
    for (const auto& p : params)
      if (p.name == n) return p;
    throw std::out_of_range("no param " + n);
  }
};

inline ParameterCollection init_params(const ModelSpec& spec, Rng& rng) {
  ParameterCollection pc;
  pc.spec = spec;
  auto norm = [&](std::size_t r, std::size_t c, double sd) {
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = sd * rng.normal();
    return t;
  };
  if (spec.family == ModelFamily::TinyTransformer) {
    std::size_t V = spec.vocab, d = spec.width, s = spec.ctx;
    double sd = 0.08;
    double proj_sd = 1.0 / std::sqrt(double(d));
    pc.params.push_back({"tok_emb", norm(V, d, sd), false});
    pc.params.push_back({"pos_emb", norm(s, d, sd), false});
    for (std::size_t l = 0; l < spec.layers; ++l) {
      std::string p = "blk" + std::to_string(l) + ".";
      pc.params.push_back({p + "ln1.g", Tensor::ones({d}), false});
      pc.params.push_back({p + "ln1.b", Tensor::zeros({d}), false});
      pc.params.push_back({p + "wq", norm(d, d, proj_sd), true});
      pc.params.push_back({p + "wk", norm(d, d, proj_sd), true});
      pc.params.push_back({p + "wv", norm(d, d, proj_sd), true});
      pc.params.push_back({p + "wo", norm(d, d, proj_sd), true});
      pc.params.push_back({p + "ln2.g", Tensor::ones({d}), false});
      pc.params.push_back({p + "ln2.b", Tensor::zeros({d}), false});
      pc.params.push_back({p + "win", norm(d, 4 * d, proj_sd), true});
      pc.params.push_back(
          {p + "wout", norm(4 * d, d, 1.0 / std::sqrt(4.0 * double(d))), true});
    }
    pc.params.push_back({"lnf.g", Tensor::ones({d}), false});
    pc.params.push_back({"lnf.b", Tensor::zeros({d}), false});
    pc.params.push_back({"head", norm(d, V, proj_sd), false});
  } else {
    for (std::size_t i = 0; i + 1 < spec.mlp_widths.size(); ++i) {
      std::size_t in = spec.mlp_widths[i], out = spec.mlp_widths[i + 1];
      bool last = (i + 2 == spec.mlp_widths.size());
      std::string p = "fc" + std::to_string(i) + ".";
      // hidden layers carry the N:M pattern; the output layer is excluded
      pc.params.push_back(
          {p + "w", norm(in, out, 1.0 / std::sqrt(double(in))), !last});
      pc.params.push_back({p + "b", Tensor::zeros({out}), false});
    }
  }
  return pc;
}

/// Token-id batch with next-token targets (LM) or feature/target pairs (MLP).
struct Batch {
  // LM
  std::size_t batch = 0, ctx = 0;
  std::vector<std::size_t> tokens;   // batch*ctx
  std::vector<std::size_t> targets;  // batch*ctx
  // MLP
  Tensor features;      // B x in
  Tensor targets_real;  // B x out
};

struct ForwardOptions {
  bool sparse = false;                       // forward on W (x) M
  const std::vector<Mask>* masks = nullptr;  // aligned with sparsifiable order
  const ScalingFactors* scaling = nullptr;   // CAST scaled forward
  bool record_params = true;  // false: constants only (teacher forward)
};

struct ForwardResult {
  Var output;                    // logits (LM) or predictions (MLP)
  std::vector<Var> param_vars;   // aligned with params; grads read from here
  std::vector<Var> scaling_vars;  // aligned with sparsifiable order
};

/// Build the forward graph. In sparse mode the tape input for a sparsifiable
/// weight is W (x) M, so its recorded gradient is the STE proxy g(theta_hat).
inline ForwardResult forward_model(Tape& tape, const ParameterCollection& pc,
                                   const Batch& batch,
                                   const ForwardOptions& opt) {
  if (opt.sparse && !opt.masks)
    throw std::invalid_argument("forward_model: sparse mode requires masks");
  ForwardResult res;
  res.param_vars.resize(pc.params.size());
  std::size_t sk = 0;  // sparsifiable layer counter
  auto param_var = [&](std::size_t i) {
    const Param& p = pc.params[i];
    Tensor w = p.value;
    std::size_t my_sk = 0;
    if (p.sparsifiable) {
      my_sk = sk++;
      if (opt.sparse) w = apply_mask(w, (*opt.masks)[my_sk]);
    }
    Var v = opt.record_params ? tape.input(std::move(w)) : tape.constant(std::move(w));
    res.param_vars[i] = v;
    if (p.sparsifiable && opt.scaling) {
      if (res.scaling_vars.size() <= my_sk) res.scaling_vars.resize(my_sk + 1);
      Var a = opt.record_params
                  ? tape.input(opt.scaling->factors[my_sk])
                  : tape.constant(opt.scaling->factors[my_sk]);
      res.scaling_vars[my_sk] = a;
      v = tape.row_segment_scale(v, a);
    }
    return v;
  };
  auto by_name = [&](const std::string& n) -> std::size_t {
    for (std::size_t i = 0; i < pc.params.size(); ++i)
      if (pc.params[i].name == n) return i;
    throw std::out_of_range("forward_model: no param " + n);
  };

  if (pc.spec.family == ModelFamily::TinyTransformer) {
    std::size_t B = batch.batch, s = batch.ctx;
    if (s != pc.spec.ctx)
      throw std::invalid_argument("forward_model: batch ctx mismatch");
    std::vector<std::size_t> pos(B * s);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < s; ++i) pos[b * s + i] = i;
    Var x = tape.add(
        tape.gather_rows(param_var(by_name("tok_emb")), batch.tokens),
        tape.gather_rows(param_var(by_name("pos_emb")), pos));
    for (std::size_t l = 0; l < pc.spec.layers; ++l) {
      std::string p = "blk" + std::to_string(l) + ".";
      Var h1 = tape.layer_norm(x, param_var(by_name(p + "ln1.g")),
                               param_var(by_name(p + "ln1.b")));
      Var q = tape.matmul(h1, param_var(by_name(p + "wq")));
      Var k = tape.matmul(h1, param_var(by_name(p + "wk")));
      Var v = tape.matmul(h1, param_var(by_name(p + "wv")));
      Var att = tape.causal_attention(q, k, v, B, s, pc.spec.heads);
      x = tape.add(x, tape.matmul(att, param_var(by_name(p + "wo"))));
      Var h2 = tape.layer_norm(x, param_var(by_name(p + "ln2.g")),
                               param_var(by_name(p + "ln2.b")));
      Var m = tape.gelu(tape.matmul(h2, param_var(by_name(p + "win"))));
      x = tape.add(x, tape.matmul(m, param_var(by_name(p + "wout"))));
    }
    Var xf = tape.layer_norm(x, param_var(by_name("lnf.g")),
                             param_var(by_name("lnf.b")));
    res.output = tape.matmul(xf, param_var(by_name("head")));
  } else {
    Var x = tape.constant(batch.features);
    std::size_t nl = pc.spec.mlp_widths.size() - 1;
    for (std::size_t i = 0; i < nl; ++i) {
      std::string p = "fc" + std::to_string(i) + ".";
      x = tape.add_rowvec(tape.matmul(x, param_var(by_name(p + "w"))),
                          param_var(by_name(p + "b")));
      if (i + 1 < nl) x = tape.gelu(x);
    }
    res.output = x;
  }
  check_finite(tape.val(res.output), "forward_model output");
  return res;
}

// ---- losses ----

inline Var ce_loss(Tape& tape, Var logits, const Batch& batch) {
  return tape.ce_with_logits(logits, batch.targets);
}

inline Var kl_loss(Tape& tape, Var student_logits,
                   const Tensor& teacher_logits) {
  return tape.kl_to_teacher(student_logits, teacher_logits);
}

/// L = eta * L_kl + (1 - eta) * L_ce.
inline Var combined_loss(Tape& tape, Var kl, Var ce, double eta) {
  if (eta < 0.0 || eta > 1.0)
    throw std::invalid_argument("combined_loss: eta out of [0,1]");
  return tape.add(tape.scale(kl, eta), tape.scale(ce, 1.0 - eta));
}

inline double perplexity(double mean_ce_nats) { return std::exp(mean_ce_nats); }

}  // namespace castlab
