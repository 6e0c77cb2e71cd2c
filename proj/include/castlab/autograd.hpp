#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "castlab/tensor.hpp"

namespace castlab {

/// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Recorded program of primitive applications. Construction order is
/// topological; backward replays adjoints in reverse, each node exactly once.
/// A tape supports a single backward() per recording.
class Tape {
 public:
  Var input(Tensor v, bool requires_grad = true) {
    check_finite(v, "Tape::input");
    return push(std::move(v), requires_grad, nullptr);
  }

  Var constant(Tensor v) { return input(std::move(v), false); }

  const Tensor& val(Var v) const { return nodes_[check(v)].value; }

  /// Gradient of the loss w.r.t. this node; valid after backward().
  const Tensor& grad(Var v) const {
    if (!backward_done_) throw std::logic_error("Tape::grad before backward");
    return nodes_[check(v)].grad;
  }

  // ---- primitives ----

  Var add(Var a, Var b) {
    check_same_shape(val(a), val(b), "add");
    Tensor y = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return push(std::move(y), true, [a, b](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      t.accum(a, g, 1.0);
      t.accum(b, g, 1.0);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor y = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return push(std::move(y), true, [a, b](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      t.accum(a, g, 1.0);
      t.accum(b, g, -1.0);
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor y = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return push(std::move(y), true, [a, b](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& av = t.val(a);
      const Tensor& bv2 = t.val(b);
      if (t.wants_grad(a)) {
        Tensor da = g;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] *= bv2[i];
        t.accum(a, da, 1.0);
      }
      if (t.wants_grad(b)) {
        Tensor db = g;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] *= av[i];
        t.accum(b, db, 1.0);
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor y = val(a);
    for (double& v : y.data) v *= c;
    return push(std::move(y), true, [a, c](Tape& t, int self) {
      t.accum(a, t.nodes_[self].grad, c);
    });
  }

  /// Broadcast a length-C vector over the rows of an R x C matrix.
  Var add_rowvec(Var a, Var v) {
    const Tensor& av = val(a);
    const Tensor& vv = val(v);
    if (av.ndim() != 2 || vv.size() != av.cols())
      throw std::invalid_argument("add_rowvec: length mismatch");
    Tensor y = av;
    std::size_t R = av.rows(), C = av.cols();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) y.at(r, c) += vv[c];
    return push(std::move(y), true, [a, v, R, C](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      t.accum(a, g, 1.0);
      if (t.wants_grad(v)) {
        Tensor dv = Tensor::zeros({C});
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) dv[c] += g.at(r, c);
        t.accum(v, dv, 1.0);
      }
    });
  }

  Var matmul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
      throw std::invalid_argument("matmul: shape mismatch");
    Tensor y = matmul_raw(av, bv);
    return push(std::move(y), true, [a, b](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      if (t.wants_grad(a))
        t.accum(a, matmul_raw(g, transpose_raw(t.val(b))), 1.0);
      if (t.wants_grad(b))
        t.accum(b, matmul_raw(transpose_raw(t.val(a)), g), 1.0);
    });
  }

  Var transpose(Var a) {
    Tensor y = transpose_raw(val(a));
    return push(std::move(y), true, [a](Tape& t, int self) {
      t.accum(a, transpose_raw(t.nodes_[self].grad), 1.0);
    });
  }

  Var reshape(Var a, std::vector<std::size_t> s) {
    const Tensor& av = val(a);
    if (Tensor::numel(s) != av.size())
      throw std::invalid_argument("reshape: element count mismatch");
    Tensor y(std::move(s), av.data);
    auto orig = av.shape;
    return push(std::move(y), true, [a, orig](Tape& t, int self) {
      Tensor g(orig, t.nodes_[self].grad.data);
      t.accum(a, g, 1.0);
    });
  }

  /// Embedding lookup: y[i, :] = table[ids[i], :].
  Var gather_rows(Var table, std::vector<std::size_t> ids) {
    const Tensor& tv = val(table);
    if (tv.ndim() != 2) throw std::invalid_argument("gather_rows: 2-D table");
    std::size_t C = tv.cols(), N = ids.size();
    for (auto id : ids)
      if (id >= tv.rows()) throw std::out_of_range("gather_rows: id");
    Tensor y = Tensor::zeros({N, C});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) y.at(i, c) = tv.at(ids[i], c);
    auto shape = tv.shape;
    return push(std::move(y), true,
                [table, ids = std::move(ids), shape](Tape& t, int self) {
                  if (!t.wants_grad(table)) return;
                  const Tensor& g = t.nodes_[self].grad;
                  Tensor dt = Tensor::zeros(shape);
                  std::size_t C = shape[1];
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t c = 0; c < C; ++c)
                      dt.at(ids[i], c) += g.at(i, c);
                  t.accum(table, dt, 1.0);
                });
  }

  /// Row-wise softmax with per-row max subtraction.
  Var softmax_rows(Var a) {
    Tensor y = softmax_rows_raw(val(a));
    return push(std::move(y), true, [a](Tape& t, int self) {
      const Tensor& y2 = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      std::size_t R = y2.rows(), C = y2.cols();
      Tensor da = Tensor::zeros(y2.shape);
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += g.at(r, c) * y2.at(r, c);
        for (std::size_t c = 0; c < C; ++c)
          da.at(r, c) = y2.at(r, c) * (g.at(r, c) - dot);
      }
      t.accum(a, da, 1.0);
    });
  }

  /// Normalize each row over the last dim (variance floor 1e-5), then affine.
  Var layer_norm(Var x, Var gain, Var bias) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(gain);
    const Tensor& bv = val(bias);
    std::size_t C = xv.ndim() == 2 ? xv.cols() : xv.size();
    std::size_t R = xv.ndim() == 2 ? xv.rows() : 1;
    if (gv.size() != C || bv.size() != C)
      throw std::invalid_argument("layer_norm: gain/bias length mismatch");
    Tensor y = Tensor::zeros(xv.shape);
    Tensor xh = Tensor::zeros(xv.shape);   // normalized pre-affine
    Tensor inv_sigma = Tensor::zeros({R});  // 1/sqrt(var+eps) per row
    for (std::size_t r = 0; r < R; ++r) {
      double m = 0.0;
      for (std::size_t c = 0; c < C; ++c) m += xv[r * C + c];
      m /= double(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        double d = xv[r * C + c] - m;
        var += d * d;
      }
      var /= double(C);
      double is = 1.0 / std::sqrt(var + kLayerNormEps);
      inv_sigma[r] = is;
      for (std::size_t c = 0; c < C; ++c) {
        double h = (xv[r * C + c] - m) * is;
        xh[r * C + c] = h;
        y[r * C + c] = gv[c] * h + bv[c];
      }
    }
    return push(
        std::move(y), true,
        [x, gain, bias, xh = std::move(xh), inv_sigma = std::move(inv_sigma), R,
         C](Tape& t, int self) {
          const Tensor& g = t.nodes_[self].grad;
          const Tensor& gv2 = t.val(gain);
          if (t.wants_grad(x)) {
            Tensor dx = Tensor::zeros(t.val(x).shape);
            for (std::size_t r = 0; r < R; ++r) {
              double mean_dh = 0.0, mean_dh_xh = 0.0;
              for (std::size_t c = 0; c < C; ++c) {
                double dh = g[r * C + c] * gv2[c];
                mean_dh += dh;
                mean_dh_xh += dh * xh[r * C + c];
              }
              mean_dh /= double(C);
              mean_dh_xh /= double(C);
              for (std::size_t c = 0; c < C; ++c) {
                double dh = g[r * C + c] * gv2[c];
                dx[r * C + c] =
                    inv_sigma[r] *
                    (dh - mean_dh - xh[r * C + c] * mean_dh_xh);
              }
            }
            t.accum(x, dx, 1.0);
          }
          if (t.wants_grad(gain)) {
            Tensor dg = Tensor::zeros({C});
            for (std::size_t r = 0; r < R; ++r)
              for (std::size_t c = 0; c < C; ++c)
                dg[c] += g[r * C + c] * xh[r * C + c];
            t.accum(gain, dg, 1.0);
          }
          if (t.wants_grad(bias)) {
            Tensor db = Tensor::zeros({C});
            for (std::size_t r = 0; r < R; ++r)
              for (std::size_t c = 0; c < C; ++c) db[c] += g[r * C + c];
            t.accum(bias, db, 1.0);
          }
        });
  }

  /// GELU, tanh approximation.
  Var gelu(Var a) {
    const Tensor& av = val(a);
    Tensor y = av;
    for (double& v : y.data) v = gelu_scalar(v);
    return push(std::move(y), true, [a](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& av2 = t.val(a);
      Tensor da = g;
      for (std::size_t i = 0; i < da.size(); ++i)
        da[i] *= gelu_deriv_scalar(av2[i]);
      t.accum(a, da, 1.0);
    });
  }

  Var log_op(Var a) {
    Tensor y = val(a);
    for (double& v : y.data) v = std::log(v);
    check_finite(y, "log");
    return push(std::move(y), true, [a](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& av = t.val(a);
      Tensor da = g;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] /= av[i];
      t.accum(a, da, 1.0);
    });
  }

  Var exp_op(Var a) {
    Tensor y = val(a);
    for (double& v : y.data) v = std::exp(v);
    check_finite(y, "exp");
    return push(std::move(y), true, [a](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& yv = t.nodes_[self].value;
      Tensor da = g;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= yv[i];
      t.accum(a, da, 1.0);
    });
  }

  Var sum(Var a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double v : av.data) s += v;  // fixed left-to-right order
    return push(Tensor::scalar(s), true, [a](Tape& t, int self) {
      double g = t.nodes_[self].grad[0];
      Tensor da = Tensor::zeros(t.val(a).shape);
      for (double& v : da.data) v = g;
      t.accum(a, da, 1.0);
    });
  }

  Var mean(Var a) {
    std::size_t n = val(a).size();
    return scale(sum(a), 1.0 / double(n));
  }

  /// Mean squared error against a constant target.
  Var mse_to(Var pred, const Tensor& target) {
    const Tensor& pv = val(pred);
    check_same_shape(pv, target, "mse_to");
    double s = 0.0;
    std::size_t n = pv.size();
    for (std::size_t i = 0; i < n; ++i) {
      double d = pv[i] - target[i];
      s += d * d;
    }
    return push(Tensor::scalar(s / double(n)), true,
                [pred, target, n](Tape& t, int self) {
                  double g = t.nodes_[self].grad[0];
                  const Tensor& pv2 = t.val(pred);
                  Tensor dp = Tensor::zeros(pv2.shape);
                  for (std::size_t i = 0; i < n; ++i)
                    dp[i] = g * 2.0 * (pv2[i] - target[i]) / double(n);
                  t.accum(pred, dp, 1.0);
                });
  }

  /// Mean token-level negative log-likelihood, via stable log-sum-exp.
  Var ce_with_logits(Var logits, std::vector<std::size_t> targets) {
    const Tensor& lv = val(logits);
    if (lv.ndim() != 2 || targets.size() != lv.rows())
      throw std::invalid_argument("ce_with_logits: shape mismatch");
    std::size_t R = lv.rows(), C = lv.cols();
    double s = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
      if (targets[r] >= C) throw std::out_of_range("ce_with_logits: target");
      s += logsumexp_row(lv, r) - lv.at(r, targets[r]);
    }
    Tensor y = Tensor::scalar(s / double(R));
    check_finite(y, "ce_with_logits");
    return push(std::move(y), true,
                [logits, targets = std::move(targets)](Tape& t, int self) {
                  double g = t.nodes_[self].grad[0];
                  const Tensor& lv2 = t.val(logits);
                  std::size_t R = lv2.rows(), C = lv2.cols();
                  Tensor p = softmax_rows_raw(lv2);
                  for (std::size_t r = 0; r < R; ++r)
                    p.at(r, targets[r]) -= 1.0;
                  for (double& v : p.data) v *= g / double(R);
                  t.accum(logits, p, 1.0);
                });
  }

  /// Mean-over-rows KL(teacher || student) from logits; the teacher
  /// distribution is a constant (no gradient flows to it).
  Var kl_to_teacher(Var student_logits, const Tensor& teacher_logits) {
    const Tensor& sv = val(student_logits);
    check_same_shape(sv, teacher_logits, "kl_to_teacher");
    std::size_t R = sv.rows(), C = sv.cols();
    Tensor pt = softmax_rows_raw(teacher_logits);
    double s = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
      double lse_t = logsumexp_row(teacher_logits, r);
      double lse_s = logsumexp_row(sv, r);
      for (std::size_t c = 0; c < C; ++c) {
        double ln_pt = teacher_logits.at(r, c) - lse_t;
        double ln_ps = sv.at(r, c) - lse_s;
        s += pt.at(r, c) * (ln_pt - ln_ps);
      }
    }
    Tensor y = Tensor::scalar(s / double(R));
    check_finite(y, "kl_to_teacher");
    return push(std::move(y), true,
                [student_logits, pt = std::move(pt)](Tape& t, int self) {
                  double g = t.nodes_[self].grad[0];
                  const Tensor& sv2 = t.val(student_logits);
                  Tensor ps = softmax_rows_raw(sv2);
                  for (std::size_t i = 0; i < ps.size(); ++i)
                    ps[i] = g * (ps[i] - pt[i]) / double(sv2.rows());
                  t.accum(student_logits, ps, 1.0);
                });
  }

  /// Causal multi-head attention over a batch of sequences. q, k, v are
  /// (batch*ctx) x d matrices; rows of one sequence are contiguous.
  Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t ctx,
                       std::size_t heads) {
    const Tensor& qv = val(q);
    const Tensor& kv = val(k);
    const Tensor& vv = val(v);
    check_same_shape(qv, kv, "causal_attention");
    check_same_shape(qv, vv, "causal_attention");
    std::size_t d = qv.cols();
    if (qv.rows() != batch * ctx || d % heads != 0)
      throw std::invalid_argument("causal_attention: shape mismatch");
    std::size_t dh = d / heads;
    double sc = 1.0 / std::sqrt(double(dh));
    Tensor y = Tensor::zeros(qv.shape);
    // probs[b*heads+h] is ctx x ctx (lower triangular rows softmaxed)
    std::vector<Tensor> probs(batch * heads);
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t base = b * ctx;
      for (std::size_t h = 0; h < heads; ++h) {
        std::size_t off = h * dh;
        Tensor p = Tensor::zeros({ctx, ctx});
        for (std::size_t i = 0; i < ctx; ++i) {
          double mx = -1e300;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e)
              s += qv.at(base + i, off + e) * kv.at(base + j, off + e);
            s *= sc;
            p.at(i, j) = s;
            if (s > mx) mx = s;
          }
          double den = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double e = std::exp(p.at(i, j) - mx);
            p.at(i, j) = e;
            den += e;
          }
          for (std::size_t j = 0; j <= i; ++j) p.at(i, j) /= den;
          for (std::size_t e = 0; e < dh; ++e) {
            double o = 0.0;
            for (std::size_t j = 0; j <= i; ++j)
              o += p.at(i, j) * vv.at(base + j, off + e);
            y.at(base + i, off + e) = o;
          }
        }
        probs[b * heads + h] = std::move(p);
      }
    }
    return push(
        std::move(y), true,
        [q, k, v, batch, ctx, heads, dh, sc,
         probs = std::move(probs)](Tape& t, int self) {
          const Tensor& g = t.nodes_[self].grad;
          const Tensor& qv2 = t.val(q);
          const Tensor& kv2 = t.val(k);
          const Tensor& vv2 = t.val(v);
          Tensor dq = Tensor::zeros(qv2.shape);
          Tensor dk = Tensor::zeros(qv2.shape);
          Tensor dv = Tensor::zeros(qv2.shape);
          for (std::size_t b = 0; b < batch; ++b) {
            std::size_t base = b * ctx;
            for (std::size_t h = 0; h < heads; ++h) {
              std::size_t off = h * dh;
              const Tensor& p = probs[b * heads + h];
              for (std::size_t i = 0; i < ctx; ++i) {
                // dP and softmax backward restricted to the causal prefix
                std::vector<double> dp(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                  double s = 0.0;
                  for (std::size_t e = 0; e < dh; ++e)
                    s += g.at(base + i, off + e) * vv2.at(base + j, off + e);
                  dp[j] = s;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += dp[j] * p.at(i, j);
                for (std::size_t j = 0; j <= i; ++j) {
                  double ds = p.at(i, j) * (dp[j] - dot) * sc;
                  for (std::size_t e = 0; e < dh; ++e) {
                    dq.at(base + i, off + e) += ds * kv2.at(base + j, off + e);
                    dk.at(base + j, off + e) += ds * qv2.at(base + i, off + e);
                  }
                }
                for (std::size_t j = 0; j <= i; ++j)
                  for (std::size_t e = 0; e < dh; ++e)
                    dv.at(base + j, off + e) +=
                        p.at(i, j) * g.at(base + i, off + e);
              }
            }
          }
          t.accum(q, dq, 1.0);
          t.accum(k, dk, 1.0);
          t.accum(v, dv, 1.0);
        });
  }

  /// Group-wise scaling: entry (r,c) of w multiplied by a[r, c/(C/n)].
  Var row_segment_scale(Var w, Var a) {
    const Tensor& wv = val(w);
    const Tensor& av = val(a);
    if (wv.ndim() != 2 || av.ndim() != 2 || wv.rows() != av.rows() ||
        wv.cols() % av.cols() != 0)
      throw std::invalid_argument("row_segment_scale: shape mismatch");
    std::size_t R = wv.rows(), C = wv.cols(), n = av.cols();
    std::size_t seg = C / n;
    Tensor y = wv;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) y.at(r, c) *= av.at(r, c / seg);
    return push(std::move(y), true, [w, a, R, C, n, seg](Tape& t, int self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& wv2 = t.val(w);
      const Tensor& av2 = t.val(a);
      if (t.wants_grad(w)) {
        Tensor dw = g;
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) dw.at(r, c) *= av2.at(r, c / seg);
        t.accum(w, dw, 1.0);
      }
      if (t.wants_grad(a)) {
        Tensor da = Tensor::zeros({R, n});
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c)
            da.at(r, c / seg) += g.at(r, c) * wv2.at(r, c);
        t.accum(a, da, 1.0);
      }
    });
  }

  /// Reverse pass. One backward per recording; a second call throws.
  void backward(Var loss) {
    if (backward_done_)
      throw std::logic_error("Tape::backward called twice without re-record");
    const Tensor& lv = val(loss);
    if (lv.size() != 1) throw std::invalid_argument("backward: loss not scalar");
    check_finite(lv, "loss");
    for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape);
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = int(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    backward_done_ = true;
  }

  bool backward_done() const { return backward_done_; }

  // ---- raw helpers (shared with non-recorded forward paths) ----

  static Tensor matmul_raw(const Tensor& a, const Tensor& b) {
    std::size_t R = a.rows(), K = a.cols(), C = b.cols();
    Tensor y = Tensor::zeros({R, C});
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < K; ++k) {
        double av = a.at(r, k);
        if (av == 0.0) continue;
        for (std::size_t c = 0; c < C; ++c) y.at(r, c) += av * b.at(k, c);
      }
    return y;
  }

  static Tensor transpose_raw(const Tensor& a) {
    std::size_t R = a.rows(), C = a.cols();
    Tensor y = Tensor::zeros({C, R});
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) y.at(c, r) = a.at(r, c);
    return y;
  }

  static Tensor softmax_rows_raw(const Tensor& a) {
    check_finite(a, "softmax_rows");
    std::size_t R = a.ndim() == 2 ? a.rows() : 1;
    std::size_t C = a.ndim() == 2 ? a.cols() : a.size();
    Tensor y = a;
    for (std::size_t r = 0; r < R; ++r) {
      double mx = -1e300;
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, a[r * C + c]);
      double den = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        double e = std::exp(a[r * C + c] - mx);
        y[r * C + c] = e;
        den += e;
      }
      for (std::size_t c = 0; c < C; ++c) y[r * C + c] /= den;
    }
    return y;
  }

  static double logsumexp_row(const Tensor& a, std::size_t r) {
    std::size_t C = a.cols();
    double mx = -1e300;
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, a.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(a.at(r, c) - mx);
    return mx + std::log(s);
  }

  static double gelu_scalar(double x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    double u = k * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  }

  static double gelu_deriv_scalar(double x) {
    constexpr double k = 0.7978845608028654;
    double u = k * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double du = k * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
  }

  static constexpr double kLayerNormEps = 1e-5;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;
  };

  Var push(Tensor v, bool rg, std::function<void(Tape&, int)> bw) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  int check(Var v) const {
    if (v.id < 0 || v.id >= int(nodes_.size()))
      throw std::out_of_range("invalid Var");
    return v.id;
  }

  bool wants_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  void accum(Var v, const Tensor& g, double c) {
    Node& n = nodes_[check(v)];
    if (!n.requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += c * g[i];
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Central finite differences, (f(x+h) - f(x-h)) / 2h per coordinate.
/// Independent oracle for gradient checks.
inline std::vector<Tensor> finite_diff_grad(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h <= 0");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor g = Tensor::zeros(params[p].shape);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double orig = params[p][i];
      params[p][i] = orig + h;
      double fp = f(params);
      params[p][i] = orig - h;
      double fm = f(params);
      params[p][i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_grad: non-finite evaluation");
      g[i] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace castlab
