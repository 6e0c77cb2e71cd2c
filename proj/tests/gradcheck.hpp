#pragma once

// Shared finite-difference gradient harness for the unit tests and the
// acceptance suite.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "castlab/autograd.hpp"
#include "castlab/rng.hpp"

namespace gradcheck {

using castlab::Tape;
using castlab::Tensor;
using castlab::Var;

// Builds the same scalar graph from fresh inputs; must be pure.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct Result {
  bool ok = true;
  double worst_rel = 0.0;
  std::string where;
};

inline bool close(double got, double want, double rtol, double atol) {
  return std::abs(got - want) <= atol + rtol * std::abs(want);
}

/// Reverse-mode vs central finite differences, rtol 1e-4 / atol 1e-8.
inline Result check(const Builder& build, const std::vector<Tensor>& params,
                    double h = 1e-5, double rtol = 1e-4, double atol = 1e-8) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.input(p));
  Var loss = build(tape, vars);
  tape.backward(loss);

  auto f = [&](const std::vector<Tensor>& ps) {
    Tape t2;
    std::vector<Var> vs;
    vs.reserve(ps.size());
    for (const auto& p : ps) vs.push_back(t2.input(p));
    return t2.val(build(t2, vs))[0];
  };
  std::vector<Tensor> fd = castlab::finite_diff_grad(f, params, h);

  Result res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor& g = tape.grad(vars[p]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!close(g[i], fd[p][i], rtol, atol)) {
        res.ok = false;
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "param %zu entry %zu: tape %.12g vs fd %.12g", p, i,
                      g[i], fd[p][i]);
        res.where = buf;
        return res;
      }
      double denom = std::abs(fd[p][i]) + atol;
      res.worst_rel = std::max(res.worst_rel, std::abs(g[i] - fd[p][i]) / denom);
    }
  }
  return res;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, castlab::Rng& rng,
                            double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace gradcheck
