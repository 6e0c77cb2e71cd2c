#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace castlab {

/// One observation: tokens D (unit 10^9 tokens), loss L in nats
/// (natural log of perplexity).
struct LawPoint {
  double tokens_billions = 0.0;
  double loss_nats = 0.0;
};

/// Fitted L(D) = A + B / D^beta with fixed beta.
struct LawFit {
  double A = 0.0;
  double B = 0.0;
  double beta = 0.2849;
  double r_squared = 0.0;
  std::size_t points = 0;
};

/// Ordinary least squares of L on x = D^(-beta); slope = B, intercept = A.
inline LawFit fit_token_law(const std::vector<LawPoint>& pts, double beta) {
  if (pts.size() < 2)
    throw std::invalid_argument("fit_token_law: need >= 2 points");
  if (!(beta > 0.0)) throw std::invalid_argument("fit_token_law: beta <= 0");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!(pts[i].tokens_billions > 0.0))
      throw std::invalid_argument("fit_token_law: D <= 0");
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      if (pts[i].tokens_billions == pts[j].tokens_billions)
        throw std::invalid_argument("fit_token_law: duplicate D values");
  }
  double n = double(pts.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : pts) {
    double x = std::pow(p.tokens_billions, -beta);
    sx += x;
    sy += p.loss_nats;
    sxx += x * x;
    sxy += x * p.loss_nats;
  }
  double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw std::invalid_argument("fit_token_law: degenerate x");
  LawFit f;
  f.beta = beta;
  f.B = (n * sxy - sx * sy) / denom;
  f.A = (sy - f.B * sx) / n;
  double ss_res = 0, ss_tot = 0, ybar = sy / n;
  for (const auto& p : pts) {
    double x = std::pow(p.tokens_billions, -beta);
    double e = p.loss_nats - (f.A + f.B * x);
    ss_res += e * e;
    ss_tot += (p.loss_nats - ybar) * (p.loss_nats - ybar);
  }
  f.r_squared = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
  f.points = pts.size();
  return f;
}

inline double predict_loss(const LawFit& f, double tokens_billions) {
  if (!(tokens_billions > 0.0))
    throw std::invalid_argument("predict_loss: D <= 0");
  return f.A + f.B * std::pow(tokens_billions, -f.beta);
}

inline double predict_perplexity(const LawFit& f, double tokens_billions) {
  return std::exp(predict_loss(f, tokens_billions));
}

/// Inverse of predict_loss in perplexity space. Targets at or below the
/// asymptote e^A are signaled as unreachable, never returned as NaN.
struct TokensToMatch {
  bool reachable = false;
  double tokens_billions = 0.0;
};

inline TokensToMatch tokens_to_match(const LawFit& f, double target_perplexity) {
  if (!(target_perplexity > 0.0))
    throw std::invalid_argument("tokens_to_match: target <= 0");
  double ln_t = std::log(target_perplexity);
  if (ln_t <= f.A || f.B <= 0.0) return TokensToMatch{false, 0.0};
  double d = std::pow(f.B / (ln_t - f.A), 1.0 / f.beta);
  return TokensToMatch{true, d};
}

struct LooResult {
  LawPoint held_out;
  double predicted_perplexity = 0.0;
  double actual_perplexity = 0.0;
  double abs_error = 0.0;
};

/// Leave-one-out validation. By default only the largest-D point is held out.
inline std::vector<LooResult> leave_one_out(const std::vector<LawPoint>& pts,
                                            double beta,
                                            bool all_points = false) {
  if (pts.size() < 3)
    throw std::invalid_argument("leave_one_out: need >= 3 points");
  std::vector<std::size_t> holds;
  if (all_points) {
    for (std::size_t i = 0; i < pts.size(); ++i) holds.push_back(i);
  } else {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if (pts[i].tokens_billions > pts[best].tokens_billions) best = i;
    holds.push_back(best);
  }
  std::vector<LooResult> out;
  for (std::size_t h : holds) {
    std::vector<LawPoint> rest;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (i != h) rest.push_back(pts[i]);
    LawFit f = fit_token_law(rest, beta);
    LooResult r;
    r.held_out = pts[h];
    r.predicted_perplexity = predict_perplexity(f, pts[h].tokens_billions);
    r.actual_perplexity = std::exp(pts[h].loss_nats);
    r.abs_error = std::abs(r.predicted_perplexity - r.actual_perplexity);
    out.push_back(r);
  }
  return out;
}

}  // namespace castlab
