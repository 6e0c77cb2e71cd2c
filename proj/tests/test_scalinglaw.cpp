#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "castlab/scalinglaw.hpp"

using namespace castlab;

namespace {

std::vector<LawPoint> from_ppl(std::vector<std::pair<double, double>> rows) {
  std::vector<LawPoint> pts;
  for (auto [d, ppl] : rows) pts.push_back({d, std::log(ppl)});
  return pts;
}

const double kBeta = 0.2849;

std::vector<LawPoint> pts_2_7b() {
  return from_ppl({{1.5, 6.02},
                   {3, 5.76},
                   {7.5, 5.58},
                   {15, 5.34},
                   {25, 5.30},
                   {30, 5.28},
                   {40, 5.21}});
}

std::vector<LawPoint> pts_2_13b() {
  return from_ppl({{1, 5.44}, {1.8, 5.23}, {3, 5.09}, {7.5, 4.91}, {15, 4.71}});
}

std::vector<LawPoint> pts_3_8b() {
  return from_ppl({{1.5, 8.15},
                   {3, 7.39},
                   {7.5, 6.85},
                   {25, 6.54},
                   {30, 6.457},
                   {40, 6.33}});
}

}  // namespace

TEST_CASE("published fits are reproduced") {
  LawFit a = fit_token_law(pts_2_7b(), kBeta);
  CHECK(std::abs(a.A - 1.561) <= 0.01);
  CHECK(std::abs(a.B - 0.258) <= 0.01);
  CHECK(a.r_squared >= 0.98);

  LawFit b = fit_token_law(pts_2_13b(), kBeta);
  CHECK(std::abs(b.A - 1.437) <= 0.01);
  CHECK(std::abs(b.B - 0.263) <= 0.01);

  LawFit c = fit_token_law(pts_3_8b(), kBeta);
  CHECK(std::abs(c.A - 1.693) <= 0.01);
  CHECK(std::abs(c.B - 0.438) <= 0.01);
  CHECK(c.r_squared >= 0.97);
}

TEST_CASE("exact recovery on synthetic power-law data") {
  LawFit truth;
  truth.A = 1.2;
  truth.B = 0.7;
  truth.beta = kBeta;
  std::vector<LawPoint> pts;
  for (double d : {1.0, 2.0, 5.0, 11.0, 31.0})
    pts.push_back({d, predict_loss(truth, d)});
  LawFit f = fit_token_law(pts, kBeta);
  CHECK(std::abs(f.A - truth.A) < 1e-12);
  CHECK(std::abs(f.B - truth.B) < 1e-12);
  CHECK(f.r_squared == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fit input validation") {
  CHECK_THROWS_AS(fit_token_law({{1, 1}}, kBeta), std::invalid_argument);
  CHECK_THROWS_AS(fit_token_law({{1, 1}, {1, 2}}, kBeta),
                  std::invalid_argument);  // duplicate D
  CHECK_THROWS_AS(fit_token_law({{1, 1}, {2, 2}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(fit_token_law({{0, 1}, {2, 2}}, kBeta),
                  std::invalid_argument);  // D <= 0
  CHECK_THROWS_AS(predict_loss(LawFit{}, -1.0), std::invalid_argument);
}

TEST_CASE("leave-one-out reproduces the extrapolation check") {
  auto r7 = leave_one_out(pts_2_7b(), kBeta);
  REQUIRE(r7.size() == 1);
  CHECK(r7[0].held_out.tokens_billions == 40.0);
  CHECK(std::abs(r7[0].predicted_perplexity - 5.23) <= 0.02);
  CHECK(r7[0].actual_perplexity == doctest::Approx(5.21).epsilon(1e-12));
  CHECK(r7[0].abs_error < 0.03);  // "prediction error ... below 0.03"

  auto r8 = leave_one_out(pts_3_8b(), kBeta);
  CHECK(std::abs(r8[0].predicted_perplexity - 6.34) <= 0.02);

  auto all = leave_one_out(pts_2_7b(), kBeta, true);
  CHECK(all.size() == 7);

  CHECK_THROWS_AS(leave_one_out({{1, 1}, {2, 2}}, kBeta), std::invalid_argument);
}

TEST_CASE("tokens_to_match") {
  LawFit f = fit_token_law(pts_2_7b(), kBeta);

  // forward/inverse consistency
  double d = 12.0;
  double ppl = predict_perplexity(f, d);
  TokensToMatch t = tokens_to_match(f, ppl);
  REQUIRE(t.reachable);
  CHECK(t.tokens_billions == doctest::Approx(d).epsilon(1e-9));

  // published headline: dense LLaMA2-7B ppl 5.12 needs ~95.3B tokens (+/- 25%)
  TokensToMatch h = tokens_to_match(f, 5.12);
  REQUIRE(h.reachable);
  CHECK(h.tokens_billions > 95.3 * 0.75);
  CHECK(h.tokens_billions < 95.3 * 1.25);

  // unreachable at/below the asymptote
  CHECK_FALSE(tokens_to_match(f, std::exp(f.A)).reachable);
  CHECK_FALSE(tokens_to_match(f, 1.0).reachable);
  CHECK_THROWS_AS(tokens_to_match(f, 0.0), std::invalid_argument);
}
