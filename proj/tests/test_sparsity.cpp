#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "castlab/rng.hpp"
#include "castlab/sparsity.hpp"

using namespace castlab;

namespace {

// Independent oracle: for each group, sort (|w|, index) with larger magnitude
// first and lower index breaking ties; the first N indices must be kept.
bool full_sort_oracle(const Tensor& w, const Mask& m, const NMConfig& cfg) {
  std::size_t M = cfg.m_group;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t g = 0; g < w.cols() / M; ++g) {
      std::vector<std::pair<double, std::size_t>> v;
      for (std::size_t j = 0; j < M; ++j)
        v.push_back({std::abs(w.at(r, g * M + j)), j});
      std::sort(v.begin(), v.end(), [](auto& a, auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (std::size_t i = 0; i < M; ++i) {
        bool want = i < cfg.n_keep;
        if (m.at(r, g * M + v[i].second) != (want ? 1 : 0)) return false;
      }
    }
  return true;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, bool ties) {
  Tensor w = Tensor::zeros({r, c});
  if (ties) {
    // adversarial: magnitudes from a tiny discrete set, many exact duplicates
    static const double vals[] = {0.0, 0.5, -0.5, 1.0, -1.0};
    for (double& v : w.data) v = vals[rng.index(5)];
  } else {
    for (double& v : w.data) v = rng.normal();
  }
  return w;
}

}  // namespace

TEST_CASE("compute_nm_mask worked examples") {
  NMConfig cfg;  // 2:4
  Tensor w = Tensor::matrix(1, 4, {0.3, -0.1, 0.4, 0.2});
  Mask m = compute_nm_mask(w, cfg);
  CHECK(m.bits == std::vector<std::uint8_t>{1, 0, 1, 0});

  // 1:2 flip when magnitudes cross
  NMConfig half{1, 2};
  Mask a = compute_nm_mask(Tensor::matrix(1, 2, {1.01, 1.00}), half);
  CHECK(a.bits == std::vector<std::uint8_t>{1, 0});
  Mask b = compute_nm_mask(Tensor::matrix(1, 2, {1.00, 1.01}), half);
  CHECK(b.bits == std::vector<std::uint8_t>{0, 1});

  // all-tied group: lowest indices win, exactly-N preserved
  Mask t = compute_nm_mask(Tensor::matrix(1, 4, {0.5, 0.5, 0.5, 0.5}), cfg);
  CHECK(t.bits == std::vector<std::uint8_t>{1, 1, 0, 0});

  CHECK_THROWS_AS(compute_nm_mask(Tensor::zeros({2, 6}), cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS((NMConfig{4, 4}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((NMConfig{0, 4}.validate()), std::invalid_argument);
}

TEST_CASE("validate_mask") {
  NMConfig cfg;
  Mask ok = Mask::zeros(1, 4);
  ok.bits = {1, 0, 1, 0};
  CHECK(validate_mask(ok, cfg).ok);
  Mask bad = Mask::zeros(2, 4);
  bad.bits = {1, 0, 1, 0, 1, 1, 1, 0};
  auto r = validate_mask(bad, cfg);
  CHECK_FALSE(r.ok);
  CHECK(r.bad_row == 1);
  CHECK(r.bad_group == 0);
}

TEST_CASE("mask property suite: 1000+ random 8x16 matrices with ties") {
  NMConfig cfg;
  Rng rng(7);
  for (int i = 0; i < 1200; ++i) {
    bool ties = (i % 3 == 0);
    Tensor w = random_matrix(8, 16, rng, ties);
    Mask m = compute_nm_mask(w, cfg);
    CHECK(validate_mask(m, cfg).ok);
    CHECK(full_sort_oracle(w, m, cfg));
  }
}

TEST_CASE("scale invariance of masks for c > 0") {
  NMConfig cfg;
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    Tensor w = random_matrix(8, 16, rng, false);
    double c = 0.01 + 10.0 * rng.uniform();
    Tensor ws = w;
    for (double& v : ws.data) v *= c;
    CHECK(compute_nm_mask(w, cfg) == compute_nm_mask(ws, cfg));
  }
}

TEST_CASE("apply_mask") {
  Mask m = Mask::zeros(1, 4);
  m.bits = {1, 0, 1, 0};
  Tensor w = Tensor::matrix(1, 4, {1, 2, 3, 4});
  Tensor y = apply_mask(w, m);
  CHECK(y.data == std::vector<double>{1, 0, 3, 0});
  CHECK(apply_mask(w, Mask::ones(1, 4)).data == w.data);
  for (double v : apply_mask(w, Mask::zeros(1, 4)).data) CHECK(v == 0.0);
  CHECK_THROWS_AS(apply_mask(Tensor::zeros({2, 4}), m), std::invalid_argument);
}

TEST_CASE("flip rates") {
  Mask a = Mask::zeros(1, 4);
  a.bits = {1, 0, 1, 0};
  Mask b = Mask::zeros(1, 4);
  b.bits = {1, 1, 0, 0};
  Mask inv = Mask::zeros(1, 4);
  inv.bits = {0, 1, 0, 1};
  CHECK(flip_rate({a}, {a}) == 0.0);
  CHECK(flip_rate({a}, {b}) == 0.5);
  CHECK(flip_rate({a}, {inv}) == 1.0);
  CHECK(init_flip_rate({a}, {a}) == 0.0);
  CHECK_THROWS_AS(flip_rate({a}, {a, b}), std::invalid_argument);
}

TEST_CASE("sparse_weight_ratio") {
  Mask m = Mask::zeros(1, 4);
  m.bits = {1, 0, 1, 0};
  CHECK(sparse_weight_ratio({Tensor::matrix(1, 4, {1, 0, 3, 0})}, {m}) == 1.0);
  CHECK(sparse_weight_ratio({Tensor::matrix(1, 4, {1, 1, 1, 1})}, {m}) == 0.5);
  CHECK(sparse_weight_ratio({Tensor::matrix(1, 4, {2, 1, 2, 1})}, {m}) ==
        doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(sparse_weight_ratio({Tensor::zeros({1, 4})}, {m}) == 1.0);
}

TEST_CASE("record_flips ledger") {
  // single 1x4 layer; flip one bit at step 1687 of 10000 with |w| = 0.106
  Mask init = Mask::zeros(1, 4);
  init.bits = {1, 0, 1, 0};
  FlipLedger ledger = FlipLedger::start({init});

  Tensor w = Tensor::matrix(1, 4, {0.05, 0.106, 0.5, 0.0});
  Mask cur = Mask::zeros(1, 4);
  cur.bits = {0, 1, 1, 0};  // bits 0 and 1 flip
  MaskStats st = record_flips(ledger, {cur}, {w}, 1687, 10000);
  CHECK(st.flip_rate == 0.5);
  CHECK(st.init_flip_rate == 0.5);
  CHECK(st.avg_magnitude_at_flip ==
        doctest::Approx((0.05 + 0.106) / 2).epsilon(1e-12));
  CHECK(st.avg_last_flip_magnitude ==
        doctest::Approx((0.05 + 0.106) / 2).epsilon(1e-12));
  CHECK(st.avg_progress_at_last_flip == doctest::Approx(0.1687).epsilon(1e-12));
  CHECK(st.avg_unmasked_magnitude ==
        doctest::Approx((0.106 + 0.5) / 2).epsilon(1e-12));

  CHECK(ledger.flip_events == 2);
  CHECK(ledger.flip_refreshes == 1);
  CHECK(ledger.event_avg_flip_magnitude() ==
        doctest::Approx((0.05 + 0.106) / 2).epsilon(1e-12));
  CHECK(ledger.refresh_avg_flip_magnitude() ==
        doctest::Approx((0.05 + 0.106) / 2).epsilon(1e-12));

  // no flips on the next refresh: last-flip data carries over
  MaskStats st2 = record_flips(ledger, {cur}, {w}, 2000, 10000);
  CHECK(st2.flip_rate == 0.0);
  CHECK(st2.avg_magnitude_at_flip == st.avg_magnitude_at_flip);
  CHECK(st2.avg_progress_at_last_flip == st.avg_progress_at_last_flip);
  CHECK(st2.avg_last_flip_magnitude == st.avg_last_flip_magnitude);

  // entry 0 flips again at step 3000 with a new |w|: the flip-magnitude
  // stat averages only this refresh's flips, while the per-entry stats
  // average each entry's *last* flip (entry 0's earlier record replaced)
  Tensor w3 = Tensor::matrix(1, 4, {0.3, 0.106, 0.5, 0.0});
  Mask cur3 = Mask::zeros(1, 4);
  cur3.bits = {1, 1, 0, 0};  // bits 0 and 2 flip
  MaskStats st3 = record_flips(ledger, {cur3}, {w3}, 3000, 10000);
  CHECK(st3.avg_magnitude_at_flip ==
        doctest::Approx((0.3 + 0.5) / 2).epsilon(1e-12));
  CHECK(st3.avg_progress_at_last_flip ==
        doctest::Approx((0.3 + 0.1687 + 0.3) / 3).epsilon(1e-12));
  CHECK(st3.avg_last_flip_magnitude ==
        doctest::Approx((0.3 + 0.106 + 0.5) / 3).epsilon(1e-12));

  // run-level summaries: every event counted once; a no-flip refresh does
  // not contribute a term to the per-refresh mean
  CHECK(ledger.flip_events == 4);
  CHECK(ledger.flip_refreshes == 2);
  CHECK(ledger.event_avg_flip_magnitude() ==
        doctest::Approx((0.05 + 0.106 + 0.3 + 0.5) / 4).epsilon(1e-12));
  CHECK(ledger.refresh_avg_flip_magnitude() ==
        doctest::Approx(((0.05 + 0.106) / 2 + (0.3 + 0.5) / 2) / 2)
            .epsilon(1e-12));
}

TEST_CASE("one_shot_magnitude_prune is definitional") {
  Rng rng(9);
  std::vector<Tensor> ws;
  for (int k = 0; k < 3; ++k) ws.push_back(random_matrix(4, 8, rng, false));
  NMConfig cfg;
  auto masks = one_shot_magnitude_prune(ws, cfg);
  REQUIRE(masks.size() == 3);
  for (int k = 0; k < 3; ++k) {
    CHECK(masks[k] == compute_nm_mask(ws[k], cfg));
    CHECK(validate_mask(masks[k], cfg).ok);
  }
}
