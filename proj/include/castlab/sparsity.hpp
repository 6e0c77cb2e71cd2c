#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "castlab/tensor.hpp"

namespace castlab {

/// The (N, M) pattern governing all masks. Ties broken deterministically:
/// lower column index wins.
struct NMConfig {
  std::size_t n_keep = 2;
  std::size_t m_group = 4;

  void validate() const {
    if (n_keep == 0 || n_keep >= m_group)
      throw std::invalid_argument("NMConfig: need 0 < N < M");
  }
};

/// Binary matrix, same shape as its weight matrix.
struct Mask {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  static Mask zeros(std::size_t r, std::size_t c) {
    return Mask{r, c, std::vector<std::uint8_t>(r * c, 0)};
  }
  static Mask ones(std::size_t r, std::size_t c) {
    return Mask{r, c, std::vector<std::uint8_t>(r * c, 1)};
  }

  std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const {
    return bits[r * cols + c];
  }
  std::size_t size() const { return bits.size(); }
  bool operator==(const Mask& o) const {
    return rows == o.rows && cols == o.cols && bits == o.bits;
  }
};

/// Keep the N largest magnitudes in every contiguous group of M per row.
inline Mask compute_nm_mask(const Tensor& w, const NMConfig& cfg) {
  cfg.validate();
  std::size_t R = w.rows(), C = w.cols();
  if (C % cfg.m_group != 0)
    throw std::invalid_argument("compute_nm_mask: M does not divide C");
  Mask m = Mask::zeros(R, C);
  std::size_t M = cfg.m_group, N = cfg.n_keep;
  std::vector<std::size_t> idx(M);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t g = 0; g < C / M; ++g) {
      std::size_t base = g * M;
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      // strict ordering: larger |w| first, lower column index wins ties
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(w.at(r, base + a)) > std::abs(w.at(r, base + b));
      });
      for (std::size_t i = 0; i < N; ++i) m.at(r, base + idx[i]) = 1;
    }
  }
  return m;
}

struct MaskValidation {
  bool ok = true;
  std::size_t bad_row = 0, bad_group = 0;
};

/// Pass iff every group of M sums to exactly N.
inline MaskValidation validate_mask(const Mask& m, const NMConfig& cfg) {
  cfg.validate();
  if (m.cols % cfg.m_group != 0)
    return MaskValidation{false, 0, 0};
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t g = 0; g < m.cols / cfg.m_group; ++g) {
      std::size_t s = 0;
      for (std::size_t j = 0; j < cfg.m_group; ++j)
        s += m.at(r, g * cfg.m_group + j);
      if (s != cfg.n_keep) return MaskValidation{false, r, g};
    }
  return MaskValidation{};
}

/// Elementwise product; masked positions exactly 0.0.
inline Tensor apply_mask(const Tensor& w, const Mask& m) {
  if (w.ndim() != 2 || w.rows() != m.rows || w.cols() != m.cols)
    throw std::invalid_argument("apply_mask: shape mismatch");
  Tensor y = w;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!m.bits[i]) y[i] = 0.0;
  return y;
}

/// Proportion of differing bits, aggregated across all layers.
inline double flip_rate(const std::vector<Mask>& prev,
                        const std::vector<Mask>& cur) {
  if (prev.size() != cur.size())
    throw std::invalid_argument("flip_rate: layer count mismatch");
  std::size_t diff = 0, total = 0;
  for (std::size_t k = 0; k < cur.size(); ++k) {
    if (prev[k].rows != cur[k].rows || prev[k].cols != cur[k].cols)
      throw std::invalid_argument("flip_rate: shape mismatch");
    for (std::size_t i = 0; i < cur[k].size(); ++i)
      diff += std::size_t(prev[k].bits[i] != cur[k].bits[i]);
    total += cur[k].size();
  }
  return total ? double(diff) / double(total) : 0.0;
}

inline double init_flip_rate(const std::vector<Mask>& init,
                             const std::vector<Mask>& cur) {
  return flip_rate(init, cur);
}

/// Unmasked L1 mass over total L1 mass; 1 iff masking is lossless.
/// All-zero weights count as fully sparse-consistent.
inline double sparse_weight_ratio(const std::vector<Tensor>& weights,
                                  const std::vector<Mask>& masks) {
  if (weights.size() != masks.size())
    throw std::invalid_argument("sparse_weight_ratio: layer count mismatch");
  double kept = 0.0, total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const Tensor& w = weights[k];
    if (w.rows() != masks[k].rows || w.cols() != masks[k].cols)
      throw std::invalid_argument("sparse_weight_ratio: shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      double a = std::abs(w[i]);
      total += a;
      if (masks[k].bits[i]) kept += a;
    }
  }
  return total == 0.0 ? 1.0 : kept / total;
}

/// Per-entry mask-change history across all sparsifiable layers.
struct FlipLedger {
  struct Entry {
    std::uint64_t flip_count = 0;
    std::uint64_t last_flip_step = 0;
    double mag_at_last_flip = 0.0;
  };
  std::vector<std::vector<Entry>> entries;  // per layer, row-major
  std::vector<Mask> init_masks;
  std::vector<Mask> prev_masks;
  double last_flip_mag_avg = 0.0;  // carried when a refresh has no flips
  double flip_mag_sum = 0.0;       // running totals over every flip event
  std::uint64_t flip_events = 0;
  double refresh_mag_sum = 0.0;    // sum of per-refresh flip-magnitude
  std::uint64_t flip_refreshes = 0;  // averages, over refreshes with flips

  double event_avg_flip_magnitude() const {
    return flip_events ? flip_mag_sum / double(flip_events) : 0.0;
  }
  /// Run-level "average magnitude at flip": the per-refresh statistic
  /// averaged over every refresh where mask learning occurred.
  double refresh_avg_flip_magnitude() const {
    return flip_refreshes ? refresh_mag_sum / double(flip_refreshes) : 0.0;
  }

  static FlipLedger start(const std::vector<Mask>& init) {
    FlipLedger l;
    l.init_masks = init;
    l.prev_masks = init;
    l.entries.resize(init.size());
    for (std::size_t k = 0; k < init.size(); ++k)
      l.entries[k].resize(init[k].size());
    return l;
  }
};

struct MaskStats {
  double flip_rate = 0.0;
  double init_flip_rate = 0.0;
  double sparse_weight_ratio = 0.0;
  double avg_unmasked_magnitude = 0.0;
  double avg_magnitude_at_flip = 0.0;      // avg |w| over the flips of the
                                           // latest refresh that had any
  double avg_progress_at_last_flip = 0.0;  // over entries that ever flipped
  double avg_last_flip_magnitude = 0.0;    // |w| at last flip, averaged over
                                           // entries that ever flipped
};

/// Record flips at a mask refresh and emit the running statistics.
/// |w| at flip is taken from the weight value at the step the bit changed.
/// avg_magnitude_at_flip averages the flips of *this* refresh, carrying the
/// previous value forward when a refresh has none (so at t=T it reflects
/// where mask learning last occurred); the progress and last-flip-magnitude
/// statistics average each entry's last flip over all entries whose mask
/// status ever changed.
inline MaskStats record_flips(FlipLedger& ledger,
                              const std::vector<Mask>& cur,
                              const std::vector<Tensor>& weights,
                              std::uint64_t step, std::uint64_t total_steps) {
  MaskStats st;
  st.flip_rate = flip_rate(ledger.prev_masks, cur);
  st.init_flip_rate = init_flip_rate(ledger.init_masks, cur);
  st.sparse_weight_ratio = sparse_weight_ratio(weights, cur);

  double unmasked_sum = 0.0, flip_sum = 0.0;
  std::size_t unmasked_n = 0, flip_n = 0;
  for (std::size_t k = 0; k < cur.size(); ++k) {
    const Tensor& w = weights[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (cur[k].bits[i]) {
        unmasked_sum += std::abs(w[i]);
        ++unmasked_n;
      }
      if (cur[k].bits[i] != ledger.prev_masks[k].bits[i]) {
        auto& e = ledger.entries[k][i];
        ++e.flip_count;
        e.last_flip_step = step;
        e.mag_at_last_flip = std::abs(w[i]);
        flip_sum += std::abs(w[i]);
        ++flip_n;
      }
    }
  }
  st.avg_unmasked_magnitude = unmasked_n ? unmasked_sum / double(unmasked_n) : 0.0;
  ledger.flip_mag_sum += flip_sum;
  ledger.flip_events += flip_n;
  if (flip_n) {
    ledger.last_flip_mag_avg = flip_sum / double(flip_n);
    ledger.refresh_mag_sum += ledger.last_flip_mag_avg;
    ++ledger.flip_refreshes;
  }
  st.avg_magnitude_at_flip = ledger.last_flip_mag_avg;

  double prog_sum = 0.0, mag_sum = 0.0;
  std::size_t flipped_n = 0;
  for (auto& layer : ledger.entries)
    for (auto& e : layer)
      if (e.flip_count > 0) {
        prog_sum += double(e.last_flip_step) / double(total_steps);
        mag_sum += e.mag_at_last_flip;
        ++flipped_n;
      }
  st.avg_progress_at_last_flip = flipped_n ? prog_sum / double(flipped_n) : 0.0;
  st.avg_last_flip_magnitude = flipped_n ? mag_sum / double(flipped_n) : 0.0;

  ledger.prev_masks = cur;
  return st;
}

/// One-shot magnitude pruning: compute_nm_mask once per layer.
inline std::vector<Mask> one_shot_magnitude_prune(
    const std::vector<Tensor>& weights, const NMConfig& cfg) {
  std::vector<Mask> masks;
  masks.reserve(weights.size());
  for (const Tensor& w : weights) masks.push_back(compute_nm_mask(w, cfg));
  return masks;
}

}  // namespace castlab
