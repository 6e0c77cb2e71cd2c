#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "castlab/nn.hpp"
#include "castlab/rng.hpp"
#include "castlab/tensor.hpp"

namespace castlab {

/// Fixed 64-symbol alphabet; byte value <-> vocab id mapping for corpora.
inline const std::string& corpus_alphabet() {
  static const std::string a =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";
  return a;
}

/// Deterministic synthetic text: an order-2 Markov chain over the vocab.
/// Each symbol owns a small successor set (order-1 structure keeps the
/// conditional entropy strictly below ln V), and which successors are
/// favoured depends on the previous symbol as well, so a model has to use
/// more than one token of context to reach the stream's entropy floor.
inline std::string generate_corpus(std::uint64_t seed, std::size_t bytes,
                                   std::size_t vocab = 64) {
  const std::string& alpha = corpus_alphabet();
  if (vocab > alpha.size())
    throw std::invalid_argument("generate_corpus: vocab too large");
  Rng rng(seed);
  // per symbol: 8 candidate successors
  constexpr std::size_t kSucc = 8;
  std::vector<std::array<std::size_t, kSucc>> succ(vocab);
  for (std::size_t i = 0; i < vocab; ++i)
    for (std::size_t j = 0; j < kSucc; ++j) succ[i][j] = rng.index(vocab);
  // per (prev, cur) context: a deterministic pick of heavy candidates
  auto context_hash = [seed, vocab](std::size_t prev, std::size_t cur) {
    std::uint64_t z = seed * 0x9e3779b97f4a7c15ull + prev * vocab + cur;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::string out;
  out.reserve(bytes);
  std::size_t prev = rng.index(vocab), cur = rng.index(vocab);
  for (std::size_t i = 0; i < bytes; ++i) {
    out.push_back(alpha[cur]);
    std::uint64_t h = context_hash(prev, cur);
    double u = rng.uniform();
    std::size_t next;
    if (u < 0.75) {
      // heavy mass on 3 context-dependent candidates from cur's set
      double w = u / 0.75;
      std::size_t pick = w < 0.47 ? 0 : (w < 0.80 ? 1 : 2);
      next = succ[cur][(h >> (8 * pick)) % kSucc];
    } else if (u < 0.95) {
      next = succ[cur][rng.index(kSucc)];  // the rest of cur's set
    } else {
      next = rng.index(vocab);  // uniform floor keeps support full
    }
    prev = cur;
    cur = next;
  }
  return out;
}

inline void write_vocab_map(const std::string& path, std::size_t vocab = 64) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  const std::string& alpha = corpus_alphabet();
  for (std::size_t i = 0; i < vocab; ++i)
    os << i << "\t" << int((unsigned char)alpha[i]) << "\n";
}

/// Raw bytes mapped to vocab ids; bytes outside the alphabet are skipped.
inline std::vector<std::size_t> tokenize(const std::string& text,
                                         std::size_t vocab = 64) {
  const std::string& alpha = corpus_alphabet();
  std::vector<int> lut(256, -1);
  for (std::size_t i = 0; i < vocab && i < alpha.size(); ++i)
    lut[(unsigned char)alpha[i]] = int(i);
  std::vector<std::size_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text)
    if (lut[c] >= 0) ids.push_back(std::size_t(lut[c]));
  return ids;
}

inline std::vector<std::size_t> load_corpus(const std::string& path,
                                            std::size_t vocab = 64) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read corpus " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return tokenize(text, vocab);
}

/// Train/validation split over one token stream: the tail fraction is
/// held out for evaluation.
struct TokenStream {
  std::vector<std::size_t> ids;
  std::size_t train_end = 0;  // ids[0..train_end) train, rest validation

  static TokenStream split(std::vector<std::size_t> ids, double val_frac = 0.1) {
    TokenStream s;
    s.ids = std::move(ids);
    s.train_end = std::size_t(double(s.ids.size()) * (1.0 - val_frac));
    return s;
  }
};

inline Batch sample_lm_batch(const TokenStream& ts, std::size_t batch,
                             std::size_t ctx, Rng& rng) {
  if (ts.train_end < ctx + 2)
    throw std::invalid_argument("sample_lm_batch: corpus shorter than context");
  Batch b;
  b.batch = batch;
  b.ctx = ctx;
  b.tokens.resize(batch * ctx);
  b.targets.resize(batch * ctx);
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t start = rng.index(ts.train_end - ctx - 1);
    for (std::size_t j = 0; j < ctx; ++j) {
      b.tokens[i * ctx + j] = ts.ids[start + j];
      b.targets[i * ctx + j] = ts.ids[start + j + 1];
    }
  }
  return b;
}

/// Deterministic validation batches: consecutive windows over the held-out
/// tail.
inline std::vector<Batch> validation_batches(const TokenStream& ts,
                                             std::size_t batch, std::size_t ctx,
                                             std::size_t max_batches) {
  std::vector<Batch> out;
  std::size_t pos = ts.train_end;
  while (out.size() < max_batches) {
    Batch b;
    b.batch = 0;
    b.ctx = ctx;
    for (std::size_t i = 0; i < batch && pos + ctx + 1 < ts.ids.size(); ++i) {
      for (std::size_t j = 0; j < ctx; ++j) {
        b.tokens.push_back(ts.ids[pos + j]);
        b.targets.push_back(ts.ids[pos + j + 1]);
      }
      ++b.batch;
      pos += ctx;
    }
    if (b.batch == 0) break;
    out.push_back(std::move(b));
  }
  if (out.empty())
    throw std::runtime_error("validation_batches: held-out tail too short");
  return out;
}

/// Synthetic linear-regression task for the MLP family: y = x A*.
struct MlpTask {
  Tensor target_matrix;  // in x out

  static MlpTask make(std::size_t in, std::size_t out, std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::zeros({in, out});
    for (double& v : a.data) v = rng.normal();
    return MlpTask{std::move(a)};
  }

  Batch sample(std::size_t batch, Rng& rng) const {
    std::size_t in = target_matrix.rows();
    Batch b;
    b.features = Tensor::zeros({batch, in});
    for (double& v : b.features.data) v = rng.normal();
    b.targets_real = Tape::matmul_raw(b.features, target_matrix);
    return b;
  }
};

}  // namespace castlab
