#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "castlab/nn.hpp"
#include "castlab/optim.hpp"
#include "castlab/scaling.hpp"
#include "castlab/sparsity.hpp"

namespace castlab {

struct CheckpointFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Versioned binary checkpoint: header (magic, version, spec digest), then
/// named sections. All floats are little-endian 64-bit. Round-trip is
/// bit-exact.
struct Checkpoint {
  ParameterCollection params;
  std::uint64_t step = 0;
  std::vector<Mask> masks;            // aligned with sparsifiable order
  ScalingFactors scaling;             // empty if folded / not used
  std::vector<MomentState> moments;   // aligned with params; may be empty
  std::vector<MomentState> scaling_moments;
  std::string rng_state;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'C', 'S', 'T', 'L', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointFormatError("checkpoint: truncated file");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_string(std::istream& is) {
  auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw CheckpointFormatError("checkpoint: truncated string");
  return s;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  put<std::uint8_t>(os, std::uint8_t(t.shape.size()));
  for (auto d : t.shape) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           std::streamsize(t.data.size() * sizeof(double)));
}

inline Tensor get_tensor(std::istream& is) {
  auto nd = get<std::uint8_t>(is);
  std::vector<std::size_t> shape(nd);
  for (auto& d : shape) d = std::size_t(get<std::uint64_t>(is));
  Tensor t = Tensor::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data.data()),
          std::streamsize(t.data.size() * sizeof(double)));
  if (!is) throw CheckpointFormatError("checkpoint: truncated tensor");
  return t;
}

inline void put_mask(std::ostream& os, const Mask& m) {
  put<std::uint64_t>(os, m.rows);
  put<std::uint64_t>(os, m.cols);
  std::vector<std::uint8_t> packed((m.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.bits[i]) packed[i / 8] |= std::uint8_t(1u << (i % 8));
  os.write(reinterpret_cast<const char*>(packed.data()),
           std::streamsize(packed.size()));
}

inline Mask get_mask(std::istream& is) {
  auto r = std::size_t(get<std::uint64_t>(is));
  auto c = std::size_t(get<std::uint64_t>(is));
  Mask m = Mask::zeros(r, c);
  std::vector<std::uint8_t> packed((m.size() + 7) / 8);
  is.read(reinterpret_cast<char*>(packed.data()),
          std::streamsize(packed.size()));
  if (!is) throw CheckpointFormatError("checkpoint: truncated mask");
  for (std::size_t i = 0; i < m.size(); ++i)
    m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return m;
}

inline std::uint64_t spec_digest(const ModelSpec& s) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) { h = fnv1a(&v, sizeof(v), h); };
  mix(std::uint64_t(s.family));
  mix(s.vocab);
  mix(s.width);
  mix(s.heads);
  mix(s.layers);
  mix(s.ctx);
  for (auto w : s.mlp_widths) mix(w);
  return h;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(d::kMagic, 8);
  d::put<std::uint32_t>(os, d::kVersion);
  d::put<std::uint64_t>(os, d::spec_digest(c.params.spec));
  const ModelSpec& s = c.params.spec;
  d::put<std::uint8_t>(os, std::uint8_t(s.family));
  d::put<std::uint64_t>(os, s.seed);
  d::put<std::uint64_t>(os, s.vocab);
  d::put<std::uint64_t>(os, s.width);
  d::put<std::uint64_t>(os, s.heads);
  d::put<std::uint64_t>(os, s.layers);
  d::put<std::uint64_t>(os, s.ctx);
  d::put<std::uint64_t>(os, s.mlp_widths.size());
  for (auto w : s.mlp_widths) d::put<std::uint64_t>(os, w);
  d::put<std::uint64_t>(os, c.step);
  std::uint8_t flags = 0;
  if (!c.masks.empty()) flags |= 1;
  if (!c.scaling.empty()) flags |= 2;
  if (!c.moments.empty()) flags |= 4;
  d::put<std::uint8_t>(os, flags);
  d::put<std::uint64_t>(os, c.params.params.size());
  for (const auto& p : c.params.params) {
    d::put_string(os, p.name);
    d::put<std::uint8_t>(os, p.sparsifiable ? 1 : 0);
    d::put_tensor(os, p.value);
  }
  if (flags & 1) {
    d::put<std::uint64_t>(os, c.masks.size());
    for (const auto& m : c.masks) d::put_mask(os, m);
  }
  if (flags & 2) {
    d::put<std::uint64_t>(os, c.scaling.groups);
    d::put<std::uint64_t>(os, c.scaling.factors.size());
    for (const auto& a : c.scaling.factors) d::put_tensor(os, a);
  }
  if (flags & 4) {
    for (const auto& m : c.moments) {
      d::put_tensor(os, m.mu);
      d::put_tensor(os, m.v);
      d::put<std::uint64_t>(os, m.t);
    }
    d::put<std::uint64_t>(os, c.scaling_moments.size());
    for (const auto& m : c.scaling_moments) {
      d::put_tensor(os, m.mu);
      d::put_tensor(os, m.v);
      d::put<std::uint64_t>(os, m.t);
    }
  }
  d::put_string(os, c.rng_state);
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, d::kMagic, 8) != 0)
    throw CheckpointFormatError("checkpoint: bad magic");
  if (d::get<std::uint32_t>(is) != d::kVersion)
    throw CheckpointFormatError("checkpoint: unsupported version");
  auto digest = d::get<std::uint64_t>(is);
  Checkpoint c;
  ModelSpec& s = c.params.spec;
  s.family = ModelFamily(d::get<std::uint8_t>(is));
  s.seed = d::get<std::uint64_t>(is);
  s.vocab = std::size_t(d::get<std::uint64_t>(is));
  s.width = std::size_t(d::get<std::uint64_t>(is));
  s.heads = std::size_t(d::get<std::uint64_t>(is));
  s.layers = std::size_t(d::get<std::uint64_t>(is));
  s.ctx = std::size_t(d::get<std::uint64_t>(is));
  auto nw = d::get<std::uint64_t>(is);
  s.mlp_widths.resize(nw);
  for (auto& w : s.mlp_widths) w = std::size_t(d::get<std::uint64_t>(is));
  if (digest != d::spec_digest(s))
    throw CheckpointFormatError("checkpoint: spec digest mismatch");
  c.step = d::get<std::uint64_t>(is);
  auto flags = d::get<std::uint8_t>(is);
  auto np = d::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < np; ++i) {
    Param p;
    p.name = d::get_string(is);
    p.sparsifiable = d::get<std::uint8_t>(is) != 0;
    p.value = d::get_tensor(is);
    c.params.params.push_back(std::move(p));
  }
  if (flags & 1) {
    auto nm = d::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < nm; ++i) c.masks.push_back(d::get_mask(is));
  }
  if (flags & 2) {
    c.scaling.groups = std::size_t(d::get<std::uint64_t>(is));
    auto nf = d::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < nf; ++i)
      c.scaling.factors.push_back(d::get_tensor(is));
  }
  if (flags & 4) {
    for (std::uint64_t i = 0; i < np; ++i) {
      MomentState m;
      m.mu = d::get_tensor(is);
      m.v = d::get_tensor(is);
      m.t = d::get<std::uint64_t>(is);
      c.moments.push_back(std::move(m));
    }
    auto ns = d::get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < ns; ++i) {
      MomentState m;
      m.mu = d::get_tensor(is);
      m.v = d::get_tensor(is);
      m.t = d::get<std::uint64_t>(is);
      c.scaling_moments.push_back(std::move(m));
    }
  }
  c.rng_state = d::get_string(is);
  return c;
}

/// Digest of a file's bytes; used for determinism checks.
inline std::uint64_t file_digest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string content((std::istreambuf_iterator<char>(is)),
                      std::istreambuf_iterator<char>());
  return ckpt_detail::fnv1a(content.data(), content.size());
}

}  // namespace castlab
