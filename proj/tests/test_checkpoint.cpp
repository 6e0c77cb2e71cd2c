#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "castlab/checkpoint.hpp"
#include "castlab/data.hpp"
#include "castlab/rng.hpp"

using namespace castlab;

namespace {

Checkpoint make_checkpoint() {
  ModelSpec s;
  s.family = ModelFamily::TinyTransformer;
  s.vocab = 8;
  s.width = 8;
  s.heads = 2;
  s.layers = 1;
  s.ctx = 4;
  s.seed = 3;
  Rng rng(s.seed);
  Checkpoint c;
  c.params = init_params(s, rng);
  c.step = 123;
  NMConfig cfg;
  c.masks = one_shot_magnitude_prune(c.params.sparsifiable_weights(), cfg);
  c.scaling = init_scaling({{8, 8}, {8, 8}, {8, 8}, {8, 8}, {8, 32}, {32, 8}},
                           2, 4);
  for (auto& a : c.scaling.factors)
    for (double& v : a.data) v = rng.normal();
  for (const auto& p : c.params.params) {
    MomentState m = MomentState::zeros_like(p.value);
    for (double& v : m.mu.data) v = rng.normal();
    for (double& v : m.v.data) v = std::abs(rng.normal());
    m.t = 123;
    c.moments.push_back(std::move(m));
  }
  for (const auto& a : c.scaling.factors) {
    MomentState m = MomentState::zeros_like(a);
    m.t = 123;
    c.scaling_moments.push_back(std::move(m));
  }
  c.rng_state = rng.state();
  return c;
}

}  // namespace

TEST_CASE("round trip is bit-exact") {
  Checkpoint c = make_checkpoint();
  save_checkpoint(c, "ckpt_rt.tmp");
  Checkpoint d = load_checkpoint("ckpt_rt.tmp");

  CHECK(d.step == c.step);
  CHECK(d.rng_state == c.rng_state);
  REQUIRE(d.params.params.size() == c.params.params.size());
  for (std::size_t i = 0; i < c.params.params.size(); ++i) {
    CHECK(d.params.params[i].name == c.params.params[i].name);
    CHECK(d.params.params[i].sparsifiable == c.params.params[i].sparsifiable);
    CHECK(d.params.params[i].value.shape == c.params.params[i].value.shape);
    CHECK(d.params.params[i].value.data == c.params.params[i].value.data);
  }
  REQUIRE(d.masks.size() == c.masks.size());
  for (std::size_t i = 0; i < c.masks.size(); ++i) CHECK(d.masks[i] == c.masks[i]);
  CHECK(d.scaling.groups == c.scaling.groups);
  REQUIRE(d.scaling.factors.size() == c.scaling.factors.size());
  for (std::size_t i = 0; i < c.scaling.factors.size(); ++i)
    CHECK(d.scaling.factors[i].data == c.scaling.factors[i].data);
  REQUIRE(d.moments.size() == c.moments.size());
  for (std::size_t i = 0; i < c.moments.size(); ++i) {
    CHECK(d.moments[i].mu.data == c.moments[i].mu.data);
    CHECK(d.moments[i].v.data == c.moments[i].v.data);
    CHECK(d.moments[i].t == c.moments[i].t);
  }
  CHECK(d.scaling_moments.size() == c.scaling_moments.size());

  // save again: identical bytes
  save_checkpoint(d, "ckpt_rt2.tmp");
  CHECK(file_digest("ckpt_rt.tmp") == file_digest("ckpt_rt2.tmp"));
  std::remove("ckpt_rt.tmp");
  std::remove("ckpt_rt2.tmp");
}

TEST_CASE("optional sections can be absent") {
  Checkpoint c = make_checkpoint();
  c.masks.clear();
  c.scaling = ScalingFactors{};
  c.moments.clear();
  c.scaling_moments.clear();
  save_checkpoint(c, "ckpt_min.tmp");
  Checkpoint d = load_checkpoint("ckpt_min.tmp");
  CHECK(d.masks.empty());
  CHECK(d.scaling.empty());
  CHECK(d.moments.empty());
  std::remove("ckpt_min.tmp");
}

TEST_CASE("format errors") {
  Checkpoint c = make_checkpoint();
  save_checkpoint(c, "ckpt_fmt.tmp");

  // bad magic
  {
    std::fstream f("ckpt_fmt.tmp",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_fmt.tmp"), CheckpointFormatError);

  // bad version
  save_checkpoint(c, "ckpt_fmt.tmp");
  {
    std::fstream f("ckpt_fmt.tmp",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_fmt.tmp"), CheckpointFormatError);

  // digest mismatch (tamper with a spec field after the digest)
  save_checkpoint(c, "ckpt_fmt.tmp");
  {
    std::fstream f("ckpt_fmt.tmp",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8 + 4 + 8 + 1 + 8);  // into the vocab field
    std::uint64_t v = 999;
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_fmt.tmp"), CheckpointFormatError);

  // truncation
  save_checkpoint(c, "ckpt_fmt.tmp");
  {
    std::ifstream in("ckpt_fmt.tmp", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    std::ofstream out("ckpt_fmt.tmp", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_fmt.tmp"), CheckpointFormatError);
  std::remove("ckpt_fmt.tmp");

  CHECK_THROWS_AS(load_checkpoint("no_such_file.tmp"), std::runtime_error);
}
