#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "castlab/config.hpp"

using namespace castlab;

namespace {

RunConfig load_text(const std::string& text) {
  std::ofstream os("cfg_test.tmp");
  os << text;
  os.close();
  RunConfig c = RunConfig::load("cfg_test.tmp");
  std::remove("cfg_test.tmp");
  return c;
}

}  // namespace

TEST_CASE("parse key=value with comments and whitespace") {
  RunConfig c = load_text(
      "# a comment\n"
      "method = cast\n"
      "steps=250   # trailing comment\n"
      "\n"
      "  lambda = 0.01\n"
      "kd=false\n");
  CHECK(c.method == "cast");
  CHECK(c.steps == 250);
  CHECK(c.lambda == 0.01);
  CHECK_FALSE(c.kd);
  CHECK(c.batch_size == 8);  // untouched defaults survive
}

TEST_CASE("unknown keys and malformed lines rejected") {
  CHECK_THROWS_AS(load_text("nonsense_key=1\n"), ConfigError);
  CHECK_THROWS_AS(load_text("just a line\n"), ConfigError);
  CHECK_THROWS_AS(load_text("steps=abc\n"), ConfigError);
  CHECK_THROWS_AS(load_text("kd=maybe\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("no_such_file.cfg"), ConfigError);
}

TEST_CASE("resolved echo round-trips") {
  RunConfig c;
  c.method = "srste";
  c.steps = 77;
  c.eta = 0.5;
  c.corpus = "x.txt";
  std::ofstream os("cfg_echo.tmp");
  os << c.resolved();
  os.close();
  RunConfig d = RunConfig::load("cfg_echo.tmp");
  std::remove("cfg_echo.tmp");
  CHECK(d.resolved() == c.resolved());
}

TEST_CASE("plan mapping") {
  RunConfig c;
  c.method = "cast";
  c.lr_schedule = "warmup_cosine";
  c.warmup_steps = 5;
  c.steps = 100;
  TrainPlan p = c.plan();
  CHECK(p.method == Method::Cast);
  CHECK(p.lr.kind == Schedule::Kind::WarmupCosine);
  CHECK(p.model.family == ModelFamily::TinyTransformer);
  CHECK(p.nm.n_keep == 2);

  c.method = "bogus";
  CHECK_THROWS_AS(c.plan(), ConfigError);
  c.method = "dense";
  c.steps = 0;
  CHECK_THROWS_AS(c.plan(), std::invalid_argument);

  RunConfig m;
  m.family = "mlp";
  m.mlp_widths = "4,8,2";
  TrainPlan mp = m.plan();
  CHECK(mp.model.mlp_widths == std::vector<std::size_t>{4, 8, 2});
  m.mlp_widths = "4";
  CHECK_THROWS_AS(m.plan(), ConfigError);
  m.family = "what";
  CHECK_THROWS_AS(m.plan(), ConfigError);
}
