// castlab command-line driver: corpus generation, dense pretraining,
// sparsification runs, evaluation, probes, and scaling-law fitting.
//
// Exit codes: 0 ok, 1 runtime failure, 2 config/usage error, 3 export gate
// (S_T below threshold), 4 checkpoint/file format error.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "castlab/checkpoint.hpp"
#include "castlab/config.hpp"
#include "castlab/data.hpp"
#include "castlab/metrics.hpp"
#include "castlab/scalinglaw.hpp"
#include "castlab/svg.hpp"
#include "castlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace castlab;

namespace {

constexpr int kOk = 0, kRuntime = 1, kConfig = 2, kGate = 3, kFormat = 4;

struct GateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config file plus per-key override flags; flags win.
struct CfgOpts {
  std::string config_path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value config file");
    static const char* keys[] = {
        "method",       "family",       "vocab",       "width",
        "heads",        "layers",       "ctx",         "mlp_widths",
        "model_seed",   "seed",         "steps",       "mask_refresh",
        "eval_every",   "batch_size",   "val_batches", "eta",
        "kd",           "lambda",       "srste_lambda", "srste_lr",
        "lr",           "lr_schedule",  "warmup_steps", "n_keep",
        "m_group",      "scaling_groups", "corpus",    "dense_checkpoint",
        "out"};
    for (const char* k : keys)
      cmd->add_option(std::string("--") + k, overrides[k]);
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) c = RunConfig::load(config_path);
    for (const auto& [k, v] : overrides)
      if (!v.empty()) c.set(k, v);
    return c;
  }
};

TrainData make_train_data(const RunConfig& cfg, const ModelSpec& spec) {
  TrainData data;
  if (spec.family == ModelFamily::TinyTransformer) {
    if (cfg.corpus.empty())
      throw ConfigError("config: corpus path required for the LM task");
    data.stream = TokenStream::split(load_corpus(cfg.corpus, spec.vocab));
  } else {
    data.task = MlpTask::make(spec.mlp_widths.front(), spec.mlp_widths.back(),
                              cfg.model_seed);
  }
  return data;
}

void write_metrics_svg(const std::string& path, const RunMetrics& m,
                       const std::string& title) {
  SvgSeries val, dense;
  val.label = "val ppl";
  val.color = "#1f77b4";
  dense.label = "dense-forward ppl";
  dense.color = "#d62728";
  for (const auto& r : m.rows) {
    val.x.push_back(double(r.step));
    val.y.push_back(r.val_ppl);
    dense.x.push_back(double(r.step));
    dense.y.push_back(r.dense_ppl);
  }
  write_svg_chart(path, title, {val, dense});
}

void write_run_dir(const RunConfig& cfg, const TrainOutput& out,
                   const std::string& ckpt_name, const TrainPlan& plan) {
  fs::create_directories(cfg.out + "/checkpoints");
  {
    std::ofstream os(cfg.out + "/config");
    os << cfg.resolved();
  }
  out.metrics.write_csv(cfg.out + "/metrics.csv");
  write_metrics_svg(cfg.out + "/curves.svg", out.metrics,
                    std::string(method_name(plan.method)) + " run");
  if (!out.export_refused)
    save_checkpoint(out.checkpoint, cfg.out + "/checkpoints/" + ckpt_name);

  std::ofstream rep(cfg.out + "/report.txt");
  rep.precision(10);
  rep << "method: " << method_name(plan.method) << "\n";
  rep << "steps: " << plan.steps << "\n";
  rep << "flop weight per step: " << flop_weight(plan.kd)
      << " (distillation adds ~1/3; matched budgets credit non-distilled runs "
         "with 4/3 the steps)\n";
  if (plan.method == Method::Cast)
    rep << "lambda: " << out.resolved_lambda << "\n";
  if (plan.method == Method::Srste)
    rep << "srste_lambda: " << plan.srste_lambda << "\n";
  if (!out.metrics.rows.empty()) {
    const auto& last = out.metrics.rows.back();
    rep << "final val ce: " << last.val_ce << "\n";
    rep << "final val ppl: " << last.val_ppl << "\n";
    rep << "final dense-forward ppl: " << last.dense_ppl << "\n";
  }
  if (plan.method != Method::Dense) {
    rep << "sparse weight ratio S_T: " << out.final_sparse_ratio << "\n";
    rep << "val ce before hard prune: " << out.preprune_val_ce << "\n";
    if (!out.export_refused) {
      rep << "val ce after hard prune: " << out.postprune_val_ce << "\n";
      double denom = std::abs(out.preprune_val_ce);
      rep << "relative prune delta: "
          << (denom > 0 ? std::abs(out.postprune_val_ce - out.preprune_val_ce) /
                              denom
                        : 0.0)
          << "\n";
    } else {
      rep << "export refused: " << out.refusal_reason << "\n";
    }
  }
}

std::vector<LawPoint> load_law_points(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("fit-law: cannot read " + path);
  std::vector<LawPoint> pts;
  std::string line;
  bool header_seen = false;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "tokens_billions,perplexity")
        throw ConfigError("fit-law: expected header "
                          "'tokens_billions,perplexity' in " + path);
      header_seen = true;
      continue;
    }
    auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ConfigError("fit-law: malformed row at line " +
                        std::to_string(lineno));
    try {
      double d = std::stod(line.substr(0, comma));
      double ppl = std::stod(line.substr(comma + 1));
      if (!(ppl > 0.0)) throw std::invalid_argument("ppl");
      pts.push_back({d, std::log(ppl)});
    } catch (const std::exception&) {
      throw ConfigError("fit-law: malformed row at line " +
                        std::to_string(lineno));
    }
  }
  if (!header_seen) throw ConfigError("fit-law: empty file " + path);
  return pts;
}

int cmd_gen_corpus(std::uint64_t seed, std::size_t bytes,
                   const std::string& out) {
  if (bytes <= 64)
    throw ConfigError("gen-corpus: bytes must exceed the context length (64)");
  std::string text = generate_corpus(seed, bytes);
  std::ofstream os(out, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + out);
  os << text;
  os.close();
  write_vocab_map(out + ".vocab");
  std::printf("wrote %zu bytes to %s (vocab map: %s.vocab)\n", bytes,
              out.c_str(), out.c_str());
  return kOk;
}

int cmd_pretrain(const CfgOpts& opts) {
  RunConfig cfg = opts.resolve();
  cfg.method = "dense";
  TrainPlan plan = cfg.plan();
  TrainData data = make_train_data(cfg, plan.model);
  TrainOutput out = pretrain_dense(plan, data);
  write_run_dir(cfg, out, "dense.ckpt", plan);
  std::printf("pretrain done: %s (final val ppl %.4f)\n", cfg.out.c_str(),
              out.metrics.rows.back().val_ppl);
  return kOk;
}

int cmd_sparsify(const CfgOpts& opts) {
  RunConfig cfg = opts.resolve();
  TrainPlan plan = cfg.plan();
  if (plan.method == Method::Dense)
    throw ConfigError("sparsify: method must be cast, srste, or naive");
  if (cfg.dense_checkpoint.empty())
    throw ConfigError("sparsify: dense_checkpoint path required");
  Checkpoint dense = load_checkpoint(cfg.dense_checkpoint);
  TrainData data = make_train_data(cfg, plan.model);
  TrainOutput out = run_sparsify(plan, dense, data);
  write_run_dir(cfg, out, "sparse.ckpt", plan);
  if (out.export_refused) throw GateError(out.refusal_reason);
  std::printf("sparsify (%s) done: %s (S_T %.6f, final val ppl %.4f)\n",
              method_name(plan.method), cfg.out.c_str(),
              out.final_sparse_ratio, out.metrics.rows.back().val_ppl);
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& forward,
             const std::string& corpus, std::size_t batch_size,
             std::size_t val_batch_count, std::uint64_t seed,
             const std::string& csv_out) {
  if (forward != "dense" && forward != "sparse")
    throw ConfigError("eval: --forward must be dense or sparse");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelSpec& spec = ckpt.params.spec;
  std::vector<Batch> val;
  if (spec.family == ModelFamily::TinyTransformer) {
    if (corpus.empty()) throw ConfigError("eval: corpus path required");
    TokenStream ts = TokenStream::split(load_corpus(corpus, spec.vocab));
    val = validation_batches(ts, batch_size, spec.ctx, val_batch_count);
  } else {
    MlpTask task = MlpTask::make(spec.mlp_widths.front(),
                                 spec.mlp_widths.back(), spec.seed);
    Rng rng(seed ^ 0x5EEDull);
    for (std::size_t i = 0; i < val_batch_count; ++i)
      val.push_back(task.sample(batch_size, rng));
  }
  ForwardOptions opt;
  if (forward == "sparse") {
    if (ckpt.masks.empty())
      throw ConfigError("eval: sparse forward requested on an unmasked "
                        "(dense) checkpoint");
    opt.sparse = true;
    opt.masks = &ckpt.masks;
  }
  if (!ckpt.scaling.empty()) opt.scaling = &ckpt.scaling;
  double ce = eval_loss(ckpt.params, val, opt);
  double ppl = perplexity(ce);
  std::printf("%.4f\n", ppl);
  if (!csv_out.empty()) {
    bool fresh = !fs::exists(csv_out);
    std::ofstream os(csv_out, std::ios::app);
    if (fresh) os << "checkpoint,forward,val_ce,val_ppl\n";
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g", ckpt_path.c_str(),
                  forward.c_str(), ce, ppl);
    os << buf << "\n";
  }
  return kOk;
}

int cmd_fit_law(const std::string& csv, double beta, bool loo,
                double target_ppl) {
  std::vector<LawPoint> pts = load_law_points(csv);
  LawFit fit;
  try {
    fit = fit_token_law(pts, beta);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("fit-law: ") + e.what());
  }
  std::printf("points=%zu\n", fit.points);
  std::printf("A=%.6f\n", fit.A);
  std::printf("B=%.6f\n", fit.B);
  std::printf("beta=%.4f\n", fit.beta);
  std::printf("R2=%.6f\n", fit.r_squared);
  if (loo) {
    auto res = leave_one_out(pts, beta);
    std::printf("loo: held_out_tokens_b,actual_ppl,predicted_ppl,abs_error\n");
    for (const auto& r : res)
      std::printf("loo: %.6g,%.4f,%.4f,%.4f\n", r.held_out.tokens_billions,
                  r.actual_perplexity, r.predicted_perplexity, r.abs_error);
  }
  if (target_ppl > 0.0) {
    TokensToMatch t = tokens_to_match(fit, target_ppl);
    if (t.reachable)
      std::printf("tokens_to_match(%.4f) = %.1f billion tokens "
                  "(inverse estimate; treat with +/-25%% tolerance)\n",
                  target_ppl, t.tokens_billions);
    else
      std::printf("tokens_to_match(%.4f): unreachable (target at or below "
                  "the fitted asymptote e^A = %.4f)\n",
                  target_ppl, std::exp(fit.A));
  }
  return kOk;
}

int cmd_probe(const std::string& type, const std::string& ckpt_path,
              const std::string& corpus, const std::string& run_dir,
              double lambda, std::uint64_t seed, const std::string& out_prefix) {
  if (type == "ste-error") {
    if (ckpt_path.empty())
      throw ConfigError("probe: --checkpoint required for ste-error");
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ModelSpec& spec = ckpt.params.spec;
    Rng rng(seed);
    Batch b;
    if (spec.family == ModelFamily::TinyTransformer) {
      if (corpus.empty()) throw ConfigError("probe: corpus path required");
      TokenStream ts = TokenStream::split(load_corpus(corpus, spec.vocab));
      b = sample_lm_batch(ts, 8, spec.ctx, rng);
    } else {
      MlpTask task = MlpTask::make(spec.mlp_widths.front(),
                                   spec.mlp_widths.back(), spec.seed);
      b = task.sample(8, rng);
    }
    std::vector<Mask> masks =
        one_shot_magnitude_prune(ckpt.params.sparsifiable_weights(), NMConfig{});
    SteErrorProbe probe = ste_error_probe(ckpt.params, masks, b, lambda);
    {
      std::ofstream os(out_prefix + ".csv");
      os << "abs_theta,delta\n";
      char buf[128];
      for (auto [x, y] : probe.points) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g", x, y);
        os << buf << "\n";
      }
    }
    SvgSeries s;
    s.label = "|grad error| vs |theta|";
    auto pts = probe.points;
    std::sort(pts.begin(), pts.end());
    for (auto [x, y] : pts) {
      s.x.push_back(x);
      s.y.push_back(y);
    }
    write_svg_chart(out_prefix + ".svg", "STE gradient error", {s});
    std::printf("points=%zu\nslope=%.6g\nintercept=%.6g\npearson=%.4f\n",
                probe.points.size(), probe.slope, probe.intercept,
                probe.pearson);
    return kOk;
  }
  if (type == "dense-forward") {
    if (run_dir.empty())
      throw ConfigError("probe: --run required for dense-forward");
    RunMetrics m = RunMetrics::read_csv(run_dir + "/metrics.csv");
    {
      std::ofstream os(out_prefix + ".csv");
      os << "step,dense_ppl\n";
      char buf[128];
      for (const auto& r : m.rows) {
        std::snprintf(buf, sizeof(buf), "%" PRIu64 ",%.17g", r.step,
                      r.dense_ppl);
        os << buf << "\n";
      }
    }
    SvgSeries s;
    s.label = "dense-forward ppl";
    for (const auto& r : m.rows) {
      s.x.push_back(double(r.step));
      s.y.push_back(r.dense_ppl);
    }
    write_svg_chart(out_prefix + ".svg", "dense-forward probe", {s});
    std::printf("rows=%zu\n", m.rows.size());
    return kOk;
  }
  throw ConfigError("probe: unknown type '" + type +
                    "' (valid: ste-error, dense-forward)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"castlab: desk-scale N:M sparsity-aware training laboratory"};
  app.require_subcommand(1);

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
  std::uint64_t gen_seed = 0;
  std::size_t gen_bytes = 1 << 20;
  std::string gen_out = "corpus.txt";
  gen->add_option("--seed", gen_seed);
  gen->add_option("--bytes", gen_bytes);
  gen->add_option("out", gen_out, "output path");

  // pretrain / sparsify
  auto* pre = app.add_subcommand("pretrain", "dense pretraining run");
  CfgOpts pre_opts;
  pre_opts.attach(pre);
  auto* spa = app.add_subcommand("sparsify", "sparsity-aware training run");
  CfgOpts spa_opts;
  spa_opts.attach(spa);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_forward = "dense", ev_corpus, ev_csv;
  std::size_t ev_batch = 8, ev_val_batches = 4;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--forward", ev_forward, "dense | sparse");
  ev->add_option("--corpus", ev_corpus);
  ev->add_option("--batch_size", ev_batch);
  ev->add_option("--val_batches", ev_val_batches);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--csv", ev_csv, "append a result row to this CSV");

  // fit-law
  auto* fit = app.add_subcommand("fit-law", "fit the token-only scaling law");
  std::string fit_csv;
  double fit_beta = 0.2849, fit_target = -1.0;
  bool fit_loo = false;
  fit->add_option("csv", fit_csv, "points CSV (tokens_billions,perplexity)")
      ->required();
  fit->add_option("--beta", fit_beta);
  fit->add_flag("--loo", fit_loo, "leave-one-out on the largest-D point");
  fit->add_option("--target-ppl", fit_target, "tokens needed to reach this ppl");

  // probe
  auto* pr = app.add_subcommand("probe", "diagnostic probes");
  std::string pr_type, pr_ckpt, pr_corpus, pr_run, pr_out = "probe";
  double pr_lambda = 0.0;
  std::uint64_t pr_seed = 0;
  pr->add_option("--type", pr_type, "ste-error | dense-forward")->required();
  pr->add_option("--checkpoint", pr_ckpt);
  pr->add_option("--corpus", pr_corpus);
  pr->add_option("--run", pr_run, "run directory with metrics.csv");
  pr->add_option("--lambda", pr_lambda);
  pr->add_option("--seed", pr_seed);
  pr->add_option("--out", pr_out, "output prefix for .csv/.svg");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_seed, gen_bytes, gen_out);
    if (pre->parsed()) return cmd_pretrain(pre_opts);
    if (spa->parsed()) return cmd_sparsify(spa_opts);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_forward, ev_corpus, ev_batch, ev_val_batches,
                      ev_seed, ev_csv);
    if (fit->parsed()) return cmd_fit_law(fit_csv, fit_beta, fit_loo, fit_target);
    if (pr->parsed())
      return cmd_probe(pr_type, pr_ckpt, pr_corpus, pr_run, pr_lambda, pr_seed,
                       pr_out);
  } catch (const GateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGate;
  } catch (const CheckpointFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kConfig;
}
