#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "castlab/trainer.hpp"

namespace castlab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value run configuration mirroring TrainPlan + ModelSpec plus
/// paths. Unknown keys are rejected; the fully-resolved form is echoed into
/// the run directory.
struct RunConfig {
  std::string method = "dense";
  std::string family = "transformer";
  std::size_t vocab = 64, width = 64, heads = 4, layers = 2, ctx = 64;
  std::string mlp_widths;  // comma-separated, e.g. "16,32,8"
  std::uint64_t model_seed = 0;
  std::uint64_t seed = 0;
  std::uint64_t steps = 3000, mask_refresh = 10, eval_every = 50;
  std::size_t batch_size = 8, val_batches = 4;
  double eta = 2.0 / 3.0;
  bool kd = true;
  double lambda = -1.0;
  double srste_lambda = 2e-4;
  double srste_lr = 0.05;
  double lr = 1e-3;
  std::string lr_schedule = "constant";  // constant | warmup_cosine
  std::uint64_t warmup_steps = 0;
  std::size_t n_keep = 2, m_group = 4, scaling_groups = 2;
  std::string corpus;            // path for the LM task
  std::string dense_checkpoint;  // input for sparsify
  std::string out = "run";       // run directory

  void set(const std::string& key, const std::string& value) {
    auto u64 = [&] { return std::stoull(value); };
    auto sz = [&] { return std::size_t(std::stoull(value)); };
    auto d = [&] { return std::stod(value); };
    auto b = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw ConfigError("config: bad boolean for " + key + ": " + value);
    };
    try {
      if (key == "method") method = value;
      else if (key == "family") family = value;
      else if (key == "vocab") vocab = sz();
      else if (key == "width") width = sz();
      else if (key == "heads") heads = sz();
      else if (key == "layers") layers = sz();
      else if (key == "ctx") ctx = sz();
      else if (key == "mlp_widths") mlp_widths = value;
      else if (key == "model_seed") model_seed = u64();
      else if (key == "seed") seed = u64();
      else if (key == "steps") steps = u64();
      else if (key == "mask_refresh") mask_refresh = u64();
      else if (key == "eval_every") eval_every = u64();
      else if (key == "batch_size") batch_size = sz();
      else if (key == "val_batches") val_batches = sz();
      else if (key == "eta") eta = d();
      else if (key == "kd") kd = b();
      else if (key == "lambda") lambda = d();
      else if (key == "srste_lambda") srste_lambda = d();
      else if (key == "srste_lr") srste_lr = d();
      else if (key == "lr") lr = d();
      else if (key == "lr_schedule") lr_schedule = value;
      else if (key == "warmup_steps") warmup_steps = u64();
      else if (key == "n_keep") n_keep = sz();
      else if (key == "m_group") m_group = sz();
      else if (key == "scaling_groups") scaling_groups = sz();
      else if (key == "corpus") corpus = value;
      else if (key == "dense_checkpoint") dense_checkpoint = value;
      else if (key == "out") out = value;
      else throw ConfigError("config: unknown key: " + key);
    } catch (const std::invalid_argument&) {
      throw ConfigError("config: bad value for " + key + ": " + value);
    } catch (const std::out_of_range&) {
      throw ConfigError("config: value out of range for " + key);
    }
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::size_t h = line.find('#');
      if (h != std::string::npos) line.erase(h);
      // trim
      auto l = line.find_first_not_of(" \t\r");
      if (l == std::string::npos) continue;
      auto r = line.find_last_not_of(" \t\r");
      line = line.substr(l, r - l + 1);
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(lineno) +
                          " is not key=value");
      auto trim = [](std::string s) {
        auto a = s.find_first_not_of(" \t");
        auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  ModelSpec model_spec() const {
    ModelSpec s;
    if (family == "transformer") {
      s.family = ModelFamily::TinyTransformer;
    } else if (family == "mlp") {
      s.family = ModelFamily::Mlp;
      std::istringstream ss(mlp_widths);
      std::string f;
      while (std::getline(ss, f, ','))
        s.mlp_widths.push_back(std::size_t(std::stoull(f)));
      if (s.mlp_widths.size() < 2)
        throw ConfigError("config: mlp_widths needs >= 2 entries");
    } else {
      throw ConfigError("config: family must be transformer or mlp");
    }
    s.vocab = vocab;
    s.width = width;
    s.heads = heads;
    s.layers = layers;
    s.ctx = ctx;
    s.seed = model_seed;
    return s;
  }

  TrainPlan plan() const {
    TrainPlan p;
    if (method == "dense") p.method = Method::Dense;
    else if (method == "cast") p.method = Method::Cast;
    else if (method == "srste") p.method = Method::Srste;
    else if (method == "naive") p.method = Method::Naive;
    else throw ConfigError("config: method must be dense/cast/srste/naive");
    p.model = model_spec();
    p.nm = NMConfig{n_keep, m_group};
    p.scaling_groups = scaling_groups;
    p.eta = eta;
    p.kd = kd;
    p.lambda = lambda;
    p.srste_lambda = srste_lambda;
    p.srste_lr = srste_lr;
    if (lr_schedule == "constant")
      p.lr = Schedule{Schedule::Kind::Constant, lr, 0};
    else if (lr_schedule == "warmup_cosine")
      p.lr = Schedule{Schedule::Kind::WarmupCosine, lr, warmup_steps};
    else
      throw ConfigError("config: lr_schedule must be constant or warmup_cosine");
    p.steps = steps;
    p.mask_refresh = mask_refresh;
    p.eval_every = eval_every;
    p.batch_size = batch_size;
    p.val_batches = val_batches;
    p.seed = seed;
    p.validate();
    return p;
  }

  /// Every key, fully resolved, one per line; stable order.
  std::string resolved() const {
    std::ostringstream os;
    os.precision(17);
    os << "method=" << method << "\n"
       << "family=" << family << "\n"
       << "vocab=" << vocab << "\n"
       << "width=" << width << "\n"
       << "heads=" << heads << "\n"
       << "layers=" << layers << "\n"
       << "ctx=" << ctx << "\n"
       << "mlp_widths=" << mlp_widths << "\n"
       << "model_seed=" << model_seed << "\n"
       << "seed=" << seed << "\n"
       << "steps=" << steps << "\n"
       << "mask_refresh=" << mask_refresh << "\n"
       << "eval_every=" << eval_every << "\n"
       << "batch_size=" << batch_size << "\n"
       << "val_batches=" << val_batches << "\n"
       << "eta=" << eta << "\n"
       << "kd=" << (kd ? 1 : 0) << "\n"
       << "lambda=" << lambda << "\n"
       << "srste_lambda=" << srste_lambda << "\n"
       << "srste_lr=" << srste_lr << "\n"
       << "lr=" << lr << "\n"
       << "lr_schedule=" << lr_schedule << "\n"
       << "warmup_steps=" << warmup_steps << "\n"
       << "n_keep=" << n_keep << "\n"
       << "m_group=" << m_group << "\n"
       << "scaling_groups=" << scaling_groups << "\n"
       << "corpus=" << corpus << "\n"
       << "dense_checkpoint=" << dense_checkpoint << "\n"
       << "out=" << out << "\n";
    return os.str();
  }
};

}  // namespace castlab
