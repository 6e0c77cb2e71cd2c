#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace castlab {

/// One eval-cadence row of the training time series.
struct MetricsRow {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  double val_ce = 0.0;
  double val_ppl = 0.0;
  double dense_ppl = 0.0;  // dense-forward probe
  double r_t = 0.0;
  double i_t = 0.0;
  double s_t = 0.0;
  double avg_unmasked_mag = 0.0;
  double avg_mag_at_flip = 0.0;
  double prog_at_last_flip = 0.0;
  double alpha = 0.0;
  double lr = 0.0;
};

struct RunMetrics {
  std::vector<MetricsRow> rows;

  static const char* csv_header() {
    return "step,train_loss,val_ce,val_ppl,dense_ppl,r_t,i_t,S_t,"
           "avg_unmasked_mag,avg_mag_at_flip,prog_at_last_flip,alpha,lr";
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write metrics " + path);
    os << csv_header() << "\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf),
                    "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                    "%.17g,%.17g,%.17g,%.17g",
                    (unsigned long long)r.step, r.train_loss, r.val_ce,
                    r.val_ppl, r.dense_ppl, r.r_t, r.i_t, r.s_t,
                    r.avg_unmasked_mag, r.avg_mag_at_flip, r.prog_at_last_flip,
                    r.alpha, r.lr);
      os << buf << "\n";
    }
  }

  static RunMetrics read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read metrics " + path);
    std::string line;
    if (!std::getline(is, line) || line != csv_header())
      throw std::runtime_error("metrics: bad header in " + path);
    RunMetrics m;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      MetricsRow r;
      std::istringstream ss(line);
      std::string f;
      auto next = [&]() {
        if (!std::getline(ss, f, ',')) throw std::runtime_error("metrics row");
        return f;
      };
      r.step = std::stoull(next());
      r.train_loss = std::stod(next());
      r.val_ce = std::stod(next());
      r.val_ppl = std::stod(next());
      r.dense_ppl = std::stod(next());
      r.r_t = std::stod(next());
      r.i_t = std::stod(next());
      r.s_t = std::stod(next());
      r.avg_unmasked_mag = std::stod(next());
      r.avg_mag_at_flip = std::stod(next());
      r.prog_at_last_flip = std::stod(next());
      r.alpha = std::stod(next());
      r.lr = std::stod(next());
      m.rows.push_back(r);
    }
    return m;
  }
};

}  // namespace castlab
