#pragma once

// Learning-rate distribution summaries, accuracy aggregation with normal CIs,
// and Student / Welch t-tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "mlab/embed_eval.hpp"
#include "mlab/tensor.hpp"

namespace mlab {

/// A statistic is undefined for the given samples (e.g. zero variance).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

namespace stats {

/// Sum in sorted order so the result does not depend on input order.
inline double stable_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline double mean(const std::vector<double>& v) {
  return stable_sum(v) / static_cast<double>(v.size());
}

/// Unbiased (n - 1) sample variance; 0 for a single sample. Values are
/// shifted by their minimum first, so a constant sample gives exactly 0.
inline double variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double lo = *std::min_element(v.begin(), v.end());
  std::vector<double> d;
  d.reserve(v.size());
  for (double x : v) d.push_back(x - lo);
  const double m = mean(d);
  std::vector<double> sq;
  sq.reserve(v.size());
  for (double x : d) sq.push_back((x - m) * (x - m));
  return stable_sum(std::move(sq)) / static_cast<double>(v.size() - 1);
}

/// Spread at the rounding level of the values themselves: 1 - 1.1 and
/// 4 - 4.1 differ in the last bits but describe the same shift.
inline bool effectively_constant(const std::vector<double>& v) {
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  return std::sqrt(variance(v)) <= 64.0 * std::numeric_limits<double>::epsilon() * scale;
}

/// Two-sided tail probability P(|T| >= |t|) of Student's t with `df` degrees
/// of freedom: I_{df / (df + t^2)}(df / 2, 1 / 2).
inline double student_two_sided_p(double t, double df) {
  if (!(df > 0.0) || !std::isfinite(t)) {
    throw NumericError("student_two_sided_p: invalid t or df");
  }
  const double x = df / (df + t * t);
  const double p = boost::math::ibeta(df / 2.0, 0.5, x);
  return std::clamp(p, std::numeric_limits<double>::min(), 1.0);
}

}  // namespace stats

struct LayerLRStats {
  std::string layer;
  double mean = 0.0;
  double std = 0.0;
  double fraction_negative = 0.0;
  std::size_t count = 0;
};

/// Per-layer distribution of learned inner rates. Every entry of `alpha` must
/// belong to exactly one prefix ("<prefix>." at the start of its name).
inline std::vector<LayerLRStats> lr_stats(const ParamSet& alpha,
                                          const std::vector<std::string>& prefixes) {
  std::vector<std::vector<double>> values(prefixes.size());
  for (const auto& [name, t] : alpha) {
    std::size_t matches = 0, which = 0;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      if (name.rfind(prefixes[i] + ".", 0) == 0) {
        ++matches;
        which = i;
      }
    }
    if (matches != 1) {
      throw Error("lr_stats: parameter '" + name + "' matches " +
                  std::to_string(matches) + " layer prefixes");
    }
    values[which].insert(values[which].end(), t.data().begin(), t.data().end());
  }
  std::vector<LayerLRStats> out;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& v = values[i];
    LayerLRStats s;
    s.layer = prefixes[i];
    s.count = v.size();
    if (!v.empty()) {
      s.mean = stats::mean(v);
      s.std = std::sqrt(stats::variance(v));
      s.fraction_negative =
          static_cast<double>(std::count_if(v.begin(), v.end(), [](double x) { return x < 0.0; })) /
          static_cast<double>(v.size());
    }
    out.push_back(s);
  }
  return out;
}

enum class TestKind { Paired, Welch };

struct TestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  TestKind kind = TestKind::Welch;
};

/// One-sample t-test of mean(d) == 0.
inline TestResult one_sample_t_test(const std::vector<double>& d) {
  if (d.size() < 2) throw DegenerateError("t-test: need at least 2 samples");
  if (stats::effectively_constant(d)) {
    throw DegenerateError("t-test: differences have zero variance");
  }
  const double var = stats::variance(d);
  const double n = static_cast<double>(d.size());
  TestResult r;
  r.kind = TestKind::Paired;
  r.t = stats::mean(d) / std::sqrt(var / n);
  r.df = n - 1.0;
  r.p = stats::student_two_sided_p(r.t, r.df);
  return r;
}

/// Two-sided paired Student or Welch-Satterthwaite t-test of x against y.
inline TestResult t_test(const std::vector<double>& x, const std::vector<double>& y,
                         TestKind kind) {
  if (kind == TestKind::Paired) {
    if (x.size() != y.size()) throw Error("paired t-test: samples differ in length");
    std::vector<double> d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
    return one_sample_t_test(d);
  }
  if (x.size() < 2 || y.size() < 2) {
    throw DegenerateError("welch t-test: need at least 2 samples per group");
  }
  const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
  const double vx = stats::variance(x) / nx, vy = stats::variance(y) / ny;
  if (stats::effectively_constant(x) && stats::effectively_constant(y)) {
    throw DegenerateError("welch t-test: both samples have zero variance");
  }
  TestResult r;
  r.kind = TestKind::Welch;
  r.t = (stats::mean(x) - stats::mean(y)) / std::sqrt(vx + vy);
  r.df = (vx + vy) * (vx + vy) / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
  r.p = stats::student_two_sided_p(r.t, r.df);
  return r;
}

/// Mean with a 95% normal-approximation interval.
struct Summary {
  double mean = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n = 0;
  bool degenerate = false;  // n == 1: the interval has zero width by fiat
};

inline Summary summarize(const std::vector<double>& v) {
  if (v.empty()) throw Error("summarize: empty sample");
  Summary s;
  s.n = v.size();
  s.mean = stats::mean(v);
  s.degenerate = v.size() == 1;
  const double half = s.degenerate
                          ? 0.0
                          : 1.96 * std::sqrt(stats::variance(v) / static_cast<double>(v.size()));
  s.ci_lo = s.mean - half;
  s.ci_hi = s.mean + half;
  return s;
}

struct AccuracyCell {
  std::string model;
  Phase phase = Phase::Pre;
  Summary summary;
};

struct DeltaCell {
  std::string model;
  std::string name;  // "on-pre" or "off-on"
  Summary summary;
};

struct AggregateReport {
  std::vector<AccuracyCell> cells;
  std::vector<DeltaCell> deltas;
};

namespace detail {

// (model, seed, iteration) -> accuracy per phase
using PhaseTable =
    std::map<std::tuple<std::string, std::uint64_t, std::size_t>, std::map<Phase, double>>;

inline PhaseTable by_iteration(const std::vector<EvalRecord>& records) {
  PhaseTable t;
  for (const auto& r : records) t[{r.model, r.seed, r.iteration}][r.phase] = r.accuracy;
  return t;
}

}  // namespace detail

/// Per (model, phase) mean accuracy, plus per-model deltas (on - pre) and
/// (off - on) over iterations that carry both phases.
inline AggregateReport aggregate(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw Error("aggregate: no records");
  std::map<std::pair<std::string, Phase>, std::vector<double>> cells;
  for (const auto& r : records) cells[{r.model, r.phase}].push_back(r.accuracy);

  AggregateReport report;
  for (const auto& [key, v] : cells) report.cells.push_back({key.first, key.second, summarize(v)});

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> deltas;
  for (const auto& [key, phases] : detail::by_iteration(records)) {
    auto& [on_pre, off_on] = deltas[std::get<0>(key)];
    const auto pre = phases.find(Phase::Pre), on = phases.find(Phase::On),
               off = phases.find(Phase::Off);
    if (pre != phases.end() && on != phases.end()) on_pre.push_back(on->second - pre->second);
    if (on != phases.end() && off != phases.end()) off_on.push_back(off->second - on->second);
  }
  for (const auto& [model, d] : deltas) {
    if (!d.first.empty()) report.deltas.push_back({model, "on-pre", summarize(d.first)});
    if (!d.second.empty()) report.deltas.push_back({model, "off-on", summarize(d.second)});
  }
  return report;
}

/// Per-iteration (off - on) accuracy changes of one model, in (seed, iteration) order.
inline std::vector<double> off_on_deltas(const std::vector<EvalRecord>& records) {
  std::vector<double> d;
  for (const auto& [key, phases] : detail::by_iteration(records)) {
    const auto on = phases.find(Phase::On), off = phases.find(Phase::Off);
    if (on != phases.end() && off != phases.end()) d.push_back(off->second - on->second);
  }
  return d;
}

struct ModelComparison {
  TestResult welch;           // deltas of the first model vs the second
  TestResult paired_first;    // off vs on within the first model
  TestResult paired_second;
  Summary delta_first;
  Summary delta_second;
};

/// Welch test between the two models' per-iteration (off - on) deltas, with
/// each model's paired off-vs-on test alongside.
inline ModelComparison compare_models(const std::vector<EvalRecord>& first,
                                      const std::vector<EvalRecord>& second) {
  const auto da = off_on_deltas(first), db = off_on_deltas(second);
  if (da.empty() || db.empty()) {
    throw Error("compare_models: need matched on/off records for both models");
  }
  ModelComparison c;
  c.delta_first = summarize(da);
  c.delta_second = summarize(db);
  c.welch = t_test(da, db, TestKind::Welch);
  c.paired_first = one_sample_t_test(da);
  c.paired_second = one_sample_t_test(db);
  return c;
}

// ---------------------------------------------------------------------------
// CSV and text rendering
// ---------------------------------------------------------------------------

inline constexpr const char* kRecordsHeader = "iteration,phase,accuracy,model,seed";

inline std::string fmt_double(double v, int precision = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

inline std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // "-0.000" reads as a sign claim the data does not make
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

inline void write_records_csv(std::ostream& os, const std::vector<EvalRecord>& records) {
  os << kRecordsHeader << '\n';
  for (const auto& r : records) {
    os << r.iteration << ',' << phase_name(r.phase) << ',' << fmt_double(r.accuracy)
       << ',' << r.model << ',' << r.seed << '\n';
  }
}

inline std::vector<EvalRecord> read_records_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("records csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRecordsHeader) throw IoError("records csv: unexpected header '" + line + "'");
  std::vector<EvalRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) {
      throw IoError("records csv line " + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      EvalRecord r;
      r.iteration = std::stoull(f[0]);
      r.phase = parse_phase(f[1]);
      r.accuracy = std::stod(f[2]);
      r.model = f[3];
      r.seed = std::stoull(f[4]);
      out.push_back(std::move(r));
    } catch (const std::invalid_argument&) {
      throw IoError("records csv line " + std::to_string(lineno) + ": bad number");
    } catch (const Error& e) {
      throw IoError("records csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<EvalRecord> load_records_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open records " + path);
  return read_records_csv(is);
}

inline void write_lr_stats_csv(std::ostream& os, const std::vector<LayerLRStats>& rows) {
  os << "layer,mean,std,frac_negative,count\n";
  for (const auto& r : rows) {
    os << r.layer << ',' << fmt_double(r.mean) << ',' << fmt_double(r.std) << ','
       << fmt_double(r.fraction_negative) << ',' << r.count << '\n';
  }
}

inline void render_lr_table(std::ostream& os, const std::vector<LayerLRStats>& rows) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %10s %10s %14s %8s\n", "Layer", "Mean", "Std. Dev.",
                "Frac. negative", "Count");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %10s %10s %14s %8zu\n", r.layer.c_str(),
                  fmt_fixed(r.mean, 3).c_str(), fmt_fixed(r.std, 3).c_str(),
                  fmt_fixed(r.fraction_negative, 3).c_str(), r.count);
    os << buf;
  }
}

inline void write_accuracy_csv(std::ostream& os, const AggregateReport& rep) {
  os << "model,phase,mean,ci_lo,ci_hi,n\n";
  for (const auto& c : rep.cells) {
    os << c.model << ',' << phase_name(c.phase) << ',' << fmt_double(c.summary.mean) << ','
       << fmt_double(c.summary.ci_lo) << ',' << fmt_double(c.summary.ci_hi) << ','
       << c.summary.n << '\n';
  }
}

inline void write_deltas_csv(std::ostream& os, const AggregateReport& rep) {
  os << "model,delta,mean,ci_lo,ci_hi,n\n";
  for (const auto& d : rep.deltas) {
    os << d.model << ',' << d.name << ',' << fmt_double(d.summary.mean) << ','
       << fmt_double(d.summary.ci_lo) << ',' << fmt_double(d.summary.ci_hi) << ','
       << d.summary.n << '\n';
  }
}

inline void render_accuracy_table(std::ostream& os, const AggregateReport& rep) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-10s %-8s %9s %21s %8s\n", "Model", "Phase", "Mean",
                "95% CI", "n");
  os << buf;
  auto row = [&](const std::string& model, const std::string& what, const Summary& s) {
    const std::string ci = "[" + fmt_fixed(s.ci_lo, 4) + ", " + fmt_fixed(s.ci_hi, 4) + "]";
    std::snprintf(buf, sizeof buf, "%-10s %-8s %9s %21s %8zu%s\n", model.c_str(), what.c_str(),
                  fmt_fixed(s.mean, 4).c_str(), ci.c_str(), s.n,
                  s.degenerate ? "  (n=1, degenerate CI)" : "");
    os << buf;
  };
  for (const auto& c : rep.cells) row(c.model, std::string(phase_name(c.phase)), c.summary);
  for (const auto& d : rep.deltas) row(d.model, d.name, d.summary);
}

inline std::string_view test_kind_name(TestKind k) {
  return k == TestKind::Paired ? "paired" : "welch";
}

inline void write_comparison_csv(std::ostream& os, const std::string& first,
                                 const std::string& second, const ModelComparison& c) {
  os << "test,subject,t,df,p\n";
  auto row = [&](const char* test, const std::string& subject, const TestResult& r) {
    os << test << ',' << subject << ',' << fmt_double(r.t) << ',' << fmt_double(r.df) << ','
       << fmt_double(r.p) << '\n';
  };
  row("welch", first + " vs " + second, c.welch);
  row("paired", first, c.paired_first);
  row("paired", second, c.paired_second);
}

inline void render_comparison(std::ostream& os, const std::string& first,
                              const std::string& second, const ModelComparison& c) {
  auto line = [&](const std::string& label, const TestResult& r) {
    os << label << ": t = " << fmt_double(r.t, 6) << ", df = " << fmt_double(r.df, 6)
       << ", p = " << fmt_double(r.p, 6) << '\n';
  };
  os << "(off - on) " << first << ": " << fmt_fixed(c.delta_first.mean, 5) << " ["
     << fmt_fixed(c.delta_first.ci_lo, 5) << ", " << fmt_fixed(c.delta_first.ci_hi, 5)
     << "], n = " << c.delta_first.n << '\n';
  os << "(off - on) " << second << ": " << fmt_fixed(c.delta_second.mean, 5) << " ["
     << fmt_fixed(c.delta_second.ci_lo, 5) << ", " << fmt_fixed(c.delta_second.ci_hi, 5)
     << "], n = " << c.delta_second.n << '\n';
  line("Welch " + first + " vs " + second, c.welch);
  line("Paired off vs on, " + first, c.paired_first);
  line("Paired off vs on, " + second, c.paired_second);
}

}  // namespace mlab
