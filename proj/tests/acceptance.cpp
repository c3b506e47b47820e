// Acceptance run. Prints details per criterion, then one PASS/FAIL line for
// each of criteria 1..9. Exit status is nonzero when any criterion fails.
//
//   acceptance [--config FILE] [--out DIR]

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mlab/mlab.hpp"
#include "oracles.hpp"

using namespace mlab;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
};

std::vector<Verdict> verdicts;

void record(int id, const std::string& title, bool pass, const std::string& detail) {
  verdicts.push_back({id, title, pass, detail});
  std::printf("-> criterion %d %s: %s\n\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void banner(int id, const std::string& title) {
  std::printf("=== %d. %s ===\n", id, title.c_str());
  std::fflush(stdout);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

double pre_accuracy(const std::vector<EvalRecord>& records) {
  std::vector<double> v;
  for (const auto& r : records) {
    if (r.phase == Phase::Pre) v.push_back(r.accuracy);
  }
  return stats::mean(v);
}

// 95% Student interval half-width for a small sample of per-seed values.
double t_half_width(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const boost::math::students_t dist(static_cast<double>(v.size() - 1));
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  return q * std::sqrt(stats::variance(v) / static_cast<double>(v.size()));
}

// --- criterion 1 ------------------------------------------------------------

void gradient_correctness() {
  const std::string title = "gradient correctness";
  banner(1, title);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<selfcheck::Outcome> all = selfcheck::primitive_checks();
  all.push_back(selfcheck::conv_model_check());
  const auto meta = selfcheck::meta_gradient_checks();
  all.insert(all.end(), meta.begin(), meta.end());
  const double secs = seconds_since(t0);

  std::size_t failed = 0;
  double worst_first = 0.0, worst_second = 0.0;
  for (const auto& o : all) {
    if (!o.passed) {
      ++failed;
      std::printf("  FAIL %-40s %.3e (< %.0e)\n", o.name.c_str(), o.error, o.threshold);
    }
    if (o.threshold <= selfcheck::kFirstOrderTol) {
      worst_first = std::max(worst_first, o.error);
    } else {
      worst_second = std::max(worst_second, o.error);
    }
  }
  for (const auto& o : meta) std::printf("  %-40s %.3e\n", o.name.c_str(), o.error);
  std::printf("  %zu checks, worst first-order %.3e, worst second-order %.3e, %.1f s\n",
              all.size(), worst_first, worst_second, secs);
  record(1, title, failed == 0 && secs < 60.0,
         fmt("%zu/%zu checks pass, max rel.err %.2e (1st) %.2e (2nd), %.1f s (< 60 s)",
             all.size() - failed, all.size(), worst_first, worst_second, secs));
}

// --- criterion 2 ------------------------------------------------------------

struct OracleRow {
  double theta, c, alpha;
  std::size_t steps;
  double adapted, adapted_loss, dtheta_full, dtheta_first, dalpha_full, dalpha_first;
};

const OracleRow kOracle[] = {
#include "quadratic_oracle.inc"
};

void closed_form_oracle() {
  const std::string title = "closed-form oracle";
  banner(2, title);
  double worst = 0.0;
  std::printf("  %6s %6s %6s %5s %14s %14s %14s\n", "theta", "c", "alpha", "steps",
              "d/dtheta full", "d/dtheta 1st", "d/dalpha");
  for (const auto& r : kOracle) {
    const QuadraticTask task{r.c};
    const ParamSet th{{"theta", Tensor::scalar(r.theta)}};
    const LearningRateSet lr{{{"theta", Tensor::scalar(r.alpha)}}, true};
    const std::span<const QuadraticTask> one(&task, 1);
    const MetaGradient full = meta_gradient(th, lr, one, r.steps, false);
    const MetaGradient first = meta_gradient(th, lr, one, r.steps, true);
    const double ft = full.theta.at("theta").item(), fo = first.theta.at("theta").item();
    const double fa = full.alpha.at("theta").item(), foa = first.alpha.at("theta").item();
    worst = std::max({worst, std::abs(ft - r.dtheta_full), std::abs(fo - r.dtheta_first),
                      std::abs(fa - r.dalpha_full), std::abs(foa - r.dalpha_first),
                      std::abs(full.loss - r.adapted_loss)});
    std::printf("  %6.2f %6.2f %6.2f %5zu %14.10f %14.10f %14.10f\n", r.theta, r.c, r.alpha,
                r.steps, ft, fo, fa);
  }
  const auto rows = selfcheck::quadratic_table();
  const double closed = selfcheck::quadratic_max_error(rows);
  std::printf("  script oracle max abs err %.3e, closed forms max abs err %.3e\n", worst,
              closed);
  record(2, title, worst < 1e-10 && closed < 1e-10,
         fmt("%zu script rows + %zu closed-form rows, max abs err %.2e (< 1e-10)",
             std::size(kOracle), rows.size(), std::max(worst, closed)));
}

// --- criterion 3 ------------------------------------------------------------

void mode_reduction(const RunConfig& cfg) {
  const std::string title = "mode reduction";
  banner(3, title);
  const ModelSpec spec = cfg.model_spec();
  const TaskDistribution dist = cfg.task_distribution();
  MetaConfig maml = cfg.meta_config();
  maml.mode = Mode::Maml;
  maml.inner_lr_init = 0.01;
  MetaConfig frozen = maml;
  frozen.mode = Mode::MetaSgd;
  frozen.freeze_alpha = true;
  const ParamSet theta = init_params(spec, 3);
  MetaLearner a(theta, initial_rates(maml, theta), maml);
  MetaLearner b(theta, initial_rates(frozen, theta), frozen);

  const std::size_t steps = 100;
  std::size_t mismatched = 0;
  std::vector<Episode> episodes(maml.meta_batch);
  std::vector<EpisodeTask> tasks(maml.meta_batch);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t j = 0; j < maml.meta_batch; ++j) {
      episodes[j] = dist.sample_episode(seed_stream(99, s * maml.meta_batch + j),
                                        maml.episode_shape());
      tasks[j] = {&spec, &episodes[j]};
    }
    const std::span<const EpisodeTask> span(tasks);
    const auto ra = a.step(span);
    const auto rb = b.step(span);
    bool same = std::bit_cast<std::uint64_t>(ra.loss) == std::bit_cast<std::uint64_t>(rb.loss);
    for (const auto& [k, t] : ra.gradient.theta) {
      same = same && bitwise_equal(t, rb.gradient.theta.at(k));
    }
    if (!same) ++mismatched;
  }
  bool alpha_fixed = true;
  for (const auto& [k, t] : b.rates().rates) {
    for (double v : t.data()) alpha_fixed = alpha_fixed && v == 0.01;
  }
  bool params_same = true;
  for (const auto& [k, t] : a.params()) params_same = params_same && bitwise_equal(t, b.params().at(k));
  std::printf("  %zu steps on the %s model, %zu with differing theta gradients\n", steps,
              spec.kind == ModelSpec::Kind::Conv ? "conv" : "mlp", mismatched);
  record(3, title, mismatched == 0 && alpha_fixed && params_same,
         fmt("%zu/%zu meta-steps bitwise identical, alpha stayed 0.01: %s, final theta identical: %s",
             steps - mismatched, steps, alpha_fixed ? "yes" : "no",
             params_same ? "yes" : "no"));
}

// --- criteria 4, 5, 6, 8 share trained runs ---------------------------------

struct Run {
  Mode mode = Mode::Maml;
  std::uint64_t seed = 0;
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
  double train_seconds = 0.0;
  std::vector<EvalRecord> records;
};

RunConfig configure(const RunConfig& base, Mode mode, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.set("mode", std::string(mode_name(mode)));
  cfg.set("seed", std::to_string(seed));
  return cfg;
}

Run train_and_probe(const RunConfig& base, Mode mode, std::uint64_t seed, const fs::path& out) {
  const RunConfig cfg = configure(base, mode, seed);
  const ModelSpec spec = cfg.model_spec();
  const TaskDistribution dist = cfg.task_distribution();
  Run run;
  run.mode = mode;
  run.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult tr = train(cfg.meta_config(), dist, spec);
  run.train_seconds = seconds_since(t0);
  run.checkpoint = std::move(tr.checkpoint);
  run.log = std::move(tr.log);
  run.records = run_protocol(spec, run.checkpoint, dist, cfg.protocol_config()).records;

  const std::string tag = std::string(mode_name(mode)) + "-seed" + std::to_string(seed);
  save_checkpoint(out / (tag + ".mlab"), run.checkpoint);
  std::ofstream rec(out / (tag + "-records.csv"));
  write_records_csv(rec, run.records);
  const double val = run.log.empty() ? std::nan("") : run.log.back().val_accuracy;
  std::printf("  %-9s seed %llu: train %.1f s, final val %.3f, protocol pre %.4f\n",
              std::string(mode_name(mode)).c_str(), static_cast<unsigned long long>(seed),
              run.train_seconds, val, pre_accuracy(run.records));
  std::fflush(stdout);
  return run;
}

void desk_learning(const RunConfig& base, const std::vector<Run>& maml_runs,
                   const std::vector<Run>& msgd_runs) {
  const std::string title = "desk-scale learning";
  banner(4, title);
  const Run& maml = maml_runs.front();
  const Run& msgd = msgd_runs.front();
  const ModelSpec spec = base.model_spec();
  const TaskDistribution dist = base.task_distribution();
  ProtocolConfig pc = base.protocol_config();
  const Checkpoint init{init_params(spec, 0), std::nullopt};
  const double baseline = pre_accuracy(run_protocol(spec, init, dist, pc).records);

  const double total = maml.train_seconds + msgd.train_seconds;
  const double pre_a = pre_accuracy(maml.records), pre_b = pre_accuracy(msgd.records);
  const double val_a = maml.log.back().val_accuracy, val_b = msgd.log.back().val_accuracy;
  std::printf("  untrained init (seed 0) pre accuracy %.4f\n", baseline);
  std::printf("  maml      pre %.4f  final val %.3f  %.1f s\n", pre_a, val_a, maml.train_seconds);
  std::printf("  meta-sgd  pre %.4f  final val %.3f  %.1f s\n", pre_b, val_b, msgd.train_seconds);
  std::printf("  final query accuracy margin over chance: maml %+.3f, meta-sgd %+.3f\n",
              val_a - 0.2, val_b - 0.2);
  std::printf("  all seeds (gate uses seed 0):\n");
  for (const auto* runs : {&maml_runs, &msgd_runs}) {
    for (const Run& r : *runs) {
      std::printf("    %-9s seed %llu  final val %.3f  pre %.4f  %.1f s\n",
                  std::string(mode_name(r.mode)).c_str(),
                  static_cast<unsigned long long>(r.seed), r.log.back().val_accuracy,
                  pre_accuracy(r.records), r.train_seconds);
    }
  }
  const bool pass = pre_a >= 0.35 && pre_b >= 0.35 && val_a - 0.2 >= 0.15 &&
                    val_b - 0.2 >= 0.15 && total < 900.0;
  record(4, title, pass,
         fmt("pre accuracy maml %.3f, meta-sgd %.3f (>= 0.35; init %.3f), training %.0f s (< 900 s)",
             pre_a, pre_b, baseline, total));
}

void lr_report(const std::vector<Run>& msgd_runs, const ModelSpec& spec, const fs::path& out) {
  const std::string title = "learning-rate report";
  banner(5, title);
  const auto prefixes = layer_prefixes(spec);
  std::vector<std::vector<double>> means(prefixes.size());
  std::vector<double> frac;
  bool shape_ok = true;
  for (const auto& run : msgd_runs) {
    if (!run.checkpoint.alpha) {
      shape_ok = false;
      continue;
    }
    const auto rows = lr_stats(*run.checkpoint.alpha, prefixes);
    std::printf("  seed %llu, fraction negative %.4f\n",
                static_cast<unsigned long long>(run.seed),
                LearningRateSet{*run.checkpoint.alpha, true}.fraction_negative());
    std::ostringstream table;
    render_lr_table(table, rows);
    std::istringstream lines(table.str());
    for (std::string line; std::getline(lines, line);) std::printf("    %s\n", line.c_str());
    std::ofstream csv(out / ("lr_stats-seed" + std::to_string(run.seed) + ".csv"));
    write_lr_stats_csv(csv, rows);

    std::size_t total = 0;
    shape_ok = shape_ok && rows.size() == prefixes.size();
    for (std::size_t i = 0; i < rows.size() && i < prefixes.size(); ++i) {
      shape_ok = shape_ok && rows[i].layer == prefixes[i] && std::isfinite(rows[i].mean) &&
                 rows[i].std >= 0.0 && rows[i].fraction_negative >= 0.0 &&
                 rows[i].fraction_negative <= 1.0;
      means[i].push_back(rows[i].mean);
      total += rows[i].count;
    }
    shape_ok = shape_ok && total == parameter_count(run.checkpoint.params);
    frac.push_back(LearningRateSet{*run.checkpoint.alpha, true}.fraction_negative());
  }

  std::printf("  per-layer mean learning rate over %zu seeds (95%% t interval):\n",
              msgd_runs.size());
  std::ofstream csv(out / "lr_layer_means.csv");
  csv << "layer,mean,ci_lo,ci_hi,n\n";
  std::size_t conv_negative = 0, conv_layers = 0;
  bool finite = true;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const double m = stats::mean(means[i]), h = t_half_width(means[i]);
    finite = finite && std::isfinite(m) && std::isfinite(h);
    std::printf("    %-8s %+.4f  [%+.4f, %+.4f]\n", prefixes[i].c_str(), m, m - h, m + h);
    csv << prefixes[i] << ',' << fmt_double(m) << ',' << fmt_double(m - h) << ','
        << fmt_double(m + h) << ',' << means[i].size() << '\n';
    if (prefixes[i] != "logits") {
      ++conv_layers;
      if (m < 0.0) ++conv_negative;
    }
  }
  const double fm = stats::mean(frac), fh = t_half_width(frac);
  std::printf("  fraction negative per run: mean %.4f [%.4f, %.4f]\n", fm, fm - fh, fm + fh);
  std::printf("  negative conv-layer means: %zu of %zu (sign not gated)\n", conv_negative,
              conv_layers);
  record(5, title, shape_ok && finite && msgd_runs.size() >= 5 && frac.size() == msgd_runs.size(),
         fmt("%zu seeds, %zu-row tables, fraction negative %.3f [%.3f, %.3f], "
             "%zu/%zu conv layer means negative",
             msgd_runs.size(), prefixes.size(), fm, fm - fh, fm + fh, conv_negative,
             conv_layers));
}

bool same_records(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].iteration != b[i].iteration || a[i].phase != b[i].phase ||
        std::bit_cast<std::uint64_t>(a[i].accuracy) !=
            std::bit_cast<std::uint64_t>(b[i].accuracy) ||
        a[i].model != b[i].model || a[i].seed != b[i].seed) {
      return false;
    }
  }
  return true;
}

void protocol_determinism(const RunConfig& base, const Run& run) {
  const std::string title = "protocol determinism";
  banner(6, title);
  const RunConfig cfg = configure(base, run.mode, run.seed);
  const ModelSpec spec = cfg.model_spec();
  const TaskDistribution dist = cfg.task_distribution();
  ProtocolConfig pc = cfg.protocol_config();
  pc.workers = 4;
  const auto four = run_protocol(spec, run.checkpoint, dist, pc).records;
  pc.workers = 1;
  const auto repeat = run_protocol(spec, run.checkpoint, dist, pc).records;

  std::size_t pre = 0, on = 0, off = 0;
  bool ordered = true;
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    const auto& r = run.records[i];
    pre += r.phase == Phase::Pre;
    on += r.phase == Phase::On;
    off += r.phase == Phase::Off;
    ordered = ordered && r.iteration == i / 3;
  }
  const bool same4 = same_records(run.records, four), same1 = same_records(run.records, repeat);
  std::printf("  %zu iterations: %zu records (%zu pre, %zu on, %zu off)\n", pc.iterations,
              run.records.size(), pre, on, off);
  std::printf("  workers 4 identical: %s, repeat identical: %s\n", same4 ? "yes" : "no",
              same1 ? "yes" : "no");
  record(6, title,
         pc.iterations == 1000 && run.records.size() == 3000 && pre == 1000 && on == 1000 &&
             off == 1000 && ordered && same4 && same1,
         fmt("%zu records from %zu iterations, identical for workers 1/4 and repeat: %s",
             run.records.size(), pc.iterations, same4 && same1 ? "yes" : "no"));
}

// --- criterion 7 ------------------------------------------------------------

std::vector<double> normal_sample(std::mt19937_64& rng, std::size_t n, double mu, double sd) {
  std::normal_distribution<double> d(mu, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double ks_uniform(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    d = std::max({d, (i + 1) / n - p[i], p[i] - i / n});
  }
  return d;
}

void statistics_correctness() {
  const std::string title = "statistics correctness";
  banner(7, title);
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(2, 15);
  std::uniform_real_distribution<double> mu(-1, 1), sd(0.1, 3);
  double worst_welch = 0.0, worst_paired = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = normal_sample(rng, size(rng), mu(rng), sd(rng));
    const auto y = normal_sample(rng, size(rng), mu(rng), sd(rng));
    worst_welch = std::max(worst_welch, std::abs(t_test(x, y, TestKind::Welch).p -
                                                 oracle::welch(x, y).p));
    const auto xp = normal_sample(rng, x.size(), mu(rng), sd(rng));
    worst_paired = std::max(worst_paired, std::abs(t_test(x, xp, TestKind::Paired).p -
                                                   oracle::paired(x, xp).p));
  }

  const int trials = 10000;
  std::vector<double> welch, paired;
  for (int i = 0; i < trials; ++i) {
    welch.push_back(t_test(normal_sample(rng, 7, 0.3, 1), normal_sample(rng, 11, 0.3, 2),
                           TestKind::Welch).p);
    paired.push_back(t_test(normal_sample(rng, 9, -1, 1), normal_sample(rng, 9, -1, 1),
                            TestKind::Paired).p);
  }
  const double crit = 1.6276 / std::sqrt(static_cast<double>(trials));
  const double ks_w = ks_uniform(welch), ks_p = ks_uniform(paired);
  std::printf("  oracle max |dp|: welch %.3e, paired %.3e\n", worst_welch, worst_paired);
  std::printf("  KS distance over %d null trials: welch %.5f, paired %.5f (1%% critical %.5f)\n",
              trials, ks_w, ks_p, crit);
  record(7, title, worst_welch < 1e-6 && worst_paired < 1e-6 && ks_w < crit && ks_p < crit,
         fmt("oracle |dp| %.1e / %.1e (< 1e-6), KS %.4f / %.4f (< %.4f)", worst_welch,
             worst_paired, ks_w, ks_p, crit));
}

// --- criterion 8 ------------------------------------------------------------

void phenomenon_probe(const std::vector<Run>& maml_runs, const std::vector<Run>& msgd_runs,
                      const fs::path& out) {
  const std::string title = "phenomenon probe";
  banner(8, title);
  std::vector<EvalRecord> a, b;
  std::printf("  per-seed mean (off - on):\n");
  for (std::size_t i = 0; i < maml_runs.size(); ++i) {
    a.insert(a.end(), maml_runs[i].records.begin(), maml_runs[i].records.end());
    b.insert(b.end(), msgd_runs[i].records.begin(), msgd_runs[i].records.end());
    std::printf("    seed %llu: maml %+.4f  meta-sgd %+.4f\n",
                static_cast<unsigned long long>(maml_runs[i].seed),
                stats::mean(off_on_deltas(maml_runs[i].records)),
                stats::mean(off_on_deltas(msgd_runs[i].records)));
  }
  std::vector<EvalRecord> both = a;
  both.insert(both.end(), b.begin(), b.end());
  const AggregateReport rep = aggregate(both);
  std::ostringstream table;
  render_accuracy_table(table, rep);
  std::printf("%s", table.str().c_str());
  const ModelComparison cmp = compare_models(a, b);
  std::ostringstream text;
  render_comparison(text, "maml", "meta-sgd", cmp);
  std::printf("%s", text.str().c_str());
  {
    std::ofstream os(out / "accuracy.csv");
    write_accuracy_csv(os, rep);
  }
  {
    std::ofstream os(out / "deltas.csv");
    write_deltas_csv(os, rep);
  }
  {
    std::ofstream os(out / "comparison.csv");
    write_comparison_csv(os, "maml", "meta-sgd", cmp);
  }
  const bool sign = cmp.delta_first.mean < 0.0 && cmp.delta_second.mean > 0.0;
  std::printf("  sign pattern (maml off-on < 0 < meta-sgd off-on): %s (not gated)\n",
              sign ? "observed" : "not observed");
  const bool produced = !cmp.delta_first.degenerate && !cmp.delta_second.degenerate &&
                        std::isfinite(cmp.delta_first.ci_lo) &&
                        std::isfinite(cmp.delta_second.ci_hi) && cmp.welch.p > 0.0 &&
                        cmp.welch.p <= 1.0 && maml_runs.size() >= 5;
  record(8, title, produced,
         fmt("%zu seeds, off-on maml %+.4f [%+.4f, %+.4f], meta-sgd %+.4f [%+.4f, %+.4f], "
             "Welch p = %.3g",
             maml_runs.size(), cmp.delta_first.mean, cmp.delta_first.ci_lo,
             cmp.delta_first.ci_hi, cmp.delta_second.mean, cmp.delta_second.ci_lo,
             cmp.delta_second.ci_hi, cmp.welch.p));
}

// --- criterion 9 ------------------------------------------------------------

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out(t.dim(0));
  const std::size_t d = t.dim(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r].assign(t.data().begin() + r * d, t.data().begin() + (r + 1) * d);
  }
  return out;
}

void cosine_classifier(const RunConfig& base, const Run& run) {
  const std::string title = "cosine classifier";
  banner(9, title);
  const ModelSpec spec = base.model_spec();
  const TaskDistribution dist = base.task_distribution();
  const EpisodeShape shape = base.meta_config().episode_shape();
  std::size_t queries = 0, mismatches = 0;
  double centroid_err = 0.0;
  for (std::size_t e = 0; e < 1000; ++e) {
    const Episode ep = dist.sample_episode(seed_stream(4242, e), shape);
    const Tensor s = embed(spec, run.checkpoint.params, ep.support.examples);
    const Tensor q = embed(spec, run.checkpoint.params, ep.query.examples);
    const PrototypeSet protos = prototypes(s, ep.support.labels, shape.n_way);

    const auto support = rows_of(s);
    std::vector<std::vector<long double>> sums(shape.n_way,
                                               std::vector<long double>(s.dim(1), 0.0L));
    std::vector<std::size_t> counts(shape.n_way, 0);
    for (std::size_t r = 0; r < support.size(); ++r) {
      for (std::size_t j = 0; j < support[r].size(); ++j) sums[ep.support.labels[r]][j] += support[r][j];
      ++counts[ep.support.labels[r]];
    }
    for (std::size_t k = 0; k < shape.n_way; ++k) {
      for (std::size_t j = 0; j < s.dim(1); ++j) {
        const double want = static_cast<double>(sums[k][j] / counts[k]);
        centroid_err = std::max(centroid_err, std::abs(want - protos.row(k)[j]));
      }
    }

    const auto centroids = rows_of(protos.centroids);
    const auto want = oracle::cosine_labels(rows_of(q), centroids);
    const std::size_t d = q.dim(1);
    for (std::size_t r = 0; r < want.size(); ++r) {
      ++queries;
      if (classify(q.data().subspan(r * d, d), protos) != want[r]) ++mismatches;
    }
  }
  std::printf("  1000 episodes, %zu queries on trained embeddings, centroid max err %.2e\n",
              queries, centroid_err);
  record(9, title, mismatches == 0 && centroid_err < 1e-12,
         fmt("%zu queries over 1000 episodes, %zu mismatches", queries, mismatches));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path config_path = fs::path(MLAB_CONFIG_DIR) / "acceptance.cfg";
  fs::path out = "acceptance_artifacts";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) {
      config_path = argv[++i];
    } else if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--config FILE] [--out DIR]\n");
      return 1;
    }
  }
  try {
    fs::create_directories(out);
    const RunConfig base = RunConfig::load(config_path);
    base.validate();
    write_file(out / "config.cfg", base.str());
    std::printf("acceptance config %s, artifacts in %s\n\n", config_path.string().c_str(),
                out.string().c_str());

    gradient_correctness();
    closed_form_oracle();
    mode_reduction(base);

    const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
    std::vector<Run> maml_runs, msgd_runs;
    std::printf("=== training runs ===\n");
    for (std::uint64_t s : seeds) {
      maml_runs.push_back(train_and_probe(base, Mode::Maml, s, out));
      msgd_runs.push_back(train_and_probe(base, Mode::MetaSgd, s, out));
    }
    std::printf("\n");

    desk_learning(base, maml_runs, msgd_runs);
    lr_report(msgd_runs, base.model_spec(), out);
    protocol_determinism(base, maml_runs[0]);
    statistics_correctness();
    phenomenon_probe(maml_runs, msgd_runs, out);
    cosine_classifier(base, maml_runs[0]);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
  }

  std::printf("=== summary ===\n");
  bool all = verdicts.size() == 9;
  for (int id = 1; id <= 9; ++id) {
    const auto it = std::find_if(verdicts.begin(), verdicts.end(),
                                 [&](const Verdict& v) { return v.id == id; });
    if (it == verdicts.end()) {
      std::printf("FAIL criterion %d: not reached\n", id);
      all = false;
      continue;
    }
    all = all && it->pass;
    std::printf("%s criterion %d (%s): %s\n", it->pass ? "PASS" : "FAIL", id,
                it->title.c_str(), it->detail.c_str());
  }
  return all ? 0 : 1;
}
