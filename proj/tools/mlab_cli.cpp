// mlab: train, probe and report on MAML / Meta-SGD models.
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mlab/mlab.hpp"

namespace fs = std::filesystem;
using namespace mlab;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : Error {
  using Error::Error;
};

// Writes to a sibling temp file and renames, so readers never see a partial file.
template <class Fn>
void write_atomically(const fs::path& path, Fn&& fill, bool binary = false) {
  const fs::path tmp = path.string() + ".partial";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    fill(os);
    os.flush();
    if (!os) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("failed writing " + path.string());
    }
  }
  fs::rename(tmp, path);
}

void write_run_header(const fs::path& out, const RunConfig& cfg) {
  fs::create_directories(out);
  write_atomically(out / "config.cfg", [&](std::ostream& os) { cfg.write(os); });
  write_atomically(out / "VERSION", [&](std::ostream& os) {
    os << kVersion << "\nseed " << cfg.get("seed") << '\n';
  });
}

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : RunConfig::load(path);
}

void apply_overrides(RunConfig& cfg, const std::optional<std::string>& mode,
                     const std::optional<std::uint64_t>& seed,
                     const std::optional<std::size_t>& workers, bool first_order) {
  if (mode) cfg.set("mode", *mode);
  if (seed) cfg.set("seed", std::to_string(*seed));
  if (workers) cfg.set("workers", std::to_string(*workers));
  if (first_order) cfg.set("first_order", "true");
  cfg.validate();
}

struct CommonOptions {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool first_order = false;
  std::string out;
};

int cmd_train(const CommonOptions& o) {
  RunConfig cfg = load_config(o.config);
  apply_overrides(cfg, o.mode, o.seed, o.workers, o.first_order);
  const MetaConfig mc = cfg.meta_config();
  const ModelSpec spec = cfg.model_spec();
  const TaskDistribution dist = cfg.task_distribution();
  const fs::path out = o.out.empty() ? fs::path("run") : fs::path(o.out);
  write_run_header(out, cfg);

  std::cerr << "training " << mode_name(mc.mode) << (mc.first_order ? " (first order)" : "")
            << " for " << mc.iterations << " iterations, seed " << mc.seed << '\n';
  const TrainResult result = train(mc, dist, spec, [](const TrainLogRow& r) {
    std::cerr << "  iter " << r.iteration << "  meta_loss " << fmt_fixed(r.meta_loss, 4)
              << "  val_acc " << fmt_fixed(r.val_accuracy, 3);
    if (r.alpha_frac_negative) std::cerr << "  alpha<0 " << fmt_fixed(*r.alpha_frac_negative, 3);
    std::cerr << '\n';
  });

  write_atomically(out / "train_log.csv", [&](std::ostream& os) {
    os << "iteration,meta_loss,val_accuracy,alpha_frac_negative\n";
    for (const auto& r : result.log) {
      os << r.iteration << ',' << fmt_double(r.meta_loss) << ',' << fmt_double(r.val_accuracy)
         << ',';
      if (r.alpha_frac_negative) os << fmt_double(*r.alpha_frac_negative);
      os << '\n';
    }
  });
  write_atomically(out / "checkpoint.mlab",
                   [&](std::ostream& os) { write_checkpoint(os, result.checkpoint); }, true);
  std::cout << (out / "checkpoint.mlab").string() << '\n';
  return 0;
}

int cmd_eval_protocol(const CommonOptions& o, const std::string& checkpoint) {
  RunConfig cfg = load_config(o.config);
  apply_overrides(cfg, std::nullopt, o.seed, o.workers, false);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const ModelSpec spec = cfg.model_spec();
  const TaskDistribution dist = cfg.task_distribution();
  const ProtocolConfig pc = cfg.protocol_config();
  const fs::path out = o.out.empty() ? fs::path("protocol") : fs::path(o.out);

  const ProtocolResult result = run_protocol(spec, ckpt, dist, pc);
  write_run_header(out, cfg);
  write_atomically(out / "records.csv",
                   [&](std::ostream& os) { write_records_csv(os, result.records); });
  render_accuracy_table(std::cout, aggregate(result.records));
  return 0;
}

int cmd_report(const std::string& checkpoint, const std::vector<std::string>& records,
               const std::string& config, const std::string& out_dir) {
  if (checkpoint.empty() && records.empty()) {
    throw UsageError("report needs --checkpoint and/or --records");
  }
  const std::optional<fs::path> out =
      out_dir.empty() ? std::nullopt : std::optional<fs::path>(out_dir);
  if (out) fs::create_directories(*out);

  if (!checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    if (!ckpt.alpha) throw Error(checkpoint + ": not a meta-sgd checkpoint (no alpha tensors)");
    const ModelSpec spec = load_config(config).model_spec();
    const auto rows = lr_stats(*ckpt.alpha, layer_prefixes(spec));
    std::cout << "Final inner-loop learning rates\n";
    render_lr_table(std::cout, rows);
    if (out) write_atomically(*out / "lr_stats.csv", [&](std::ostream& os) { write_lr_stats_csv(os, rows); });
  }

  if (!records.empty()) {
    std::vector<EvalRecord> all;
    std::map<std::string, std::vector<EvalRecord>> by_model;
    for (const auto& path : records) {
      auto recs = load_records_csv(path);
      if (recs.empty()) throw Error(path + ": no records");
      for (const auto& r : recs) by_model[r.model].push_back(r);
      all.insert(all.end(), recs.begin(), recs.end());
    }
    const AggregateReport rep = aggregate(all);
    if (!checkpoint.empty()) std::cout << '\n';
    std::cout << "Prototype accuracy by phase\n";
    render_accuracy_table(std::cout, rep);
    if (out) {
      write_atomically(*out / "accuracy.csv", [&](std::ostream& os) { write_accuracy_csv(os, rep); });
      write_atomically(*out / "deltas.csv", [&](std::ostream& os) { write_deltas_csv(os, rep); });
    }
    if (by_model.size() == 2) {
      const auto& [first, rf] = *by_model.begin();
      const auto& [second, rs] = *std::next(by_model.begin());
      const ModelComparison cmp = compare_models(rf, rs);
      std::cout << '\n';
      render_comparison(std::cout, first, second, cmp);
      if (out) {
        write_atomically(*out / "comparison.csv",
                         [&](std::ostream& os) { write_comparison_csv(os, first, second, cmp); });
      }
    } else if (by_model.size() > 2) {
      std::cerr << "note: " << by_model.size() << " models present, skipping pairwise comparison\n";
    }
  }
  return 0;
}

int cmd_gradcheck(const std::string& corrupt) {
  std::optional<Op> fault;
  if (!corrupt.empty()) {
    fault = op_from_name(corrupt);
    if (!fault) throw UsageError("unknown op '" + corrupt + "'");
  }
  std::vector<selfcheck::Outcome> all = selfcheck::primitive_checks(fault);
  all.push_back(selfcheck::conv_model_check(fault));
  for (auto& o : selfcheck::meta_gradient_checks()) all.push_back(o);

  std::size_t failed = 0;
  char buf[200];
  for (const auto& o : all) {
    std::snprintf(buf, sizeof buf, "%-4s %-48s rel.err %.3e  (< %.0e)\n",
                  o.passed ? "ok" : "FAIL", o.name.c_str(), o.error, o.threshold);
    std::cout << buf;
    failed += o.passed ? 0 : 1;
  }

  const auto rows = selfcheck::quadratic_table();
  std::cout << "\nQuadratic task, one inner step: analytic vs computed meta-gradients\n";
  std::snprintf(buf, sizeof buf, "%6s %6s %6s | %11s %11s | %11s %11s | %11s %11s\n", "theta",
                "c", "alpha", "full", "computed", "first", "computed", "d/dalpha", "computed");
  std::cout << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%6.2f %6.2f %6.2f | %11.6f %11.6f | %11.6f %11.6f | %11.6f %11.6f\n",
                  r.theta, r.c, r.alpha, r.full_expected, r.full_computed, r.first_expected,
                  r.first_computed, r.alpha_expected, r.alpha_computed);
    std::cout << buf;
  }
  const double qerr = selfcheck::quadratic_max_error(rows);
  const bool qok = qerr < 1e-10;
  failed += qok ? 0 : 1;
  std::snprintf(buf, sizeof buf, "%-4s %-48s abs.err %.3e  (< 1e-10)\n", qok ? "ok" : "FAIL",
                "quadratic closed forms", qerr);
  std::cout << buf;

  std::cout << '\n' << (all.size() + 1 - failed) << '/' << (all.size() + 1) << " checks passed\n";
  if (failed != 0) {
    std::cerr << "gradcheck: " << failed << " check(s) failed\n";
    return kExitRuntime;
  }
  return 0;
}

int cmd_make_dataset(const CommonOptions& o, std::size_t per_class) {
  RunConfig cfg = load_config(o.config);
  apply_overrides(cfg, std::nullopt, o.seed, std::nullopt, false);
  if (o.out.empty()) throw UsageError("make-dataset requires --out");
  const fs::path out(o.out);
  write_dataset(out, cfg.gaussian_classes(), per_class, cfg.count("seed"));
  write_run_header(out / "meta", cfg);
  std::cout << "wrote " << cfg.count("num_classes") << " classes x " << per_class
            << " examples to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning lab: MAML and Meta-SGD training, prototype probing, statistics"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  CommonOptions o;
  std::string checkpoint;
  std::vector<std::string> records;
  std::string corrupt;
  std::size_t per_class = 30;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Run configuration file (key = value)");
  };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Run seed"); };
  auto add_out = [&](CLI::App* c) { c->add_option("--out", o.out, "Output directory"); };

  auto* train_cmd = app.add_subcommand("train", "Meta-train a model, write checkpoint and log");
  add_config(train_cmd);
  train_cmd->add_option("--mode", o.mode, "maml or meta-sgd")
      ->check(CLI::IsMember({"maml", "meta-sgd"}));
  add_seed(train_cmd);
  add_out(train_cmd);
  train_cmd->add_flag("--first-order", o.first_order, "Stop gradients through inner gradients");

  auto* eval_cmd = app.add_subcommand("eval-protocol", "Pre / on-task / off-task probing");
  add_config(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to probe")->required();
  add_seed(eval_cmd);
  add_out(eval_cmd);
  eval_cmd->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);

  auto* report_cmd = app.add_subcommand("report", "Learning-rate, accuracy and t-test tables");
  add_config(report_cmd);
  report_cmd->add_option("--checkpoint", checkpoint, "Meta-SGD checkpoint for the lr table");
  report_cmd->add_option("--records", records, "Records CSV files")->expected(1, -1);
  add_out(report_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference and closed-form checks");
  grad_cmd->add_option("--corrupt-op", corrupt)->group("");

  auto* data_cmd = app.add_subcommand("make-dataset", "Write a Gaussian-class dataset to disk");
  add_config(data_cmd);
  add_seed(data_cmd);
  add_out(data_cmd);
  data_cmd->add_option("--per-class", per_class, "Examples per class")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval_protocol(o, checkpoint);
    if (*report_cmd) return cmd_report(checkpoint, records, o.config, o.out);
    if (*grad_cmd) return cmd_gradcheck(corrupt);
    if (*data_cmd) return cmd_make_dataset(o, per_class);
  } catch (const UsageError& e) {
    std::cerr << "mlab: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "mlab: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "mlab: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
