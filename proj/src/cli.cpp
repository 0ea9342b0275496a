#include "urnet/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "urnet/checkpoint.hpp"
#include "urnet/config.hpp"
#include "urnet/errors.hpp"

namespace urnet {

namespace fs = std::filesystem;

std::vector<double> default_scale_grid() {
  std::vector<double> grid;
  for (int i = 2; i <= 10; ++i) grid.push_back(i / 10.0);
  return grid;
}

void write_calibration_json(const fs::path& path, const std::vector<CalibrationPoint>& table, bool envelope_applied) {
  Json points = Json::array();
  for (const auto& p : table) points.push_back({{"scale", p.scale}, {"mean_flops", p.mean_flops}});
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << Json{{"points", points}, {"envelope_applied", envelope_applied}}.dump(2) << '\n';
}

std::vector<CalibrationPoint> read_calibration_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open calibration " + path.string());
  std::vector<CalibrationPoint> table;
  try {
    const auto j = Json::parse(f);
    for (const auto& p : j.at("points")) table.push_back({p.at("scale").get<double>(), p.at("mean_flops").get<double>()});
  } catch (const Json::exception& e) {
    throw DataError("calibration " + path.string() + ": " + e.what());
  }
  return table;
}

namespace {

struct TrainArgs {
  fs::path config;
  std::string mode = "urnet";
  std::optional<double> p, beta, s_fixed, sigma;
  std::vector<double> range;
  std::optional<std::size_t> anneal;
  std::optional<fs::path> init, out;
};

struct EvalArgs {
  fs::path config, checkpoint;
  std::vector<double> grid = default_scale_grid();
  std::string gate_override;
  bool random_drop = false;
  std::string output;
};

struct ResolveArgs {
  fs::path calibration;
  double budget = 0.0;
};

RunConfig prepare_train_config(const TrainArgs& a) {
  auto cfg = load_run_config(a.config);
  auto& t = cfg.train;
  if (a.p) t.p = *a.p;
  if (a.beta) t.beta = *a.beta;
  if (a.out) cfg.output_dir = *a.out;
  if (a.mode == "urnet" || a.mode == "baseline-random") {
    if (a.s_fixed || a.sigma || a.anneal) throw ConfigError("--s-fixed, --sigma and --anneal need --mode fixed");
    if (!a.range.empty()) t.scale = RangedScale{a.range[0], a.range[1]};
    t.baseline_mode = a.mode == "urnet" ? BaselineMode::None : BaselineMode::RandomDrop;
  } else {
    if (!a.range.empty()) throw ConfigError("--range does not apply to --mode fixed");
    FixedScale f = std::holds_alternative<FixedScale>(t.scale) ? std::get<FixedScale>(t.scale) : FixedScale{};
    if (a.s_fixed) f.target = *a.s_fixed;
    if (a.sigma) f.sigma = *a.sigma;
    if (a.anneal) f.anneal_epochs = *a.anneal;
    t.scale = f;
    t.baseline_mode = BaselineMode::None;
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto cfg = prepare_train_config(a);
  const auto train = load_train_set(cfg.data);
  const auto test = load_test_set(cfg.data);
  fs::create_directories(cfg.output_dir);
  {
    std::ofstream f(cfg.output_dir / "config.json");
    f << std::setprecision(17) << to_json(cfg).dump(2) << '\n';
  }

  std::optional<UrnetModel> model;
  if (a.init) {
    model.emplace(load_checkpoint(*a.init, cfg.model).model);
  } else {
    model.emplace(cfg.model);
  }

  std::ofstream report(cfg.output_dir / "train_report.csv");
  write_report_csv_header(report);
  TrainHooks hooks;
  hooks.validation = &test;
  hooks.on_epoch = [&](const EpochRecord& r) {
    write_report_csv_row(report, r);
    report.flush();
    out << to_string(r.phase) << " epoch " << r.epoch << " loss " << r.loss.total << " val " << r.val_accuracy
        << " usage " << r.mean_usage << '\n';
  };

  Json summary{{"mode", a.mode}, {"checkpoints", Json::array()}};
  auto save = [&](const std::string& name, const std::string& phase, Trainer* t) {
    TrainState st;
    st.phase = phase;
    if (t) {
      st.next_epoch = t->next_epoch();
      st.optimizer = t->optimizer().states();
    }
    const auto path = cfg.output_dir / name;
    save_checkpoint(*model, train.normalization(), st, path);
    summary["checkpoints"].push_back(name);
  };

  if (!a.init && cfg.pretrain_epochs > 0) {
    auto pc = cfg.train;
    pc.baseline_mode = BaselineMode::None;
    pc.scale = RangedScale{};
    pc.epochs_cgm_only = 0;
    pc.epochs_total = cfg.pretrain_epochs;
    pc.lr_schedule = TrainConfig::step_schedule(cfg.pretrain_epochs, cfg.train.lr_at(0));
    Trainer pre(*model, pc, hooks);
    pre.pretrain(train, cfg.pretrain_epochs);
    save("pretrain.ckpt", "pretrain", nullptr);
  }

  Trainer trainer(*model, cfg.train, hooks);
  if (a.mode == "baseline-random") {
    trainer.train_baseline(train);
  } else {
    trainer.train_phase_cgm_only(train);
    save("phase1.ckpt", "cgm_only", &trainer);
    trainer.train_phase_joint(train);
  }
  save("final.ckpt", "final", &trainer);

  const auto full = evaluate(*model, test, ScaleParam(1.0), policy::Eval{});
  summary["test_accuracy_s1"] = full.accuracy;
  summary["usage_mean_s1"] = full.stats.usage_mean;
  std::ofstream(cfg.output_dir / "summary.json") << std::setprecision(17) << summary.dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream&) {
  if (a.grid.empty()) throw ConfigError("empty scale grid");
  auto cfg = load_run_config(a.config);
  auto ck = load_checkpoint(a.checkpoint, cfg.model);
  cfg.data.normalization = ck.normalization;
  const auto test = load_test_set(cfg.data);
  fs::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir / (a.output.empty() ? "eval.csv" : a.output));
  f << std::setprecision(17) << "scale,accuracy,usage_mean,usage_std,flops_mean,flops_std\n";
  Rng rng(cfg.seed);
  for (double s : a.grid) {
    EvalResult r;
    if (a.random_drop) {
      r = evaluate_random_drop(ck.model, test, ScaleParam(s), rng);
    } else if (a.gate_override == "sigmoid") {
      r = evaluate(ck.model, test, ScaleParam(s), policy::Override{GateMode::Sigmoid});
    } else if (a.gate_override == "binary") {
      r = evaluate(ck.model, test, ScaleParam(s), policy::Override{GateMode::Binary});
    } else {
      r = evaluate(ck.model, test, ScaleParam(s), policy::Eval{});
    }
    f << s << ',' << r.accuracy << ',' << r.stats.usage_mean << ',' << r.stats.usage_std << ',' << r.stats.flops_mean
      << ',' << r.stats.flops_std << '\n';
  }
  return kExitOk;
}

int cmd_usage_map(const EvalArgs& a, std::ostream&) {
  if (a.grid.empty()) throw ConfigError("empty scale grid");
  auto cfg = load_run_config(a.config);
  auto ck = load_checkpoint(a.checkpoint, cfg.model);
  cfg.data.normalization = ck.normalization;
  const auto test = load_test_set(cfg.data);
  const auto map = usage_map(ck.model, test, a.grid);
  fs::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir / (a.output.empty() ? "usage_map.csv" : a.output));
  write_usage_map_csv(f, map, a.grid);
  return kExitOk;
}

int cmd_calibrate(const EvalArgs& a, std::ostream&, std::ostream& err) {
  if (a.grid.empty()) throw ConfigError("empty scale grid");
  auto cfg = load_run_config(a.config);
  auto ck = load_checkpoint(a.checkpoint, cfg.model);
  cfg.data.normalization = ck.normalization;
  const auto test = load_test_set(cfg.data);
  std::vector<CalibrationPoint> table;
  for (double s : a.grid) {
    table.push_back({s, evaluate(ck.model, test, ScaleParam(s), policy::Eval{}).stats.flops_mean});
  }
  const bool changed = apply_monotone_envelope(table);
  if (changed) err << "warning: calibration FLOPs not monotone in S; monotone envelope applied\n";
  fs::create_directories(cfg.output_dir);
  write_calibration_json(cfg.output_dir / (a.output.empty() ? "calibration.json" : a.output), table, changed);
  return kExitOk;
}

int cmd_resolve(const ResolveArgs& a, std::ostream& out) {
  const auto table = read_calibration_json(a.calibration);
  out << std::setprecision(10) << budget_to_scale(table, a.budget).value() << '\n';
  return kExitOk;
}

void add_eval_options(CLI::App* sub, EvalArgs& a, bool override_flags) {
  sub->add_option("--config", a.config, "run config JSON")->required()->check(CLI::ExistingFile);
  sub->add_option("--checkpoint", a.checkpoint, "checkpoint file")->required();
  sub->add_option("--grid", a.grid, "scale values");
  sub->add_option("--output", a.output, "file name under the output directory");
  if (override_flags) {
    sub->add_option("--gate-override", a.gate_override, "force every gate mode")
        ->check(CLI::IsMember({"sigmoid", "binary"}));
    sub->add_flag("--random-drop", a.random_drop, "ignore CGMs and drop a random block subset");
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scale-conditioned gated residual networks"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "pretrain, then CGM-only and joint phases (or a baseline)");
  train->add_option("--config", ta.config, "run config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--mode", ta.mode)->check(CLI::IsMember({"urnet", "fixed", "baseline-random"}));
  train->add_option("--p", ta.p, "gate training probability")->check(CLI::Range(0.0, 1.0));
  train->add_option("--beta", ta.beta, "scale loss weight")->check(CLI::NonNegativeNumber);
  train->add_option("--range", ta.range, "S_min S_max")->expected(2);
  train->add_option("--s-fixed", ta.s_fixed)->check(CLI::Range(0.0, 1.0));
  train->add_option("--sigma", ta.sigma)->check(CLI::NonNegativeNumber);
  train->add_option("--anneal", ta.anneal, "scale annealing epochs");
  train->add_option("--init", ta.init, "start from this checkpoint instead of pretraining");
  train->add_option("--out", ta.out, "output directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "accuracy, usage and FLOPs over a scale grid");
  add_eval_options(eval, ea, true);
  EvalArgs ua;
  auto* umap = app.add_subcommand("usage-map", "per-block open frequency over a scale grid");
  add_eval_options(umap, ua, false);
  EvalArgs ca;
  auto* calib = app.add_subcommand("calibrate", "table of mean FLOPs per scale");
  add_eval_options(calib, ca, false);
  ResolveArgs ra;
  auto* resolve = app.add_subcommand("resolve", "largest S within a FLOPs budget");
  resolve->add_option("--calibration", ra.calibration)->required();
  resolve->add_option("--budget", ra.budget)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(ta, out);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (umap->parsed()) return cmd_usage_map(ua, out);
    if (calib->parsed()) return cmd_calibrate(ca, out, err);
    if (resolve->parsed()) return cmd_resolve(ra, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ArchitectureMismatchError& e) {
    err << "architecture mismatch: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const NonFiniteError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace urnet
