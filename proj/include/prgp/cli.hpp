#ifndef PRGP_CLI_HPP
#define PRGP_CLI_HPP

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "prgp/dataio.hpp"
#include "prgp/errors.hpp"
#include "prgp/evaluate.hpp"
#include "prgp/physics.hpp"
#include "prgp/simulate.hpp"
#include "prgp/trainer.hpp"

namespace prgp {

// Exit codes shared by all subcommands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitMetric = 3;

namespace cli_detail {

/// Parse "pos:value" pieces, e.g. {"0:30", "1:120"}.
inline std::vector<ProfilePiece> parse_pieces(const std::vector<std::string>& in,
                                              const std::string& what) {
  std::vector<ProfilePiece> out;
  for (const auto& s : in) {
    const auto colon = s.find(':');
    if (colon == std::string::npos)
      throw ConfigError(what + ": expected from:value, got '" + s + "'");
    out.push_back({csv_to_double(s.substr(0, colon), what),
                   csv_to_double(s.substr(colon + 1), what)});
  }
  return out;
}

/// All output files are written into <out>.staging and the directory is
/// renamed into place only after the command succeeds; a failed run leaves
/// no partial output directory behind.
class StagedDir {
 public:
  explicit StagedDir(const std::string& out) : final_(out), staging_(out + ".staging") {
    namespace fs = std::filesystem;
    if (out.empty()) throw ConfigError("--out is required");
    if (fs::exists(final_))
      throw ConfigError("output directory already exists: " + out);
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }

  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      std::filesystem::remove_all(staging_, ec);
    }
  }

  std::string path(const std::string& name) const { return staging_ + "/" + name; }

  void commit() {
    std::filesystem::rename(staging_, final_);
    committed_ = true;
  }

 private:
  std::string final_;
  std::string staging_;
  bool committed_ = false;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

}  // namespace cli_detail

/// Everything the command line or a config file can set.
struct CliOptions {
  // shared
  std::string out;
  std::uint64_t seed = 0;

  // simulate
  double sim_length = 2.0;
  double sim_horizon = 1.0;
  double sim_dx = 0.01;
  double sim_dt = 1.0 / 7200.0;
  double sim_vf = 65.0;
  double sim_rho_jam = 200.0;
  std::vector<std::string> sim_rho_init{"0:30"};
  std::vector<std::string> sim_inflow{"0:1600"};
  std::vector<double> sensors{0.2, 0.5, 0.8, 1.1, 1.4, 1.7};
  double sensor_period_min = 5.0;
  double sensor_sigma_q = 2.0;  // veh per 5-min bin
  double sensor_sigma_v = 0.5;  // mph

  // data pipeline
  std::string data;
  double train_frac = 0.5;
  bool noise = false;
  double noise_fraction = 0.5;
  double noise_amplitude = 100.0;

  // training
  std::string physics = "none";
  std::vector<double> gamma;
  int m = 10;
  int iters = 500;
  double lr = 0.05;
  std::string resume;

  // eval
  std::string ckpt;
  std::string baseline;  // "", "pure-gp", or "calibrated-lwr"

  // matrix
  std::vector<std::string> models{"none", "lwr", "pw", "arz", "heat"};
  int seeds = 1;

  TrainConfig train_config(std::uint64_t run_seed) const {
    TrainConfig tc;
    tc.m = m;
    tc.iterations = iters;
    tc.learning_rate = lr;
    tc.seed = run_seed;
    return tc;
  }
};

namespace cli_detail {

/// Load + split (+ optional training-noise injection) + standardize.
inline Dataset build_dataset(const CliOptions& opt) {
  if (opt.data.empty()) throw ConfigError("--data is required");
  Dataset ds = split(load_csv(opt.data), opt.train_frac, opt.seed);
  if (opt.noise)
    ds = inject_noise(std::move(ds), opt.noise_fraction, opt.noise_amplitude,
                      opt.seed);
  return standardize(std::move(ds));
}

inline SimConfig build_sim_config(const CliOptions& opt) {
  SimConfig sim;
  sim.length = opt.sim_length;
  sim.horizon = opt.sim_horizon;
  sim.dx = opt.sim_dx;
  sim.dt = opt.sim_dt;
  sim.fd.v_f = opt.sim_vf;
  sim.fd.rho_jam = opt.sim_rho_jam;
  sim.initial_density = parse_pieces(opt.sim_rho_init, "--rho-init");
  sim.inflow = parse_pieces(opt.sim_inflow, "--inflow");
  sim.record_every = std::max(
      1, static_cast<int>(std::llround(opt.sensor_period_min / 60.0 / sim.dt)));
  return sim;
}

inline int cmd_simulate(const CliOptions& opt, const std::string& config_echo) {
  const SimConfig sim = build_sim_config(opt);
  const FieldGrid grid = run_simulation(sim);
  const auto rows =
      virtual_sensors(grid, opt.sensors, opt.sensor_period_min,
                      opt.sensor_sigma_q, opt.sensor_sigma_v, opt.seed);
  StagedDir dir(opt.out);
  write_field_csv(dir.path("field.csv"), grid);
  write_sensor_csv(dir.path("sensors.csv"), rows);
  write_text(dir.path("config_echo.toml"), config_echo);
  dir.commit();
  return kExitOk;
}

inline int cmd_train(const CliOptions& opt, const std::string& config_echo) {
  Dataset ds;
  TrainConfig tc;
  PhysicsSpec spec;
  TrainResult res;
  if (!opt.resume.empty()) {
    const Checkpoint ck = load_checkpoint(opt.resume);
    tc = ck.config;
    tc.iterations = opt.iters;  // extend or shorten the target
    if (opt.data.empty()) throw ConfigError("--data is required");
    ds = split(load_csv(opt.data), ck.train_fraction, ck.split_seed);
    if (ck.noise.applied)
      ds = inject_noise(std::move(ds), ck.noise.fraction, ck.noise.amplitude,
                        ck.noise.seed);
    ds = standardize(std::move(ds));
    if (ds.source_hash != ck.data_hash)
      throw ConfigError("resume: data file does not match the checkpoint");
    spec = make_physics_spec(ck.model, ck.gamma, tc);
    res = train(ds, spec, tc, &ck.state, &std::cerr);
  } else {
    ds = build_dataset(opt);
    tc = opt.train_config(opt.seed);
    spec = make_physics_spec(physics_model_from_string(opt.physics), opt.gamma, tc);
    res = train(ds, spec, tc, nullptr, &std::cerr);
  }
  StagedDir dir(opt.out);
  save_checkpoint(dir.path("checkpoint.json"), res, ds);
  write_text(dir.path("config_echo.toml"), config_echo);
  dir.commit();
  if (!res.state.abort_reason.empty()) {
    std::cerr << "training aborted: " << res.state.abort_reason << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

inline int cmd_eval(const CliOptions& opt, const std::string& config_echo) {
  EvalOutput ev;
  std::uint64_t seed = opt.seed;
  if (opt.baseline == "calibrated-lwr") {
    if (opt.data.empty()) throw ConfigError("--data is required");
    Dataset ds = split(load_csv(opt.data), opt.train_frac, opt.seed);
    ev = baseline_calibrated_physical(ds);
  } else if (opt.baseline == "pure-gp") {
    ev = baseline_pure_gp(build_dataset(opt), opt.train_config(opt.seed));
  } else if (!opt.baseline.empty()) {
    throw ConfigError("unknown --baseline: " + opt.baseline +
                      " (expected pure-gp|calibrated-lwr)");
  } else {
    if (opt.ckpt.empty()) throw ConfigError("--ckpt or --baseline is required");
    const Checkpoint ck = load_checkpoint(opt.ckpt);
    if (opt.data.empty()) throw ConfigError("--data is required");
    Dataset ds = split(load_csv(opt.data), ck.train_fraction, ck.split_seed);
    if (ck.noise.applied)
      ds = inject_noise(std::move(ds), ck.noise.fraction, ck.noise.amplitude,
                        ck.noise.seed);
    ds = standardize(std::move(ds));
    if (ds.source_hash != ck.data_hash)
      throw ConfigError("eval: data file does not match the checkpoint");
    // Refit at the stored parameters without taking any further steps.
    TrainConfig tc = ck.config;
    tc.iterations = ck.state.iteration;
    const PhysicsSpec spec = make_physics_spec(ck.model, ck.gamma, tc);
    const TrainResult res = train(ds, spec, tc, &ck.state);
    ev = evaluate_ensemble(res.ensemble, ds);
    ev.report.model =
        ck.model == PhysicsModel::None ? "pure-gp" : to_string(ck.model) + "-prgp";
    seed = ck.config.seed;
  }
  ev.report.dataset = opt.noise ? "noisy" : "clean";
  ev.report.seed = seed;

  StagedDir dir(opt.out);
  std::ofstream rep(dir.path("metrics.csv"), std::ios::binary);
  rep << kReportCsvHeader << "\n" << report_csv_row(ev.report) << "\n";
  rep.close();
  write_scatter_csv(dir.path("scatter_flow.csv"), ev.scatter.flow_truth,
                    ev.scatter.flow_pred);
  write_scatter_csv(dir.path("scatter_speed.csv"), ev.scatter.speed_truth,
                    ev.scatter.speed_pred);
  write_text(dir.path("config_echo.toml"), config_echo);
  dir.commit();
  return kExitOk;
}

inline int cmd_matrix(const CliOptions& opt, const std::string& config_echo) {
  if (opt.data.empty()) throw ConfigError("--data is required");
  const Dataset source = load_csv(opt.data);

  MatrixConfig mc;
  mc.models.clear();
  for (const auto& name : opt.models)
    mc.models.push_back(physics_model_from_string(name));
  mc.seeds.clear();
  for (int k = 0; k < opt.seeds; ++k) mc.seeds.push_back(opt.seed + k);
  mc.include_noisy = opt.noise;
  mc.noise_fraction = opt.noise_fraction;
  mc.noise_amplitude = opt.noise_amplitude;
  mc.train_fraction = opt.train_frac;
  mc.gamma = opt.gamma;
  mc.train = opt.train_config(opt.seed);

  StagedDir dir(opt.out);
  experiment_matrix(source, mc, dir.path(""));
  write_text(dir.path("config_echo.toml"), config_echo);
  dir.commit();
  return kExitOk;
}

}  // namespace cli_detail

/// Build the option tree, parse, dispatch, and map errors to exit codes.
inline int run_cli(int argc, const char* const* argv) {
  CliOptions opt;
  CLI::App app{"Physics-regularized Gaussian-process traffic state estimation"};
  app.set_config("--config", "", "Read options from a TOML/INI config file");
  app.require_subcommand(1);

  const auto add_out = [&](CLI::App* c) {
    c->add_option("--out", opt.out, "Output directory (created atomically)");
    c->add_option("--seed", opt.seed, "Base RNG seed")->capture_default_str();
  };
  const auto add_data = [&](CLI::App* c) {
    c->add_option("--data", opt.data, "Sensor CSV file");
    c->add_option("--train-frac", opt.train_frac,
                  "Fraction of rows assigned to training")
        ->capture_default_str();
    c->add_flag("--noise", opt.noise, "Corrupt a training subset's flows");
    c->add_option("--noise-fraction", opt.noise_fraction,
                  "Fraction of training rows corrupted")
        ->capture_default_str();
    c->add_option("--noise-amplitude", opt.noise_amplitude,
                  "Uniform flow-noise amplitude, veh/5min")
        ->capture_default_str();
  };
  const auto add_train = [&](CLI::App* c) {
    c->add_option("--physics", opt.physics,
                  "Residual model: none|lwr|pw|arz|heat")
        ->capture_default_str();
    c->add_option("--gamma", opt.gamma,
                  "Regularization strength(s), one or per-equation")
        ->delimiter(',');
    c->add_option("--m", opt.m, "Pseudo-points per iteration")
        ->capture_default_str();
    c->add_option("--iters", opt.iters, "Training iterations")
        ->capture_default_str();
    c->add_option("--lr", opt.lr, "Adam learning rate")->capture_default_str();
  };

  CLI::App* sim = app.add_subcommand(
      "simulate", "Solve the conservation law and emit field + sensor CSVs");
  sim->add_option("--length", opt.sim_length, "Domain length, miles")
      ->capture_default_str();
  sim->add_option("--horizon", opt.sim_horizon, "Horizon, hours")
      ->capture_default_str();
  sim->add_option("--dx", opt.sim_dx, "Cell width, miles")->capture_default_str();
  sim->add_option("--dt", opt.sim_dt, "Step, hours")->capture_default_str();
  sim->add_option("--vf", opt.sim_vf, "Free-flow speed, mph")
      ->capture_default_str();
  sim->add_option("--rho-jam", opt.sim_rho_jam, "Jam density, veh/mile")
      ->capture_default_str();
  sim->add_option("--rho-init", opt.sim_rho_init,
                  "Initial density pieces from:value (miles:veh/mile)")
      ->delimiter(',');
  sim->add_option("--inflow", opt.sim_inflow,
                  "Upstream inflow pieces from:value (hours:veh/hour)")
      ->delimiter(',');
  sim->add_option("--sensors", opt.sensors, "Sensor mileposts")->delimiter(',');
  sim->add_option("--period-min", opt.sensor_period_min,
                  "Sensor reporting period, minutes")
      ->capture_default_str();
  sim->add_option("--sigma-q", opt.sensor_sigma_q,
                  "Flow measurement noise sigma, veh/5min")
      ->capture_default_str();
  sim->add_option("--sigma-v", opt.sensor_sigma_v,
                  "Speed measurement noise sigma, mph")
      ->capture_default_str();
  add_out(sim);

  CLI::App* tr = app.add_subcommand("train", "Fit the regularized GP ensemble");
  add_data(tr);
  add_train(tr);
  tr->add_option("--resume", opt.resume, "Checkpoint to continue from");
  add_out(tr);

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint or baseline");
  add_data(ev);
  ev->add_option("--ckpt", opt.ckpt, "Trained checkpoint JSON");
  ev->add_option("--baseline", opt.baseline,
                 "Baseline instead of a checkpoint: pure-gp|calibrated-lwr");
  add_train(ev);
  add_out(ev);

  CLI::App* mx = app.add_subcommand(
      "matrix", "Run the {model} x {clean,noisy} x {seed} sweep");
  add_data(mx);
  add_train(mx);
  mx->add_option("--models", opt.models, "Models to include")->delimiter(',');
  mx->add_option("--seeds", opt.seeds, "Number of consecutive seeds")
      ->capture_default_str();
  add_out(mx);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const std::string config_echo = app.config_to_str(true, true);
  try {
    if (sim->parsed()) return cli_detail::cmd_simulate(opt, config_echo);
    if (tr->parsed()) return cli_detail::cmd_train(opt, config_echo);
    if (ev->parsed()) return cli_detail::cmd_eval(opt, config_echo);
    if (mx->parsed()) return cli_detail::cmd_matrix(opt, config_echo);
    throw ConfigError("no subcommand given");
  } catch (const MetricError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMetric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace prgp

#endif  // PRGP_CLI_HPP
