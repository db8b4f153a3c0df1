#ifndef PRGP_EVALUATE_HPP
#define PRGP_EVALUATE_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "prgp/dataio.hpp"
#include "prgp/errors.hpp"
#include "prgp/simulate.hpp"
#include "prgp/trainer.hpp"

namespace prgp {

inline double rmse(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("rmse: length mismatch");
  if (truth.size() < 1) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((truth - pred).squaredNorm() /
                   static_cast<double>(truth.size()));
}

inline constexpr double kMapeZeroTruth = 1e-6;

/// Mean absolute percentage error over rows with |truth| >= 1e-6; the
/// number of excluded rows is reported through `excluded`.
inline double mape(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred,
                   std::size_t* excluded = nullptr) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("mape: length mismatch");
  double acc = 0.0;
  std::size_t kept = 0, skipped = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (std::abs(truth[i]) < kMapeZeroTruth) {
      ++skipped;
      continue;
    }
    acc += std::abs(truth[i] - pred[i]) / std::abs(truth[i]);
    ++kept;
  }
  if (excluded) *excluded = skipped;
  if (kept == 0)
    throw MetricError("mape undefined: all rows filtered as near-zero truth");
  return 100.0 * acc / static_cast<double>(kept);
}

struct TrendLine {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Ordinary least squares of pred on truth; slope near 1 means the scatter
/// hugs the diagonal.
inline TrendLine ols_trend(const Eigen::VectorXd& truth,
                           const Eigen::VectorXd& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("ols_trend: length mismatch");
  if (truth.size() < 2)
    throw MetricError("trend line undefined: need at least 2 points");
  const double mx = truth.mean(), my = pred.mean();
  const double sxx = (truth.array() - mx).square().sum();
  if (sxx <= 0.0)
    throw MetricError("trend line undefined: zero variance in truth");
  const double sxy = ((truth.array() - mx) * (pred.array() - my)).sum();
  TrendLine t;
  t.slope = sxy / sxx;
  t.intercept = my - t.slope * mx;
  return t;
}

struct MetricReport {
  std::string model;
  std::string dataset;
  std::uint64_t seed = 0;
  double flow_rmse = 0.0;   // veh per 5-min bin
  double flow_mape = 0.0;   // percent
  double speed_rmse = 0.0;  // mph
  double speed_mape = 0.0;  // percent
  TrendLine flow_trend;
  TrendLine speed_trend;
  std::size_t n_test = 0;
  std::size_t flow_mape_excluded = 0;
  std::size_t speed_mape_excluded = 0;
  std::string config_hash;
};

inline constexpr const char* kReportCsvHeader =
    "model,dataset,flow_rmse,flow_mape,speed_rmse,speed_mape,slope_flow,"
    "intercept_flow,slope_speed,intercept_speed,seed";

inline std::string report_csv_row(const MetricReport& r) {
  return r.model + "," + r.dataset + "," + fmt_double(r.flow_rmse) + "," +
         fmt_double(r.flow_mape) + "," + fmt_double(r.speed_rmse) + "," +
         fmt_double(r.speed_mape) + "," + fmt_double(r.flow_trend.slope) + "," +
         fmt_double(r.flow_trend.intercept) + "," +
         fmt_double(r.speed_trend.slope) + "," +
         fmt_double(r.speed_trend.intercept) + "," + std::to_string(r.seed);
}

/// Truth/prediction pairs on the test split, in test-row order.
struct ScatterData {
  Eigen::VectorXd flow_truth, flow_pred;
  Eigen::VectorXd speed_truth, speed_pred;
};

inline void write_scatter_csv(const std::string& path,
                              const Eigen::VectorXd& truth,
                              const Eigen::VectorXd& pred) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write scatter CSV: " + path);
  out << "truth,pred\n";
  for (Eigen::Index i = 0; i < truth.size(); ++i)
    out << fmt_double(truth[i]) << "," << fmt_double(pred[i]) << "\n";
}

struct EvalOutput {
  MetricReport report;
  ScatterData scatter;
};

namespace detail {

inline MetricReport metrics_from_scatter(const ScatterData& sc) {
  MetricReport r;
  r.n_test = static_cast<std::size_t>(sc.flow_truth.size());
  r.flow_rmse = rmse(sc.flow_truth, sc.flow_pred);
  r.flow_mape = mape(sc.flow_truth, sc.flow_pred, &r.flow_mape_excluded);
  r.speed_rmse = rmse(sc.speed_truth, sc.speed_pred);
  r.speed_mape = mape(sc.speed_truth, sc.speed_pred, &r.speed_mape_excluded);
  r.flow_trend = ols_trend(sc.flow_truth, sc.flow_pred);
  r.speed_trend = ols_trend(sc.speed_truth, sc.speed_pred);
  return r;
}

}  // namespace detail

/// Test-split metrics for a trained ensemble (posterior means as point
/// predictions, physical units).
inline EvalOutput evaluate_ensemble(const GpEnsemble& ens, const Dataset& data) {
  if (!data.has_split()) throw ConfigError("evaluate: dataset must be split");
  const auto idx = data.test_indices();
  if (idx.empty()) throw ConfigError("evaluate: empty test split");
  const Eigen::MatrixXd Xq = input_matrix(data, idx);
  const EstimateResult est = estimate(ens, Xq);

  EvalOutput out;
  out.scatter.flow_truth = output_vector(data, idx, OutputColumn::Q);
  out.scatter.flow_pred = est.q_mean;
  out.scatter.speed_truth = output_vector(data, idx, OutputColumn::V);
  out.scatter.speed_pred = est.v_mean;
  out.report = detail::metrics_from_scatter(out.scatter);
  return out;
}

/// Train with physics disabled and evaluate: the plain-GP reference row.
inline EvalOutput baseline_pure_gp(const Dataset& data, const TrainConfig& cfg) {
  const PhysicsSpec spec = make_physics_spec(PhysicsModel::None, {}, cfg);
  const TrainResult res = train(data, spec, cfg);
  EvalOutput out = evaluate_ensemble(res.ensemble, data);
  out.report.model = "pure-gp";
  return out;
}

struct FdCalibrationGrid {
  double v_f_lo = 30.0, v_f_hi = 90.0, v_f_step = 1.0;
  double rho_jam_lo = 80.0, rho_jam_hi = 400.0, rho_jam_step = 5.0;
};

/// Dense grid search minimizing the squared speed misfit of the Greenshields
/// relation on (density, speed) pairs. Ties resolve to the first grid point
/// scanned (v_f outer, rho_jam inner, ascending).
inline FundamentalDiagram calibrate_fd(const Eigen::VectorXd& rho,
                                       const Eigen::VectorXd& v,
                                       const FdCalibrationGrid& grid = {}) {
  if (rho.size() != v.size() || rho.size() < 1)
    throw std::invalid_argument("calibrate_fd: bad input sizes");
  FundamentalDiagram best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (double vf = grid.v_f_lo; vf <= grid.v_f_hi + 1e-12; vf += grid.v_f_step) {
    for (double rj = grid.rho_jam_lo; rj <= grid.rho_jam_hi + 1e-12;
         rj += grid.rho_jam_step) {
      const FundamentalDiagram fd{vf, rj};
      double loss = 0.0;
      for (Eigen::Index i = 0; i < rho.size(); ++i) {
        const double d = v[i] - fd.speed(rho[i]);
        loss += d * d;
      }
      if (loss < best_loss) {
        best_loss = loss;
        best = fd;
      }
    }
  }
  return best;
}

/// Classical pipeline baseline: calibrate the fundamental diagram on the
/// training scatter, then drive a conservation-law simulation with the most
/// upstream sensor's flow series and read predictions off the solved field.
inline EvalOutput baseline_calibrated_physical(const Dataset& data,
                                               double dx = 0.01,
                                               const FdCalibrationGrid& grid = {}) {
  if (!data.has_split())
    throw ConfigError("baseline_calibrated_physical: dataset must be split");
  const auto train_idx = data.train_indices();
  const auto test_idx = data.test_indices();
  if (train_idx.empty() || test_idx.empty())
    throw ConfigError("baseline_calibrated_physical: empty split");

  const FundamentalDiagram fd =
      calibrate_fd(output_vector(data, train_idx, OutputColumn::Rho),
                   output_vector(data, train_idx, OutputColumn::V), grid);

  // Geometry: cells spanning the sensor mileposts; time from 0 to the last
  // observation.
  double x_lo = data.samples[0].x, x_hi = data.samples[0].x, t_hi = 0.0;
  for (const auto& s : data.samples) {
    x_lo = std::min(x_lo, s.x);
    x_hi = std::max(x_hi, s.x);
    t_hi = std::max(t_hi, s.t);
  }
  SimConfig sim;
  sim.fd = fd;
  sim.dx = dx;
  sim.length = std::max(x_hi - x_lo, 2.0 * dx) + dx;
  sim.horizon = std::max(t_hi, 1.0 / 12.0);
  sim.dt = 0.9 * dx / fd.v_f;
  sim.record_every =
      std::max(1, static_cast<int>(std::floor(1.0 / 12.0 / sim.dt)));

  // Initial density: training rows at the earliest time, piecewise constant
  // around each sensor; fall back to the training mean when absent.
  double t_first = std::numeric_limits<double>::infinity();
  for (std::size_t i : train_idx)
    t_first = std::min(t_first, data.samples[i].t);
  std::vector<std::pair<double, double>> at_start;  // (x - x_lo, rho)
  for (std::size_t i : train_idx)
    if (data.samples[i].t <= t_first + 1e-9)
      at_start.emplace_back(data.samples[i].x - x_lo, data.samples[i].rho);
  std::sort(at_start.begin(), at_start.end());
  if (at_start.empty()) {
    double mean_rho = 0.0;
    for (std::size_t i : train_idx) mean_rho += data.samples[i].rho;
    at_start.emplace_back(0.0, mean_rho / static_cast<double>(train_idx.size()));
  }
  sim.initial_density.push_back({0.0, at_start.front().second});
  for (std::size_t k = 1; k < at_start.size(); ++k)
    sim.initial_density.push_back(
        {0.5 * (at_start[k - 1].first + at_start[k].first), at_start[k].second});

  // Upstream inflow: the most upstream sensor's training flow as a step
  // series in veh/hour.
  double up_x = std::numeric_limits<double>::infinity();
  for (std::size_t i : train_idx) up_x = std::min(up_x, data.samples[i].x);
  std::vector<std::pair<double, double>> inflow_pts;  // (t, q veh/hr)
  for (std::size_t i : train_idx)
    if (std::abs(data.samples[i].x - up_x) < 1e-9)
      inflow_pts.emplace_back(data.samples[i].t, data.samples[i].q * 12.0);
  std::sort(inflow_pts.begin(), inflow_pts.end());
  if (inflow_pts.empty()) {
    double mean_q = 0.0;
    for (std::size_t i : train_idx) mean_q += data.samples[i].q * 12.0;
    inflow_pts.emplace_back(0.0, mean_q / static_cast<double>(train_idx.size()));
  }
  for (const auto& [tt, qq] : inflow_pts) sim.inflow.push_back({tt, qq});

  const FieldGrid gridout = run_simulation(sim);

  // Predictions: nearest recorded snapshot and nearest cell per test row.
  ScatterData sc;
  const auto n = static_cast<Eigen::Index>(test_idx.size());
  sc.flow_truth.resize(n);
  sc.flow_pred.resize(n);
  sc.speed_truth.resize(n);
  sc.speed_pred.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& s = data.samples[test_idx[static_cast<std::size_t>(k)]];
    std::size_t ci = 0, ti = 0;
    for (std::size_t i = 1; i < gridout.x.size(); ++i)
      if (std::abs(gridout.x[i] - (s.x - x_lo)) <
          std::abs(gridout.x[ci] - (s.x - x_lo)))
        ci = i;
    for (std::size_t i = 1; i < gridout.t.size(); ++i)
      if (std::abs(gridout.t[i] - s.t) < std::abs(gridout.t[ti] - s.t)) ti = i;
    sc.flow_truth[k] = s.q;
    sc.flow_pred[k] = gridout.flow(ti, ci) / 12.0;
    sc.speed_truth[k] = s.v;
    sc.speed_pred[k] = gridout.speed(ti, ci);
  }
  EvalOutput out;
  out.scatter = std::move(sc);
  out.report = detail::metrics_from_scatter(out.scatter);
  out.report.model = "calibrated-lwr";
  return out;
}

// ---------------------------------------------------------------------------
// Experiment matrix

struct MatrixConfig {
  std::vector<PhysicsModel> models{PhysicsModel::None, PhysicsModel::Lwr,
                                   PhysicsModel::Pw, PhysicsModel::Arz,
                                   PhysicsModel::Heat};
  std::vector<std::uint64_t> seeds{0};
  bool include_noisy = false;
  double noise_fraction = 0.5;
  double noise_amplitude = 100.0;  // veh per 5-min bin
  double train_fraction = 0.5;
  std::vector<double> gamma;  // broadcast per model; empty means 1.0
  TrainConfig train;
};

struct MatrixFailure {
  std::string model;
  std::string dataset;
  std::uint64_t seed = 0;
  std::string error;
};

struct MatrixResult {
  std::vector<MetricReport> reports;
  std::vector<MatrixFailure> failures;
};

/// Run {models} x {clean[, noisy]} x {seeds} on one source dataset, writing
/// report.csv, failures.csv, and per-cell scatter files into out_dir.
/// A failing cell is recorded and the sweep continues.
inline MatrixResult experiment_matrix(const Dataset& source,
                                      const MatrixConfig& mc,
                                      const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  MatrixResult result;

  for (const std::uint64_t seed : mc.seeds) {
    const Dataset base =
        standardize(split(source, mc.train_fraction, seed));
    std::vector<std::pair<std::string, Dataset>> variants;
    variants.emplace_back("clean", base);
    if (mc.include_noisy)
      variants.emplace_back(
          "noisy", standardize(inject_noise(split(source, mc.train_fraction, seed),
                                            mc.noise_fraction,
                                            mc.noise_amplitude, seed)));

    for (const auto& [dslabel, ds] : variants) {
      for (const PhysicsModel model : mc.models) {
        const std::string mlabel =
            model == PhysicsModel::None ? "pure-gp" : to_string(model) + "-prgp";
        try {
          TrainConfig tc = mc.train;
          tc.seed = seed;
          const PhysicsSpec spec = make_physics_spec(model, mc.gamma, tc);
          const TrainResult res = train(ds, spec, tc);
          EvalOutput ev = evaluate_ensemble(res.ensemble, ds);
          ev.report.model = mlabel;
          ev.report.dataset = dslabel;
          ev.report.seed = seed;
          ev.report.config_hash = ds.source_hash;
          result.reports.push_back(ev.report);

          const std::string stem = out_dir + "/scatter_" + mlabel + "_" +
                                   dslabel + "_seed" + std::to_string(seed);
          write_scatter_csv(stem + "_flow.csv", ev.scatter.flow_truth,
                            ev.scatter.flow_pred);
          write_scatter_csv(stem + "_speed.csv", ev.scatter.speed_truth,
                            ev.scatter.speed_pred);
        } catch (const Error& e) {
          result.failures.push_back({mlabel, dslabel, seed, e.what()});
        }
      }
    }
  }

  std::ofstream rep(out_dir + "/report.csv", std::ios::binary);
  if (!rep) throw ConfigError("cannot write report.csv in " + out_dir);
  rep << kReportCsvHeader << "\n";
  for (const auto& r : result.reports) rep << report_csv_row(r) << "\n";
  rep.close();

  std::ofstream fail(out_dir + "/failures.csv", std::ios::binary);
  if (!fail) throw ConfigError("cannot write failures.csv in " + out_dir);
  fail << "model,dataset,seed,error\n";
  for (const auto& f : result.failures)
    fail << f.model << "," << f.dataset << "," << f.seed << ",\""
         << f.error << "\"\n";
  return result;
}

}  // namespace prgp

#endif  // PRGP_EVALUATE_HPP
