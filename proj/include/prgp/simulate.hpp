#ifndef PRGP_SIMULATE_HPP
#define PRGP_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "prgp/dataio.hpp"
#include "prgp/errors.hpp"
#include "prgp/physics.hpp"
#include "prgp/rng.hpp"

namespace prgp {

/// Piecewise-constant profile: value holds from x_from to the next piece.
struct ProfilePiece {
  double from = 0.0;
  double value = 0.0;
};

inline double piecewise_at(const std::vector<ProfilePiece>& pieces, double x) {
  if (pieces.empty()) return 0.0;
  double v = pieces.front().value;
  for (const auto& p : pieces)
    if (p.from <= x) v = p.value;
  return v;
}

struct SimConfig {
  double length = 2.0;          // miles
  double horizon = 1.0;         // hours
  double dx = 0.01;             // cell width, miles
  double dt = 1.0 / 7200.0;     // step, hours (0.5 s)
  FundamentalDiagram fd;
  std::vector<ProfilePiece> initial_density;  // veh/mile over x
  std::vector<ProfilePiece> inflow;           // veh/hour over t (upstream demand)
  int record_every = 600;       // steps between stored snapshots

  int cells() const { return static_cast<int>(std::llround(length / dx)); }
  int steps() const { return static_cast<int>(std::llround(horizon / dt)); }

  void validate() const {
    if (!(length > 0.0) || !(horizon > 0.0) || !(dx > 0.0) || !(dt > 0.0))
      throw ConfigError("SimConfig: lengths and steps must be positive");
    if (cells() < 2) throw ConfigError("SimConfig: need at least 2 cells");
    if (record_every < 1) throw ConfigError("SimConfig: record_every must be >= 1");
    // CFL: the fastest characteristic speed of the Greenshields flux is v_f
    if (dt * fd.v_f > dx * (1.0 + 1e-12))
      throw ConfigError("SimConfig: CFL violated, need dt*v_f <= dx");
  }
};

/// Recorded space-time field with per-step conservation audit.
struct FieldGrid {
  std::vector<double> x;  // cell centers, miles
  std::vector<double> t;  // snapshot times, hours
  std::vector<std::vector<double>> rho;  // [time][cell], veh/mile
  FundamentalDiagram fd;
  double max_mass_residual = 0.0;  // worst per-step conservation defect, veh

  double speed(std::size_t n, std::size_t i) const { return fd.speed(rho[n][i]); }
  double flow(std::size_t n, std::size_t i) const { return fd.flow(rho[n][i]); }
};

namespace detail {

inline double demand(const FundamentalDiagram& fd, double rho) {
  return fd.flow(std::min(rho, fd.critical_density()));
}

inline double supply(const FundamentalDiagram& fd, double rho) {
  return fd.flow(std::max(rho, fd.critical_density()));
}

}  // namespace detail

/// One forward-Euler finite-volume update with the Godunov interface flux
/// min(demand_left, supply_right). Upstream flux is the inflow demand capped
/// by the first cell's supply; downstream outflow is free (uncapped demand).
/// Boundary fluxes are reported for conservation audits.
inline std::vector<double> godunov_step(const std::vector<double>& rho,
                                        const SimConfig& cfg, double q_in,
                                        double* flux_in = nullptr,
                                        double* flux_out = nullptr) {
  const int n = static_cast<int>(rho.size());
  const double lam = cfg.dt / cfg.dx;
  std::vector<double> flux(n + 1);
  flux[0] = std::min(std::max(q_in, 0.0), detail::supply(cfg.fd, rho[0]));
  for (int i = 1; i < n; ++i)
    flux[i] = std::min(detail::demand(cfg.fd, rho[i - 1]),
                       detail::supply(cfg.fd, rho[i]));
  flux[n] = detail::demand(cfg.fd, rho[n - 1]);

  std::vector<double> next(n);
  for (int i = 0; i < n; ++i)
    next[i] = rho[i] - lam * (flux[i + 1] - flux[i]);
  if (flux_in) *flux_in = flux[0];
  if (flux_out) *flux_out = flux[n];
  return next;
}

inline FieldGrid run_simulation(const SimConfig& cfg) {
  cfg.validate();
  const int n = cfg.cells();
  const int steps = cfg.steps();

  FieldGrid grid;
  grid.fd = cfg.fd;
  grid.x.resize(n);
  for (int i = 0; i < n; ++i) grid.x[i] = (i + 0.5) * cfg.dx;

  std::vector<double> rho(n);
  for (int i = 0; i < n; ++i)
    rho[i] = std::clamp(piecewise_at(cfg.initial_density, grid.x[i]), 0.0,
                        cfg.fd.rho_jam);

  const auto record = [&](int step) {
    grid.t.push_back(step * cfg.dt);
    grid.rho.push_back(rho);
  };
  record(0);

  for (int s = 0; s < steps; ++s) {
    const double tn = s * cfg.dt;
    const double q_in = piecewise_at(cfg.inflow, tn);
    double mass_before = 0.0;
    for (double r : rho) mass_before += r * cfg.dx;

    double fin = 0.0, fout = 0.0;
    rho = godunov_step(rho, cfg, q_in, &fin, &fout);

    double mass_after = 0.0;
    for (double r : rho) mass_after += r * cfg.dx;
    const double residual =
        std::abs(mass_after - mass_before - cfg.dt * (fin - fout));
    grid.max_mass_residual = std::max(grid.max_mass_residual, residual);

    if ((s + 1) % cfg.record_every == 0 || s + 1 == steps) record(s + 1);
  }
  return grid;
}

inline void write_field_csv(const std::string& path, const FieldGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write field CSV: " + path);
  out << "t,x,rho,v,q\n";
  for (std::size_t ni = 0; ni < grid.t.size(); ++ni)
    for (std::size_t i = 0; i < grid.x.size(); ++i)
      out << fmt_double(grid.t[ni]) << "," << fmt_double(grid.x[i]) << ","
          << fmt_double(grid.rho[ni][i]) << "," << fmt_double(grid.speed(ni, i))
          << "," << fmt_double(grid.flow(ni, i)) << "\n";
}

/// Epoch base for synthetic timestamps, chosen on a 5-minute boundary so
/// emitted rows are bin-aligned.
inline constexpr std::int64_t kSensorEpoch = 1600000200;

struct SensorRow {
  std::string station_id;
  std::int64_t timestamp = 0;
  double x = 0.0;       // milepost, miles
  double q_5min = 0.0;  // veh per 5-min bin
  double v = 0.0;       // mph
};

/// Sample the field at fixed sensor positions every `period_min` minutes of
/// simulated time, adding seeded Gaussian measurement noise. The draw order
/// is (flow, speed) per sensor, sensors in position order per snapshot.
inline std::vector<SensorRow> virtual_sensors(const FieldGrid& grid,
                                              const std::vector<double>& positions,
                                              double period_min, double sigma_q,
                                              double sigma_v,
                                              std::uint64_t seed) {
  if (grid.x.empty() || grid.t.empty())
    throw ConfigError("virtual_sensors: empty field grid");
  std::vector<int> cell(positions.size());
  for (std::size_t s = 0; s < positions.size(); ++s) {
    if (positions[s] < grid.x.front() - 1e-12 ||
        positions[s] > grid.x.back() + 1e-12)
      throw ConfigError("virtual_sensors: sensor position outside the domain");
    int best = 0;
    for (std::size_t i = 1; i < grid.x.size(); ++i)
      if (std::abs(grid.x[i] - positions[s]) <
          std::abs(grid.x[best] - positions[s]))
        best = static_cast<int>(i);
    cell[s] = best;
  }

  const double period_h = period_min / 60.0;
  Rng rng(seed);
  std::vector<SensorRow> rows;
  for (std::size_t ni = 0; ni < grid.t.size(); ++ni) {
    const double tn = grid.t[ni];
    const double bins = tn / period_h;
    if (std::abs(bins - std::round(bins)) > 1e-9) continue;
    for (std::size_t s = 0; s < positions.size(); ++s) {
      SensorRow row;
      char sid[32];
      std::snprintf(sid, sizeof(sid), "S%02zu", s + 1);
      row.station_id = sid;
      row.timestamp = kSensorEpoch + static_cast<std::int64_t>(std::llround(tn * 3600.0));
      row.x = grid.x[cell[s]];
      const double q_hr = grid.flow(ni, cell[s]);
      row.q_5min = std::max(q_hr / 12.0 + sigma_q * rng.normal(), 0.0);
      row.v = std::max(grid.speed(ni, cell[s]) + sigma_v * rng.normal(), 0.1);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline void write_sensor_csv(const std::string& path,
                             const std::vector<SensorRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write sensor CSV: " + path);
  out << kSensorCsvHeader << "\n";
  for (const auto& r : rows)
    out << r.station_id << "," << r.timestamp << "," << fmt_double(r.x) << ","
        << fmt_double(r.q_5min) << "," << fmt_double(r.v) << "\n";
}

}  // namespace prgp

#endif  // PRGP_SIMULATE_HPP
