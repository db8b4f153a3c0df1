#ifndef PRGP_PHYSICS_HPP
#define PRGP_PHYSICS_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "prgp/errors.hpp"
#include "prgp/gp.hpp"
#include "prgp/kernels.hpp"

namespace prgp {

enum class PhysicsModel { None, Lwr, Pw, Arz, Heat };

inline std::string to_string(PhysicsModel m) {
  switch (m) {
    case PhysicsModel::None: return "none";
    case PhysicsModel::Lwr: return "lwr";
    case PhysicsModel::Pw: return "pw";
    case PhysicsModel::Arz: return "arz";
    case PhysicsModel::Heat: return "heat";
  }
  throw std::invalid_argument("unknown physics model");
}

inline PhysicsModel physics_model_from_string(const std::string& s) {
  if (s == "none") return PhysicsModel::None;
  if (s == "lwr") return PhysicsModel::Lwr;
  if (s == "pw") return PhysicsModel::Pw;
  if (s == "arz") return PhysicsModel::Arz;
  if (s == "heat") return PhysicsModel::Heat;
  throw ConfigError("unknown physics model: " + s +
                    " (expected none|lwr|pw|arz|heat)");
}

/// Number of residual equations each model contributes.
inline int equation_count(PhysicsModel m) {
  switch (m) {
    case PhysicsModel::None: return 0;
    case PhysicsModel::Lwr: return 1;
    case PhysicsModel::Pw: return 2;
    case PhysicsModel::Arz: return 2;
    case PhysicsModel::Heat: return 1;
  }
  throw std::invalid_argument("unknown physics model");
}

/// Greenshields density-speed relation with trainable v_f and rho_jam.
struct FundamentalDiagram {
  double v_f = 65.0;       // free-flow speed, mph
  double rho_jam = 200.0;  // jam density, veh/mile

  /// V(rho) = v_f (1 - rho/rho_jam), clamped at zero beyond jam density.
  double speed(double rho) const {
    return std::max(v_f * (1.0 - rho / rho_jam), 0.0);
  }

  /// Equilibrium flow q(rho) = rho V(rho), veh/hour.
  double flow(double rho) const { return rho * speed(rho); }

  /// dV/drho; zero where the speed clamp is active.
  double speed_slope(double rho) const {
    return (rho < rho_jam) ? -v_f / rho_jam : 0.0;
  }

  double critical_density() const { return 0.5 * rho_jam; }
};

/// Density floor (veh/mile) for singular terms, and the clamp applied to
/// densities before any fundamental-diagram evaluation inside residuals:
/// posterior samples can stray outside the physical range.
inline constexpr double kRhoMin = 1.0;

inline double clamp_density(double rho, const FundamentalDiagram& fd) {
  return std::clamp(rho, kRhoMin, 1.5 * fd.rho_jam);
}

/// Physics configuration: which model regularizes the GPs, its parameters,
/// per-equation strengths gamma_w and per-equation shadow kernels.
struct PhysicsSpec {
  PhysicsModel model = PhysicsModel::None;
  FundamentalDiagram fd;
  double tau0 = 30.0 / 3600.0;  // relaxation time, hours
  double c0_sq = 100.0;         // anticipation, mph^2
  double beta1 = 1.0;           // diffusivity (heat model)
  std::vector<double> gamma;          // one per residual equation
  std::vector<KernelParams> shadow;   // one per residual equation

  void validate() const {
    const auto w = static_cast<std::size_t>(equation_count(model));
    if (gamma.size() != w || shadow.size() != w)
      throw ConfigError("PhysicsSpec: need " + std::to_string(w) +
                        " gamma/shadow entries for model " + to_string(model));
    for (double g : gamma)
      if (!(g >= 0.0)) throw ConfigError("PhysicsSpec: gamma must be >= 0");
    if (!(fd.v_f > 0.0) || !(fd.rho_jam > 0.0) || !(tau0 > 0.0) ||
        !(c0_sq > 0.0) || !(beta1 > 0.0))
      throw ConfigError("PhysicsSpec: physical parameters must be positive");
  }

  bool active() const {
    if (model == PhysicsModel::None) return false;
    for (double g : gamma)
      if (g > 0.0) return true;
    return false;
  }
};

/// One output field evaluated at the pseudo-points, in physical units,
/// with space (per mile) and time (per hour) derivatives of the frozen-eps
/// sample path.
struct SampledField {
  Eigen::VectorXd value;
  Eigen::VectorXd dx;
  Eigen::VectorXd dt;
  Eigen::VectorXd dxx;
};

/// The three traffic outputs at the pseudo-points. Flow is in veh/hour here;
/// conversion from the veh/5min data unit happens when the set is built.
struct FieldSet {
  SampledField rho;   // veh/mile
  SampledField v;     // mph
  SampledField q_hr;  // veh/hour
  Eigen::Index size() const { return rho.value.size(); }
};

/// Residual vectors at the pseudo-points. A model may emit several channels
/// per equation (the heat model penalizes each output field separately);
/// gamma_index maps a channel back to its gamma/shadow-kernel slot.
struct ResidualBatch {
  Eigen::MatrixXd Z;  // m x 2 pseudo-point locations (physical x, t)
  std::vector<Eigen::VectorXd> channels;
  std::vector<int> gamma_index;
};

/// Conservation residual using the flow GP directly:
/// g1 = d rho/dt + d q/dx, in veh/mile/hour.
inline Eigen::VectorXd lwr_residual(const FieldSet& f) {
  return f.rho.dt + f.q_hr.dx;
}

/// Continuity residual in product form, shared by the second-order models:
/// g1 = d rho/dt + rho dv/dx + v drho/dx.
inline Eigen::VectorXd continuity_residual(const FieldSet& f) {
  return f.rho.dt + f.rho.value.cwiseProduct(f.v.dx) +
         f.v.value.cwiseProduct(f.rho.dx);
}

/// Momentum residual with relaxation toward V(rho) and anticipation:
/// g2 = dv/dt + v dv/dx + (v - V(rho))/tau0 + (c0^2/rho) drho/dx.
inline Eigen::VectorXd pw_momentum_residual(const FieldSet& f,
                                            const PhysicsSpec& spec) {
  const Eigen::Index m = f.size();
  Eigen::VectorXd g2(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double rho_c = clamp_density(f.rho.value[j], spec.fd);
    g2[j] = f.v.dt[j] + f.v.value[j] * f.v.dx[j] +
            (f.v.value[j] - spec.fd.speed(rho_c)) / spec.tau0 +
            (spec.c0_sq / std::max(f.rho.value[j], kRhoMin)) * f.rho.dx[j];
  }
  return g2;
}

/// Relaxation residual on the velocity offset u = v - V(rho):
/// g2 = du/dt + v du/dx + u/tau0, with dV expanded through the chain rule.
inline Eigen::VectorXd arz_momentum_residual(const FieldSet& f,
                                             const PhysicsSpec& spec) {
  const Eigen::Index m = f.size();
  Eigen::VectorXd g2(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double rho_c = clamp_density(f.rho.value[j], spec.fd);
    const double vp = spec.fd.speed_slope(rho_c);
    const double du_dt = f.v.dt[j] - vp * f.rho.dt[j];
    const double du_dx = f.v.dx[j] - vp * f.rho.dx[j];
    const double u = f.v.value[j] - spec.fd.speed(rho_c);
    g2[j] = du_dt + f.v.value[j] * du_dx + u / spec.tau0;
  }
  return g2;
}

/// Diffusion residual r = dF/dt - beta1 d^2F/dx^2 for one field.
inline Eigen::VectorXd heat_residual_field(const SampledField& f,
                                           double beta1) {
  return f.dt - beta1 * f.dxx;
}

/// Evaluate the active model's residual channels on a sampled field set.
inline ResidualBatch residuals(const PhysicsSpec& spec, const FieldSet& f,
                               const Eigen::MatrixXd& Z) {
  ResidualBatch batch;
  batch.Z = Z;
  switch (spec.model) {
    case PhysicsModel::None:
      break;
    case PhysicsModel::Lwr:
      batch.channels.push_back(lwr_residual(f));
      batch.gamma_index.push_back(0);
      break;
    case PhysicsModel::Pw:
      batch.channels.push_back(continuity_residual(f));
      batch.gamma_index.push_back(0);
      batch.channels.push_back(pw_momentum_residual(f, spec));
      batch.gamma_index.push_back(1);
      break;
    case PhysicsModel::Arz:
      batch.channels.push_back(continuity_residual(f));
      batch.gamma_index.push_back(0);
      batch.channels.push_back(arz_momentum_residual(f, spec));
      batch.gamma_index.push_back(1);
      break;
    case PhysicsModel::Heat:
      // One equation applied to each output field; all three channels share
      // gamma_0 and the single shadow kernel.
      batch.channels.push_back(heat_residual_field(f.rho, spec.beta1));
      batch.channels.push_back(heat_residual_field(f.v, spec.beta1));
      batch.channels.push_back(heat_residual_field(f.q_hr, spec.beta1));
      batch.gamma_index.assign(3, 0);
      break;
  }
  for (const auto& g : batch.channels)
    if (!g.allFinite())
      throw NumericError("physics residual contains non-finite entries");
  return batch;
}

/// log N(g | 0, K_hat) where K_hat is the shadow kernel's Gram matrix on the
/// pseudo-point locations (jittered to SPD). This is the per-equation
/// regularizer term: the pseudo-observations are identically zero.
inline double shadow_gp_log_density(const Eigen::VectorXd& g,
                                    const KernelParams& shadow,
                                    const Eigen::MatrixXd& Z) {
  if (g.size() != Z.rows())
    throw std::invalid_argument("shadow_gp_log_density: size mismatch");
  const Eigen::MatrixXd K = kernel_matrix(shadow, Z, Z);
  const Eigen::LLT<Eigen::MatrixXd> llt = cholesky_with_jitter(K);
  const Eigen::VectorXd a = llt.solve(g);
  const Eigen::MatrixXd L = llt.matrixL();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += std::log(L(i, i));
  const double m = static_cast<double>(g.size());
  return -0.5 * g.dot(a) - logdet - 0.5 * m * std::log(2.0 * std::numbers::pi);
}

/// Dump residual channels for inspection: one row per pseudo-point.
inline void write_residual_csv(const std::string& path,
                               const ResidualBatch& batch) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write residual CSV: " + path);
  out << "z_x,z_t";
  for (std::size_t c = 0; c < batch.channels.size(); ++c)
    out << ",g_" << (c + 1);
  out << "\n";
  out.precision(17);
  for (Eigen::Index j = 0; j < batch.Z.rows(); ++j) {
    out << batch.Z(j, 0) << "," << batch.Z(j, 1);
    for (const auto& g : batch.channels) out << "," << g[j];
    out << "\n";
  }
}

}  // namespace prgp

#endif  // PRGP_PHYSICS_HPP
