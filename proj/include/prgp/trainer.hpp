#ifndef PRGP_TRAINER_HPP
#define PRGP_TRAINER_HPP

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "prgp/dataio.hpp"
#include "prgp/errors.hpp"
#include "prgp/gp.hpp"
#include "prgp/kernels.hpp"
#include "prgp/physics.hpp"
#include "prgp/rng.hpp"

namespace prgp {

struct TrainConfig {
  int m = 10;                  // pseudo-points sampled per iteration
  int iterations = 500;
  double learning_rate = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  DomainBox box;               // pseudo-point domain, physical coordinates
  bool box_from_data = true;   // default the box to the training hull
  int elbo_samples = 1;        // (Z, eps) draws averaged per iteration
  int stop_window = 50;        // iterations per stopping-rule window
  double stop_rel_tol = 1e-6;  // relative mean-ELBO improvement threshold
  KernelFamily kernel_family = KernelFamily::Compound;
  double init_signal_variance = 1.0;
  double init_lengthscale = 0.5;       // standardized input units
  double init_noise_precision = 10.0;  // noise variance 0.1 of unit target
  double fd_step = 1e-5;               // central-difference step, log space

  void validate() const {
    if (m < 1) throw ConfigError("TrainConfig: m must be >= 1");
    if (iterations < 0) throw ConfigError("TrainConfig: iterations must be >= 0");
    if (!(learning_rate > 0.0))
      throw ConfigError("TrainConfig: learning rate must be > 0");
    if (elbo_samples < 1)
      throw ConfigError("TrainConfig: elbo_samples must be >= 1");
    if (stop_window < 1) throw ConfigError("TrainConfig: stop_window must be >= 1");
    if (!box_from_data && !(box.x_min <= box.x_max && box.t_min <= box.t_max))
      throw ConfigError("TrainConfig: invalid pseudo-point box");
  }
};

/// The three independent output GPs (density, speed, flow) fitted on
/// standardized training data, plus the constants to undo the scaling.
struct GpEnsemble {
  std::vector<GpModel> models;  // order: rho, v, q
  Standardization stats;

  static constexpr std::array<const char*, 3> kOutputNames{"rho", "v", "q"};
};

inline Eigen::MatrixXd standardize_inputs(const Standardization& st,
                                          const Eigen::MatrixXd& X_phys) {
  Eigen::MatrixXd Z(X_phys.rows(), 2);
  for (Eigen::Index j = 0; j < X_phys.rows(); ++j) {
    Z(j, 0) = st.x.to_std(X_phys(j, 0));
    Z(j, 1) = st.t.to_std(X_phys(j, 1));
  }
  return Z;
}

inline GpEnsemble build_ensemble(const Dataset& data, const TrainConfig& cfg) {
  if (!data.has_split() || !data.stats.fitted)
    throw ConfigError("build_ensemble: dataset must be split and standardized");
  const auto idx = data.train_indices();
  const Eigen::MatrixXd X = standardize_inputs(data.stats, input_matrix(data, idx));
  GpEnsemble ens;
  ens.stats = data.stats;
  const std::array<OutputColumn, 3> cols{OutputColumn::Rho, OutputColumn::V,
                                         OutputColumn::Q};
  const std::array<const ColumnStats*, 3> st{&data.stats.rho, &data.stats.v,
                                             &data.stats.q};
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd y = output_vector(data, idx, cols[i]);
    for (Eigen::Index k = 0; k < y.size(); ++k) y[k] = st[i]->to_std(y[k]);
    ens.models.emplace_back(
        X, y,
        KernelParams::make(cfg.kernel_family, 2, cfg.init_signal_variance,
                           cfg.init_lengthscale, cfg.init_noise_precision));
  }
  return ens;
}

/// Fill per-equation strengths and shadow kernels for a model choice.
/// A single gamma value broadcasts across equations.
inline PhysicsSpec make_physics_spec(PhysicsModel model,
                                     std::vector<double> gamma_in,
                                     const TrainConfig& cfg) {
  PhysicsSpec spec;
  spec.model = model;
  const auto w = static_cast<std::size_t>(equation_count(model));
  if (gamma_in.empty())
    spec.gamma.assign(w, 1.0);
  else if (gamma_in.size() == 1)
    spec.gamma.assign(w, gamma_in[0]);
  else if (gamma_in.size() == w)
    spec.gamma = std::move(gamma_in);
  else
    throw ConfigError("gamma: expected 1 or " + std::to_string(w) +
                      " values for model " + to_string(model));
  for (std::size_t i = 0; i < w; ++i)
    spec.shadow.push_back(
        KernelParams::make(cfg.kernel_family, 2, cfg.init_signal_variance,
                           cfg.init_lengthscale, cfg.init_noise_precision));
  spec.validate();
  return spec;
}

/// Flat-parameter bookkeeping: per-output kernel blocks (plus log tau),
/// per-equation shadow-kernel blocks, then the model's physical parameters.
struct ThetaLayout {
  PhysicsModel model = PhysicsModel::None;
  KernelFamily family = KernelFamily::Compound;
  int kernel_coords = 0;  // trainable coords per kernel (tau excluded)
  int W = 0;
  std::vector<std::string> names;

  int per_output() const { return kernel_coords + 1; }
  int output_offset(int i) const { return i * per_output(); }
  int shadow_offset(int w) const { return 3 * per_output() + w * kernel_coords; }
  int physics_offset() const { return 3 * per_output() + W * kernel_coords; }

  int physics_count() const {
    switch (model) {
      case PhysicsModel::None:
      case PhysicsModel::Lwr: return 0;   // conservation law has no free constants
      case PhysicsModel::Pw: return 4;    // v_f, rho_jam, tau0, c0^2
      case PhysicsModel::Arz: return 3;   // v_f, rho_jam, tau0
      case PhysicsModel::Heat: return 1;  // beta1
    }
    return 0;
  }

  int size() const { return physics_offset() + physics_count(); }
};

inline ThetaLayout make_layout(KernelFamily family, PhysicsModel model) {
  ThetaLayout lay;
  lay.model = model;
  lay.family = family;
  const KernelParams probe = KernelParams::make(family, 2, 1.0, 0.5, 1.0);
  lay.kernel_coords = probe.param_count();
  lay.W = equation_count(model);

  for (const char* out : GpEnsemble::kOutputNames) {
    for (int p = 0; p < lay.kernel_coords; ++p)
      lay.names.push_back(std::string(out) + "." + probe.param_name(p));
    lay.names.push_back(std::string(out) + ".log_tau");
  }
  for (int w = 0; w < lay.W; ++w)
    for (int p = 0; p < lay.kernel_coords; ++p)
      lay.names.push_back("shadow" + std::to_string(w + 1) + "." +
                          probe.param_name(p));
  static constexpr std::array<const char*, 4> pw{"log_v_f", "log_rho_jam",
                                                 "log_tau0", "log_c0_sq"};
  static constexpr std::array<const char*, 3> arz{"log_v_f", "log_rho_jam",
                                                  "log_tau0"};
  if (model == PhysicsModel::Pw)
    for (const char* n : pw) lay.names.push_back(std::string("phys.") + n);
  if (model == PhysicsModel::Arz)
    for (const char* n : arz) lay.names.push_back(std::string("phys.") + n);
  if (model == PhysicsModel::Heat) lay.names.push_back("phys.log_beta1");
  return lay;
}

inline Eigen::VectorXd pack_theta(const ThetaLayout& lay, const GpEnsemble& ens,
                                  const PhysicsSpec& spec) {
  Eigen::VectorXd theta(lay.size());
  for (int i = 0; i < 3; ++i) {
    const KernelParams& p = ens.models[i].params();
    for (int c = 0; c < lay.kernel_coords; ++c)
      theta[lay.output_offset(i) + c] = p.param(c);
    theta[lay.output_offset(i) + lay.kernel_coords] = p.log_noise_precision;
  }
  for (int w = 0; w < lay.W; ++w)
    for (int c = 0; c < lay.kernel_coords; ++c)
      theta[lay.shadow_offset(w) + c] = spec.shadow[w].param(c);
  int off = lay.physics_offset();
  switch (lay.model) {
    case PhysicsModel::Pw:
      theta[off++] = std::log(spec.fd.v_f);
      theta[off++] = std::log(spec.fd.rho_jam);
      theta[off++] = std::log(spec.tau0);
      theta[off++] = std::log(spec.c0_sq);
      break;
    case PhysicsModel::Arz:
      theta[off++] = std::log(spec.fd.v_f);
      theta[off++] = std::log(spec.fd.rho_jam);
      theta[off++] = std::log(spec.tau0);
      break;
    case PhysicsModel::Heat:
      theta[off++] = std::log(spec.beta1);
      break;
    default:
      break;
  }
  return theta;
}

/// Structured view of a flat parameter vector, without touching any model.
struct ThetaView {
  std::vector<KernelParams> outputs;  // 3 entries, log tau included
  PhysicsSpec spec;                   // shadow kernels + physics params applied
};

inline ThetaView unpack_theta(const ThetaLayout& lay,
                              const Eigen::VectorXd& theta,
                              const GpEnsemble& ens, const PhysicsSpec& base) {
  if (theta.size() != lay.size())
    throw std::invalid_argument("unpack_theta: size mismatch");
  ThetaView view;
  view.spec = base;
  for (int i = 0; i < 3; ++i) {
    KernelParams p = ens.models[i].params();
    for (int c = 0; c < lay.kernel_coords; ++c)
      p.set_param(c, theta[lay.output_offset(i) + c]);
    p.log_noise_precision = theta[lay.output_offset(i) + lay.kernel_coords];
    view.outputs.push_back(std::move(p));
  }
  for (int w = 0; w < lay.W; ++w)
    for (int c = 0; c < lay.kernel_coords; ++c)
      view.spec.shadow[w].set_param(c, theta[lay.shadow_offset(w) + c]);
  int off = lay.physics_offset();
  switch (lay.model) {
    case PhysicsModel::Pw:
      view.spec.fd.v_f = std::exp(theta[off++]);
      view.spec.fd.rho_jam = std::exp(theta[off++]);
      view.spec.tau0 = std::exp(theta[off++]);
      view.spec.c0_sq = std::exp(theta[off++]);
      break;
    case PhysicsModel::Arz:
      view.spec.fd.v_f = std::exp(theta[off++]);
      view.spec.fd.rho_jam = std::exp(theta[off++]);
      view.spec.tau0 = std::exp(theta[off++]);
      break;
    case PhysicsModel::Heat:
      view.spec.beta1 = std::exp(theta[off++]);
      break;
    default:
      break;
  }
  return view;
}

inline void apply_theta(const ThetaLayout& lay, const Eigen::VectorXd& theta,
                        GpEnsemble& ens, PhysicsSpec& spec) {
  ThetaView view = unpack_theta(lay, theta, ens, spec);
  for (int i = 0; i < 3; ++i) ens.models[i].refit(view.outputs[i]);
  spec = std::move(view.spec);
}

/// m i.i.d. uniform pseudo-point draws over the box, one (x, t) row each.
inline Eigen::MatrixXd sample_pseudo_inputs(const DomainBox& box, int m,
                                            Rng& rng) {
  Eigen::MatrixXd Z(m, 2);
  for (int j = 0; j < m; ++j) {
    Z(j, 0) = rng.uniform(box.x_min, box.x_max);
    Z(j, 1) = rng.uniform(box.t_min, box.t_max);
  }
  return Z;
}

namespace detail {

/// Evaluate the frozen-eps sample paths of all three outputs at the
/// pseudo-points and de-standardize values and derivatives to physical
/// units (flow converted from veh/5min to veh/hour).
inline FieldSet sample_field_set(const std::array<const GpModel*, 3>& models,
                                 const Standardization& st,
                                 const Eigen::MatrixXd& Z_phys,
                                 const Eigen::MatrixXd& eps,
                                 const Eigen::MatrixXd& Z_std) {
  const Eigen::Index m = Z_phys.rows();
  const std::array<const ColumnStats*, 3> cs{&st.rho, &st.v, &st.q};
  std::array<SampledField*, 3> out{};
  FieldSet fs;
  out[0] = &fs.rho;
  out[1] = &fs.v;
  out[2] = &fs.q_hr;
  for (int i = 0; i < 3; ++i) {
    out[i]->value.resize(m);
    out[i]->dx.resize(m);
    out[i]->dt.resize(m);
    out[i]->dxx.resize(m);
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    const Eigen::VectorXd z = Z_std.row(j);
    for (int i = 0; i < 3; ++i) {
      const GpPointEval e = models[i]->point_eval(z);
      const SamplePathEval sp = sample_path_eval(e, eps(j, i));
      const double s = cs[i]->std;
      out[i]->value[j] = cs[i]->from_std(sp.value);
      out[i]->dx[j] = sp.dx * s / st.x.std;
      out[i]->dt[j] = sp.dt * s / st.t.std;
      out[i]->dxx[j] = sp.dxx * s / (st.x.std * st.x.std);
    }
  }
  // veh/5min -> veh/hour, applied uniformly to the flow channel
  fs.q_hr.value *= 12.0;
  fs.q_hr.dx *= 12.0;
  fs.q_hr.dt *= 12.0;
  fs.q_hr.dxx *= 12.0;
  return fs;
}

inline double regularizer_value_models(
    const std::array<const GpModel*, 3>& models, const Standardization& st,
    const PhysicsSpec& spec, const Eigen::MatrixXd& Z_phys,
    const Eigen::MatrixXd& eps) {
  const Eigen::MatrixXd Z_std = standardize_inputs(st, Z_phys);
  const FieldSet fields = sample_field_set(models, st, Z_phys, eps, Z_std);
  const ResidualBatch batch = residuals(spec, fields, Z_phys);
  double total = 0.0;
  for (std::size_t c = 0; c < batch.channels.size(); ++c) {
    const int w = batch.gamma_index[c];
    if (spec.gamma[w] == 0.0) continue;  // disabled equations are never evaluated
    total += spec.gamma[w] *
             shadow_gp_log_density(batch.channels[c], spec.shadow[w], Z_std);
  }
  return total;
}

inline std::array<const GpModel*, 3> model_ptrs(const GpEnsemble& ens) {
  return {&ens.models[0], &ens.models[1], &ens.models[2]};
}

/// Rebuild only the output GPs whose kernel parameters differ from the
/// fitted ensemble; others are shared. Keeps finite-difference probes cheap.
struct PerturbedModels {
  std::vector<std::optional<GpModel>> replaced;
  std::array<const GpModel*, 3> ptrs{};

  PerturbedModels(const GpEnsemble& ens, const ThetaView& view)
      : replaced(3) {
    for (int i = 0; i < 3; ++i) {
      if (same_params(ens.models[i].params(), view.outputs[i])) {
        ptrs[i] = &ens.models[i];
      } else {
        replaced[i].emplace(ens.models[i].inputs(), ens.models[i].targets(),
                            view.outputs[i]);
        ptrs[i] = &*replaced[i];
      }
    }
  }

  static bool same_params(const KernelParams& a, const KernelParams& b) {
    if (a.log_signal_variance != b.log_signal_variance) return false;
    if (a.log_rbf_scale != b.log_rbf_scale) return false;
    if (a.log_noise_precision != b.log_noise_precision) return false;
    return a.log_weights == b.log_weights;
  }
};

}  // namespace detail

/// Physics regularizer term of the objective for one (Z, eps) draw:
/// sum_w gamma_w log N(g_w | 0, K_hat_w).
inline double regularizer_value(const GpEnsemble& ens, const PhysicsSpec& spec,
                                const Eigen::MatrixXd& Z_phys,
                                const Eigen::MatrixXd& eps) {
  return detail::regularizer_value_models(detail::model_ptrs(ens), ens.stats,
                                          spec, Z_phys, eps);
}

inline double data_term(const GpEnsemble& ens) {
  double total = 0.0;
  for (const auto& m : ens.models) total += m.log_marginal_likelihood();
  return total;
}

/// Single-draw objective estimate: exact GP evidence plus the gamma-weighted
/// shadow-GP log-density of the physics residuals.
inline double elbo(const GpEnsemble& ens, const PhysicsSpec& spec,
                   const Eigen::MatrixXd& Z_phys, const Eigen::MatrixXd& eps) {
  double value = data_term(ens);
  if (spec.active()) value += regularizer_value(ens, spec, Z_phys, eps);
  return value;
}

namespace detail {

inline double elbo_at_theta(const ThetaLayout& lay, const Eigen::VectorXd& theta,
                            const GpEnsemble& ens, const PhysicsSpec& base,
                            const Eigen::MatrixXd& Z_phys,
                            const Eigen::MatrixXd& eps) {
  const ThetaView view = unpack_theta(lay, theta, ens, base);
  const PerturbedModels pm(ens, view);
  double value = 0.0;
  for (int i = 0; i < 3; ++i) value += pm.ptrs[i]->log_marginal_likelihood();
  if (view.spec.active())
    value += regularizer_value_models(pm.ptrs, ens.stats, view.spec, Z_phys, eps);
  return value;
}

inline double regularizer_at_theta(const ThetaLayout& lay,
                                   const Eigen::VectorXd& theta,
                                   const GpEnsemble& ens,
                                   const PhysicsSpec& base,
                                   const Eigen::MatrixXd& Z_phys,
                                   const Eigen::MatrixXd& eps) {
  const ThetaView view = unpack_theta(lay, theta, ens, base);
  const PerturbedModels pm(ens, view);
  return regularizer_value_models(pm.ptrs, ens.stats, view.spec, Z_phys, eps);
}

}  // namespace detail

/// Gradient of the single-draw objective: the data term's gradient is the
/// analytic Cholesky identity per output; the regularizer term is
/// differentiated by central differences in log-parameter space (only the
/// perturbed output's GP is refitted per probe).
inline Eigen::VectorXd elbo_gradient(const ThetaLayout& lay,
                                     const GpEnsemble& ens,
                                     const PhysicsSpec& spec,
                                     const Eigen::MatrixXd& Z_phys,
                                     const Eigen::MatrixXd& eps,
                                     double fd_step = 1e-5) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(lay.size());
  for (int i = 0; i < 3; ++i) {
    const Eigen::VectorXd gi = ens.models[i].log_marginal_likelihood_gradient();
    for (int c = 0; c <= lay.kernel_coords; ++c)
      grad[lay.output_offset(i) + c] = gi[c];
  }
  if (!spec.active()) return grad;

  const Eigen::VectorXd theta0 = pack_theta(lay, ens, spec);
  for (int c = 0; c < lay.size(); ++c) {
    Eigen::VectorXd tp = theta0, tm = theta0;
    tp[c] += fd_step;
    tm[c] -= fd_step;
    const double rp = detail::regularizer_at_theta(lay, tp, ens, spec, Z_phys, eps);
    const double rm = detail::regularizer_at_theta(lay, tm, ens, spec, Z_phys, eps);
    grad[c] += (rp - rm) / (2.0 * fd_step);
  }
  return grad;
}

/// Full central-difference gradient of the whole objective; the reference
/// the mixed gradient is checked against.
inline Eigen::VectorXd elbo_gradient_fd(const ThetaLayout& lay,
                                        const GpEnsemble& ens,
                                        const PhysicsSpec& spec,
                                        const Eigen::MatrixXd& Z_phys,
                                        const Eigen::MatrixXd& eps,
                                        double fd_step = 1e-5) {
  const Eigen::VectorXd theta0 = pack_theta(lay, ens, spec);
  Eigen::VectorXd grad(lay.size());
  for (int c = 0; c < lay.size(); ++c) {
    Eigen::VectorXd tp = theta0, tm = theta0;
    tp[c] += fd_step;
    tm[c] -= fd_step;
    const double ep = detail::elbo_at_theta(lay, tp, ens, spec, Z_phys, eps);
    const double em = detail::elbo_at_theta(lay, tm, ens, spec, Z_phys, eps);
    grad[c] = (ep - em) / (2.0 * fd_step);
  }
  return grad;
}

struct TrainState {
  Eigen::VectorXd theta;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  long adam_t = 0;        // Adam steps taken (bias-correction exponent)
  int iteration = 0;      // completed training iterations
  std::vector<double> elbo_trace;
  std::string rng_state;
  bool stopped_early = false;
  std::string abort_reason;  // nonempty when numerics forced an early stop
};

/// One ascending Adam update with bias-corrected moments.
inline TrainState adam_step(TrainState state, const Eigen::VectorXd& grad,
                            const TrainConfig& cfg) {
  if (!grad.allFinite())
    throw NumericError("adam_step: non-finite gradient at iteration " +
                       std::to_string(state.iteration));
  if (grad.size() != state.theta.size())
    throw std::invalid_argument("adam_step: gradient size mismatch");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  state.adam_m = b1 * state.adam_m + (1.0 - b1) * grad;
  state.adam_v =
      b2 * state.adam_v.array().matrix() + (1.0 - b2) * grad.cwiseAbs2();
  state.adam_t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.adam_t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.adam_t));
  const Eigen::VectorXd m_hat = state.adam_m / c1;
  const Eigen::VectorXd v_hat = state.adam_v / c2;
  state.theta +=
      cfg.learning_rate *
      (m_hat.array() / (v_hat.array().sqrt() + cfg.adam_eps)).matrix();
  return state;
}

struct TrainResult {
  GpEnsemble ensemble;
  PhysicsSpec spec;      // physical parameters at the final theta
  TrainConfig config;    // box resolved to the one actually used
  ThetaLayout layout;
  TrainState state;
};

/// The stochastic inference loop: per iteration draw pseudo-points and eps,
/// estimate the objective and its gradient, take an Adam step, refit.
/// With regularization inactive no randomness is consumed and the loop is
/// plain marginal-likelihood ascent.
inline TrainResult train(const Dataset& data, const PhysicsSpec& spec_in,
                         const TrainConfig& cfg_in,
                         const TrainState* resume = nullptr,
                         std::ostream* progress = nullptr) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  PhysicsSpec spec = spec_in;
  spec.validate();
  if (cfg.box_from_data) {
    cfg.box = training_box(data);
    cfg.box_from_data = false;
  }

  TrainResult res{build_ensemble(data, cfg), spec, cfg,
                  make_layout(cfg.kernel_family, spec.model), TrainState{}};
  const ThetaLayout& lay = res.layout;

  Rng rng(cfg.seed);
  if (resume) {
    if (resume->theta.size() != lay.size())
      throw ConfigError("resume: checkpoint parameter count does not match");
    res.state = *resume;
    apply_theta(lay, res.state.theta, res.ensemble, res.spec);
    if (!res.state.rng_state.empty()) rng.restore(res.state.rng_state);
  } else {
    res.state.theta = pack_theta(lay, res.ensemble, res.spec);
    res.state.adam_m = Eigen::VectorXd::Zero(lay.size());
    res.state.adam_v = Eigen::VectorXd::Zero(lay.size());
  }

  const bool active = res.spec.active();
  while (res.state.iteration < cfg.iterations) {
    const TrainState before = res.state;
    try {
      double value = 0.0;
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(lay.size());
      if (active) {
        for (int s = 0; s < cfg.elbo_samples; ++s) {
          const Eigen::MatrixXd Z = sample_pseudo_inputs(cfg.box, cfg.m, rng);
          Eigen::MatrixXd eps(cfg.m, 3);
          for (int j = 0; j < cfg.m; ++j)
            for (int i = 0; i < 3; ++i) eps(j, i) = rng.normal();
          value += elbo(res.ensemble, res.spec, Z, eps);
          grad += elbo_gradient(lay, res.ensemble, res.spec, Z, eps, cfg.fd_step);
        }
        value /= cfg.elbo_samples;
        grad /= cfg.elbo_samples;
      } else {
        value = data_term(res.ensemble);
        for (int i = 0; i < 3; ++i) {
          const Eigen::VectorXd gi =
              res.ensemble.models[i].log_marginal_likelihood_gradient();
          for (int c = 0; c <= lay.kernel_coords; ++c)
            grad[lay.output_offset(i) + c] = gi[c];
        }
      }

      res.state = adam_step(std::move(res.state), grad, cfg);
      apply_theta(lay, res.state.theta, res.ensemble, res.spec);

      res.state.elbo_trace.push_back(value);
      res.state.iteration += 1;
      res.state.rng_state = rng.state();

      if (progress) {
        char line[160];
        std::snprintf(line, sizeof(line), "iter=%d elbo=%.10g grad_norm=%.10g\n",
                      res.state.iteration, value, grad.norm());
        (*progress) << line;
      }

      const int w = cfg.stop_window;
      const auto& tr = res.state.elbo_trace;
      if (static_cast<int>(tr.size()) >= 2 * w) {
        double recent = 0.0, prev = 0.0;
        for (int k = 0; k < w; ++k) {
          recent += tr[tr.size() - 1 - k];
          prev += tr[tr.size() - 1 - w - k];
        }
        recent /= w;
        prev /= w;
        if (recent - prev < cfg.stop_rel_tol * std::max(1.0, std::abs(prev))) {
          res.state.stopped_early = true;
          break;
        }
      }
    } catch (const NumericError& e) {
      // Roll back to the last good parameters and stop; the caller persists
      // this state as the final checkpoint.
      res.state = before;
      apply_theta(lay, res.state.theta, res.ensemble, res.spec);
      res.state.abort_reason = e.what();
      break;
    }
  }
  return res;
}

/// Posterior mean/variance of all outputs at physical query points,
/// de-standardized (flow in veh per 5-min bin).
struct EstimateResult {
  Eigen::MatrixXd query;  // m x 2, physical (x miles, t hours)
  Eigen::VectorXd rho_mean, rho_var;
  Eigen::VectorXd v_mean, v_var;
  Eigen::VectorXd q_mean, q_var;
};

inline EstimateResult estimate(const GpEnsemble& ens,
                               const Eigen::MatrixXd& query_phys) {
  EstimateResult out;
  out.query = query_phys;
  const Eigen::MatrixXd Z = standardize_inputs(ens.stats, query_phys);
  const std::array<const ColumnStats*, 3> cs{&ens.stats.rho, &ens.stats.v,
                                             &ens.stats.q};
  std::array<Eigen::VectorXd*, 6> dst{&out.rho_mean, &out.rho_var, &out.v_mean,
                                      &out.v_var,    &out.q_mean,  &out.q_var};
  for (int i = 0; i < 3; ++i) {
    auto [mu, nu] = ens.models[i].posterior(Z);
    const double s = cs[i]->std;
    *dst[2 * i] = (mu.array() * s + cs[i]->mean).matrix();
    *dst[2 * i + 1] = (nu.array() * s * s).matrix();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization

inline nlohmann::json domain_box_to_json(const DomainBox& b) {
  return {{"x_min", b.x_min}, {"x_max", b.x_max}, {"t_min", b.t_min},
          {"t_max", b.t_max}};
}

inline DomainBox domain_box_from_json(const nlohmann::json& j) {
  DomainBox b;
  b.x_min = j.value("x_min", 0.0);
  b.x_max = j.value("x_max", 1.0);
  b.t_min = j.value("t_min", 0.0);
  b.t_max = j.value("t_max", 1.0);
  return b;
}

struct Checkpoint {
  TrainConfig config;
  PhysicsModel model = PhysicsModel::None;
  std::vector<double> gamma;
  TrainState state;
  Standardization stats;
  std::string data_hash;
  std::vector<std::string> theta_names;
  // data-pipeline echo, enough to rebuild the split/noise from the raw CSV
  double train_fraction = 0.0;
  std::uint64_t split_seed = 0;
  NoiseRecord noise;
};

inline void save_checkpoint(const std::string& path, const TrainResult& res,
                            const Dataset& data) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kernel_family"] = to_string(res.config.kernel_family);
  j["physics"] = {{"model", to_string(res.spec.model)},
                  {"gamma", res.spec.gamma},
                  {"v_f", res.spec.fd.v_f},
                  {"rho_jam", res.spec.fd.rho_jam},
                  {"tau0", res.spec.tau0},
                  {"c0_sq", res.spec.c0_sq},
                  {"beta1", res.spec.beta1}};
  j["config"] = {{"m", res.config.m},
                 {"iterations", res.config.iterations},
                 {"learning_rate", res.config.learning_rate},
                 {"adam_beta1", res.config.adam_beta1},
                 {"adam_beta2", res.config.adam_beta2},
                 {"adam_eps", res.config.adam_eps},
                 {"seed", res.config.seed},
                 {"box", domain_box_to_json(res.config.box)},
                 {"elbo_samples", res.config.elbo_samples},
                 {"stop_window", res.config.stop_window},
                 {"stop_rel_tol", res.config.stop_rel_tol},
                 {"init_signal_variance", res.config.init_signal_variance},
                 {"init_lengthscale", res.config.init_lengthscale},
                 {"init_noise_precision", res.config.init_noise_precision},
                 {"fd_step", res.config.fd_step}};
  const auto& st = res.state;
  j["state"] = {
      {"theta", std::vector<double>(st.theta.begin(), st.theta.end())},
      {"adam_m", std::vector<double>(st.adam_m.begin(), st.adam_m.end())},
      {"adam_v", std::vector<double>(st.adam_v.begin(), st.adam_v.end())},
      {"adam_t", st.adam_t},
      {"iteration", st.iteration},
      {"elbo_trace", st.elbo_trace},
      {"rng_state", st.rng_state},
      {"stopped_early", st.stopped_early},
      {"abort_reason", st.abort_reason}};
  const auto put = [&](const char* name, const ColumnStats& c) {
    j["standardization"][name] = {{"mean", c.mean}, {"std", c.std}};
  };
  put("x", res.ensemble.stats.x);
  put("t", res.ensemble.stats.t);
  put("rho", res.ensemble.stats.rho);
  put("v", res.ensemble.stats.v);
  put("q", res.ensemble.stats.q);
  j["data_hash"] = data.source_hash;
  j["pipeline"] = {{"train_fraction", data.train_fraction},
                   {"split_seed", data.split_seed},
                   {"noise",
                    {{"applied", data.noise.applied},
                     {"fraction", data.noise.fraction},
                     {"amplitude", data.noise.amplitude},
                     {"seed", data.noise.seed}}}};
  j["theta_names"] = res.layout.names;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out << j.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("malformed checkpoint " + path + ": " + e.what());
  }
  Checkpoint ck;
  ck.config.kernel_family = kernel_family_from_string(
      j.value("kernel_family", std::string("compound")));
  const auto& p = j.at("physics");
  ck.model = physics_model_from_string(p.value("model", std::string("none")));
  ck.gamma = p.value("gamma", std::vector<double>{});
  const auto& c = j.at("config");
  ck.config.m = c.value("m", 10);
  ck.config.iterations = c.value("iterations", 500);
  ck.config.learning_rate = c.value("learning_rate", 0.05);
  ck.config.adam_beta1 = c.value("adam_beta1", 0.9);
  ck.config.adam_beta2 = c.value("adam_beta2", 0.999);
  ck.config.adam_eps = c.value("adam_eps", 1e-8);
  ck.config.seed = c.value("seed", std::uint64_t{0});
  if (c.contains("box")) ck.config.box = domain_box_from_json(c["box"]);
  ck.config.box_from_data = false;
  ck.config.elbo_samples = c.value("elbo_samples", 1);
  ck.config.stop_window = c.value("stop_window", 50);
  ck.config.stop_rel_tol = c.value("stop_rel_tol", 1e-6);
  ck.config.init_signal_variance = c.value("init_signal_variance", 1.0);
  ck.config.init_lengthscale = c.value("init_lengthscale", 0.5);
  ck.config.init_noise_precision = c.value("init_noise_precision", 10.0);
  ck.config.fd_step = c.value("fd_step", 1e-5);
  const auto& s = j.at("state");
  const auto to_vec = [&](const char* name) {
    const std::vector<double> v = s.value(name, std::vector<double>{});
    return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                             static_cast<Eigen::Index>(v.size()))
        .eval();
  };
  ck.state.theta = to_vec("theta");
  ck.state.adam_m = to_vec("adam_m");
  ck.state.adam_v = to_vec("adam_v");
  ck.state.adam_t = s.value("adam_t", 0L);
  ck.state.iteration = s.value("iteration", 0);
  ck.state.elbo_trace = s.value("elbo_trace", std::vector<double>{});
  ck.state.rng_state = s.value("rng_state", std::string{});
  ck.state.stopped_early = s.value("stopped_early", false);
  ck.state.abort_reason = s.value("abort_reason", std::string{});
  if (j.contains("standardization")) {
    ck.stats.fitted = true;
    const auto get = [&](const char* name, ColumnStats& cc) {
      cc.mean = j["standardization"][name].value("mean", 0.0);
      cc.std = j["standardization"][name].value("std", 1.0);
    };
    get("x", ck.stats.x);
    get("t", ck.stats.t);
    get("rho", ck.stats.rho);
    get("v", ck.stats.v);
    get("q", ck.stats.q);
  }
  ck.data_hash = j.value("data_hash", std::string{});
  if (j.contains("pipeline")) {
    const auto& pl = j["pipeline"];
    ck.train_fraction = pl.value("train_fraction", 0.0);
    ck.split_seed = pl.value("split_seed", std::uint64_t{0});
    if (pl.contains("noise")) {
      ck.noise.applied = pl["noise"].value("applied", false);
      ck.noise.fraction = pl["noise"].value("fraction", 0.0);
      ck.noise.amplitude = pl["noise"].value("amplitude", 0.0);
      ck.noise.seed = pl["noise"].value("seed", std::uint64_t{0});
    }
  }
  ck.theta_names = j.value("theta_names", std::vector<std::string>{});
  return ck;
}

}  // namespace prgp

#endif  // PRGP_TRAINER_HPP
