#ifndef PRGP_KERNELS_HPP
#define PRGP_KERNELS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "prgp/errors.hpp"

namespace prgp {

enum class KernelFamily { SeArd, Rbf, Compound };

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::SeArd: return "seard";
    case KernelFamily::Rbf: return "rbf";
    case KernelFamily::Compound: return "compound";
  }
  return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "seard") return KernelFamily::SeArd;
  if (s == "rbf") return KernelFamily::Rbf;
  if (s == "compound") return KernelFamily::Compound;
  throw ConfigError("unknown kernel family: " + s);
}

/// Stationary kernel hyperparameters, stored in log-space so positivity
/// holds by construction.
///
/// SE-ARD:   k(a,b) = sigma2 * exp(-sum_l eta_l * (a_l-b_l)^2)
/// RBF:      k(a,b) = exp(-|a-b|^2 / (2 * rbf_scale^2))
/// Compound: sum of the two terms.
///
/// eta is a per-dimension inverse-square-length weight; a classic
/// lengthscale ell maps to eta = 1/(2*ell^2).
struct KernelParams {
  KernelFamily family = KernelFamily::SeArd;
  double log_signal_variance = 0.0;   // SE-ARD sigma2
  Eigen::VectorXd log_weights;        // SE-ARD eta, one per input dim
  double log_rbf_scale = 0.0;         // RBF sigma
  double log_noise_precision = 0.0;   // tau; ignored by shadow kernels

  int dim() const { return static_cast<int>(log_weights.size()); }

  static double weight_from_lengthscale(double ell) {
    return 1.0 / (2.0 * ell * ell);
  }

  static KernelParams make(KernelFamily family, int d, double sigma2,
                           double lengthscale, double tau) {
    KernelParams p;
    p.family = family;
    p.log_signal_variance = std::log(sigma2);
    p.log_weights =
        Eigen::VectorXd::Constant(d, std::log(weight_from_lengthscale(lengthscale)));
    p.log_rbf_scale = std::log(lengthscale);
    p.log_noise_precision = std::log(tau);
    return p;
  }

  bool has_se() const { return family != KernelFamily::Rbf; }
  bool has_rbf() const { return family != KernelFamily::SeArd; }

  /// Number of trainable kernel coordinates (noise precision not included).
  int param_count() const {
    int n = 0;
    if (has_se()) n += 1 + dim();
    if (has_rbf()) n += 1;
    return n;
  }

  double param(int i) const {
    if (has_se()) {
      if (i == 0) return log_signal_variance;
      if (i <= dim()) return log_weights[i - 1];
      i -= 1 + dim();
    }
    if (has_rbf() && i == 0) return log_rbf_scale;
    throw std::invalid_argument("kernel param index out of range");
  }

  void set_param(int i, double v) {
    if (has_se()) {
      if (i == 0) { log_signal_variance = v; return; }
      if (i <= dim()) { log_weights[i - 1] = v; return; }
      i -= 1 + dim();
    }
    if (has_rbf() && i == 0) { log_rbf_scale = v; return; }
    throw std::invalid_argument("kernel param index out of range");
  }

  std::string param_name(int i) const {
    if (has_se()) {
      if (i == 0) return "log_signal_variance";
      if (i <= dim()) return "log_weight_" + std::to_string(i - 1);
      i -= 1 + dim();
    }
    if (has_rbf() && i == 0) return "log_rbf_scale";
    throw std::invalid_argument("kernel param index out of range");
  }
};

namespace detail {

inline void check_dims(const KernelParams& p, const Eigen::VectorXd& a,
                       const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() != p.dim())
    throw std::invalid_argument("kernel_eval: dimension mismatch");
}

inline double se_term(const KernelParams& p, const Eigen::VectorXd& d) {
  double s = 0.0;
  for (int l = 0; l < d.size(); ++l)
    s += std::exp(p.log_weights[l]) * d[l] * d[l];
  return std::exp(p.log_signal_variance) * std::exp(-s);
}

inline double rbf_term(const KernelParams& p, const Eigen::VectorXd& d) {
  const double s = std::exp(p.log_rbf_scale);
  return std::exp(-d.squaredNorm() / (2.0 * s * s));
}

}  // namespace detail

inline double kernel_eval(const KernelParams& p, const Eigen::VectorXd& a,
                          const Eigen::VectorXd& b) {
  detail::check_dims(p, a, b);
  const Eigen::VectorXd d = a - b;
  double k = 0.0;
  if (p.has_se()) k += detail::se_term(p, d);
  if (p.has_rbf()) k += detail::rbf_term(p, d);
  return k;
}

/// k(z, z) for a stationary kernel; independent of z.
inline double kernel_diag(const KernelParams& p) {
  double k = 0.0;
  if (p.has_se()) k += std::exp(p.log_signal_variance);
  if (p.has_rbf()) k += 1.0;
  return k;
}

/// Entry (i,j) = k(X.row(i), X2.row(j)). Symmetric when called with X == X2.
inline Eigen::MatrixXd kernel_matrix(const KernelParams& p,
                                     const Eigen::MatrixXd& X,
                                     const Eigen::MatrixXd& X2) {
  if (X.cols() != X2.cols() || X.cols() != p.dim())
    throw std::invalid_argument("kernel_matrix: dimension mismatch");
  Eigen::MatrixXd K(X.rows(), X2.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X2.rows(); ++j)
      K(i, j) = kernel_eval(p, X.row(i), X2.row(j));
  return K;
}

/// Gradient of k(a,b) with respect to the first argument a.
inline Eigen::VectorXd kernel_grad_a(const KernelParams& p,
                                     const Eigen::VectorXd& a,
                                     const Eigen::VectorXd& b) {
  detail::check_dims(p, a, b);
  const Eigen::VectorXd d = a - b;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(d.size());
  if (p.has_se()) {
    const double kse = detail::se_term(p, d);
    for (int l = 0; l < d.size(); ++l)
      g[l] += -2.0 * std::exp(p.log_weights[l]) * d[l] * kse;
  }
  if (p.has_rbf()) {
    const double s2 = std::exp(2.0 * p.log_rbf_scale);
    const double krbf = detail::rbf_term(p, d);
    g += (-1.0 / s2) * d * krbf;
  }
  return g;
}

/// Second derivative of k(a,b) along coordinate `l` of the first argument.
inline double kernel_d2_a(const KernelParams& p, const Eigen::VectorXd& a,
                          const Eigen::VectorXd& b, int l) {
  detail::check_dims(p, a, b);
  const Eigen::VectorXd d = a - b;
  double out = 0.0;
  if (p.has_se()) {
    const double eta = std::exp(p.log_weights[l]);
    out += (4.0 * eta * eta * d[l] * d[l] - 2.0 * eta) * detail::se_term(p, d);
  }
  if (p.has_rbf()) {
    const double s2 = std::exp(2.0 * p.log_rbf_scale);
    out += (d[l] * d[l] / (s2 * s2) - 1.0 / s2) * detail::rbf_term(p, d);
  }
  return out;
}

/// d k(a,b) / d theta_i for the i-th log-space kernel coordinate.
inline double kernel_param_deriv(const KernelParams& p,
                                 const Eigen::VectorXd& a,
                                 const Eigen::VectorXd& b, int i) {
  detail::check_dims(p, a, b);
  const Eigen::VectorXd d = a - b;
  if (p.has_se()) {
    if (i == 0) return detail::se_term(p, d);  // d/d log(sigma2)
    if (i <= p.dim()) {
      const int l = i - 1;
      const double eta = std::exp(p.log_weights[l]);
      return -eta * d[l] * d[l] * detail::se_term(p, d);
    }
    i -= 1 + p.dim();
  }
  if (p.has_rbf() && i == 0) {
    const double s2 = std::exp(2.0 * p.log_rbf_scale);
    return d.squaredNorm() / s2 * detail::rbf_term(p, d);
  }
  throw std::invalid_argument("kernel_param_deriv: index out of range");
}

}  // namespace prgp

#endif  // PRGP_KERNELS_HPP
