#ifndef PRGP_GP_HPP
#define PRGP_GP_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <utility>

#include "prgp/errors.hpp"
#include "prgp/kernels.hpp"
#include "prgp/rng.hpp"

namespace prgp {

/// Reparameterized draw from a GP posterior: values = mean + eps .* sqrt(var)
/// with eps retained so the draw is a deterministic function of the kernel
/// parameters given eps.
struct PosteriorSample {
  Eigen::MatrixXd locations;
  Eigen::VectorXd epsilon;
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  Eigen::VectorXd values;
};

/// Posterior mean/variance and their spatial derivatives at one query point,
/// all in the model's (standardized) input coordinates.
struct GpPointEval {
  double mu = 0.0;
  double nu = 0.0;               // clamped at 0
  Eigen::VectorXd dmu;           // d mu / d z_l
  Eigen::VectorXd dnu;           // d nu / d z_l
  double d2mu_dim0 = 0.0;        // second derivative along input dim 0
  double d2nu_dim0 = 0.0;
};

/// Sample-path value and derivatives for f = mu + eps*sqrt(nu) with eps held
/// fixed. dim-0 is space, dim-1 is time.
struct SamplePathEval {
  double value = 0.0;
  double dx = 0.0;
  double dt = 0.0;
  double dxx = 0.0;
};

/// Variance floor used inside sqrt-path derivatives; the posterior variance
/// itself is only clamped at zero.
inline constexpr double kVarianceFloor = 1e-12;

/// Cholesky factorization with escalating diagonal jitter, starting at
/// 1e-10 of the mean diagonal and growing tenfold up to 1e-4 of it.
/// Throws NumericError if the matrix is still not SPD at the cap.
inline Eigen::LLT<Eigen::MatrixXd> cholesky_with_jitter(
    const Eigen::MatrixXd& A, double* jitter_used = nullptr) {
  const double trace_over_n = A.trace() / static_cast<double>(A.rows());
  const double j0 = 1e-10 * trace_over_n;
  const double jmax = 1e-4 * trace_over_n;
  double jitter = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt;
  while (true) {
    Eigen::MatrixXd Aj = A;
    Aj.diagonal().array() += jitter;
    llt.compute(Aj);
    if (llt.info() == Eigen::Success) break;
    if (jitter >= jmax)
      throw NumericError("cholesky_with_jitter: matrix not SPD after jitter escalation");
    jitter = (jitter == 0.0) ? j0 : std::min(jitter * 10.0, jmax);
  }
  if (jitter_used) *jitter_used = jitter;
  return llt;
}

inline SamplePathEval sample_path_eval(const GpPointEval& e, double eps) {
  const double nu = std::max(e.nu, kVarianceFloor);
  const double root = std::sqrt(nu);
  SamplePathEval out;
  out.value = e.mu + eps * std::sqrt(std::max(e.nu, 0.0));
  out.dx = e.dmu[0] + eps * e.dnu[0] / (2.0 * root);
  out.dt = e.dmu[1] + eps * e.dnu[1] / (2.0 * root);
  out.dxx = e.d2mu_dim0 +
            eps * (e.d2nu_dim0 / (2.0 * root) -
                   e.dnu[0] * e.dnu[0] / (4.0 * nu * root));
  return out;
}

/// Exact GP regressor for a single output dimension with zero prior mean.
///
/// Caches the Cholesky factor of A = K + tau^-1 I and alpha = A^-1 y.
/// Read-only after construction; refit() is the single-writer entry point.
class GpModel {
 public:
  GpModel(Eigen::MatrixXd X, Eigen::VectorXd y, KernelParams params)
      : X_(std::move(X)), y_(std::move(y)), params_(std::move(params)) {
    if (X_.rows() != y_.size() || X_.rows() < 1)
      throw std::invalid_argument("GpModel: shape mismatch or empty data");
    if (!y_.allFinite()) throw std::invalid_argument("GpModel: non-finite targets");
    factorize();
  }

  static GpModel fit(Eigen::MatrixXd X, Eigen::VectorXd y, KernelParams params) {
    return GpModel(std::move(X), std::move(y), std::move(params));
  }

  const Eigen::MatrixXd& inputs() const { return X_; }
  const Eigen::VectorXd& targets() const { return y_; }
  const KernelParams& params() const { return params_; }
  const Eigen::VectorXd& alpha() const { return alpha_; }
  Eigen::MatrixXd chol_lower() const { return llt_.matrixL(); }
  double jitter() const { return jitter_; }
  Eigen::Index size() const { return X_.rows(); }

  void refit(KernelParams params) {
    params_ = std::move(params);
    ainv_valid_ = false;
    factorize();
  }

  /// Posterior mean and variance at query rows Z (variance clamped at 0).
  std::pair<Eigen::VectorXd, Eigen::VectorXd> posterior(
      const Eigen::MatrixXd& Z) const {
    const Eigen::MatrixXd Kzx = kernel_matrix(params_, Z, X_);
    Eigen::VectorXd mu = Kzx * alpha_;
    Eigen::VectorXd nu(Z.rows());
    const double kd = kernel_diag(params_);
    for (Eigen::Index j = 0; j < Z.rows(); ++j) {
      const Eigen::VectorXd kz = Kzx.row(j);
      const Eigen::VectorXd w = llt_.solve(kz);
      nu[j] = std::max(kd - kz.dot(w), 0.0);
    }
    return {std::move(mu), std::move(nu)};
  }

  double log_marginal_likelihood() const {
    const Eigen::MatrixXd L = llt_.matrixL();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += std::log(L(i, i));
    const double n = static_cast<double>(y_.size());
    return -0.5 * y_.dot(alpha_) - logdet -
           0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  /// Gradient of the log marginal likelihood with respect to
  /// [kernel coords..., log tau] via 0.5*tr((alpha alpha^T - A^-1) dA).
  Eigen::VectorXd log_marginal_likelihood_gradient() const {
    ensure_ainv();
    const Eigen::MatrixXd B = alpha_ * alpha_.transpose() - ainv_;
    const int nk = params_.param_count();
    Eigen::VectorXd grad(nk + 1);
    for (int p = 0; p < nk; ++p) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < X_.rows(); ++i)
        for (Eigen::Index j = 0; j < X_.rows(); ++j)
          acc += B(i, j) * kernel_param_deriv(params_, X_.row(i), X_.row(j), p);
      grad[p] = 0.5 * acc;
    }
    // d A / d log(tau) = -tau^-1 I
    const double inv_tau = std::exp(-params_.log_noise_precision);
    grad[nk] = -0.5 * inv_tau * B.trace();
    return grad;
  }

  PosteriorSample sample_posterior(const Eigen::MatrixXd& Z, Rng& rng) const {
    PosteriorSample s;
    s.locations = Z;
    auto [mu, nu] = posterior(Z);
    s.mean = std::move(mu);
    s.variance = std::move(nu);
    s.epsilon.resize(Z.rows());
    for (Eigen::Index j = 0; j < Z.rows(); ++j) s.epsilon[j] = rng.normal();
    s.values = s.mean + s.epsilon.cwiseProduct(s.variance.cwiseSqrt());
    return s;
  }

  PosteriorSample sample_posterior(const Eigen::MatrixXd& Z,
                                   std::uint64_t seed) const {
    Rng rng(seed);
    return sample_posterior(Z, rng);
  }

  /// Mean/variance plus first derivatives (all dims) and second derivatives
  /// along dim 0 at a single query point.
  GpPointEval point_eval(const Eigen::VectorXd& z) const {
    const Eigen::Index n = X_.rows();
    const int d = params_.dim();
    Eigen::VectorXd kz(n), d2k(n);
    Eigen::MatrixXd dk(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd xi = X_.row(i);
      kz[i] = kernel_eval(params_, z, xi);
      dk.row(i) = kernel_grad_a(params_, z, xi);
      d2k[i] = kernel_d2_a(params_, z, xi, 0);
    }
    const Eigen::VectorXd w = llt_.solve(kz);

    GpPointEval e;
    e.mu = kz.dot(alpha_);
    e.nu = std::max(kernel_diag(params_) - kz.dot(w), 0.0);
    e.dmu = dk.transpose() * alpha_;
    e.dnu = -2.0 * dk.transpose() * w;
    e.d2mu_dim0 = d2k.dot(alpha_);
    const Eigen::VectorXd u0 = llt_.solve(dk.col(0));
    e.d2nu_dim0 = -2.0 * (d2k.dot(w) + dk.col(0).dot(u0));
    return e;
  }

  Eigen::VectorXd posterior_mean_gradient(const Eigen::VectorXd& z) const {
    return point_eval(z).dmu;
  }

  Eigen::VectorXd posterior_variance_gradient(const Eigen::VectorXd& z) const {
    return point_eval(z).dnu;
  }

  /// d(mu, nu)/d theta_p at query z, for kernel coordinate p in
  /// [0, param_count()) or p == param_count() for log tau.
  std::pair<double, double> posterior_param_gradient(const Eigen::VectorXd& z,
                                                     int p) const {
    const Eigen::Index n = X_.rows();
    const int nk = params_.param_count();
    Eigen::VectorXd kz(n), dkz(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd xi = X_.row(i);
      kz[i] = kernel_eval(params_, z, xi);
      dkz[i] = (p < nk) ? kernel_param_deriv(params_, z, xi, p) : 0.0;
    }
    const Eigen::VectorXd w = llt_.solve(kz);

    Eigen::VectorXd dA_alpha(n), dA_w(n);
    if (p < nk) {
      Eigen::MatrixXd dA(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          dA(i, j) = kernel_param_deriv(params_, X_.row(i), X_.row(j), p);
      dA_alpha = dA * alpha_;
      dA_w = dA * w;
    } else {
      const double inv_tau = std::exp(-params_.log_noise_precision);
      dA_alpha = -inv_tau * alpha_;
      dA_w = -inv_tau * w;
    }

    double dkdiag = 0.0;
    if (p == 0 && params_.has_se())
      dkdiag = std::exp(params_.log_signal_variance);

    const double dmu = dkz.dot(alpha_) - w.dot(dA_alpha);
    const double dnu = dkdiag - 2.0 * dkz.dot(w) + w.dot(dA_w);
    return {dmu, dnu};
  }

 private:
  void factorize() {
    const double inv_tau = std::exp(-params_.log_noise_precision);
    Eigen::MatrixXd A = kernel_matrix(params_, X_, X_);
    A.diagonal().array() += inv_tau;
    llt_ = cholesky_with_jitter(A, &jitter_);
    alpha_ = llt_.solve(y_);
  }

  void ensure_ainv() const {
    if (!ainv_valid_) {
      ainv_ = llt_.solve(
          Eigen::MatrixXd::Identity(X_.rows(), X_.rows()));
      ainv_valid_ = true;
    }
  }

  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  KernelParams params_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
  double jitter_ = 0.0;
  mutable Eigen::MatrixXd ainv_;
  mutable bool ainv_valid_ = false;
};

}  // namespace prgp

#endif  // PRGP_GP_HPP
