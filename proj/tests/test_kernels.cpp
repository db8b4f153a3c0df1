#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "prgp/kernels.hpp"
#include "prgp/rng.hpp"

using namespace prgp;
using Catch::Approx;

namespace {

Eigen::Vector2d v2(double a, double b) { return Eigen::Vector2d(a, b); }

KernelParams se_ard(double sigma2, double eta_x, double eta_t) {
  KernelParams p;
  p.family = KernelFamily::SeArd;
  p.log_signal_variance = std::log(sigma2);
  p.log_weights = Eigen::Vector2d(std::log(eta_x), std::log(eta_t));
  return p;
}

KernelParams rbf(double sigma) {
  KernelParams p;
  p.family = KernelFamily::Rbf;
  p.log_weights = Eigen::Vector2d::Zero();
  p.log_rbf_scale = std::log(sigma);
  return p;
}

KernelParams random_params(KernelFamily fam, Rng& rng) {
  KernelParams p;
  p.family = fam;
  p.log_signal_variance = rng.uniform(-0.5, 0.5);
  p.log_weights = Eigen::Vector2d(rng.uniform(-1.0, 0.5), rng.uniform(-1.0, 0.5));
  p.log_rbf_scale = rng.uniform(-0.5, 0.5);
  p.log_noise_precision = rng.uniform(0.0, 2.0);
  return p;
}

}  // namespace

TEST_CASE("zero distance returns the marginal variance per family") {
  CHECK(kernel_eval(se_ard(1.0, 1.0, 1.0), v2(0.3, 0.7), v2(0.3, 0.7)) ==
        Approx(1.0).epsilon(1e-15));
  CHECK(kernel_eval(rbf(1.7), v2(0.4, -0.1), v2(0.4, -0.1)) ==
        Approx(1.0).epsilon(1e-15));
  const KernelParams comp = KernelParams::make(KernelFamily::Compound, 2, 2.5, 0.5, 1.0);
  CHECK(kernel_eval(comp, v2(1.0, 2.0), v2(1.0, 2.0)) ==
        Approx(2.5 + 1.0).epsilon(1e-15));
  CHECK(kernel_diag(comp) == Approx(3.5).epsilon(1e-15));
}

TEST_CASE("anisotropic exponential value matches a hand-computed constant") {
  // sigma2=2, weights (0.5, 2), points (1,0) and (0,1):
  // 2*exp(-(0.5*1 + 2*1)) computed independently beforehand.
  const double expected = 0.1641699972477976;
  CHECK(kernel_eval(se_ard(2.0, 0.5, 2.0), v2(1.0, 0.0), v2(0.0, 1.0)) ==
        Approx(expected).epsilon(1e-15));
}

TEST_CASE("unit-scale squared-exponential value at unit distance") {
  CHECK(kernel_eval(rbf(1.0), v2(0.0, 0.0), v2(1.0, 0.0)) ==
        Approx(0.6065306597126334).epsilon(1e-15));
}

TEST_CASE("gram matrix matches entrywise evaluation") {
  Eigen::MatrixXd X(3, 2);
  X << 0, 0, 1, 0, 0, 2;
  const Eigen::MatrixXd K = kernel_matrix(rbf(1.0), X, X);
  CHECK(K(0, 0) == Approx(1.0).epsilon(1e-15));
  CHECK(K(0, 1) == Approx(0.6065306597126334).epsilon(1e-15));
  CHECK(K(0, 2) == Approx(0.1353352832366127).epsilon(1e-15));
  CHECK(K(1, 2) == Approx(0.0820849986238988).epsilon(1e-15));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(K(i, j) == kernel_eval(rbf(1.0), X.row(i), X.row(j)));
}

TEST_CASE("single-entry gram matrix reduces to kernel_eval") {
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 0.3, -0.8;
  b << 1.1, 0.2;
  const KernelParams p = KernelParams::make(KernelFamily::Compound, 2, 1.4, 0.7, 1.0);
  const Eigen::MatrixXd K = kernel_matrix(p, a, b);
  REQUIRE(K.rows() == 1);
  REQUIRE(K.cols() == 1);
  CHECK(K(0, 0) == kernel_eval(p, a.row(0), b.row(0)));
}

TEST_CASE("gram matrix is exactly symmetric on random sets") {
  Rng rng(11);
  Eigen::MatrixXd X(10, 2);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 2; ++j) X(i, j) = rng.uniform(-2.0, 2.0);
  for (const auto fam :
       {KernelFamily::SeArd, KernelFamily::Rbf, KernelFamily::Compound}) {
    const Eigen::MatrixXd K = kernel_matrix(random_params(fam, rng), X, X);
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gram matrix is positive semidefinite") {
  Rng rng(13);
  Eigen::MatrixXd X(10, 2);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 2; ++j) X(i, j) = rng.uniform(-2.0, 2.0);
  const Eigen::MatrixXd K =
      kernel_matrix(random_params(KernelFamily::Compound, rng), X, X);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  CHECK(es.eigenvalues().minCoeff() >= -1e-8 * K.trace());
}

TEST_CASE("spatial derivatives match central differences") {
  Rng rng(17);
  const double h = 1e-5;
  for (const auto fam :
       {KernelFamily::SeArd, KernelFamily::Rbf, KernelFamily::Compound}) {
    const KernelParams p = random_params(fam, rng);
    for (int rep = 0; rep < 20; ++rep) {
      const Eigen::Vector2d a(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
      const Eigen::Vector2d b(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
      const Eigen::VectorXd g = kernel_grad_a(p, a, b);
      for (int l = 0; l < 2; ++l) {
        Eigen::Vector2d ap = a, am = a;
        ap[l] += h;
        am[l] -= h;
        const double fd = (kernel_eval(p, ap, b) - kernel_eval(p, am, b)) / (2 * h);
        CHECK(g[l] == Approx(fd).epsilon(1e-6).margin(1e-9));

        const double fd2 = (kernel_eval(p, ap, b) - 2 * kernel_eval(p, a, b) +
                            kernel_eval(p, am, b)) /
                           (h * h);
        CHECK(kernel_d2_a(p, a, b, l) == Approx(fd2).epsilon(5e-5).margin(1e-5));
      }
    }
  }
}

TEST_CASE("log-parameter derivatives match central differences") {
  Rng rng(19);
  const double h = 1e-6;
  for (const auto fam :
       {KernelFamily::SeArd, KernelFamily::Rbf, KernelFamily::Compound}) {
    const KernelParams p = random_params(fam, rng);
    const Eigen::Vector2d a(0.4, -0.9), b(-0.3, 0.6);
    for (int i = 0; i < p.param_count(); ++i) {
      KernelParams pp = p, pm = p;
      pp.set_param(i, p.param(i) + h);
      pm.set_param(i, p.param(i) - h);
      const double fd = (kernel_eval(pp, a, b) - kernel_eval(pm, a, b)) / (2 * h);
      CHECK(kernel_param_deriv(p, a, b, i) == Approx(fd).epsilon(1e-6).margin(1e-10));
    }
  }
}

TEST_CASE("dimension mismatch is rejected") {
  const KernelParams p = KernelParams::make(KernelFamily::SeArd, 2, 1.0, 0.5, 1.0);
  Eigen::VectorXd a(3), b(3);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(kernel_eval(p, a, b), std::invalid_argument);
}

TEST_CASE("flat parameter indexing covers each family") {
  CHECK(KernelParams::make(KernelFamily::SeArd, 2, 1.0, 0.5, 1.0).param_count() == 3);
  CHECK(KernelParams::make(KernelFamily::Rbf, 2, 1.0, 0.5, 1.0).param_count() == 1);
  KernelParams p = KernelParams::make(KernelFamily::Compound, 2, 1.0, 0.5, 1.0);
  REQUIRE(p.param_count() == 4);
  CHECK(p.param_name(0) == "log_signal_variance");
  CHECK(p.param_name(1) == "log_weight_0");
  CHECK(p.param_name(2) == "log_weight_1");
  CHECK(p.param_name(3) == "log_rbf_scale");
  for (int i = 0; i < 4; ++i) {
    p.set_param(i, 0.25 * i);
    CHECK(p.param(i) == 0.25 * i);
  }
  CHECK_THROWS_AS(p.param(4), std::invalid_argument);
}

TEST_CASE("lengthscale mapping gives the documented initial weight") {
  // lengthscale 0.5 corresponds to weight 1/(2*0.5^2) = 2
  CHECK(KernelParams::weight_from_lengthscale(0.5) == Approx(2.0).epsilon(1e-15));
  const KernelParams p = KernelParams::make(KernelFamily::Compound, 2, 1.0, 0.5, 10.0);
  CHECK(std::exp(p.log_weights[0]) == Approx(2.0).epsilon(1e-12));
  CHECK(std::exp(p.log_noise_precision) == Approx(10.0).epsilon(1e-12));
}
