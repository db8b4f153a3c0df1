#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "prgp/csv.hpp"
#include "prgp/physics.hpp"
#include "prgp/rng.hpp"

using namespace prgp;
using Catch::Approx;

namespace {

SampledField constant_field(Eigen::Index m, double value, double dx = 0.0,
                            double dt = 0.0, double dxx = 0.0) {
  SampledField f;
  f.value = Eigen::VectorXd::Constant(m, value);
  f.dx = Eigen::VectorXd::Constant(m, dx);
  f.dt = Eigen::VectorXd::Constant(m, dt);
  f.dxx = Eigen::VectorXd::Constant(m, dxx);
  return f;
}

PhysicsSpec spec_for(PhysicsModel model) {
  PhysicsSpec s;
  s.model = model;
  const int w = equation_count(model);
  s.gamma.assign(w, 1.0);
  s.shadow.assign(w, KernelParams::make(KernelFamily::Rbf, 2, 1.0, 1.0, 1.0));
  return s;
}

}  // namespace

TEST_CASE("fundamental diagram follows the linear speed-density law") {
  FundamentalDiagram fd;  // defaults: v_f = 65, rho_jam = 200
  CHECK(fd.speed(0.0) == 65.0);
  CHECK(fd.speed(200.0) == 0.0);
  CHECK(fd.speed(100.0) == Approx(32.5));
  CHECK(fd.speed(350.0) == 0.0);  // clamped beyond jam
  CHECK(fd.flow(100.0) == Approx(3250.0));
  CHECK(fd.flow(0.0) == 0.0);
  CHECK(fd.critical_density() == 100.0);
  CHECK(fd.speed_slope(50.0) == Approx(-0.325));
  CHECK(fd.speed_slope(250.0) == 0.0);

  FundamentalDiagram custom{60.0, 120.0};
  CHECK(custom.speed(30.0) == Approx(45.0));
  CHECK(custom.flow(60.0) == Approx(60.0 * 30.0));
  CHECK(custom.critical_density() == 60.0);
}

TEST_CASE("flow peaks at the critical density") {
  FundamentalDiagram fd{55.0, 180.0};
  const double rc = fd.critical_density();
  const double peak = fd.flow(rc);
  for (double rho = 0.0; rho <= 180.0; rho += 1.0)
    CHECK(fd.flow(rho) <= peak + 1e-12);
  CHECK(fd.flow(rc - 1.0) < peak);
  CHECK(fd.flow(rc + 1.0) < peak);
}

TEST_CASE("density clamp keeps residual inputs in the physical band") {
  FundamentalDiagram fd;
  CHECK(clamp_density(-5.0, fd) == kRhoMin);
  CHECK(clamp_density(0.2, fd) == kRhoMin);
  CHECK(clamp_density(80.0, fd) == 80.0);
  CHECK(clamp_density(500.0, fd) == 300.0);  // 1.5 * rho_jam
}

TEST_CASE("model names round-trip and equation counts are fixed") {
  for (const auto m : {PhysicsModel::None, PhysicsModel::Lwr, PhysicsModel::Pw,
                       PhysicsModel::Arz, PhysicsModel::Heat})
    CHECK(physics_model_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(physics_model_from_string("lwrx"), ConfigError);
  CHECK(equation_count(PhysicsModel::None) == 0);
  CHECK(equation_count(PhysicsModel::Lwr) == 1);
  CHECK(equation_count(PhysicsModel::Pw) == 2);
  CHECK(equation_count(PhysicsModel::Arz) == 2);
  CHECK(equation_count(PhysicsModel::Heat) == 1);
}

TEST_CASE("physics spec validation rejects malformed configurations") {
  PhysicsSpec ok = spec_for(PhysicsModel::Pw);
  CHECK_NOTHROW(ok.validate());

  PhysicsSpec short_gamma = ok;
  short_gamma.gamma.pop_back();
  CHECK_THROWS_AS(short_gamma.validate(), ConfigError);

  PhysicsSpec negative = ok;
  negative.gamma[0] = -0.1;
  CHECK_THROWS_AS(negative.validate(), ConfigError);

  PhysicsSpec bad_fd = ok;
  bad_fd.fd.v_f = 0.0;
  CHECK_THROWS_AS(bad_fd.validate(), ConfigError);

  PhysicsSpec none = spec_for(PhysicsModel::None);
  CHECK_NOTHROW(none.validate());
  CHECK_FALSE(none.active());

  PhysicsSpec zeroed = spec_for(PhysicsModel::Lwr);
  zeroed.gamma[0] = 0.0;
  CHECK_FALSE(zeroed.active());
  zeroed.gamma[0] = 0.5;
  CHECK(zeroed.active());
}

TEST_CASE("conservation residual adds the flow divergence to the density rate") {
  FieldSet f;
  // rho(x,t) = 40 + 3t (in time only), q(x,t) = 900 + 120x
  f.rho = constant_field(4, 40.0, 0.0, 3.0);
  f.v = constant_field(4, 30.0);
  f.q_hr = constant_field(4, 900.0, 120.0);
  const Eigen::VectorXd g = lwr_residual(f);
  for (int j = 0; j < 4; ++j) CHECK(g[j] == Approx(123.0));

  // steady uniform state: residual is identically zero
  f.rho = constant_field(4, 40.0);
  f.q_hr = constant_field(4, 900.0);
  CHECK(lwr_residual(f).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("continuity residual expands the product rule") {
  FieldSet f;
  f.rho = constant_field(3, 50.0, -1.0, 3.0);
  f.v = constant_field(3, 40.0, 0.2);
  f.q_hr = constant_field(3, 2000.0);
  // 3 + 50*0.2 + 40*(-1) = -27
  const Eigen::VectorXd g = continuity_residual(f);
  for (int j = 0; j < 3; ++j) CHECK(g[j] == Approx(-27.0));
}

TEST_CASE("momentum residual vanishes in uniform equilibrium") {
  PhysicsSpec spec = spec_for(PhysicsModel::Pw);
  FieldSet f;
  const double rho = 80.0;
  f.rho = constant_field(5, rho);
  f.v = constant_field(5, spec.fd.speed(rho));
  f.q_hr = constant_field(5, spec.fd.flow(rho));
  CHECK(pw_momentum_residual(f, spec).cwiseAbs().maxCoeff() == 0.0);
  spec = spec_for(PhysicsModel::Arz);
  CHECK(arz_momentum_residual(f, spec).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("momentum residual measures the speed excess over relaxation time") {
  PhysicsSpec spec = spec_for(PhysicsModel::Pw);
  FieldSet f;
  const double rho = 80.0, delta = 7.0;
  f.rho = constant_field(2, rho);
  f.v = constant_field(2, spec.fd.speed(rho) + delta);
  f.q_hr = constant_field(2, 0.0);
  const Eigen::VectorXd g_pw = pw_momentum_residual(f, spec);
  CHECK(g_pw[0] == Approx(delta / spec.tau0));  // 7 * 120 = 840 per hour

  const Eigen::VectorXd g_arz = arz_momentum_residual(f, spec_for(PhysicsModel::Arz));
  CHECK(g_arz[0] == Approx(delta / spec.tau0));
}

TEST_CASE("anticipation term scales the density gradient by c0^2 over rho") {
  PhysicsSpec spec = spec_for(PhysicsModel::Pw);
  FieldSet f;
  const double rho = 50.0;
  f.rho = constant_field(2, rho, 2.0);  // drho/dx = 2
  f.v = constant_field(2, spec.fd.speed(rho));
  f.q_hr = constant_field(2, 0.0);
  const Eigen::VectorXd g = pw_momentum_residual(f, spec);
  CHECK(g[0] == Approx(spec.c0_sq / rho * 2.0));  // 100/50*2 = 4
}

TEST_CASE("momentum residual clamps unphysical densities") {
  PhysicsSpec spec = spec_for(PhysicsModel::Pw);
  FieldSet f;
  f.rho = constant_field(1, -5.0);  // clamped to kRhoMin = 1
  f.v = constant_field(1, 0.0);
  f.q_hr = constant_field(1, 0.0);
  const Eigen::VectorXd g = pw_momentum_residual(f, spec);
  const double expected = (0.0 - spec.fd.speed(kRhoMin)) / spec.tau0;
  CHECK(g[0] == Approx(expected));  // -64.675 * 120

  f.rho = constant_field(1, 400.0);  // clamped to 300; V = 0 there
  f.v = constant_field(1, 10.0);
  CHECK(pw_momentum_residual(f, spec)[0] == Approx(10.0 / spec.tau0));
}

TEST_CASE("relaxation residual is exact on the equilibrium manifold") {
  PhysicsSpec spec = spec_for(PhysicsModel::Arz);
  // rho varies but v tracks V(rho) pointwise: u = 0 and du = 0, so g2 = 0.
  FieldSet f;
  const double rho = 80.0;
  const double vp = spec.fd.speed_slope(rho);
  f.rho = constant_field(3, rho, -2.0, 4.0);
  f.v = constant_field(3, spec.fd.speed(rho), vp * -2.0, vp * 4.0);
  f.q_hr = constant_field(3, 0.0);
  CHECK(arz_momentum_residual(f, spec).cwiseAbs().maxCoeff() < 1e-12);

  // off the manifold the chain-rule terms survive: with v frozen at V(rho0)
  // and rho still varying, du/dt = -V' drho/dt and du/dx = -V' drho/dx.
  f.v = constant_field(3, spec.fd.speed(rho));
  const Eigen::VectorXd g = arz_momentum_residual(f, spec);
  const double expected = -vp * 4.0 + spec.fd.speed(rho) * (-vp * -2.0);
  CHECK(g[0] == Approx(expected));
}

TEST_CASE("diffusion residual balances growth against curvature") {
  SampledField f = constant_field(3, 10.0, 0.0, 5.0, 2.0);
  const Eigen::VectorXd r = heat_residual_field(f, 1.5);
  for (int j = 0; j < 3; ++j) CHECK(r[j] == Approx(5.0 - 3.0));

  // stationary parabola F = x^2: dF/dt = 0, d2F/dx2 = 2
  SampledField parabola = constant_field(3, 4.0, 4.0, 0.0, 2.0);
  const Eigen::VectorXd r2 = heat_residual_field(parabola, 2.5);
  for (int j = 0; j < 3; ++j) CHECK(r2[j] == Approx(-5.0));
}

TEST_CASE("residual dispatch emits the documented channel layout") {
  FieldSet f;
  f.rho = constant_field(2, 50.0, 1.0, 2.0, 0.5);
  f.v = constant_field(2, 30.0, -0.5, 1.0, 0.2);
  f.q_hr = constant_field(2, 1500.0, 10.0, -20.0, 3.0);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(2, 2);

  auto b = residuals(spec_for(PhysicsModel::None), f, Z);
  CHECK(b.channels.empty());

  b = residuals(spec_for(PhysicsModel::Lwr), f, Z);
  REQUIRE(b.channels.size() == 1);
  CHECK(b.gamma_index == std::vector<int>{0});
  CHECK(b.channels[0][0] == Approx(lwr_residual(f)[0]));

  b = residuals(spec_for(PhysicsModel::Pw), f, Z);
  REQUIRE(b.channels.size() == 2);
  CHECK(b.gamma_index == std::vector<int>{0, 1});

  b = residuals(spec_for(PhysicsModel::Arz), f, Z);
  REQUIRE(b.channels.size() == 2);
  CHECK(b.gamma_index == std::vector<int>{0, 1});

  b = residuals(spec_for(PhysicsModel::Heat), f, Z);
  REQUIRE(b.channels.size() == 3);
  CHECK(b.gamma_index == std::vector<int>{0, 0, 0});
  const PhysicsSpec hs = spec_for(PhysicsModel::Heat);
  CHECK(b.channels[0][0] == Approx(heat_residual_field(f.rho, hs.beta1)[0]));
  CHECK(b.channels[1][0] == Approx(heat_residual_field(f.v, hs.beta1)[0]));
  CHECK(b.channels[2][0] == Approx(heat_residual_field(f.q_hr, hs.beta1)[0]));
}

TEST_CASE("residual dispatch rejects non-finite samples") {
  FieldSet f;
  f.rho = constant_field(2, 50.0);
  f.rho.dt[1] = std::numeric_limits<double>::quiet_NaN();
  f.v = constant_field(2, 30.0);
  f.q_hr = constant_field(2, 1500.0);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(2, 2);
  CHECK_THROWS_AS(residuals(spec_for(PhysicsModel::Lwr), f, Z), NumericError);
}

TEST_CASE("shadow density of a zero residual is the normalizing constant") {
  Eigen::MatrixXd Z(1, 2);
  Z << 0.3, -0.7;
  const Eigen::VectorXd g = Eigen::VectorXd::Zero(1);
  // normalized square-exponential: unit marginal variance
  const KernelParams rbf = KernelParams::make(KernelFamily::Rbf, 2, 1.0, 1.0, 1.0);
  CHECK(shadow_gp_log_density(g, rbf, Z) ==
        Approx(-0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));

  const KernelParams wide = KernelParams::make(KernelFamily::SeArd, 2, 4.0, 1.0, 1.0);
  CHECK(shadow_gp_log_density(g, wide, Z) ==
        Approx(-0.5 * std::log(4.0) - 0.5 * std::log(2.0 * std::numbers::pi))
            .epsilon(1e-12));
}

TEST_CASE("scalar shadow density matches the univariate Gaussian") {
  Eigen::MatrixXd Z(1, 2);
  Z << 1.0, 2.0;
  Eigen::VectorXd g(1);
  g << 3.0;
  const KernelParams se = KernelParams::make(KernelFamily::SeArd, 2, 2.5, 0.8, 1.0);
  const double c = kernel_diag(se);
  const double expected =
      -0.5 * g[0] * g[0] / c - 0.5 * std::log(c) - 0.5 * std::log(2.0 * std::numbers::pi);
  CHECK(shadow_gp_log_density(g, se, Z) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("shadow density matches a dense multivariate evaluation") {
  Rng rng(97);
  Eigen::MatrixXd Z(5, 2);
  Eigen::VectorXd g(5);
  for (int j = 0; j < 5; ++j) {
    Z(j, 0) = rng.uniform(-2.0, 2.0);
    Z(j, 1) = rng.uniform(-2.0, 2.0);
    g[j] = rng.normal();
  }
  const KernelParams shadow =
      KernelParams::make(KernelFamily::Compound, 2, 1.3, 0.6, 1.0);
  const Eigen::MatrixXd K = kernel_matrix(shadow, Z, Z);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  const double logdet = es.eigenvalues().array().log().sum();
  const double quad = g.dot(K.inverse() * g);
  const double expected =
      -0.5 * quad - 0.5 * logdet - 2.5 * std::log(2.0 * std::numbers::pi);
  CHECK(shadow_gp_log_density(g, shadow, Z) == Approx(expected).epsilon(1e-8));

  Eigen::VectorXd wrong(4);
  wrong.setZero();
  CHECK_THROWS_AS(shadow_gp_log_density(wrong, shadow, Z), std::invalid_argument);
}

TEST_CASE("residual CSV dump lists one row per pseudo-point") {
  FieldSet f;
  f.rho = constant_field(3, 50.0, 1.0, 2.0);
  f.v = constant_field(3, 30.0, -0.5, 1.0);
  f.q_hr = constant_field(3, 1500.0, 10.0, -20.0);
  Eigen::MatrixXd Z(3, 2);
  Z << 0.0, 0.0, 0.5, 0.25, 1.0, 0.5;
  const ResidualBatch batch = residuals(spec_for(PhysicsModel::Pw), f, Z);

  const auto path = std::filesystem::temp_directory_path() / "prgp_residuals.csv";
  write_residual_csv(path.string(), batch);
  const CsvTable table = csv_read(path.string());
  REQUIRE(table.header == std::vector<std::string>{"z_x", "z_t", "g_1", "g_2"});
  REQUIRE(table.rows.size() == 3);
  CHECK(csv_to_double(table.rows[1][0]) == Approx(0.5));
  CHECK(csv_to_double(table.rows[0][2]) == Approx(batch.channels[0][0]));
  CHECK(csv_to_double(table.rows[2][3]) == Approx(batch.channels[1][2]));
  std::filesystem::remove(path);
}
