#include "sae/reblup.hpp"

#include <boost/math/distributions/normal.hpp>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>

namespace sae {
namespace {

constexpr double kVarFloor = 1e-8;

double rel_change(double a, double b) { return std::abs(a - b) / (1.0 + std::abs(b)); }

double weight(double u, double c) {
  double au = std::abs(u);
  return au <= c || au == 0.0 ? 1.0 : c / au;
}

}  // namespace

double huber_psi(double u, double c) {
  if (c <= 0.0) throw ValidationError("huber_psi: c must be positive");
  return std::clamp(u, -c, c);
}

double huber_k(double c) {
  if (c <= 0.0) throw ValidationError("huber_k: c must be positive");
  boost::math::normal_distribution<double> N01;
  double inner = boost::math::cdf(N01, c) - boost::math::cdf(N01, -c);  // P(|U| <= c)
  double phi_c = boost::math::pdf(N01, c);
  return inner - 2.0 * c * phi_c + c * c * (1.0 - inner);
}

HuberPsi::HuberPsi(double c_) : c(c_), K(huber_k(c_)) {}

std::pair<Eigen::VectorXd, Eigen::VectorXd> robust_effects_solve(
    const SurveyDataset& data, Eigen::VectorXd beta, Eigen::VectorXd v, const ReblupDelta& delta,
    const HuberPsi& psi, double tol, int max_iter) {
  if (!(delta.sigma_v2 > 0.0) || !(delta.sigma_e2 > 0.0))
    throw ValidationError("robust_effects_solve: variance components must be positive");
  const int p = data.p(), m = data.m(), n = data.n();
  if (beta.size() != p || v.size() != m)
    throw ValidationError("robust_effects_solve: starting point has wrong dimensions");
  const double se = std::sqrt(delta.sigma_e2), sv = std::sqrt(delta.sigma_v2);

  Eigen::MatrixXd A(p + m, p + m);
  Eigen::VectorXd b(p + m);
  for (int it = 0; it < max_iter; ++it) {
    A.setZero();
    b.setZero();
    // weighted Henderson normal equations: blocks [beta; v]
    for (int r = 0; r < n; ++r) {
      int i = data.record_area()[r];
      double res = data.y()(r) - data.X().row(r).dot(beta) - v(i);
      double w = weight(res / se, psi.c) / delta.sigma_e2;
      Eigen::VectorXd x = data.X().row(r).transpose();
      A.topLeftCorner(p, p).noalias() += w * x * x.transpose();
      A.block(0, p + i, p, 1) += w * x;
      A.block(p + i, 0, 1, p) += w * x.transpose();
      A(p + i, p + i) += w;
      b.head(p) += w * data.y()(r) * x;
      b(p + i) += w * data.y()(r);
    }
    for (int i = 0; i < m; ++i) A(p + i, p + i) += weight(v(i) / sv, psi.c) / delta.sigma_v2;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success)
      throw ConvergenceError("robust_effects_solve: singular weighted system");
    Eigen::VectorXd sol = ldlt.solve(b);
    if (!sol.allFinite())
      throw ConvergenceError("robust_effects_solve: non-finite solution");

    double change = 0.0;
    for (int j = 0; j < p; ++j) change = std::max(change, rel_change(sol(j), beta(j)));
    for (int i = 0; i < m; ++i) change = std::max(change, rel_change(sol(p + i), v(i)));
    beta = sol.head(p);
    v = sol.tail(m);
    if (change < tol) break;
  }
  return {std::move(beta), std::move(v)};
}

ReblupDelta robust_variance_update(const SurveyDataset& data, const Eigen::VectorXd& beta,
                                   const Eigen::VectorXd& v, const ReblupDelta& delta,
                                   const HuberPsi& psi) {
  if (!(delta.sigma_v2 > 0.0) || !(delta.sigma_e2 > 0.0))
    throw ValidationError("robust_variance_update: variance components must be positive");
  const double se = std::sqrt(delta.sigma_e2), sv = std::sqrt(delta.sigma_v2);

  Eigen::VectorXd r = residual(data, beta, v);
  double num_e = 0.0;
  for (int j = 0; j < data.n(); ++j) {
    double ps = huber_psi(r(j) / se, psi.c);
    num_e += ps * ps;
  }
  num_e /= psi.K;
  double num_v = 0.0;
  for (int i = 0; i < data.m(); ++i) {
    double ps = huber_psi(v(i) / sv, psi.c);
    num_v += ps * ps;
  }
  num_v /= psi.K;

  // model-expected counts with leverage correction, in closed form for the
  // block-diagonal NER covariance: den_e = sigma_e2 * tr(V^-1),
  // den_v = sigma_v2 * tr(V^-1 Z Z^T)
  double den_e = 0.0, den_v = 0.0;
  for (const auto& a : data.areas()) {
    double ni = static_cast<double>(a.n);
    double d = delta.sigma_e2 + ni * delta.sigma_v2;
    den_e += ni * (delta.sigma_e2 + (ni - 1.0) * delta.sigma_v2) / d;
    den_v += ni * delta.sigma_v2 / d;
  }

  ReblupDelta out;
  out.sigma_e2 = den_e > 0.0 ? delta.sigma_e2 * num_e / den_e : delta.sigma_e2;
  out.sigma_v2 = den_v > 0.0 ? delta.sigma_v2 * num_v / den_v : delta.sigma_v2;
  if (!std::isfinite(out.sigma_e2) || !std::isfinite(out.sigma_v2))
    throw ConvergenceError("robust_variance_update: non-finite step");
  // damped retreat on degenerate steps, then the hard positivity floor
  if (out.sigma_e2 <= 0.0) out.sigma_e2 = 0.5 * delta.sigma_e2;
  if (out.sigma_v2 <= 0.0) out.sigma_v2 = 0.5 * delta.sigma_v2;
  out.sigma_e2 = std::max(out.sigma_e2, kVarFloor);
  out.sigma_v2 = std::max(out.sigma_v2, kVarFloor);
  return out;
}

REBLUPFit fit_reblup(const SurveyDataset& data, const HuberPsi& psi, double tol, int max_iter) {
  if (data.m() < 2) throw ValidationError("fit_reblup requires at least 2 areas");
  if (data.n() <= data.p())
    throw ValidationError("fit_reblup: insufficient degrees of freedom (need n > p)");

  REBLUPFit fit;
  fit.psi = psi;
  fit.beta_M = data.X().colPivHouseholderQr().solve(data.y());
  if (!fit.beta_M.allFinite()) throw ConvergenceError("fit_reblup: singular design");
  fit.v_M = Eigen::VectorXd::Zero(data.m());
  Eigen::VectorXd r0 = data.y() - data.X() * fit.beta_M;
  double s2 = std::max(r0.squaredNorm() / std::max(data.n() - data.p(), 1), kVarFloor);
  fit.delta_M = {0.5 * s2, s2};

  for (int it = 1; it <= max_iter; ++it) {
    fit.iterations_used = it;
    ReblupDelta old = fit.delta_M;
    Eigen::VectorXd old_beta = fit.beta_M, old_v = fit.v_M;

    std::tie(fit.beta_M, fit.v_M) =
        robust_effects_solve(data, fit.beta_M, fit.v_M, fit.delta_M, psi, 0.01 * tol, 100);
    fit.delta_M = robust_variance_update(data, fit.beta_M, fit.v_M, fit.delta_M, psi);

    double change = std::max(rel_change(fit.delta_M.sigma_e2, old.sigma_e2),
                             rel_change(fit.delta_M.sigma_v2, old.sigma_v2));
    for (int j = 0; j < data.p(); ++j)
      change = std::max(change, rel_change(fit.beta_M(j), old_beta(j)));
    for (int i = 0; i < data.m(); ++i) change = std::max(change, rel_change(fit.v_M(i), old_v(i)));
    fit.final_residual_norm = change;
    if (change < tol) {
      fit.converged = true;
      break;
    }
  }
  fit.theta = data.Xbar() * fit.beta_M + fit.v_M;
  return fit;
}

Eigen::VectorXd bootstrap_mse(const REBLUPFit& fit, const SurveyDataset& data, int B,
                              const RngStream& rng, int jobs) {
  if (!fit.converged) throw ValidationError("bootstrap_mse requires a converged fit");
  if (B < 1) throw ValidationError("bootstrap_mse requires B >= 1");
  jobs = std::max(jobs, 1);
  const int m = data.m();

  // one replicate: simulate from the fitted model, refit, return squared errors
  auto replicate = [&](int b, Eigen::VectorXd& sq) -> bool {
    RngStream rs = rng.child(static_cast<std::uint64_t>(b));
    std::vector<UnitRecord> units = data.units();
    Eigen::VectorXd vstar(m), theta_star(m);
    for (int i = 0; i < m; ++i) vstar(i) = rs.normal(0.0, fit.delta_M.sigma_v2);
    theta_star = data.Xbar() * fit.beta_M + vstar;
    for (int r = 0; r < data.n(); ++r) {
      int i = data.record_area()[r];
      units[r].y = data.X().row(r).dot(fit.beta_M) + vstar(i) +
                   rs.normal(0.0, fit.delta_M.sigma_e2);
    }
    SurveyDataset boot(std::move(units), data.areas());
    REBLUPFit refit;
    try {
      // replicates whose sigma_v2 heads for the boundary decay geometrically
      // and need more sweeps than the interactive default
      refit = fit_reblup(boot, fit.psi, 1e-6, 1000);
    } catch (const ConvergenceError&) {
      return false;
    }
    if (!refit.converged) return false;
    sq = (refit.theta - theta_star).array().square();
    return true;
  };

  std::vector<Eigen::VectorXd> sq(B);
  std::vector<char> ok(B, 0);
  if (jobs == 1) {
    for (int b = 0; b < B; ++b) ok[b] = replicate(b, sq[b]) ? 1 : 0;
  } else {
    std::vector<std::future<void>> futs;
    std::atomic<int> next{0};
    for (int w = 0; w < jobs; ++w)
      futs.push_back(std::async(std::launch::async, [&]() {
        for (int b = next.fetch_add(1); b < B; b = next.fetch_add(1))
          ok[b] = replicate(b, sq[b]) ? 1 : 0;
      }));
    for (auto& f : futs) f.get();
  }

  int failures = 0;
  Eigen::VectorXd mse = Eigen::VectorXd::Zero(m);
  for (int b = 0; b < B; ++b) {
    if (!ok[b]) {
      ++failures;
      continue;
    }
    mse += sq[b];
  }
  if (failures * 10 > B)
    throw ConvergenceError("bootstrap_mse: " + std::to_string(failures) + " of " +
                           std::to_string(B) + " refits failed to converge");
  mse /= static_cast<double>(B - failures);
  return mse;
}

}  // namespace sae
