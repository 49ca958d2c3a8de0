#include "sae/mquantile.hpp"

#include "sae/reblup.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>
#include <vector>

namespace sae {
namespace {

constexpr double kScaleFloor = 1e-8;

double median_of(std::vector<double> a) {
  size_t h = a.size() / 2;
  std::nth_element(a.begin(), a.begin() + h, a.end());
  double hi = a[h];
  if (a.size() % 2 == 1) return hi;
  double lo = *std::max_element(a.begin(), a.begin() + h);
  return 0.5 * (lo + hi);
}

// median absolute deviation about the residual median; at off-center q the
// residuals are mostly one-signed, so centering matters
double mad(const Eigen::VectorXd& r) {
  std::vector<double> a(r.data(), r.data() + r.size());
  double med = median_of(a);
  for (double& v : a) v = std::abs(v - med);
  return median_of(std::move(a));
}

// IRLS weight: psi_q(r)/r, with the symmetric interior limit at r = 0
double mq_weight(double r, double q, double s, double c) {
  if (std::abs(r) < 1e-300) return 0.5 / s;
  return psi_q(r, q, s, c) / r;
}

}  // namespace

double psi_q(double r, double q, double s, double c) {
  double fac = r > 0.0 ? q : 1.0 - q;
  return huber_psi(r / s, c) * fac;
}

MQFit fit_mq(const SurveyDataset& data, double q, double c, double tol, int max_iter) {
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("fit_mq: q must lie in (0,1)");
  if (c <= 0.0) throw ValidationError("fit_mq: c must be positive");
  if (data.n() <= data.p())
    throw ValidationError("fit_mq: insufficient degrees of freedom (need n > p)");
  const int n = data.n(), p = data.p();
  const Eigen::MatrixXd& X = data.X();
  const Eigen::VectorXd& y = data.y();

  MQFit fit;
  fit.beta = X.colPivHouseholderQr().solve(y);
  if (!fit.beta.allFinite()) throw ConvergenceError("fit_mq: singular design");

  Eigen::VectorXd w(n);
  auto weights_at = [&](const Eigen::VectorXd& beta, double& s_out) {
    Eigen::VectorXd r = y - X * beta;
    s_out = std::max(mad(r) / 0.6745, kScaleFloor);
    for (int j = 0; j < n; ++j) w(j) = mq_weight(r(j), q, s_out, c);
  };
  auto wls_solve = [&]() {
    Eigen::MatrixXd M = X.transpose() * w.asDiagonal() * X;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    if (ldlt.info() != Eigen::Success)
      throw ConvergenceError("fit_mq: singular weighted design");
    Eigen::VectorXd sol = ldlt.solve(X.transpose() * (w.asDiagonal() * y));
    if (!sol.allFinite()) throw ConvergenceError("fit_mq: non-finite solution");
    return sol;
  };

  for (int it = 1; it <= max_iter; ++it) {
    fit.iterations = it;
    weights_at(fit.beta, fit.s);
    Eigen::VectorXd next = wls_solve();
    double change = 0.0;
    for (int j = 0; j < p; ++j)
      change = std::max(change, std::abs(next(j) - fit.beta(j)) / (1.0 + std::abs(fit.beta(j))));
    fit.beta = next;
    if (change < tol) {
      fit.converged = true;
      break;
    }
  }
  // re-solve under the weights of the final beta so that
  // beta == (X'WX)^-1 X'W y exactly for the reported weights
  weights_at(fit.beta, fit.s);
  fit.beta = wls_solve();
  fit.weights = w;
  return fit;
}

Eigen::VectorXd default_mq_grid() {
  Eigen::VectorXd g(49);
  for (int k = 0; k < 49; ++k) g(k) = 0.02 * (k + 1);
  return g;
}

MQGridFit fit_mq_grid(const SurveyDataset& data, const Eigen::VectorXd& q_grid, double c,
                      int jobs) {
  if (q_grid.size() < 2) throw ValidationError("fit_mq_grid: need at least 2 grid points");
  for (Eigen::Index k = 0; k < q_grid.size(); ++k) {
    if (!(q_grid(k) > 0.0 && q_grid(k) < 1.0))
      throw ValidationError("fit_mq_grid: grid points must lie in (0,1)");
    if (k > 0 && !(q_grid(k) > q_grid(k - 1)))
      throw ValidationError("fit_mq_grid: grid must be strictly increasing");
  }
  MQGridFit grid;
  grid.q_grid = q_grid;
  grid.c = c;
  grid.beta_q.resize(q_grid.size(), data.p());
  grid.scale_s.resize(q_grid.size());

  auto fit_one = [&](Eigen::Index k) {
    MQFit f = fit_mq(data, q_grid(k), c);
    grid.beta_q.row(k) = f.beta.transpose();
    grid.scale_s(k) = f.s;
  };
  jobs = std::max(jobs, 1);
  if (jobs == 1) {
    for (Eigen::Index k = 0; k < q_grid.size(); ++k) fit_one(k);
  } else {
    std::atomic<Eigen::Index> next{0};
    std::vector<std::future<void>> futs;
    for (int t = 0; t < jobs; ++t)
      futs.push_back(std::async(std::launch::async, [&]() {
        for (Eigen::Index k = next.fetch_add(1); k < q_grid.size(); k = next.fetch_add(1))
          fit_one(k);
      }));
    for (auto& f : futs) f.get();
  }
  return grid;
}

double unit_quantile(double y, const Eigen::VectorXd& x, const MQGridFit& grid) {
  const Eigen::Index G = grid.q_grid.size();
  Eigen::VectorXd f = grid.beta_q * x;  // fitted value path over the grid
  for (Eigen::Index k = 0; k + 1 < G; ++k) {
    double a = f(k), b = f(k + 1);
    if ((a - y) * (b - y) <= 0.0) {
      double t = a == b ? 0.0 : (y - a) / (b - a);
      return grid.q_grid(k) + t * (grid.q_grid(k + 1) - grid.q_grid(k));
    }
  }
  // no crossing: clamp to the side the value escaped on
  return y > f.maxCoeff() ? grid.q_grid(G - 1) : grid.q_grid(0);
}

MQAreaFit mq_area_estimate(const SurveyDataset& data, const MQGridFit& grid) {
  const int m = data.m(), n = data.n();
  MQAreaFit out;
  out.unit_q.resize(n);
  for (int r = 0; r < n; ++r)
    out.unit_q(r) = unit_quantile(data.y()(r), data.X().row(r).transpose(), grid);

  out.area_qbar.resize(m);
  out.beta_qbar.resize(m, data.p());
  out.fit_weights.resize(m, n);
  out.estimates.resize(m);
  for (int i = 0; i < m; ++i) {
    const auto& recs = data.area_units()[i];
    if (recs.empty())
      throw ValidationError("mq_area_estimate: area " + std::to_string(data.areas()[i].area_id) +
                            " has no sampled units");
    double qb = 0.0;
    for (int r : recs) qb += out.unit_q(r);
    qb /= static_cast<double>(recs.size());
    out.area_qbar(i) = qb;

    MQFit f = fit_mq(data, qb, grid.c);
    if (!f.converged)
      throw ConvergenceError("mq_area_estimate: refit at qbar for area " +
                             std::to_string(data.areas()[i].area_id) + " did not converge");
    out.beta_qbar.row(i) = f.beta.transpose();
    out.fit_weights.row(i) = f.weights.transpose();

    const auto& a = data.areas()[i];
    double ni = static_cast<double>(a.n), Ni = static_cast<double>(a.N);
    double ysum = 0.0;
    Eigen::VectorXd xbar_s = Eigen::VectorXd::Zero(data.p());
    for (int r : recs) {
      ysum += data.y()(r);
      xbar_s += data.X().row(r).transpose();
    }
    xbar_s /= ni;
    // unsampled covariate total: N_i Xbar_i - n_i xbar_i
    Eigen::VectorXd t_i = Ni * a.xbar - ni * xbar_s;
    double ybar_s = ysum / ni;
    out.estimates(i) =
        (ysum + t_i.dot(f.beta) + (Ni - ni) * (ybar_s - xbar_s.dot(f.beta))) / Ni;
  }
  return out;
}

Eigen::MatrixXd mq_weight_matrix(const SurveyDataset& data, const MQAreaFit& fit) {
  const int m = data.m(), n = data.n();
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(m, n);
  for (int i = 0; i < m; ++i) {
    const auto& a = data.areas()[i];
    const auto& recs = data.area_units()[i];
    double ni = static_cast<double>(a.n), Ni = static_cast<double>(a.N);
    Eigen::VectorXd xbar_s = Eigen::VectorXd::Zero(data.p());
    for (int r : recs) xbar_s += data.X().row(r).transpose();
    xbar_s /= ni;
    Eigen::VectorXd u = Ni * (a.xbar - xbar_s);

    // beta_qbar(i) = (X'WX)^-1 X'W y =: A_i y, so u'A_i gives the synthetic
    // part's contribution to each sampled unit's weight
    Eigen::VectorXd om = fit.fit_weights.row(i).transpose();
    Eigen::MatrixXd M = data.X().transpose() * om.asDiagonal() * data.X();
    Eigen::VectorXd g = data.X() * M.ldlt().solve(u);
    for (int r = 0; r < n; ++r) W(i, r) = g(r) * om(r) / Ni;
    for (int r : recs) W(i, r) += (1.0 + (Ni - ni) / ni) / Ni;
  }
  return W;
}

Eigen::VectorXd mq_mse(const SurveyDataset& data, const MQGridFit& grid, const MQAreaFit& fit) {
  (void)grid;
  const int m = data.m(), n = data.n();
  Eigen::MatrixXd W = mq_weight_matrix(data, fit);

  // own-area fitted values and residuals: each record is judged by the fit of
  // its own area's qbar
  Eigen::VectorXd mu(n), d(n);
  for (int r = 0; r < n; ++r) {
    int i = data.record_area()[r];
    mu(r) = data.X().row(r).dot(fit.beta_qbar.row(i));
    d(r) = data.y()(r) - mu(r);
  }

  Eigen::VectorXd mse(m);
  for (int i = 0; i < m; ++i) {
    const auto& a = data.areas()[i];
    const auto& recs = data.area_units()[i];
    double ni = static_cast<double>(a.n), Ni = static_cast<double>(a.N);

    double var = 0.0;
    for (int r = 0; r < n; ++r) {
      double aij = W(i, r) - (data.record_area()[r] == i ? 1.0 / Ni : 0.0);
      var += aij * aij * d(r) * d(r);
    }
    double s2_own = 0.0;
    for (int r : recs) s2_own += d(r) * d(r);
    s2_own /= ni;
    var += (Ni - ni) / (Ni * Ni) * s2_own;

    // bias of the linearized estimator against the plug-in model mean
    Eigen::VectorXd xbar_s = Eigen::VectorXd::Zero(data.p());
    double mu_sum = 0.0;
    for (int r : recs) {
      xbar_s += data.X().row(r).transpose();
      mu_sum += mu(r);
    }
    xbar_s /= ni;
    Eigen::VectorXd t_i = Ni * a.xbar - ni * xbar_s;
    double target = (mu_sum + t_i.dot(fit.beta_qbar.row(i))) / Ni;
    double bias = W.row(i).dot(mu) - target;
    mse(i) = var + bias * bias;
  }
  return mse;
}

MQResult run_mq(const SurveyDataset& data, double c, int jobs) {
  MQResult r;
  r.grid = fit_mq_grid(data, default_mq_grid(), c, jobs);
  r.areas = mq_area_estimate(data, r.grid);
  r.areas.mse = mq_mse(data, r.grid, r.areas);
  return r;
}

}  // namespace sae
