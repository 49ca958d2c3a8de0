#pragma once

#include "sae/dataset.hpp"

namespace sae {

// psi_q(r) = psi(r/s; c) * {(1-q) I(r<=0) + q I(r>0)}
double psi_q(double r, double q, double s, double c);

struct MQFit {
  Eigen::VectorXd beta;     // exact WLS solution under `weights`
  Eigen::VectorXd weights;  // final per-record IRLS weights
  double s = 1.0;           // final scale
  bool converged = false;
  int iterations = 0;
};

// IRLS solve of sum_ij psi_q(r_ij) x_ij = 0; scale s = median(|r|)/0.6745
// recomputed each iteration, floored at 1e-8. The returned beta is re-solved
// once under the final weights, so beta == (X'WX)^-1 X'W y holds exactly.
MQFit fit_mq(const SurveyDataset& data, double q, double c, double tol = 1e-8,
             int max_iter = 200);

struct MQGridFit {
  Eigen::VectorXd q_grid;  // strictly increasing, in (0,1)
  Eigen::MatrixXd beta_q;  // grid x p
  Eigen::VectorXd scale_s;
  double c = 1.345;
};

Eigen::VectorXd default_mq_grid();  // 0.02, 0.04, ..., 0.98

MQGridFit fit_mq_grid(const SurveyDataset& data, const Eigen::VectorXd& q_grid, double c,
                      int jobs = 1);

// q at which the fitted-value path x'beta_q crosses y: first bracketing grid
// interval, linear interpolation, clamped to [q_min, q_max].
double unit_quantile(double y, const Eigen::VectorXd& x, const MQGridFit& grid);

struct MQAreaFit {
  Eigen::VectorXd unit_q;      // n
  Eigen::VectorXd area_qbar;   // m
  Eigen::MatrixXd beta_qbar;   // m x p, refit at each area's qbar
  Eigen::MatrixXd fit_weights; // m x n, IRLS weights of the refit at qbar_i
  Eigen::VectorXd estimates;   // m
  Eigen::VectorXd mse;         // m, filled by mq_mse
};

MQAreaFit mq_area_estimate(const SurveyDataset& data, const MQGridFit& grid);

// Pseudo-linearization MSE: each estimate written as sum_j w_ij y_j over the
// sampled units, then a heteroscedasticity-robust variance of that linear
// combination plus a squared-bias term.
Eigen::VectorXd mq_mse(const SurveyDataset& data, const MQGridFit& grid, const MQAreaFit& fit);

// The linearization weights w_i. (row i reproduces estimates(i) as w_i . y)
Eigen::MatrixXd mq_weight_matrix(const SurveyDataset& data, const MQAreaFit& fit);

struct MQResult {
  MQGridFit grid;
  MQAreaFit areas;
};

MQResult run_mq(const SurveyDataset& data, double c = 1.345, int jobs = 1);

}  // namespace sae
