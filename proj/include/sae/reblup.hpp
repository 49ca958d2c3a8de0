#pragma once

#include "sae/dataset.hpp"
#include "sae/rng.hpp"

#include <utility>

namespace sae {

// psi_c(u) = u on [-c, c], clipped to +/-c outside
double huber_psi(double u, double c);
// K = E[psi_c^2(U)], U ~ N(0,1); closed form, relative error < 1e-10
double huber_k(double c);

struct HuberPsi {
  double c = 1.345;
  double K = 0.0;
  explicit HuberPsi(double c_ = 1.345);
};

struct ReblupDelta {
  double sigma_v2 = 1.0;
  double sigma_e2 = 1.0;
};

struct REBLUPFit {
  Eigen::VectorXd beta_M;
  ReblupDelta delta_M;
  Eigen::VectorXd v_M;
  Eigen::VectorXd theta;  // Xbar * beta_M + v_M
  HuberPsi psi{1.345};
  int iterations_used = 0;
  bool converged = false;
  // max relative parameter change over the final sweep; converged implies <= tol
  double final_residual_norm = 0.0;
};

struct ReblupConfig {
  double c = 1.345;
  double tol = 1e-6;
  int max_iter = 200;
};

// IRLS fixed point of the robustified Henderson equations at fixed delta.
// Returns (beta, v).
std::pair<Eigen::VectorXd, Eigen::VectorXd> robust_effects_solve(
    const SurveyDataset& data, Eigen::VectorXd beta, Eigen::VectorXd v, const ReblupDelta& delta,
    const HuberPsi& psi, double tol = 1e-10, int max_iter = 200);

// One damped multiplicative step on the robustified variance estimating
// equations; updates floored at 1e-8.
ReblupDelta robust_variance_update(const SurveyDataset& data, const Eigen::VectorXd& beta,
                                   const Eigen::VectorXd& v, const ReblupDelta& delta,
                                   const HuberPsi& psi);

REBLUPFit fit_reblup(const SurveyDataset& data, const HuberPsi& psi, double tol = 1e-6,
                     int max_iter = 200);

// Parametric bootstrap MSE of theta_hat; replicate b uses rng.child(b), so the
// result is independent of `jobs`.
Eigen::VectorXd bootstrap_mse(const REBLUPFit& fit, const SurveyDataset& data, int B,
                              const RngStream& rng, int jobs = 1);

}  // namespace sae
