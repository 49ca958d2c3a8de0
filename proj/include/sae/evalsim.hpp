#pragma once

#include "sae/dataset.hpp"
#include "sae/rng.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace sae {

enum class ErrorLaw { normal, mixture, t4 };

ErrorLaw parse_error_law(const std::string& name);  // "none", "mixture", "t4"
std::string error_law_name(ErrorLaw law);

struct SimScenario {
  int m = 40;
  long long N = 200;  // population size per area
  int n = 4;          // sample size per area
  double beta0 = 1.0, beta1 = 1.0;
  double sigma_v2 = 1.0;
  ErrorLaw law = ErrorLaw::normal;
  int S = 50;
  std::uint64_t seed = 20240801u;
};

struct Population {
  Eigen::MatrixXd x;      // m x N, fixed across replicates of a study
  Eigen::MatrixXd ystar;  // m x N
  Eigen::VectorXd theta;  // beta0 + beta1*Xbar_i + v_i
  Eigen::VectorXd ybar;   // finite-population mean of ystar
  Eigen::VectorXd xbar;   // per-area population covariate mean
};

// study covariates, drawn once from N(1,1) under the study seed
Eigen::MatrixXd sim_covariates(const SimScenario& sc);

// v and e redrawn on the caller's stream; x is the cached study draw
Population generate_population(const SimScenario& sc, const Eigen::MatrixXd& x, RngStream& rng);

// SRS without replacement of size n within every area
SurveyDataset draw_srs(const Population& pop, int n, RngStream& rng);

struct MethodEstimate {
  Eigen::VectorXd estimate;
  Eigen::VectorXd uncertainty;  // posterior variance or MSE estimate
  Eigen::VectorXd lo90, hi90, lo95, hi95;
  bool ok = true;
  std::string error;
};

using MethodRunner = std::function<MethodEstimate(const SurveyDataset&, RngStream&)>;

// fixed method order; child-stream indices follow it, so a method's draws do
// not depend on which other methods were requested
extern const std::vector<std::string> kSimMethods;  // dg, nm, sr, mq
MethodRunner default_method_runner(const std::string& method);

struct MetricRow {
  double eB = 0.0, eM = 0.0, RE = 0.0;
  double coverage90 = 0.0, coverage95 = 0.0;
  double avg_len90 = 0.0, avg_len95 = 0.0;
};

struct SimMetrics {
  SimScenario scenario;
  std::vector<std::string> methods;
  std::map<std::string, std::vector<MetricRow>> by_method;  // per dense area
  std::map<std::string, int> failures;  // replicates excluded per method
  double max_theta_ybar_gap = 0.0;      // reported, not asserted
};

// overrides substitute a method's runner (test doubles); aggregation order is
// fixed by replicate index, so results do not depend on `jobs`
SimMetrics run_study(const SimScenario& sc, const std::vector<std::string>& methods, int jobs = 1,
                     const std::map<std::string, MethodRunner>& overrides = {});

// tidy long format: area, method, metric, value
void write_metrics_csv(const SimMetrics& metrics, const std::string& path);
void write_summary_json(const SimMetrics& metrics, const std::string& path);

}  // namespace sae
