#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace sae {

// Input/validation failures (CLI maps these to exit code 2).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Estimation failed to converge (CLI maps these to exit code 3).
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UnitRecord {
  int area_id = 0;
  int unit_id = 0;
  double y = 0.0;
  Eigen::VectorXd x;  // leading element is the intercept 1
};

struct AreaInfo {
  int area_id = 0;
  long long N = 0;       // population size
  int n = 0;             // sampled units carrying this area_id
  Eigen::VectorXd xbar;  // population mean covariates, leading 1
};

// Validated unit-level survey dataset with per-area bookkeeping.
class SurveyDataset {
 public:
  SurveyDataset(std::vector<UnitRecord> units, std::vector<AreaInfo> areas);

  int m() const { return static_cast<int>(areas_.size()); }
  int n() const { return static_cast<int>(units_.size()); }
  int p() const { return p_; }

  const std::vector<UnitRecord>& units() const { return units_; }
  const std::vector<AreaInfo>& areas() const { return areas_; }

  // dense area index 0..m-1 in area-file order
  int area_index(int area_id) const;
  // record indices of each area's sampled units, by dense area index
  const std::vector<std::vector<int>>& area_units() const { return area_units_; }

  const Eigen::MatrixXd& X() const { return X_; }      // n x p
  const Eigen::VectorXd& y() const { return y_; }      // n
  const Eigen::MatrixXd& Xbar() const { return Xbar_; }  // m x p
  // dense area index of each record
  const std::vector<int>& record_area() const { return record_area_; }

 private:
  std::vector<UnitRecord> units_;
  std::vector<AreaInfo> areas_;
  std::vector<std::vector<int>> area_units_;
  std::vector<int> record_area_;
  Eigen::MatrixXd X_, Xbar_;
  Eigen::VectorXd y_;
  int p_ = 0;
};

SurveyDataset load_dataset(const std::string& unit_csv_path, const std::string& area_csv_path);
void save_dataset(const SurveyDataset& data, const std::string& unit_csv_path,
                  const std::string& area_csv_path);

// r_ij = y_ij - x_ij' beta - v_{area(ij)}; v indexed by dense area index.
Eigen::VectorXd residual(const SurveyDataset& data, const Eigen::VectorXd& beta,
                         const Eigen::VectorXd& v);

// theta_i = xbar_i' beta + v_i
Eigen::VectorXd theta(const SurveyDataset& data, const Eigen::VectorXd& beta,
                      const Eigen::VectorXd& v);

// Finite-population mean: (sum of sampled y + sum of unsampled predictions)/N_i.
// Requires sampled.size() + unsampled.size() == N_i.
double compose_area_mean(const std::vector<double>& sampled_y,
                         const std::vector<double>& unsampled_pred, long long N_i);

namespace io {
// Shortest exact round-trip decimal formatting for a double.
std::string fmt_double(double v);
}  // namespace io

}  // namespace sae
