#pragma once

// Numerical core: design matrices, OLS via column-pivoted QR, non-negative
// least squares (Lawson-Hanson), and REML-fitted linear mixed models with
// diagonal per-group random-effect covariance.

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/domain.hpp"

namespace debias::regress {

class RegressError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Row-wise metadata carried alongside X so folds and per-country random
// effects can be resolved without a side channel.
struct RowInfo {
  RegionId region;
  CountryId country;  // group label for random effects
  std::optional<Stratum> stratum;
};

struct DesignMatrix {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  std::vector<std::string> column_names;  // size p, unique
  std::vector<RowInfo> rows;              // size n

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
  // Throws RegressError on non-finite entries, duplicate column names, or
  // mismatched sizes. Every solver calls this on entry.
  void validate() const;
};

struct FixedFit {
  std::vector<std::string> column_names;
  Eigen::VectorXd beta;
  double sigma2 = 0.0;        // residual variance, RSS / (n - p); 0 when n == p
  Eigen::MatrixXd beta_cov;   // sigma2 * (X'X)^-1, symmetric PSD
  Eigen::Index rank = 0;
  double condition = 0.0;     // |R(0,0)| / |R(p-1,p-1)| from pivoted QR
  Eigen::Index n = 0, p = 0;
};

struct MixedFit {
  std::vector<std::string> column_names;   // fixed columns, X order
  std::vector<std::string> random_columns; // subset of column_names, X order
  Eigen::VectorXd beta;                    // GLS fixed effects at the optimum
  std::vector<CountryId> groups;           // sorted group ids
  Eigen::MatrixXd blups;                   // groups.size() x random_columns.size()
  Eigen::VectorXd variance_components;     // tau_k >= 0 per random column
  double sigma2 = 0.0;
  double reml_loglik = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

class RankError : public RegressError {
 public:
  RankError(const std::string& msg, std::vector<std::string> dependent)
      : RegressError(msg), dependent_columns(std::move(dependent)) {}
  std::vector<std::string> dependent_columns;
};

class RemlNonConvergence : public RegressError {
 public:
  RemlNonConvergence(const std::string& msg, MixedFit best)
      : RegressError(msg), best_iterate(std::move(best)) {}
  MixedFit best_iterate;
};

// Columns whose |R(i,i)| falls below |R(0,0)| / kConditionLimit are treated
// as linearly dependent and the fit is rejected.
inline constexpr double kConditionLimit = 1e10;

// Least squares by column-pivoted Householder QR on X itself. With
// include_intercept a leading all-ones column named "intercept" is prepended.
FixedFit ols(const DesignMatrix& dm, bool include_intercept = false);

// Lawson-Hanson active set: beta >= 0 elementwise, KKT residual <= 1e-8
// relative on exit. beta_cov is conditional on the final active set (zero
// rows/columns for constrained coordinates).
FixedFit nnls(const DesignMatrix& dm);

struct RemlOptions {
  int max_iterations = 500;
  double rel_tol = 1e-8;   // relative change of the restricted log-likelihood
  double grad_tol = 1e-6;  // gradient norm in log-parameter space
};

// Restricted maximum likelihood over log(tau_1..K) and log(sigma2) with a
// BFGS ascent; requires >= 2 groups and every random column present in X.
MixedFit reml_fit(const DesignMatrix& dm, const std::vector<std::string>& random_columns,
                  const RemlOptions& opts = {});

// One evaluation of the restricted log-likelihood at fixed variance
// parameters, with the GLS beta and BLUPs it implies. Exposed so tests can
// check the analytic gradient against finite differences and pin tau = 0.
struct RemlEval {
  bool valid = false;      // false when a covariance factorization failed
  double loglik = 0.0;
  Eigen::VectorXd grad;    // d loglik / d [log tau_1..K, log sigma2]
  Eigen::VectorXd beta;
  Eigen::MatrixXd blups;   // groups x K, group order as in reml_groups
  std::vector<CountryId> groups;
};
RemlEval reml_eval(const DesignMatrix& dm, const std::vector<std::string>& random_columns,
                   const Eigen::VectorXd& tau, double sigma2, bool want_gradient = true);

// X beta; column names must match the fit exactly (order included).
Eigen::VectorXd predict(const FixedFit& fit, const DesignMatrix& rows);

// X beta plus, when use_random_effects and the row's country was seen at
// training, Z_row . blup(country). Unknown countries get BLUP = 0.
Eigen::VectorXd predict(const MixedFit& fit, const DesignMatrix& rows, bool use_random_effects);

}  // namespace debias::regress
