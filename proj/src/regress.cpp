#include "debias/regress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace debias::regress {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct RankCheck {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  Eigen::Index rank = 0;
  double condition = 0.0;
};

// Shared entry gate for every solver: size sanity, then pivoted QR with the
// fixed condition threshold. Throws RankError naming the trailing pivot
// columns; removing exactly those restores full rank.
RankCheck check_rank(const DesignMatrix& dm, const char* who) {
  dm.validate();
  const Eigen::Index n = dm.n(), p = dm.p();
  if (p == 0) throw RegressError(std::string(who) + ": design has no columns");
  if (n < p)
    throw RegressError(std::string(who) + ": n=" + std::to_string(n) + " rows < p=" +
                       std::to_string(p) + " columns");
  RankCheck rc;
  rc.qr.compute(dm.X);
  Eigen::VectorXd rdiag = rc.qr.matrixR().topLeftCorner(p, p).diagonal().cwiseAbs();
  const double pivot_floor = rdiag(0) / kConditionLimit;
  rc.rank = 0;
  while (rc.rank < p && rdiag(rc.rank) > pivot_floor && rdiag(rc.rank) > 0.0) ++rc.rank;
  if (rc.rank < p) {
    const auto& perm = rc.qr.colsPermutation().indices();
    std::vector<std::string> dependent;
    for (Eigen::Index i = rc.rank; i < p; ++i)
      dependent.push_back(dm.column_names[perm(i)]);
    std::sort(dependent.begin(), dependent.end());
    std::ostringstream msg;
    msg << who << ": rank-deficient design (rank " << rc.rank << " of " << p
        << "); dependent columns:";
    for (const auto& c : dependent) msg << " " << c;
    throw RankError(msg.str(), std::move(dependent));
  }
  rc.condition = rdiag(0) / rdiag(p - 1);
  return rc;
}

// (X'X)^-1 from the pivoted factor: X P = Q R gives
// (X'X)^-1 = P (R'R)^-1 P'.
Eigen::MatrixXd xtx_inverse(const RankCheck& rc, Eigen::Index p) {
  Eigen::MatrixXd rinv = rc.qr.matrixR()
                             .topLeftCorner(p, p)
                             .triangularView<Eigen::Upper>()
                             .solve(Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd piv = rinv * rinv.transpose();
  const auto& perm = rc.qr.colsPermutation().indices();
  Eigen::MatrixXd out(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) out(perm(i), perm(j)) = piv(i, j);
  return 0.5 * (out + out.transpose());
}

DesignMatrix with_intercept(const DesignMatrix& dm) {
  DesignMatrix out;
  out.y = dm.y;
  out.X.resize(dm.n(), dm.p() + 1);
  out.X.col(0).setOnes();
  out.X.rightCols(dm.p()) = dm.X;
  out.column_names.reserve(dm.column_names.size() + 1);
  out.column_names.push_back("intercept");
  out.column_names.insert(out.column_names.end(), dm.column_names.begin(),
                          dm.column_names.end());
  out.rows = dm.rows;
  return out;
}

FixedFit finish_fixed(const DesignMatrix& dm, const RankCheck& rc, Eigen::VectorXd beta,
                      const std::vector<bool>* passive) {
  const Eigen::Index n = dm.n(), p = dm.p();
  FixedFit fit;
  fit.column_names = dm.column_names;
  fit.beta = std::move(beta);
  fit.rank = rc.rank;
  fit.condition = rc.condition;
  fit.n = n;
  fit.p = p;
  const double rss = (dm.y - dm.X * fit.beta).squaredNorm();
  fit.sigma2 = n > p ? rss / static_cast<double>(n - p) : 0.0;
  if (!passive) {
    fit.beta_cov = fit.sigma2 * xtx_inverse(rc, p);
    return fit;
  }
  // Constrained fit: covariance conditional on the final active set.
  fit.beta_cov = Eigen::MatrixXd::Zero(p, p);
  std::vector<Eigen::Index> free_idx;
  for (Eigen::Index j = 0; j < p; ++j)
    if ((*passive)[j]) free_idx.push_back(j);
  if (!free_idx.empty()) {
    Eigen::MatrixXd xp(n, static_cast<Eigen::Index>(free_idx.size()));
    for (std::size_t k = 0; k < free_idx.size(); ++k) xp.col(k) = dm.X.col(free_idx[k]);
    Eigen::MatrixXd xtx = (xp.transpose() * xp).ldlt().solve(
        Eigen::MatrixXd::Identity(free_idx.size(), free_idx.size()));
    for (std::size_t a = 0; a < free_idx.size(); ++a)
      for (std::size_t b = 0; b < free_idx.size(); ++b)
        fit.beta_cov(free_idx[a], free_idx[b]) = fit.sigma2 * xtx(a, b);
  }
  return fit;
}

}  // namespace

void DesignMatrix::validate() const {
  const Eigen::Index n = X.rows(), p = X.cols();
  if (y.size() != n)
    throw RegressError("design: y length " + std::to_string(y.size()) + " != " +
                       std::to_string(n) + " rows");
  if (static_cast<Eigen::Index>(column_names.size()) != p)
    throw RegressError("design: " + std::to_string(column_names.size()) + " column names for " +
                       std::to_string(p) + " columns");
  if (static_cast<Eigen::Index>(rows.size()) != n)
    throw RegressError("design: " + std::to_string(rows.size()) + " row records for " +
                       std::to_string(n) + " rows");
  if (!y.allFinite() || !X.allFinite()) throw RegressError("design: non-finite entry");
  std::map<std::string, int> seen;
  for (const auto& c : column_names)
    if (++seen[c] > 1) throw RegressError("design: duplicate column name " + c);
}

FixedFit ols(const DesignMatrix& dm, bool include_intercept) {
  if (include_intercept) return ols(with_intercept(dm), false);
  RankCheck rc = check_rank(dm, "ols");
  return finish_fixed(dm, rc, rc.qr.solve(dm.y), nullptr);
}

FixedFit nnls(const DesignMatrix& dm) {
  RankCheck rc = check_rank(dm, "nnls");
  const Eigen::Index n = dm.n(), p = dm.p();
  const Eigen::MatrixXd& X = dm.X;
  const Eigen::VectorXd& y = dm.y;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(p);
  std::vector<bool> passive(p, false);
  Eigen::VectorXd w = X.transpose() * y;
  const double wtol = 1e-10 * std::max(1.0, w.lpNorm<Eigen::Infinity>());

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < p; ++j)
      if (passive[j]) idx.push_back(j);
    Eigen::MatrixXd xp(n, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) xp.col(k) = X.col(idx[k]);
    Eigen::VectorXd zp = xp.colPivHouseholderQr().solve(y);
    z.setZero();
    for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zp(k);
  };

  const int max_outer = static_cast<int>(10 * p + 50);
  for (int outer = 0; outer < max_outer; ++outer) {
    w = X.transpose() * (y - X * x);
    Eigen::Index enter = -1;
    double wmax = wtol;
    for (Eigen::Index j = 0; j < p; ++j)
      if (!passive[j] && w(j) > wmax) {
        wmax = w(j);
        enter = j;
      }
    if (enter < 0) return finish_fixed(dm, rc, std::move(x), &passive);
    passive[enter] = true;

    Eigen::VectorXd z(p);
    for (Eigen::Index inner = 0; inner <= p; ++inner) {
      solve_passive(z);
      double alpha = 1.0;
      Eigen::Index blocker = -1;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (!passive[j] || z(j) > 0.0) continue;
        double step = x(j) / (x(j) - z(j));
        if (step < alpha) {
          alpha = step;
          blocker = j;
        }
      }
      if (blocker < 0) {
        x = z;
        break;
      }
      x += alpha * (z - x);
      x(blocker) = 0.0;
      passive[blocker] = false;
      for (Eigen::Index j = 0; j < p; ++j)
        if (passive[j] && x(j) <= 0.0) {
          x(j) = 0.0;
          passive[j] = false;
        }
    }
  }
  throw RegressError("nnls: active-set iteration limit exceeded");
}

namespace {

struct GroupData {
  std::vector<Eigen::Index> row_idx;
  Eigen::MatrixXd A;   // Z'Z, K x K
  Eigen::MatrixXd B;   // Z'X, K x p
  Eigen::VectorXd zy;  // Z'y
  Eigen::MatrixXd XX;  // X'X, p x p
  Eigen::VectorXd Xy;
  double yy = 0.0;
  Eigen::Index n = 0;
};

// Per-group sufficient statistics; one objective evaluation is then
// O(groups * (K^3 + K^2 p)) regardless of row count.
struct RemlProblem {
  std::vector<CountryId> groups;
  std::vector<GroupData> data;
  std::vector<Eigen::Index> random_idx;
  Eigen::Index n = 0, p = 0, K = 0;
};

RemlProblem build_problem(const DesignMatrix& dm, const std::vector<std::string>& random_columns) {
  RemlProblem pr;
  pr.n = dm.n();
  pr.p = dm.p();
  if (random_columns.empty()) throw RegressError("reml: no random columns given");
  std::map<std::string, Eigen::Index> col_index;
  for (Eigen::Index j = 0; j < pr.p; ++j) col_index[dm.column_names[j]] = j;
  for (const auto& name : random_columns) {
    auto it = col_index.find(name);
    if (it == col_index.end())
      throw RegressError("reml: random column " + name + " not in design");
    pr.random_idx.push_back(it->second);
  }
  std::sort(pr.random_idx.begin(), pr.random_idx.end());
  if (std::adjacent_find(pr.random_idx.begin(), pr.random_idx.end()) != pr.random_idx.end())
    throw RegressError("reml: duplicate random column");
  pr.K = static_cast<Eigen::Index>(pr.random_idx.size());
  if (pr.n <= pr.p) throw RegressError("reml: no residual degrees of freedom (n <= p)");

  std::map<CountryId, std::vector<Eigen::Index>> by_group;
  for (Eigen::Index i = 0; i < pr.n; ++i) by_group[dm.rows[i].country].push_back(i);
  if (by_group.size() < 2) throw RegressError("reml: need at least 2 groups");

  for (auto& [gid, idx] : by_group) {
    GroupData gd;
    gd.row_idx = idx;
    gd.n = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd Xc(gd.n, pr.p);
    Eigen::VectorXd yc(gd.n);
    for (Eigen::Index r = 0; r < gd.n; ++r) {
      Xc.row(r) = dm.X.row(idx[r]);
      yc(r) = dm.y(idx[r]);
    }
    Eigen::MatrixXd Zc(gd.n, pr.K);
    for (Eigen::Index k = 0; k < pr.K; ++k) Zc.col(k) = Xc.col(pr.random_idx[k]);
    gd.A = Zc.transpose() * Zc;
    gd.B = Zc.transpose() * Xc;
    gd.zy = Zc.transpose() * yc;
    gd.XX = Xc.transpose() * Xc;
    gd.Xy = Xc.transpose() * yc;
    gd.yy = yc.squaredNorm();
    pr.groups.push_back(gid);
    pr.data.push_back(std::move(gd));
  }
  return pr;
}

// Restricted log-likelihood via the Woodbury identity on each group's
// marginal covariance V_c = sigma2 I + Z_c diag(tau) Z_c':
//   V_c^-1 = (I - Z_c H_c Z_c') / sigma2,  H_c = S C_c^-1 S,
//   C_c = sigma2 I + S A_c S,  S = diag(sqrt(tau)),
//   log|V_c| = (n_c - K) log sigma2 + log|C_c|.
// Gradient uses d l / d tau_k = -1/2 [tr(P Zk Zk') - y'P Zk Zk'P y] with P
// the usual REML projection; both traces reduce to the per-group blocks
// because dV/dtau_k is block diagonal. X'V^-1 r = 0 at the GLS solution, so
// (Py)_c = V_c^-1 r_c exactly.
RemlEval eval_at(const RemlProblem& pr, const Eigen::VectorXd& tau, double sigma2,
                 bool want_gradient) {
  RemlEval ev;
  const Eigen::Index K = pr.K, p = pr.p;
  if (tau.size() != K || sigma2 <= 0.0 || !(tau.array() >= 0.0).all()) return ev;
  const std::size_t C = pr.data.size();
  Eigen::VectorXd S = tau.cwiseSqrt();

  std::vector<Eigen::MatrixXd> H(C);
  double logdet_sum = 0.0;
  Eigen::MatrixXd XVX = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd XVy = Eigen::VectorXd::Zero(p);
  double yVy = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const GroupData& gd = pr.data[c];
    Eigen::MatrixXd Cc = sigma2 * Eigen::MatrixXd::Identity(K, K);
    Cc += S.asDiagonal() * gd.A * S.asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(Cc);
    if (llt.info() != Eigen::Success) return ev;
    H[c] = S.asDiagonal() * llt.solve(Eigen::MatrixXd::Identity(K, K)) * S.asDiagonal();
    double ld = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) ld += 2.0 * std::log(llt.matrixL()(k, k));
    logdet_sum += static_cast<double>(gd.n - K) * std::log(sigma2) + ld;
    XVX.noalias() += (gd.XX - gd.B.transpose() * H[c] * gd.B) / sigma2;
    XVy.noalias() += (gd.Xy - gd.B.transpose() * H[c] * gd.zy) / sigma2;
    yVy += (gd.yy - gd.zy.dot(H[c] * gd.zy)) / sigma2;
  }

  Eigen::LLT<Eigen::MatrixXd> xvx_llt(XVX);
  if (xvx_llt.info() != Eigen::Success) return ev;
  Eigen::VectorXd beta = xvx_llt.solve(XVy);
  double logdet_xvx = 0.0;
  for (Eigen::Index j = 0; j < p; ++j) logdet_xvx += 2.0 * std::log(xvx_llt.matrixL()(j, j));
  const double yPy = yVy - XVy.dot(beta);

  ev.loglik = -0.5 * (logdet_sum + logdet_xvx + yPy +
                      static_cast<double>(pr.n - p) * kLog2Pi);
  ev.beta = std::move(beta);
  ev.groups = pr.groups;
  ev.blups.resize(static_cast<Eigen::Index>(C), K);
  ev.valid = true;

  Eigen::MatrixXd W;
  if (want_gradient) W = xvx_llt.solve(Eigen::MatrixXd::Identity(p, p));
  Eigen::VectorXd tr_tau = Eigen::VectorXd::Zero(K);
  Eigen::VectorXd quad_tau = Eigen::VectorXd::Zero(K);
  double tr_vinv = 0.0, yPPy = 0.0;
  Eigen::MatrixXd XV2X = Eigen::MatrixXd::Zero(p, p);
  const double s2 = sigma2, s4 = sigma2 * sigma2;
  for (std::size_t c = 0; c < C; ++c) {
    const GroupData& gd = pr.data[c];
    Eigen::VectorXd t = gd.zy - gd.B * ev.beta;
    Eigen::VectorXd Ht = H[c] * t;
    Eigen::VectorXd v = t - gd.A * Ht;
    ev.blups.row(static_cast<Eigen::Index>(c)) = (tau.array() * v.array()).matrix() / s2;
    if (!want_gradient) continue;
    Eigen::MatrixXd HB = H[c] * gd.B;
    Eigen::MatrixXd M2 = gd.B - gd.A * HB;              // = Z'V^-1 X * sigma2
    Eigen::MatrixXd HA = H[c] * gd.A;
    Eigen::MatrixXd M1 = gd.A - gd.A * HA;              // = Z'V^-1 Z * sigma2
    for (Eigen::Index k = 0; k < K; ++k) {
      Eigen::VectorXd q = M2.row(k).transpose() / s2;
      tr_tau(k) += M1(k, k) / s2 - q.dot(W * q);
      quad_tau(k) += (v(k) / s2) * (v(k) / s2);
    }
    tr_vinv += (static_cast<double>(gd.n) - HA.trace()) / s2;
    XV2X.noalias() += (gd.XX - 2.0 * gd.B.transpose() * HB + HB.transpose() * gd.A * HB) / s4;
    const double rr = gd.yy - 2.0 * ev.beta.dot(gd.Xy) + ev.beta.dot(gd.XX * ev.beta);
    yPPy += (rr - 2.0 * t.dot(Ht) + Ht.dot(gd.A * Ht)) / s4;
  }
  if (want_gradient) {
    ev.grad.resize(K + 1);
    for (Eigen::Index k = 0; k < K; ++k)
      ev.grad(k) = tau(k) * (-0.5 * (tr_tau(k) - quad_tau(k)));
    const double trP = tr_vinv - (W * XV2X).trace();
    ev.grad(K) = sigma2 * (-0.5 * (trP - yPPy));
  }
  return ev;
}

MixedFit make_fit(const DesignMatrix& dm, const RemlProblem& pr,
                  const std::vector<std::string>& random_columns_sorted, const RemlEval& ev,
                  const Eigen::VectorXd& tau, double sigma2, int iterations, bool converged) {
  MixedFit fit;
  fit.column_names = dm.column_names;
  fit.random_columns = random_columns_sorted;
  fit.beta = ev.beta;
  fit.groups = pr.groups;
  fit.blups = ev.blups;
  fit.variance_components = tau;
  fit.sigma2 = sigma2;
  fit.reml_loglik = ev.loglik;
  fit.iterations = iterations;
  fit.grad_norm = ev.grad.size() ? ev.grad.norm() : std::numeric_limits<double>::quiet_NaN();
  fit.converged = converged;
  return fit;
}

}  // namespace

RemlEval reml_eval(const DesignMatrix& dm, const std::vector<std::string>& random_columns,
                   const Eigen::VectorXd& tau, double sigma2, bool want_gradient) {
  check_rank(dm, "reml");
  RemlProblem pr = build_problem(dm, random_columns);
  return eval_at(pr, tau, sigma2, want_gradient);
}

MixedFit reml_fit(const DesignMatrix& dm, const std::vector<std::string>& random_columns,
                  const RemlOptions& opts) {
  RankCheck rc = check_rank(dm, "reml");
  RemlProblem pr = build_problem(dm, random_columns);
  const Eigen::Index K = pr.K;
  std::vector<std::string> rnames;
  for (Eigen::Index k : pr.random_idx) rnames.push_back(dm.column_names[k]);

  // Start from the pooled OLS: residual variance seeds sigma2 and each tau_k
  // is scaled so Z_k u_k has comparable magnitude to the residual.
  Eigen::VectorXd beta0 = rc.qr.solve(dm.y);
  const double rss = (dm.y - dm.X * beta0).squaredNorm();
  const double yscale = dm.y.squaredNorm() / static_cast<double>(pr.n) + 1.0;
  const double sigma2_0 = std::max(rss / static_cast<double>(pr.n - pr.p), 1e-12 * yscale);
  Eigen::VectorXd gamma(K + 1);
  for (Eigen::Index k = 0; k < K; ++k) {
    const double ms = dm.X.col(pr.random_idx[k]).squaredNorm() / static_cast<double>(pr.n);
    if (ms <= 0.0) throw RegressError("reml: random column " + rnames[k] + " is identically zero");
    gamma(k) = std::log(sigma2_0 / ms);
  }
  gamma(K) = std::log(sigma2_0);
  const double kGammaBound = 40.0;
  auto clamp = [&](Eigen::VectorXd g) {
    return g.cwiseMax(-kGammaBound).cwiseMin(kGammaBound).eval();
  };
  gamma = clamp(gamma);

  auto eval_gamma = [&](const Eigen::VectorXd& g, bool want_grad) {
    Eigen::VectorXd tau = g.head(K).array().exp();
    return eval_at(pr, tau, std::exp(g(K)), want_grad);
  };

  RemlEval ev = eval_gamma(gamma, true);
  if (!ev.valid) throw RegressError("reml: singular marginal covariance at starting values");

  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(K + 1, K + 1);
  Eigen::VectorXd g = -ev.grad;  // gradient of f = -loglik
  double f = -ev.loglik;
  int iter = 0;
  bool converged = false;
  for (; iter < opts.max_iterations; ++iter) {
    if (g.norm() < opts.grad_tol) {
      converged = true;
      break;
    }
    Eigen::VectorXd d = -(Hinv * g);
    if (g.dot(d) >= 0.0) {
      Hinv.setIdentity();
      d = -g;
    }
    double alpha = 1.0;
    bool accepted = false;
    Eigen::VectorXd trial;
    RemlEval trial_ev;
    for (int ls = 0; ls < 60; ++ls) {
      trial = clamp(gamma + alpha * d);
      Eigen::VectorXd step = trial - gamma;
      if (step.norm() == 0.0) break;
      trial_ev = eval_gamma(trial, true);
      if (trial_ev.valid && -trial_ev.loglik <= f + 1e-4 * g.dot(step)) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // No ascent step exists at line-search resolution: the likelihood is
      // numerically stationary, which satisfies the relative-change test.
      converged = true;
      break;
    }
    Eigen::VectorXd s = trial - gamma;
    Eigen::VectorXd g_new = -trial_ev.grad;
    Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      Eigen::MatrixXd I = Eigen::MatrixXd::Identity(K + 1, K + 1);
      Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) +
             rho * s * s.transpose();
    }
    const double f_new = -trial_ev.loglik;
    const bool small_change = std::abs(f_new - f) < opts.rel_tol * (1.0 + std::abs(f_new));
    gamma = trial;
    ev = trial_ev;
    g = g_new;
    f = f_new;
    if (small_change) {
      converged = true;
      ++iter;
      break;
    }
  }

  Eigen::VectorXd tau = gamma.head(K).array().exp();
  const double sigma2 = std::exp(gamma(K));
  MixedFit fit = make_fit(dm, pr, rnames, ev, tau, sigma2, iter, converged);
  if (!converged)
    throw RemlNonConvergence("reml: no convergence in " + std::to_string(opts.max_iterations) +
                                 " iterations (|grad| = " + std::to_string(fit.grad_norm) + ")",
                             std::move(fit));
  return fit;
}

namespace {

void require_columns(const std::vector<std::string>& fit_cols,
                     const std::vector<std::string>& row_cols, const char* who) {
  if (fit_cols != row_cols) {
    std::ostringstream msg;
    msg << who << ": column mismatch; fit has [";
    for (std::size_t i = 0; i < fit_cols.size(); ++i) msg << (i ? " " : "") << fit_cols[i];
    msg << "], rows have [";
    for (std::size_t i = 0; i < row_cols.size(); ++i) msg << (i ? " " : "") << row_cols[i];
    msg << "]";
    throw RegressError(msg.str());
  }
}

}  // namespace

Eigen::VectorXd predict(const FixedFit& fit, const DesignMatrix& rows) {
  rows.validate();
  require_columns(fit.column_names, rows.column_names, "predict");
  return rows.X * fit.beta;
}

Eigen::VectorXd predict(const MixedFit& fit, const DesignMatrix& rows, bool use_random_effects) {
  rows.validate();
  require_columns(fit.column_names, rows.column_names, "predict");
  Eigen::VectorXd out = rows.X * fit.beta;
  if (!use_random_effects) return out;
  std::map<std::string, Eigen::Index> col_index;
  for (std::size_t j = 0; j < rows.column_names.size(); ++j)
    col_index[rows.column_names[j]] = static_cast<Eigen::Index>(j);
  std::vector<Eigen::Index> random_idx;
  for (const auto& name : fit.random_columns) random_idx.push_back(col_index.at(name));
  std::map<CountryId, Eigen::Index> group_index;
  for (std::size_t c = 0; c < fit.groups.size(); ++c)
    group_index[fit.groups[c]] = static_cast<Eigen::Index>(c);
  for (Eigen::Index i = 0; i < rows.n(); ++i) {
    auto it = group_index.find(rows.rows[i].country);
    if (it == group_index.end()) continue;  // unseen country: BLUP = 0
    for (std::size_t k = 0; k < random_idx.size(); ++k)
      out(i) += rows.X(i, random_idx[k]) * fit.blups(it->second, static_cast<Eigen::Index>(k));
  }
  return out;
}

}  // namespace debias::regress
