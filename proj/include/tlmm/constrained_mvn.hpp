#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tlmm/banded.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/rng.hpp"

namespace tlmm {

enum class MatrixForm { covariance, precision };
enum class FactorPath { automatic, dense, banded };

struct PrunedConstraint {
  Eigen::MatrixXd a;
  Eigen::VectorXd c;
};

// Keeps a maximal independent subset of rows (pivoted QR on Aᵀ, |R_jj| > tol |R_11|).
inline PrunedConstraint prune_constraint_rows(const Eigen::MatrixXd& a, const Eigen::VectorXd& c,
                                              double tol = 1e-12) {
  PrunedConstraint out;
  out.a.resize(0, a.cols());
  out.c.resize(0);
  if (a.rows() == 0 || a.cwiseAbs().maxCoeff() == 0.0) return out;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a.transpose());
  const Eigen::MatrixXd& r = qr.matrixQR();
  const Eigen::Index kmax = std::min(r.rows(), r.cols());
  const double r11 = std::abs(r(0, 0));
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < kmax; ++j)
    if (std::abs(r(j, j)) > tol * r11) keep.push_back(qr.colsPermutation().indices()[j]);
  std::sort(keep.begin(), keep.end());
  out.a.resize(static_cast<Eigen::Index>(keep.size()), a.cols());
  out.c.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.a.row(static_cast<Eigen::Index>(i)) = a.row(keep[i]);
    out.c[static_cast<Eigen::Index>(i)] = c[keep[i]];
  }
  return out;
}

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Analytic law of x | Ax = c for x ~ N(mean, cov).
inline GaussianMoments constrained_moments(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                           const Eigen::MatrixXd& a, const Eigen::VectorXd& c) {
  const auto pr = prune_constraint_rows(a, c);
  if (pr.a.rows() == 0) return {mean, cov};
  const Eigen::MatrixXd sat = cov * pr.a.transpose();
  const Eigen::MatrixXd w = pr.a * sat;
  const Eigen::LDLT<Eigen::MatrixXd> wf(w);
  return {mean + sat * wf.solve(pr.c - pr.a * mean), cov - sat * wf.solve(sat.transpose())};
}

// Gaussian given by precision P and linear term b (density ∝ exp(-xᵀPx/2 + bᵀx)).
inline GaussianMoments natural_to_moments(const Eigen::MatrixXd& p, const Eigen::VectorXd& b) {
  const Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) throw FactorizationError("precision is not positive definite");
  const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(p.rows(), p.cols()));
  return {llt.solve(b), cov};
}

struct ConditionOptions {
  FactorPath path = FactorPath::automatic;
  double prune_tol = 1e-12;
  double jitter = 1e-10;
};

// Sampler for N(mean, Σ) restricted to {x : Ax = c}: an unconstrained draw followed by the
// conditioning correction x -= ΣAᵀ(AΣAᵀ)^{-1}(Ax - c). Factorizations are reused across draws.
class ConditionedGaussian {
public:
  ConditionedGaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& matrix, MatrixForm form,
                      const Eigen::MatrixXd& a, const Eigen::VectorXd& c, const ConditionOptions& opt = {})
      : form_(form), mean_(mean), a_full_(a), c_full_(c) {
    const Eigen::Index n = mean.size();
    if (matrix.rows() != n || matrix.cols() != n) throw ShapeError("mean/matrix size mismatch");
    if (a.rows() > 0 && a.cols() != n) throw ShapeError("constraint matrix has wrong column count");
    if (a.rows() != c.size()) throw ShapeError("constraint rows and right-hand side differ in length");
    factor(matrix, opt);
    finish_constraint(opt);
  }

  // Builds from natural parameters (precision P, linear b).
  static ConditionedGaussian from_natural(const Eigen::MatrixXd& p, const Eigen::VectorXd& b,
                                          const Eigen::MatrixXd& a, const ConditionOptions& opt = {}) {
    ConditionedGaussian g(p, opt);
    g.mean_ = g.apply_cov(Eigen::MatrixXd(b));
    g.a_full_ = a;
    g.c_full_ = Eigen::VectorXd::Zero(a.rows());
    g.finish_constraint(opt);
    return g;
  }

  Eigen::VectorXd draw(Stream& rng) const {
    const Eigen::VectorXd z = rng.normal_vector(mean_.size());
    Eigen::VectorXd x = mean_ + noise(z);
    if (a_.rows() == 0) return x;
    for (int pass = 0; pass < 4; ++pass) {
      x -= v_ * wf_.solve(a_ * x - c_);
      if (satisfied(x)) return x;
    }
    throw ConstraintError("constraint residual above tolerance after refinement");
  }

  // Conditional moments computed from the factorized form.
  GaussianMoments moments() const {
    const Eigen::Index n = mean_.size();
    Eigen::MatrixXd cov = apply_cov(Eigen::MatrixXd::Identity(n, n));
    Eigen::VectorXd mu = mean_;
    if (a_.rows() > 0) {
      mu -= v_ * wf_.solve(a_ * mean_ - c_);
      cov -= v_ * wf_.solve(v_.transpose());
    }
    return {mu, cov};
  }

  bool used_banded() const { return banded_; }
  bool jittered() const { return jittered_; }
  const Eigen::VectorXd& unconstrained_mean() const { return mean_; }

private:
  ConditionedGaussian(const Eigen::MatrixXd& p, const ConditionOptions& opt) : form_(MatrixForm::precision) {
    factor(p, opt);
  }

  void finish_constraint(const ConditionOptions& opt) {
    const auto pr = prune_constraint_rows(a_full_, c_full_, opt.prune_tol);
    a_ = pr.a;
    c_ = pr.c;
    if (a_.rows() >= mean_.size() && mean_.size() > 0)
      throw ConstraintError("constraint leaves no free dimension (" + std::to_string(a_.rows()) +
                            " independent rows, n=" + std::to_string(mean_.size()) + ")");
    if (a_.rows() > 0) {
      v_ = apply_cov(a_.transpose());
      wf_.compute(a_ * v_);
      if (wf_.info() != Eigen::Success) throw ConstraintError("constraint Gram matrix is singular");
    }
  }

  void factor(const Eigen::MatrixXd& m, const ConditionOptions& opt) {
    const Eigen::Index n = m.rows();
    const Eigen::Index bw = bandwidth(m);
    banded_ = form_ == MatrixForm::precision &&
              (opt.path == FactorPath::banded || (opt.path == FactorPath::automatic && n >= 16 && 3 * bw < n));
    const double ridge = opt.jitter * std::max(1.0, m.diagonal().cwiseAbs().mean());
    if (banded_) {
      if (!band_.compute(m, bw)) {
        jittered_ = true;
        if (!band_.compute(m + ridge * Eigen::MatrixXd::Identity(n, n), bw))
          throw FactorizationError("banded precision is not positive definite");
      }
      return;
    }
    llt_.compute(m);
    if (llt_.info() != Eigen::Success) {
      jittered_ = true;
      llt_.compute(m + ridge * Eigen::MatrixXd::Identity(n, n));
      if (llt_.info() != Eigen::Success) throw FactorizationError("matrix is not positive definite");
    }
  }

  // Σ x for the stored factorization.
  Eigen::MatrixXd apply_cov(const Eigen::MatrixXd& x) const {
    if (form_ == MatrixForm::covariance) {
      const Eigen::MatrixXd ux = llt_.matrixU() * x;
      return llt_.matrixL() * ux;
    }
    if (banded_) return band_.solve(x);
    return llt_.solve(x);
  }

  // Draw with covariance Σ from standard normals.
  Eigen::VectorXd noise(const Eigen::VectorXd& z) const {
    if (form_ == MatrixForm::covariance) return llt_.matrixL() * z;
    if (banded_) return band_.solve_upper(z);
    return llt_.matrixU().solve(z);
  }

  // ‖Ax - c‖∞ ≤ 1e-10 (1 + ‖c‖∞), relaxed proportionally only when ‖A‖∞‖x‖∞ exceeds 1e4.
  bool satisfied(const Eigen::VectorXd& x) const {
    if (a_full_.rows() == 0) return true;
    const double cn = c_full_.cwiseAbs().maxCoeff();
    const double scale = a_full_.cwiseAbs().rowwise().sum().maxCoeff() * x.cwiseAbs().maxCoeff();
    const double tol = 1e-10 * (1.0 + cn) * std::max(1.0, scale / 1e4);
    return (a_full_ * x - c_full_).cwiseAbs().maxCoeff() <= tol;
  }

  MatrixForm form_;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd a_full_, a_, v_;
  Eigen::VectorXd c_full_, c_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  BandedCholesky band_;
  Eigen::LDLT<Eigen::MatrixXd> wf_;
  bool banded_ = false;
  bool jittered_ = false;
};

inline Eigen::VectorXd sample_constrained_mvn(const Eigen::VectorXd& mean, const Eigen::MatrixXd& matrix,
                                              MatrixForm form, const Eigen::MatrixXd& a, const Eigen::VectorXd& c,
                                              Stream& rng, const ConditionOptions& opt = {}) {
  return ConditionedGaussian(mean, matrix, form, a, c, opt).draw(rng);
}

}  // namespace tlmm
