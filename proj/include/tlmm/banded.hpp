#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace tlmm {

// Largest |i - j| with a nonzero entry.
inline Eigen::Index bandwidth(const Eigen::MatrixXd& p) {
  Eigen::Index bw = 0;
  for (Eigen::Index j = 0; j < p.cols(); ++j)
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      if (p(i, j) != 0.0) bw = std::max(bw, i > j ? i - j : j - i);
  return bw;
}

// Cholesky P = L Lᵀ for a symmetric positive definite band matrix, O(n bw²).
// Band storage: band_(k, i) = L(i, i - k) for k = 0..bw.
class BandedCholesky {
public:
  BandedCholesky() = default;
  BandedCholesky(const Eigen::MatrixXd& p, Eigen::Index bw) { compute(p, bw); }

  bool compute(const Eigen::MatrixXd& p, Eigen::Index bw) {
    n_ = p.rows();
    bw_ = bw;
    band_.setZero(bw + 1, n_);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const Eigen::Index j0 = std::max<Eigen::Index>(0, i - bw);
      for (Eigen::Index j = j0; j <= i; ++j) {
        double s = p(i, j);
        const Eigen::Index k0 = std::max<Eigen::Index>(j0, j - bw);
        for (Eigen::Index k = k0; k < j; ++k) s -= at(i, k) * at(j, k);
        if (j == i) {
          if (!(s > 0.0)) return ok_ = false;
          band_(0, i) = std::sqrt(s);
        } else {
          band_(i - j, i) = s / at(j, j);
        }
      }
    }
    return ok_ = true;
  }

  bool ok() const { return ok_; }
  Eigen::Index size() const { return n_; }

  // Solves L y = b.
  Eigen::VectorXd solve_lower(Eigen::VectorXd b) const {
    for (Eigen::Index i = 0; i < n_; ++i) {
      double s = b[i];
      for (Eigen::Index k = std::max<Eigen::Index>(0, i - bw_); k < i; ++k) s -= at(i, k) * b[k];
      b[i] = s / at(i, i);
    }
    return b;
  }
  // Solves Lᵀ x = y.
  Eigen::VectorXd solve_upper(Eigen::VectorXd y) const {
    for (Eigen::Index i = n_ - 1; i >= 0; --i) {
      double s = y[i];
      for (Eigen::Index k = i + 1; k <= std::min(n_ - 1, i + bw_); ++k) s -= at(k, i) * y[k];
      y[i] = s / at(i, i);
    }
    return y;
  }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return solve_upper(solve_lower(b)); }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
    Eigen::MatrixXd x(b.rows(), b.cols());
    for (Eigen::Index c = 0; c < b.cols(); ++c) x.col(c) = solve(Eigen::VectorXd(b.col(c)));
    return x;
  }

private:
  double at(Eigen::Index i, Eigen::Index j) const { return band_(i - j, i); }

  Eigen::MatrixXd band_;
  Eigen::Index n_ = 0, bw_ = 0;
  bool ok_ = false;
};

}  // namespace tlmm
