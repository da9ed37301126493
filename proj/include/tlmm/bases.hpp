#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"

namespace tlmm {

// Degree-q B-splines on [0,1] with k_t equal intervals and uniformly extended knots
// t_j = (j - q - 1)/k_t, j = 1..2q+k_t+1, giving d_t = q + k_t bases. For q = 2 the two
// first bases equal 0.5 at t = 0. Knots are handled in units of 1/k_t so the boundary
// values are exact.
class SplineBasis {
public:
  SplineBasis() = default;
  SplineBasis(int degree, int n_bases) : q_(degree), dt_(n_bases) {
    if (degree < 1) throw ConfigError("spline degree must be >= 1");
    if (n_bases <= degree) throw ConfigError("spline basis count must exceed the degree");
    kt_ = n_bases - degree;
  }

  int degree() const { return q_; }
  int n_bases() const { return dt_; }
  int n_intervals() const { return kt_; }

  // Knot t_j for j = 0..2q+k_t (0-based).
  double knot(int j) const { return static_cast<double>(j - q_) / kt_; }
  std::vector<double> knots() const {
    std::vector<double> k(static_cast<std::size_t>(2 * q_ + kt_ + 1));
    for (int j = 0; j < static_cast<int>(k.size()); ++j) k[static_cast<std::size_t>(j)] = knot(j);
    return k;
  }

  Eigen::VectorXd eval(double t) const {
    check(t);
    Eigen::VectorXd all = all_bases(q_, t * kt_);
    return all.head(dt_);
  }

  // d/dt b_{q,h}(t) from the derivative identity; exact for the piecewise polynomial.
  Eigen::VectorXd eval_derivative(double t) const {
    check(t);
    const Eigen::VectorXd low = all_bases(q_ - 1, t * kt_);
    Eigen::VectorXd d(dt_);
    // With unit knot spacing, (t_{h+q} - t_h) = q and the q factors cancel.
    for (int h = 0; h < dt_; ++h) d[h] = kt_ * (low[h] - low[h + 1]);
    return d;
  }

  Eigen::MatrixXd design(const std::vector<double>& times) const {
    Eigen::MatrixXd b(static_cast<Eigen::Index>(times.size()), dt_);
    for (std::size_t i = 0; i < times.size(); ++i) b.row(static_cast<Eigen::Index>(i)) = eval(times[i]).transpose();
    return b;
  }

private:
  void check(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("spline argument " + std::to_string(t) + " outside [0,1]");
  }

  // All degree-p bases over the full extended knot vector (integer knots j - q),
  // evaluated at u = t * k_t via the Cox-de Boor triangle on the active span.
  Eigen::VectorXd all_bases(int p, double u) const {
    const int nk = 2 * q_ + kt_ + 1;
    const int nb = nk - p - 1;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(nb);
    if (p == 0) {
      int i = q_ + static_cast<int>(std::floor(u));
      if (i >= 0 && i < nb) out[i] = 1.0;
      return out;
    }
    auto kn = [&](int j) { return static_cast<double>(j - q_); };
    int span = q_ + static_cast<int>(std::floor(u));
    while (span > 0 && kn(span) > u) --span;
    while (span + 1 < nk - 1 && kn(span + 1) <= u) ++span;
    std::vector<double> n(static_cast<std::size_t>(p + 1)), left(static_cast<std::size_t>(p + 1)),
        right(static_cast<std::size_t>(p + 1));
    n[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
      left[j] = u - kn(span + 1 - j);
      right[j] = kn(span + j) - u;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double tmp = n[r] / (right[r + 1] + left[j - r]);
        n[r] = saved + right[r + 1] * tmp;
        saved = left[j - r] * tmp;
      }
      n[j] = saved;
    }
    for (int r = 0; r <= p; ++r) {
      const int idx = span - p + r;
      if (idx >= 0 && idx < nb) out[idx] = n[r];
    }
    return out;
  }

  int q_ = 2, dt_ = 8, kt_ = 6;
};

// M (d_t x (d_t-1)) with M(0,0) = -1 and M(i+1,i) = 1, so rows 1 and 2 of M·A₁ sum to 0.
inline Eigen::MatrixXd constraint_expander(Eigen::Index dt) {
  if (dt < 2) throw ConfigError("constraint expander needs d_t >= 2");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(dt, dt - 1);
  m(0, 0) = -1.0;
  for (Eigen::Index i = 0; i + 1 < dt; ++i) m(i + 1, i) = 1.0;
  return m;
}

// Chain-graph kernel Q = (D - eta U)^{-1}. A single node is given unit precision.
struct GraphLaplacianKernel {
  Eigen::Index m = 0;
  double eta = 0.99;
  Eigen::MatrixXd precision;   // D - eta U, tridiagonal
  Eigen::MatrixXd covariance;  // Q
};

inline GraphLaplacianKernel build_laplacian(Eigen::Index m, double eta = 0.99) {
  if (m < 1) throw ConfigError("Laplacian kernel needs at least one node");
  GraphLaplacianKernel k;
  k.m = m;
  k.eta = eta;
  k.precision = Eigen::MatrixXd::Zero(m, m);
  if (m == 1) {
    k.precision(0, 0) = 1.0;
  } else {
    for (Eigen::Index i = 0; i < m; ++i) {
      k.precision(i, i) = (i == 0 || i == m - 1) ? 1.0 : 2.0;
      if (i + 1 < m) k.precision(i, i + 1) = k.precision(i + 1, i) = -eta;
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(k.precision);
  if (llt.info() != Eigen::Success) throw FactorizationError("Laplacian precision is not positive definite");
  k.covariance = llt.solve(Eigen::MatrixXd::Identity(m, m));
  return k;
}

enum class RawBasis { gaussian, identity };

// Basis functions g(h) = g~(h)/sqrt(g~(h)ᵀ Q g~(h)) so each induced field has unit variance.
struct GaussianBasisSet {
  Eigen::Index d = 0, m = 0;
  double spacing = 1.0;
  std::vector<double> centers;  // on the 1..d grid
  GraphLaplacianKernel kernel;
  Eigen::MatrixXd raw;  // m x d, g~
  Eigen::MatrixXd G;    // m x d, g

  double prior_correlation(Eigen::Index h1, Eigen::Index h2) const {
    return G.col(h1).dot(kernel.covariance * G.col(h2));
  }
  Eigen::MatrixXd covariance() const { return G.transpose() * kernel.covariance * G; }
};

inline GaussianBasisSet build_gaussian_bases(Eigen::Index d, Eigen::Index m, const GraphLaplacianKernel& kernel,
                                             RawBasis kind = RawBasis::gaussian) {
  if (m < 1) throw ConfigError("basis count must be >= 1");
  if (m > d) throw ConfigError("basis count " + std::to_string(m) + " exceeds grid size " + std::to_string(d));
  if (kernel.m != m) throw ConfigError("kernel size does not match basis count");
  if (kind == RawBasis::identity && m != d) throw ConfigError("identity bases need m == d");
  GaussianBasisSet b;
  b.d = d;
  b.m = m;
  b.kernel = kernel;
  b.spacing = static_cast<double>(d) / static_cast<double>(m);
  b.raw = Eigen::MatrixXd::Zero(m, d);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double c = 0.5 + (static_cast<double>(j) + 0.5) * b.spacing;
    b.centers.push_back(c);
    for (Eigen::Index h = 0; h < d; ++h) {
      if (kind == RawBasis::identity) {
        b.raw(j, h) = (j == h) ? 1.0 : 0.0;
        continue;
      }
      const double x = static_cast<double>(h + 1) - c;
      if (std::abs(x) <= 3.0 * b.spacing) b.raw(j, h) = std::exp(-x * x / (2.0 * b.spacing * b.spacing));
    }
  }
  b.G = b.raw;
  for (Eigen::Index h = 0; h < d; ++h) {
    const double w2 = b.raw.col(h).dot(kernel.covariance * b.raw.col(h));
    if (!(w2 > 0.0)) throw NumericalError("grid point " + std::to_string(h) + " has no basis support");
    b.G.col(h) /= std::sqrt(w2);
  }
  return b;
}

}  // namespace tlmm
