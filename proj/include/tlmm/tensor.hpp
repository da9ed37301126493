#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"

namespace tlmm {

using Index = std::ptrdiff_t;
using Dims = std::vector<Index>;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index dims_product(const Dims& d) {
  return std::accumulate(d.begin(), d.end(), Index{1}, std::multiplies<Index>());
}

inline std::string dims_string(const Dims& d) {
  std::string s = "(";
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(d[i]);
  }
  return s + ")";
}

// n-way real array, last index varying fastest.
class DenseTensor {
public:
  DenseTensor() = default;
  explicit DenseTensor(Dims dims, double fill = 0.0) : dims_(std::move(dims)) {
    check_dims();
    values_.assign(static_cast<std::size_t>(dims_product(dims_)), fill);
  }
  DenseTensor(Dims dims, std::vector<double> values) : dims_(std::move(dims)), values_(std::move(values)) {
    check_dims();
    if (static_cast<Index>(values_.size()) != dims_product(dims_))
      throw ShapeError("value count " + std::to_string(values_.size()) + " does not match dims " +
                       dims_string(dims_));
  }

  const Dims& dims() const { return dims_; }
  Index dim(std::size_t j) const { return dims_.at(j); }
  std::size_t order() const { return dims_.size(); }
  Index size() const { return static_cast<Index>(values_.size()); }
  bool empty() const { return values_.empty(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  double& operator[](Index i) { return values_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return values_[static_cast<std::size_t>(i)]; }

  Index offset(const std::vector<Index>& idx) const {
    Index off = 0;
    for (std::size_t j = 0; j < dims_.size(); ++j) off = off * dims_[j] + idx[j];
    return off;
  }
  template <class... I>
  double& operator()(I... idx) {
    return values_[static_cast<std::size_t>(offset({static_cast<Index>(idx)...}))];
  }
  template <class... I>
  double operator()(I... idx) const {
    return values_[static_cast<std::size_t>(offset({static_cast<Index>(idx)...}))];
  }

  Eigen::Map<Eigen::VectorXd> vec() { return {values_.data(), size()}; }
  Eigen::Map<const Eigen::VectorXd> vec() const { return {values_.data(), size()}; }

  void set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.dims_ == b.dims_ && a.values_ == b.values_;
  }

private:
  void check_dims() const {
    if (dims_.empty()) throw ShapeError("tensor order must be at least 1");
    for (Index d : dims_)
      if (d < 1) throw ShapeError("all dims must be >= 1, got " + dims_string(dims_));
  }

  Dims dims_;
  std::vector<double> values_;
};

enum class DomainKind { spatial, temporal, group, spline };

inline Eigen::MatrixXd cross_products(const Eigen::MatrixXd& a) { return a.transpose() * a; }

// Off-diagonal magnitude of AᵀA relative to its largest diagonal entry.
inline double orthogonality_defect(const Eigen::MatrixXd& a) {
  if (a.cols() <= 1) return 0.0;
  Eigen::MatrixXd g = cross_products(a);
  double dmax = g.diagonal().cwiseAbs().maxCoeff();
  if (dmax == 0.0) return 0.0;
  g.diagonal().setZero();
  return g.cwiseAbs().maxCoeff() / dmax;
}

struct ModeMatrix {
  Eigen::MatrixXd entries;
  DomainKind kind = DomainKind::spatial;
  bool semi_orthogonal = false;

  ModeMatrix() = default;
  ModeMatrix(Eigen::MatrixXd e, DomainKind k = DomainKind::spatial, bool orth = false)
      : entries(std::move(e)), kind(k), semi_orthogonal(orth) {}

  Index rows() const { return entries.rows(); }
  Index cols() const { return entries.cols(); }
  bool check_semi_orthogonal(double tol = 1e-8) const { return orthogonality_defect(entries) <= tol; }
};

struct TuckerFactor {
  DenseTensor core;
  std::vector<ModeMatrix> modes;

  void validate() const {
    if (modes.size() != core.order())
      throw ShapeError("mode count " + std::to_string(modes.size()) + " differs from core order " +
                       std::to_string(core.order()));
    for (std::size_t j = 0; j < modes.size(); ++j)
      if (modes[j].cols() != core.dim(j))
        throw ShapeError("mode " + std::to_string(j) + " has " + std::to_string(modes[j].cols()) +
                         " columns but core dim is " + std::to_string(core.dim(j)));
  }
};

// Sum of r rank-one terms weights[z] * factors[0](:,z) o ... o factors[p-1](:,z).
struct CpFactor {
  Eigen::VectorXd weights;
  std::vector<Eigen::MatrixXd> factors;
};

// j-mode product: replaces dimension j of t (size r_j) by m.rows(). Modes are 0-based.
inline DenseTensor mode_product(const DenseTensor& t, const Eigen::Ref<const Eigen::MatrixXd>& m,
                                std::size_t j) {
  if (j >= t.order())
    throw ShapeError("mode " + std::to_string(j) + " out of range for order " +
                     std::to_string(t.order()));
  if (m.cols() != t.dim(j))
    throw ShapeError("mode " + std::to_string(j) + ": matrix has " + std::to_string(m.cols()) +
                     " columns, tensor dim is " + std::to_string(t.dim(j)));
  Dims od = t.dims();
  od[j] = m.rows();
  Index pre = 1, post = 1;
  for (std::size_t k = 0; k < j; ++k) pre *= t.dim(k);
  for (std::size_t k = j + 1; k < t.order(); ++k) post *= t.dim(k);
  const Index n = t.dim(j), d = m.rows();
  DenseTensor out(od);
  for (Index p = 0; p < pre; ++p) {
    Eigen::Map<const RowMajorMatrix> in(t.data() + p * n * post, n, post);
    Eigen::Map<RowMajorMatrix> o(out.data() + p * d * post, d, post);
    o.noalias() = m * in;
  }
  return out;
}

// Mode-j unfolding: rows index dimension j, columns run over the remaining indices in
// their original order with the last one fastest.
inline Eigen::MatrixXd unfold(const DenseTensor& t, std::size_t j) {
  if (j >= t.order()) throw ShapeError("unfold mode " + std::to_string(j) + " out of range");
  Index pre = 1, post = 1;
  for (std::size_t k = 0; k < j; ++k) pre *= t.dim(k);
  for (std::size_t k = j + 1; k < t.order(); ++k) post *= t.dim(k);
  const Index n = t.dim(j);
  Eigen::MatrixXd u(n, pre * post);
  for (Index p = 0; p < pre; ++p)
    for (Index i = 0; i < n; ++i)
      for (Index q = 0; q < post; ++q) u(i, p * post + q) = t[(p * n + i) * post + q];
  return u;
}

inline DenseTensor fold(const Eigen::MatrixXd& u, std::size_t j, const Dims& dims) {
  DenseTensor t(dims);
  if (j >= t.order()) throw ShapeError("fold mode " + std::to_string(j) + " out of range");
  Index pre = 1, post = 1;
  for (std::size_t k = 0; k < j; ++k) pre *= t.dim(k);
  for (std::size_t k = j + 1; k < t.order(); ++k) post *= t.dim(k);
  const Index n = t.dim(j);
  if (u.rows() != n || u.cols() != pre * post)
    throw ShapeError("fold: matrix shape does not match dims " + dims_string(dims));
  for (Index p = 0; p < pre; ++p)
    for (Index i = 0; i < n; ++i)
      for (Index q = 0; q < post; ++q) t[(p * n + i) * post + q] = u(i, p * post + q);
  return t;
}

inline double frobenius(const DenseTensor& t) { return t.vec().norm(); }
inline double sup_norm(const DenseTensor& t) { return t.empty() ? 0.0 : t.vec().cwiseAbs().maxCoeff(); }

inline Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

// Multiply t by mats[j] along every mode j (skipping empty matrices).
inline DenseTensor multi_mode_product(DenseTensor t, const std::vector<Eigen::MatrixXd>& mats) {
  for (std::size_t j = 0; j < mats.size(); ++j)
    if (mats[j].size() > 0) t = mode_product(t, mats[j], j);
  return t;
}

inline DenseTensor reconstruct(const TuckerFactor& f) {
  f.validate();
  DenseTensor t = f.core;
  for (std::size_t j = 0; j < f.modes.size(); ++j) t = mode_product(t, f.modes[j].entries, j);
  return t;
}

inline TuckerFactor cp_to_tucker(const CpFactor& cp) {
  const Index r = cp.weights.size();
  const std::size_t p = cp.factors.size();
  if (p == 0) throw ShapeError("CP factor has no modes");
  for (const auto& f : cp.factors)
    if (f.cols() != r) throw ShapeError("CP factor column count differs from weight count");
  TuckerFactor tf;
  tf.core = DenseTensor(Dims(p, r));
  for (Index z = 0; z < r; ++z) tf.core[tf.core.offset(std::vector<Index>(p, z))] = cp.weights[z];
  for (const auto& f : cp.factors) tf.modes.emplace_back(f);
  return tf;
}

inline DenseTensor reconstruct(const CpFactor& cp) { return reconstruct(cp_to_tucker(cp)); }

// Numerical column rank via pivoted QR with |R_jj| > tol * |R_11|.
inline Index numerical_rank(const Eigen::MatrixXd& a, double tol = 1e-10) {
  if (a.cols() == 0) return 0;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  const Eigen::MatrixXd& r = qr.matrixQR();
  const Index k = std::min(a.rows(), a.cols());
  const double r11 = std::abs(r(0, 0));
  if (r11 == 0.0) return 0;
  Index rank = 0;
  for (Index j = 0; j < k; ++j)
    if (std::abs(r(j, j)) > tol * r11) ++rank;
  return rank;
}

// Equivalent compact HOSVD: A_j = Q_j R_j, new core = core x_j R_j, modes Q_j.
inline TuckerFactor tucker_to_hosvd(const TuckerFactor& f) {
  f.validate();
  TuckerFactor out;
  out.core = f.core;
  for (std::size_t j = 0; j < f.modes.size(); ++j) {
    const Eigen::MatrixXd& a = f.modes[j].entries;
    const Index r = a.cols();
    const Index rank = numerical_rank(a);
    if (rank < r || a.rows() < r)
      throw FactorizationError("mode " + std::to_string(j) + " is rank deficient: numerical rank " +
                               std::to_string(rank) + " < " + std::to_string(r));
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), r);
    Eigen::MatrixXd rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
    for (Index c = 0; c < r; ++c)
      if (rr(c, c) < 0) {
        rr.row(c) *= -1.0;
        q.col(c) *= -1.0;
      }
    out.core = mode_product(out.core, rr, j);
    out.modes.emplace_back(std::move(q), f.modes[j].kind, true);
  }
  return out;
}

}  // namespace tlmm
