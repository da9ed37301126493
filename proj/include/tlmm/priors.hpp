#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tlmm/bases.hpp"
#include "tlmm/constrained_mvn.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/rng.hpp"
#include "tlmm/tensor.hpp"

namespace tlmm {

// as_written: σ_z = ∏_{k≤z} ς_k multiplies the column. inverse_scale: ∏_{k≤z} ς_k is the
// column precision, σ_z = (∏ς)^{-1/2}.
enum class ShrinkageMode { as_written, inverse_scale };

struct Hyperparameters {
  double kappa1 = 2.1, kappa2 = 3.1;
  double a_s = 10.0, b_s = 0.1;      // cell precisions
  double a_tau = 0.1, b_tau = 0.1;   // global core precisions
  double a_eps = 0.1, b_eps = 0.1;   // observation precision
  double a_c = 0.1, b_c = 0.1;       // mean-core precisions
  ShrinkageMode shrinkage = ShrinkageMode::as_written;

  void validate() const {
    if (!(kappa1 > 0 && kappa2 > 0)) throw ConfigError("kappa1 and kappa2 must be positive");
    for (double v : {a_s, b_s, a_tau, b_tau, a_eps, b_eps, a_c, b_c})
      if (!(v > 0)) throw ConfigError("Gamma hyperparameters must be positive");
  }
};

struct ShrinkageChain {
  Eigen::VectorXd varsigma;

  Eigen::Index size() const { return varsigma.size(); }
  // Column scale σ_z (standard-deviation multiplier of the first PING component).
  Eigen::VectorXd sigma(ShrinkageMode mode) const {
    Eigen::VectorXd s(varsigma.size());
    double prod = 1.0;
    for (Eigen::Index z = 0; z < varsigma.size(); ++z) {
      prod *= varsigma[z];
      s[z] = mode == ShrinkageMode::as_written ? prod : 1.0 / std::sqrt(prod);
    }
    return s;
  }
};

inline ShrinkageChain shrinkage_prior_draw(Eigen::Index r, double kappa1, double kappa2, Stream& rng) {
  ShrinkageChain c;
  c.varsigma.resize(r);
  for (Eigen::Index z = 0; z < r; ++z) c.varsigma[z] = rng.gamma(z == 0 ? kappa1 : kappa2, 1.0);
  return c;
}

// Univariate slice sampler with stepping out and shrinkage (Neal, 2003).
inline double slice_sample(const std::function<double(double)>& logf, double x0, double w, Stream& rng,
                           int max_steps = 64) {
  const double f0 = logf(x0);
  const double y = f0 + std::log(rng.uniform());
  double lo = x0 - w * rng.uniform();
  double hi = lo + w;
  for (int i = 0; i < max_steps && logf(lo) > y; ++i) lo -= w;
  for (int i = 0; i < max_steps && logf(hi) > y; ++i) hi += w;
  for (int iter = 0; iter < 1000; ++iter) {
    const double x = lo + (hi - lo) * rng.uniform();
    if (logf(x) > y) return x;
    (x < x0 ? lo : hi) = x;
  }
  return x0;
}

// Gibbs update of the chain given per-column quadratic forms S_z = γ_{z,1}ᵀPγ_{z,1} (with unit
// prior scale) and the effective Gaussian dimension nu of every column.
inline ShrinkageChain shrinkage_gibbs_update(const ShrinkageChain& chain, const Eigen::VectorXd& quad, double nu,
                                             const Hyperparameters& hp, Stream& rng) {
  ShrinkageChain out = chain;
  const Eigen::Index r = chain.size();
  for (Eigen::Index k = 0; k < r; ++k) {
    const double kappa = k == 0 ? hp.kappa1 : hp.kappa2;
    // Partial products excluding ς_k for columns z ≥ k.
    double rate_terms = 0.0;
    double prod = 1.0;
    for (Eigen::Index z = 0; z < r; ++z) {
      if (z != k) prod *= out.varsigma[z];
      if (z < k) continue;
      if (hp.shrinkage == ShrinkageMode::inverse_scale)
        rate_terms += quad[z] * prod;
      else
        rate_terms += quad[z] / (prod * prod);
    }
    const double count = nu * static_cast<double>(r - k);
    if (hp.shrinkage == ShrinkageMode::inverse_scale) {
      out.varsigma[k] = rng.gamma(kappa + 0.5 * count, 1.0 + 0.5 * rate_terms);
    } else {
      // log density of x = log ς_k: (κ - count) x - e^x - (rate_terms/2) e^{-2x}; log-concave.
      const double half = 0.5 * rate_terms;
      auto logf = [&](double x) { return (kappa - count) * x - std::exp(x) - half * std::exp(-2.0 * x); };
      double x = std::log(out.varsigma[k]);
      for (int rep = 0; rep < 2; ++rep) x = slice_sample(logf, x, 1.0, rng);
      out.varsigma[k] = std::exp(x);
    }
  }
  return out;
}

// Precision draw from Ga(a + n/2, b + SS/2).
inline double variance_gibbs(double a, double b, double n, double ss, Stream& rng) {
  return rng.gamma(a + 0.5 * n, b + 0.5 * ss);
}

// Basis and prior for one mode: column components a_k = Gᵀγ_k with γ ~ N(0, σ² P^{-1}).
struct ModeBasis {
  DomainKind kind = DomainKind::spatial;
  Eigen::MatrixXd G;          // m x d
  Eigen::MatrixXd precision;  // m x m
  int q = 1;                  // PING depth

  Eigen::Index d() const { return G.cols(); }
  Eigen::Index m() const { return G.rows(); }
};

inline ModeBasis make_spatial_basis(Eigen::Index d, Eigen::Index m, int q, RawBasis raw = RawBasis::gaussian,
                                    double eta = 0.99) {
  const auto kernel = build_laplacian(m, eta);
  const auto bs = build_gaussian_bases(d, m, kernel, raw);
  ModeBasis b;
  b.kind = DomainKind::spatial;
  b.G = bs.G;
  b.precision = kernel.precision;
  b.q = q;
  return b;
}

inline ModeBasis make_group_basis(Eigen::Index dg) {
  ModeBasis b;
  b.kind = DomainKind::group;
  b.G = Eigen::MatrixXd::Identity(dg, dg);
  b.precision = Eigen::MatrixXd::Identity(dg, dg);
  return b;
}

// Free temporal coordinates x with a = M x; prior of a is N(0, σ²Q_t) restricted to range(M).
inline ModeBasis make_temporal_basis(Eigen::Index dt, double eta = 0.99) {
  const auto kernel = build_laplacian(dt, eta);
  const Eigen::MatrixXd m = constraint_expander(dt);
  ModeBasis b;
  b.kind = DomainKind::temporal;
  b.G = m.transpose();
  b.precision = m.transpose() * kernel.precision * m;
  return b;
}

// Mode matrix with its PING components and shrinkage chain.
struct ModeFactor {
  Eigen::MatrixXd columns;             // d x r
  std::vector<Eigen::MatrixXd> gamma;  // q entries of m x r
  ShrinkageChain shrink;

  Eigen::Index rank() const { return columns.cols(); }
};

inline Eigen::VectorXd component_product(const ModeBasis& b, const ModeFactor& f, Eigen::Index col,
                                         int skip = -1) {
  Eigen::VectorXd a = Eigen::VectorXd::Ones(b.d());
  for (int k = 0; k < static_cast<int>(f.gamma.size()); ++k)
    if (k != skip) a.array() *= (b.G.transpose() * f.gamma[static_cast<std::size_t>(k)].col(col)).array();
  return a;
}

inline void refresh_columns(const ModeBasis& b, ModeFactor& f) {
  const Eigen::Index r = f.gamma.empty() ? 0 : f.gamma[0].cols();
  f.columns.resize(b.d(), r);
  for (Eigen::Index z = 0; z < r; ++z) f.columns.col(z) = component_product(b, f, z);
}

struct PingColumn {
  Eigen::VectorXd column;
  Eigen::MatrixXd components;  // m x q
};

// One CSC-PING column orthogonal to `previous` (d x z). Components 2..q are free Gaussian
// fields; the scaled first component is drawn under the orthogonality constraint.
inline PingColumn ping_column_draw(const ModeBasis& b, const Eigen::MatrixXd& previous, double sigma, Stream& rng,
                                   const ConditionOptions& opt = {}) {
  const Eigen::Index z = previous.cols();
  if (z >= b.d() || z >= b.m())
    throw RankError("column position " + std::to_string(z + 1) + " exceeds the " + std::to_string(b.m()) +
                    "-dimensional basis");
  PingColumn out;
  out.components.resize(b.m(), b.q);
  Eigen::VectorXd other = Eigen::VectorXd::Ones(b.d());
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(b.m());
  for (int k = 1; k < b.q; ++k) {
    out.components.col(k) = ConditionedGaussian::from_natural(b.precision, zero, Eigen::MatrixXd(0, b.m()), opt).draw(rng);
    other.array() *= (b.G.transpose() * out.components.col(k)).array();
  }
  Eigen::MatrixXd gam(0, b.m());
  if (z > 0) gam = previous.transpose() * other.asDiagonal() * b.G.transpose();
  out.components.col(0) =
      ConditionedGaussian::from_natural(b.precision / (sigma * sigma), zero, gam, opt).draw(rng);
  out.column = other.array() * (b.G.transpose() * out.components.col(0)).array();
  return out;
}

// Sequential CSC-PING draw of a full mode factor with rank r.
inline ModeFactor csc_ping_draw(const ModeBasis& b, Eigen::Index r, const Hyperparameters& hp, Stream& rng) {
  ModeFactor f;
  f.shrink = shrinkage_prior_draw(r, hp.kappa1, hp.kappa2, rng);
  const Eigen::VectorXd sig = f.shrink.sigma(hp.shrinkage);
  f.gamma.assign(static_cast<std::size_t>(b.q), Eigen::MatrixXd::Zero(b.m(), r));
  f.columns.resize(b.d(), r);
  for (Eigen::Index z = 0; z < r; ++z) {
    const auto pc = ping_column_draw(b, f.columns.leftCols(z), sig[z], rng);
    for (int k = 0; k < b.q; ++k) f.gamma[static_cast<std::size_t>(k)].col(z) = pc.components.col(k);
    f.columns.col(z) = pc.column;
  }
  return f;
}

// Likelihood of one column a: -(aᵀHa - 2 aᵀ linear)/(2σ_ε²), with H diagonal or dense.
struct ColumnLikelihood {
  Eigen::VectorXd h_diag;
  Eigen::MatrixXd h_full;
  Eigen::VectorXd linear;

  bool dense() const { return h_full.size() > 0; }
};

struct GaussianBlock {
  Eigen::MatrixXd precision;
  Eigen::VectorXd linear;
  Eigen::MatrixXd constraint;  // rows of Γ with Γx = 0
};

// Natural parameters of γ_{ℓ,k} given everything else.
inline GaussianBlock gamma_conditional(const ModeBasis& b, const ModeFactor& f, Eigen::Index col, int k,
                                       const ColumnLikelihood& lik, double sigma2_eps, double sigma_col,
                                       bool orthogonal) {
  const Eigen::VectorXd other = component_product(b, f, col, k);
  const Eigen::MatrixXd dg = other.asDiagonal() * b.G.transpose();  // d x m, a = dg γ
  GaussianBlock blk;
  const double prior_var = k == 0 ? sigma_col * sigma_col : 1.0;
  if (lik.dense())
    blk.precision = dg.transpose() * lik.h_full * dg / sigma2_eps;
  else
    blk.precision = dg.transpose() * lik.h_diag.asDiagonal() * dg / sigma2_eps;
  blk.precision += b.precision / prior_var;
  blk.linear = dg.transpose() * lik.linear / sigma2_eps;
  const Eigen::Index r = f.columns.cols();
  if (orthogonal && r > 1) {
    Eigen::MatrixXd others(b.d(), r - 1);
    for (Eigen::Index z = 0, c = 0; z < r; ++z)
      if (z != col) others.col(c++) = f.columns.col(z);
    blk.constraint = others.transpose() * dg;
  } else {
    blk.constraint.resize(0, b.m());
  }
  return blk;
}

}  // namespace tlmm
