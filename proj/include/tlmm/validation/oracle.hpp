#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "tlmm/constrained_mvn.hpp"
#include "tlmm/model.hpp"
#include "tlmm/rng.hpp"
#include "tlmm/sampler.hpp"

// Dense joint-Gaussian conditioning oracle. For a block θ with everything else fixed, the stacked
// prediction over every observation is affine in θ; the design is recovered by forward evaluation
// at unit vectors, the posterior is formed in covariance form, and linear constraints are then
// conditioned on explicitly. None of the sampler's sufficient statistics are reused.
namespace tlmm::validation {

inline Eigen::VectorXd stacked_observations(const LongitudinalDataset& d) {
  Eigen::VectorXd y(d.n_obs() * d.voxels());
  Index off = 0;
  for (const auto& s : d.subjects)
    for (const auto& o : s.obs) {
      y.segment(off, o.size()) = o.vec();
      off += o.size();
    }
  return y;
}

inline Eigen::VectorXd stacked_prediction(const ModelSetup& setup, const LongitudinalDataset& d, const ModelState& st) {
  Eigen::VectorXd f(d.n_obs() * d.voxels());
  Index off = 0;
  for (Index i = 0; i < d.n_subjects(); ++i) {
    const Subject& s = d.subjects[static_cast<std::size_t>(i)];
    const DenseTensor a = eval_alpha(setup, st, i, s.group);
    for (double t : s.times) {
      const DenseTensor b = eval_beta(setup, st, i, s.group, t);
      f.segment(off, a.size()) = a.vec() + b.vec();
      off += a.size();
    }
  }
  return f;
}

// Affine map θ ↦ offset + Xθ recovered column by column.
struct AffineMap {
  Eigen::VectorXd offset;
  Eigen::MatrixXd x;
};

inline AffineMap linearize(Index dim, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f) {
  AffineMap m;
  m.offset = f(Eigen::VectorXd::Zero(dim));
  m.x.resize(m.offset.size(), dim);
  for (Index j = 0; j < dim; ++j) m.x.col(j) = f(Eigen::VectorXd::Unit(dim, j)) - m.offset;
  return m;
}

// θ ~ N(μ0, Σ0), r = Xθ + e with e ~ N(0, s2 I).
inline GaussianMoments dense_posterior(const Eigen::VectorXd& mu0, const Eigen::MatrixXd& s0, const Eigen::MatrixXd& x,
                                       const Eigen::VectorXd& r, double s2) {
  const Eigen::MatrixXd sx = s0 * x.transpose();
  Eigen::MatrixXd s = x * sx;
  s.diagonal().array() += s2;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
  const Eigen::MatrixXd k = ldlt.solve(sx.transpose()).transpose();
  GaussianMoments out;
  out.mean = mu0 + k * (r - x * mu0);
  out.cov = s0 - k * sx.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

// Condition N(m, C) on Γθ = 0.
inline GaussianMoments condition_on_zero(const GaussianMoments& g, const Eigen::MatrixXd& gam) {
  if (gam.rows() == 0) return g;
  const Eigen::MatrixXd cg = g.cov * gam.transpose();
  const Eigen::MatrixXd pinv = (gam * cg).completeOrthogonalDecomposition().pseudoInverse();
  GaussianMoments out;
  out.mean = g.mean - cg * pinv * (gam * g.mean);
  out.cov = g.cov - cg * pinv * cg.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

struct BlockCheck {
  std::string name;
  double mean_err = 0.0;
  double cov_err = 0.0;
};

inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& ref) {
  const double scale = std::max(ref.norm(), 1e-300);
  return (a - ref).norm() / scale;
}

inline BlockCheck compare(const std::string& name, const GaussianBlock& blk, const GaussianMoments& ref) {
  const GaussianMoments got = ConditionedGaussian::from_natural(blk.precision, blk.linear, blk.constraint).moments();
  return {name, rel_err(got.mean, ref.mean), rel_err(got.cov, ref.cov)};
}

inline ComponentState& component(ModelState& st, Component c) { return c == Component::alpha ? st.alpha : st.beta; }
inline const ComponentState& component(const ModelState& st, Component c) { return c == Component::alpha ? st.alpha : st.beta; }
inline const std::vector<ModeBasis>& component_bases(const ModelSetup& s, Component c) {
  return c == Component::alpha ? s.alpha_bases : s.beta_bases;
}

// Column of mode s rebuilt from its PING components: a(h) = Π_k (Gᵀγ_k)(h).
inline Eigen::VectorXd ping_product(const ModeBasis& b, const ModeFactor& f, Index col) {
  Eigen::VectorXd a = Eigen::VectorXd::Ones(b.G.cols());
  for (const auto& g : f.gamma) a.array() *= (b.G.transpose() * g.col(col)).array();
  return a;
}

class DenseOracle {
public:
  DenseOracle(const ModelSetup& setup, const LongitudinalDataset& data, const ModelState& st)
      : setup_(setup), data_(data), st_(st), y_(stacked_observations(data)) {}

  GaussianMoments gamma(Component c, std::size_t s, Index col, int k) const {
    const ModeBasis& b = component_bases(setup_, c)[s];
    const ModeFactor& f = component(st_, c).modes[s];
    auto place = [&](const Eigen::VectorXd& th) {
      ModelState m = st_;
      ModeFactor& mf = component(m, c).modes[s];
      mf.gamma[static_cast<std::size_t>(k)].col(col) = th;
      mf.columns.col(col) = ping_product(b, mf, col);
      return m;
    };
    const AffineMap lin = linearize(b.m(), [&](const Eigen::VectorXd& th) { return stacked_prediction(setup_, data_, place(th)); });
    const double sd = k == 0 ? f.shrink.sigma(setup_.hyper.shrinkage)[col] : 1.0;
    const Eigen::MatrixXd s0 = sd * sd * b.precision.inverse();
    GaussianMoments post = dense_posterior(Eigen::VectorXd::Zero(b.m()), s0, lin.x, y_ - lin.offset, st_.sigma2_eps);
    if (st_.structure == Structure::tucker && f.rank() > 1) {
      const AffineMap col_map = linearize(b.m(), [&](const Eigen::VectorXd& th) {
        const ModelState m = place(th);
        return Eigen::VectorXd(component(m, c).modes[s].columns.col(col));
      });
      Eigen::MatrixXd others(f.columns.rows(), f.rank() - 1);
      for (Index z = 0, j = 0; z < f.rank(); ++z)
        if (z != col) others.col(j++) = f.columns.col(z);
      post = condition_on_zero(post, others.transpose() * col_map.x);
    }
    return post;
  }

  // Core entries of one subject: Tucker blocks run over z_g (alpha) or (z_g, z_t) (beta) at a
  // fixed spatial cell; CP blocks are the whole rank vector.
  std::vector<Index> core_offsets(Component c, Index cell) const {
    const ComponentState& cs = c == Component::alpha ? st_.alpha : st_.beta;
    std::vector<Index> off;
    if (st_.structure == Structure::cp) {
      for (Index z = 0; z < cs.mean_core.size(); ++z) off.push_back(z);
      return off;
    }
    const Dims r = cs.ranks();
    const Index spatial = r[1] * r[2] * r[3];
    const Index rt = c == Component::beta ? r[4] : 1;
    for (Index zg = 0; zg < r[0]; ++zg)
      for (Index zt = 0; zt < rt; ++zt) off.push_back((zg * spatial + cell) * rt + zt);
    return off;
  }

  GaussianMoments core(Component c, Index subject, Index cell) const {
    const auto off = core_offsets(c, cell);
    const Index n = static_cast<Index>(off.size());
    const ComponentState& cs = c == Component::alpha ? st_.alpha : st_.beta;
    auto place = [&](const Eigen::VectorXd& th) {
      ModelState m = st_;
      DenseTensor& k = component(m, c).cores[static_cast<std::size_t>(subject)];
      for (Index j = 0; j < n; ++j) k[off[static_cast<std::size_t>(j)]] = th[j];
      return m;
    };
    const AffineMap lin = linearize(n, [&](const Eigen::VectorXd& th) { return stacked_prediction(setup_, data_, place(th)); });
    Eigen::VectorXd mu0(n);
    Eigen::MatrixXd s0 = Eigen::MatrixXd::Zero(n, n);
    for (Index j = 0; j < n; ++j) {
      const Index o = off[static_cast<std::size_t>(j)];
      mu0[j] = cs.mean_core[o];
      s0(j, j) = cs.tau2 * cs.cell_var[o];
    }
    return dense_posterior(mu0, s0, lin.x, y_ - lin.offset, st_.sigma2_eps);
  }

  // Mean core cell: prior N(0, σ_C²); every subject core is a noisy copy with variance τ²σ²_cell.
  GaussianMoments mean_core(Component c, Index cell) const {
    const ComponentState& cs = c == Component::alpha ? st_.alpha : st_.beta;
    const Index n = static_cast<Index>(cs.cores.size());
    Eigen::VectorXd r(n);
    for (Index i = 0; i < n; ++i) r[i] = cs.cores[static_cast<std::size_t>(i)][cell];
    return dense_posterior(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, cs.mean_core_var),
                           Eigen::MatrixXd::Ones(n, 1), r, cs.tau2 * cs.cell_var[cell]);
  }

  // Gamma (shape, rate) of the observation precision from the forward residual.
  GammaParams eps_precision() const {
    const double ss = (y_ - stacked_prediction(setup_, data_, st_)).squaredNorm();
    return {setup_.hyper.a_eps + 0.5 * static_cast<double>(y_.size()), setup_.hyper.b_eps + 0.5 * ss};
  }

private:
  const ModelSetup& setup_;
  const LongitudinalDataset& data_;
  ModelState st_;
  Eigen::VectorXd y_;
};

struct OracleReport {
  std::vector<BlockCheck> checks;
  double worst() const {
    double w = 0.0;
    for (const auto& c : checks) w = std::max({w, c.mean_err, c.cov_err});
    return w;
  }
};

inline double rel_scalar(double a, double ref) { return std::abs(a - ref) / std::max(std::abs(ref), 1e-300); }

// Every Gibbs block of the sampler's current state against the dense oracle.
inline OracleReport check_all_blocks(GibbsSampler& sampler, const ModelSetup& setup, const LongitudinalDataset& data) {
  OracleReport rep;
  const ModelState st = sampler.state();
  const DenseOracle oracle(setup, data, st);
  const char* names[2] = {"alpha", "beta"};
  for (Component c : {Component::alpha, Component::beta}) {
    const std::string cn = names[c == Component::alpha ? 0 : 1];
    const ComponentState& cs = c == Component::alpha ? st.alpha : st.beta;
    for (std::size_t s = 0; s < cs.modes.size(); ++s)
      for (Index l = 0; l < cs.modes[s].rank(); ++l)
        for (int k = 0; k < static_cast<int>(cs.modes[s].gamma.size()); ++k)
          rep.checks.push_back(compare(cn + " gamma mode " + std::to_string(s) + " col " + std::to_string(l) + " k " + std::to_string(k),
                                       sampler.gamma_block(c, s, l, k), oracle.gamma(c, s, l, k)));
    const Dims r = cs.ranks();
    const Index cells = st.structure == Structure::cp ? 1 : r[1] * r[2] * r[3];
    for (Index i = 0; i < data.n_subjects(); ++i)
      for (Index cell = 0; cell < cells; ++cell)
        rep.checks.push_back(compare(cn + " core subject " + std::to_string(i) + " cell " + std::to_string(cell),
                                     sampler.core_block(c, i, cell), oracle.core(c, i, cell)));
    for (Index z = 0; z < cs.mean_core.size(); ++z)
      rep.checks.push_back(compare(cn + " mean core " + std::to_string(z), sampler.mean_core_block(c, z), oracle.mean_core(c, z)));
  }
  const VarianceConditionals vc = sampler.variance_conditionals();
  const GammaParams ref = oracle.eps_precision();
  rep.checks.push_back({"eps precision", rel_scalar(vc.eps.shape, ref.shape), rel_scalar(vc.eps.rate, ref.rate)});
  return rep;
}

// Fixed tiny instance: dims (3,3,3), two groups, d_t = 4, four subjects with three visits, all ranks 2.
struct TinyInstance {
  ModelSetup setup;
  LongitudinalDataset data;
  SamplerConfig cfg;
};

inline TinyInstance tiny_instance(Structure structure, std::uint64_t seed = 7) {
  TinyInstance t;
  BasisOptions bo;
  bo.m_s = {3, 3, 3};
  bo.q_alpha = 1;
  bo.q_beta = 3;
  bo.spline_degree = 2;
  bo.n_splines = 4;
  t.setup = make_setup({3, 3, 3}, 2, bo, Hyperparameters{});
  t.data.grid = {3, 3, 3};
  t.data.n_groups = 2;
  Stream rng(seed, 0, block_tag(20), 1);
  const std::vector<std::vector<double>> times = {{0.0, 0.4, 0.9}, {0.0, 0.3, 1.0}, {0.1, 0.5, 0.8}, {0.0, 0.6, 0.7}};
  for (Index i = 0; i < 4; ++i) {
    Subject s;
    s.id = "T" + std::to_string(i + 1);
    s.group = i % 2;
    s.times = times[static_cast<std::size_t>(i)];
    for (double tm : s.times) {
      DenseTensor y(t.data.grid);
      for (Index v = 0; v < y.size(); ++v)
        y[v] = std::cos(0.7 * static_cast<double>(v) + static_cast<double>(s.group)) + 2.0 * tm * tm * std::sin(0.3 * static_cast<double>(v)) +
               0.3 * rng.normal();
      s.obs.push_back(std::move(y));
    }
    t.data.subjects.push_back(std::move(s));
  }
  t.cfg.iterations = 10;
  t.cfg.burn_in = 5;
  t.cfg.seed = seed;
  t.cfg.structure = structure;
  t.cfg.ranks_alpha = {2, 2, 2, 2};
  t.cfg.ranks_beta = {2, 2, 2, 2, 2};
  return t;
}

inline OracleReport run_oracle_check(Structure structure, int sweeps = 3, std::uint64_t seed = 7) {
  const TinyInstance t = tiny_instance(structure, seed);
  GibbsSampler sampler(t.setup, t.data, t.cfg);
  sampler.initialize();
  for (int k = 0; k < sweeps; ++k) sampler.sweep();
  return check_all_blocks(sampler, t.setup, t.data);
}

}  // namespace tlmm::validation
