#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tlmm/bases.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/ltf_io.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/tensor.hpp"

namespace tlmm {

// Mode order: alpha = {group, x1, x2, x3}; beta = {group, x1, x2, x3, time}.
constexpr std::size_t kGroupMode = 0;
constexpr std::size_t kTimeMode = 4;

struct Subject {
  std::string id;
  Index group = 0;  // 0-based
  std::vector<double> times;
  std::vector<DenseTensor> obs;

  Index n_obs() const { return static_cast<Index>(obs.size()); }
};

struct LongitudinalDataset {
  Dims grid;  // (d1, d2, d3)
  Index n_groups = 0;
  std::vector<Subject> subjects;
  std::optional<LabelVolume> mask;  // label 0 excluded from the likelihood

  Index n_subjects() const { return static_cast<Index>(subjects.size()); }
  Index n_obs() const {
    Index n = 0;
    for (const auto& s : subjects) n += s.n_obs();
    return n;
  }
  Index voxels() const { return dims_product(grid); }

  void validate() const {
    if (grid.size() != 3) throw DataError("grid must have three spatial dims");
    if (n_groups < 1) throw DataError("dataset needs at least one group");
    for (const auto& s : subjects) {
      if (s.group < 0 || s.group >= n_groups)
        throw DataError("subject " + s.id + " has group label outside 1.." + std::to_string(n_groups));
      if (s.obs.empty()) throw DataError("subject " + s.id + " has no observations");
      if (s.times.size() != s.obs.size()) throw DataError("subject " + s.id + " has mismatched times");
      for (std::size_t j = 0; j < s.obs.size(); ++j) {
        if (s.obs[j].dims() != grid)
          throw DataError("subject " + s.id + " observation " + std::to_string(j) + " has dims " +
                          dims_string(s.obs[j].dims()) + ", expected " + dims_string(grid));
        if (!(s.times[j] >= 0.0 && s.times[j] <= 1.0))
          throw DataError("subject " + s.id + " has time outside [0,1]");
        if (j > 0 && !(s.times[j] > s.times[j - 1]))
          throw DataError("subject " + s.id + " times are not strictly increasing");
      }
    }
    if (mask && mask->dims != grid) throw DataError("mask dims do not match the grid");
  }
};

enum class Structure { tucker, cp };

struct ComponentState {
  std::vector<ModeFactor> modes;
  std::vector<DenseTensor> cores;  // per subject; CP: dims (r)
  DenseTensor mean_core;
  DenseTensor cell_var;
  double tau2 = 1.0;
  double mean_core_var = 1.0;

  Dims ranks() const {
    Dims r;
    for (const auto& m : modes) r.push_back(m.rank());
    return r;
  }
};

struct ModelState {
  Structure structure = Structure::tucker;
  ComponentState alpha, beta;
  double sigma2_eps = 1.0;
  std::uint64_t iteration = 0;
};

// Static model description: grid, spline basis, per-mode priors.
struct ModelSetup {
  Dims grid;
  Index n_groups = 1;
  SplineBasis spline;
  std::vector<ModeBasis> alpha_bases;  // 4 modes
  std::vector<ModeBasis> beta_bases;   // 5 modes
  Hyperparameters hyper;

  Index voxels() const { return dims_product(grid); }
};

struct BasisOptions {
  RawBasis raw = RawBasis::gaussian;
  std::vector<Index> m_s;  // empty or zero entries: floor(d_s / 2)
  int q_alpha = 1;
  int q_beta = 3;
  int spline_degree = 2;
  Index n_splines = 8;
  double eta = 0.99;
};

inline ModelSetup make_setup(const Dims& grid, Index n_groups, const BasisOptions& opt, const Hyperparameters& hp) {
  if (grid.size() != 3) throw ConfigError("grid must have three dims");
  ModelSetup s;
  s.grid = grid;
  s.n_groups = n_groups;
  s.hyper = hp;
  s.spline = SplineBasis(opt.spline_degree, static_cast<int>(opt.n_splines));
  s.alpha_bases.push_back(make_group_basis(n_groups));
  s.beta_bases.push_back(make_group_basis(n_groups));
  for (std::size_t j = 0; j < 3; ++j) {
    Index m = (j < opt.m_s.size() && opt.m_s[j] > 0) ? opt.m_s[j] : std::max<Index>(1, grid[j] / 2);
    if (opt.raw == RawBasis::identity) m = grid[j];
    s.alpha_bases.push_back(make_spatial_basis(grid[j], m, opt.q_alpha, opt.raw, opt.eta));
    s.beta_bases.push_back(make_spatial_basis(grid[j], m, opt.q_beta, opt.raw, opt.eta));
  }
  s.beta_bases.push_back(make_temporal_basis(opt.n_splines, opt.eta));
  return s;
}

// Contract the leading mode of `core` with v, dropping that mode.
inline DenseTensor contract_first(const DenseTensor& core, const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (core.order() < 2) throw ShapeError("contract_first needs order >= 2");
  if (v.size() != core.dim(0)) throw ShapeError("contract_first: vector length mismatch");
  Dims rest(core.dims().begin() + 1, core.dims().end());
  const Index n = dims_product(rest);
  DenseTensor out(rest);
  Eigen::Map<const RowMajorMatrix> m(core.data(), core.dim(0), n);
  out.vec() = m.transpose() * v;
  return out;
}

// Contract the trailing mode of `core` with v, dropping that mode.
inline DenseTensor contract_last(const DenseTensor& core, const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (core.order() < 2) throw ShapeError("contract_last needs order >= 2");
  const Index last = core.dim(core.order() - 1);
  if (v.size() != last) throw ShapeError("contract_last: vector length mismatch");
  Dims rest(core.dims().begin(), core.dims().end() - 1);
  DenseTensor out(rest);
  Eigen::Map<const RowMajorMatrix> m(core.data(), dims_product(rest), last);
  out.vec() = m * v;
  return out;
}

inline DenseTensor spatial_expand(const DenseTensor& k, const std::vector<ModeFactor>& modes) {
  DenseTensor t = mode_product(k, modes[1].columns, 0);
  t = mode_product(t, modes[2].columns, 1);
  return mode_product(t, modes[3].columns, 2);
}

inline DenseTensor spatial_project(const DenseTensor& y, const std::vector<ModeFactor>& modes) {
  DenseTensor t = mode_product(y, modes[1].columns.transpose(), 0);
  t = mode_product(t, modes[2].columns.transpose(), 1);
  return mode_product(t, modes[3].columns.transpose(), 2);
}

// Diagonal (r,r,r) tensor from a vector.
inline DenseTensor diagonal3(const Eigen::VectorXd& v) {
  const Index r = v.size();
  DenseTensor k({r, r, r});
  for (Index z = 0; z < r; ++z) k(z, z, z) = v[z];
  return k;
}

// Spatial coefficient tensor (r1,r2,r3): the core contracted with group weights u (and
// temporal weights w for beta).
inline DenseTensor spatial_core(Structure s, const DenseTensor& core, const Eigen::VectorXd& u) {
  if (s == Structure::cp) return diagonal3(core.vec().cwiseProduct(u));
  return contract_first(core, u);
}

inline DenseTensor spatial_core(Structure s, const DenseTensor& core, const Eigen::VectorXd& u,
                                const Eigen::VectorXd& w) {
  if (s == Structure::cp) return diagonal3(core.vec().cwiseProduct(u).cwiseProduct(w));
  return contract_first(contract_last(core, w), u);
}

inline Eigen::VectorXd group_row(const ComponentState& c, Index g) { return c.modes[kGroupMode].columns.row(g).transpose(); }

inline const DenseTensor& select_core(const ComponentState& c, Index subject) {
  if (subject < 0) return c.mean_core;
  if (subject >= static_cast<Index>(c.cores.size()))
    throw DomainError("unknown subject index " + std::to_string(subject));
  return c.cores[static_cast<std::size_t>(subject)];
}

inline void check_group(const ModelSetup& setup, Index g) {
  if (g < 0 || g >= setup.n_groups) throw DomainError("group " + std::to_string(g + 1) + " out of range");
}

// Baseline surface; subject < 0 selects the mean core.
inline DenseTensor eval_alpha(const ModelSetup& setup, const ModelState& st, Index subject, Index g) {
  check_group(setup, g);
  return spatial_expand(spatial_core(st.structure, select_core(st.alpha, subject), group_row(st.alpha, g)), st.alpha.modes);
}

inline Eigen::VectorXd temporal_weights(const ModelSetup& setup, const ModelState& st, double t) {
  return st.beta.modes[kTimeMode].columns.transpose() * setup.spline.eval(t);
}

inline DenseTensor eval_beta(const ModelSetup& setup, const ModelState& st, Index subject, Index g, double t) {
  check_group(setup, g);
  const Eigen::VectorXd w = temporal_weights(setup, st, t);
  return spatial_expand(spatial_core(st.structure, select_core(st.beta, subject), group_row(st.beta, g), w), st.beta.modes);
}

// Spline coefficient surfaces β̃(h, ·): dims (d1,d2,d3,d_t) for group g.
inline DenseTensor beta_coefficients(const ModelState& st, Index subject, Index g) {
  const auto& m = st.beta.modes;
  const Eigen::MatrixXd& at = m[kTimeMode].columns;
  const Index dt = at.rows();
  DenseTensor out({m[1].columns.rows(), m[2].columns.rows(), m[3].columns.rows(), dt});
  for (Index c = 0; c < dt; ++c) {
    const DenseTensor s =
        spatial_expand(spatial_core(st.structure, select_core(st.beta, subject), group_row(st.beta, g), at.row(c).transpose()), m);
    for (Index v = 0; v < s.size(); ++v) out[v * dt + c] = s[v];
  }
  return out;
}

// Kronecker loading matrix over the core cells for one group and optional temporal weights.
inline Eigen::MatrixXd loading_matrix(const ModelState& st, const ComponentState& comp, Index g,
                                      const Eigen::VectorXd* w) {
  Eigen::MatrixXd lam = comp.modes[kGroupMode].columns.row(g);
  lam = kronecker(lam, kronecker(comp.modes[1].columns, kronecker(comp.modes[2].columns, comp.modes[3].columns)));
  if (w) lam = kronecker(lam, Eigen::MatrixXd(w->transpose()));
  if (st.structure == Structure::cp) {
    // Keep only the superdiagonal cells.
    const Index r = comp.modes[kGroupMode].rank();
    const int order = w ? 5 : 4;
    Eigen::MatrixXd diag(lam.rows(), r);
    for (Index z = 0; z < r; ++z) {
      Index off = 0;
      for (int j = 0; j < order; ++j) off = off * r + z;
      diag.col(z) = lam.col(off);
    }
    return diag;
  }
  return lam;
}

struct MarginalMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Moments of vec(Y(h_g, ·, t_1..t_n)) with the subject cores integrated out.
inline MarginalMoments marginal_moments(const ModelSetup& setup, const ModelState& st, Index g,
                                        const std::vector<double>& times, Index guard = 4096) {
  check_group(setup, g);
  const Index d = setup.voxels();
  const Index n = static_cast<Index>(times.size());
  if (n * d > guard) throw CapabilityError("marginal_moments limited to n*d1*d2*d3 <= " + std::to_string(guard));
  const Eigen::MatrixXd la = loading_matrix(st, st.alpha, g, nullptr);
  const Eigen::VectorXd da = st.alpha.tau2 * st.alpha.cell_var.vec();
  std::vector<Eigen::MatrixXd> lb;
  for (double t : times) {
    const Eigen::VectorXd w = temporal_weights(setup, st, t);
    lb.push_back(loading_matrix(st, st.beta, g, &w));
  }
  const Eigen::VectorXd db = st.beta.tau2 * st.beta.cell_var.vec();
  MarginalMoments mm;
  mm.mean.resize(n * d);
  mm.cov.resize(n * d, n * d);
  const Eigen::MatrixXd caa = la * da.asDiagonal() * la.transpose();
  for (Index j = 0; j < n; ++j) {
    mm.mean.segment(j * d, d) = la * st.alpha.mean_core.vec() + lb[static_cast<std::size_t>(j)] * st.beta.mean_core.vec();
    for (Index k = 0; k < n; ++k) {
      Eigen::MatrixXd blk = caa + lb[static_cast<std::size_t>(j)] * db.asDiagonal() * lb[static_cast<std::size_t>(k)].transpose();
      if (j == k) blk.diagonal().array() += st.sigma2_eps;
      mm.cov.block(j * d, k * d, d, d) = blk;
    }
  }
  return mm;
}

enum class Component { alpha, beta };

// Covariance of one component between (h, t) and (h', t') for subjects of group g.
inline double covariance_tensor(const ModelSetup& setup, const ModelState& st, Component comp, Index g,
                                const std::vector<Index>& h, double t, Index g2, const std::vector<Index>& h2,
                                double t2) {
  if (g != g2) throw DomainError("covariance tensor is defined within a group only");
  check_group(setup, g);
  const ComponentState& c = comp == Component::alpha ? st.alpha : st.beta;
  Eigen::VectorXd w1, w2;
  if (comp == Component::beta) {
    w1 = temporal_weights(setup, st, t);
    w2 = temporal_weights(setup, st, t2);
  }
  const auto& m = c.modes;
  double sum = 0.0;
  const DenseTensor& var = c.cell_var;
  if (st.structure == Structure::cp) {
    for (Index z = 0; z < var.size(); ++z) {
      double p = m[0].columns(g, z) * m[0].columns(g, z);
      for (std::size_t s = 1; s <= 3; ++s) p *= m[s].columns(h[s - 1], z) * m[s].columns(h2[s - 1], z);
      if (comp == Component::beta) p *= w1[z] * w2[z];
      sum += var[z] * p;
    }
    return c.tau2 * sum;
  }
  std::vector<Index> idx(var.order(), 0);
  for (Index cell = 0; cell < var.size(); ++cell) {
    Index rem = cell;
    for (int j = static_cast<int>(var.order()) - 1; j >= 0; --j) {
      idx[static_cast<std::size_t>(j)] = rem % var.dim(static_cast<std::size_t>(j));
      rem /= var.dim(static_cast<std::size_t>(j));
    }
    double p = m[0].columns(g, idx[0]) * m[0].columns(g, idx[0]);
    for (std::size_t s = 1; s <= 3; ++s) p *= m[s].columns(h[s - 1], idx[s]) * m[s].columns(h2[s - 1], idx[s]);
    if (comp == Component::beta) p *= w1[idx[4]] * w2[idx[4]];
    sum += var[cell] * p;
  }
  return c.tau2 * sum;
}

// Per-subject cores η_i = η_0 ×_N A_N[i, :] from a core with a leading subject mode.
inline std::vector<DenseTensor> stacked_core_equivalence(const Eigen::MatrixXd& subject_mode, const DenseTensor& shared_core) {
  if (subject_mode.cols() != shared_core.dim(0)) throw ShapeError("subject mode columns differ from core's leading dim");
  std::vector<DenseTensor> cores;
  for (Index i = 0; i < subject_mode.rows(); ++i) cores.push_back(contract_first(shared_core, subject_mode.row(i).transpose()));
  return cores;
}

inline Index core_cells(const Dims& ranks) { return dims_product(ranks); }

}  // namespace tlmm
