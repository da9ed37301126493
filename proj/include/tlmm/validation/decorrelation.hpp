#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "tlmm/model.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/rng.hpp"

// Projection decorrelation: with semi-orthogonal spatial modes, Y ×_s A_sᵀ has cell means
// η̃·∏Δ and independent cell noises of variance σ²∏Δ, where Δ are the squared column norms.
namespace tlmm::validation {

struct DecorrelationStats {
  Index replicates = 0;
  Index cells = 0;
  double max_abs_corr = 0.0;     // over cell pairs, normalized noises
  double max_var_rel_err = 0.0;  // |var / σ² − 1| over cells
  double max_mean_z = 0.0;       // |sample mean − η̃∏Δ| in standard errors
  double corr_bound() const { return 4.0 / std::sqrt(static_cast<double>(replicates)); }
};

// Column norms product ∏Δ per (z1,z2,z3) cell.
inline DenseTensor cell_scales(const std::vector<ModeFactor>& modes) {
  const Eigen::VectorXd d1 = modes[1].columns.colwise().squaredNorm();
  const Eigen::VectorXd d2 = modes[2].columns.colwise().squaredNorm();
  const Eigen::VectorXd d3 = modes[3].columns.colwise().squaredNorm();
  DenseTensor out({d1.size(), d2.size(), d3.size()});
  for (Index a = 0; a < d1.size(); ++a)
    for (Index b = 0; b < d2.size(); ++b)
      for (Index c = 0; c < d3.size(); ++c) out(a, b, c) = d1[a] * d2[b] * d3[c];
  return out;
}

// `signal` is the noiseless surface and `coef` its spatial coefficient tensor (r1,r2,r3).
inline DecorrelationStats projection_decorrelation(const DenseTensor& signal, const DenseTensor& coef,
                                                   const std::vector<ModeFactor>& modes, double sigma2, Index n,
                                                   Stream& rng) {
  const DenseTensor delta = cell_scales(modes);
  const Index cells = delta.size();
  Eigen::MatrixXd z(n, cells);
  const double sd = std::sqrt(sigma2);
  DenseTensor y(signal.dims());
  for (Index r = 0; r < n; ++r) {
    for (Index v = 0; v < y.size(); ++v) y[v] = signal[v] + sd * rng.normal();
    const DenseTensor p = spatial_project(y, modes);
    for (Index c = 0; c < cells; ++c) z(r, c) = (p[c] - coef[c] * delta[c]) / std::sqrt(delta[c]);
  }
  DecorrelationStats s;
  s.replicates = n;
  s.cells = cells;
  const Eigen::RowVectorXd mean = z.colwise().mean();
  const Eigen::MatrixXd cz = z.rowwise() - mean;
  const Eigen::MatrixXd cov = cz.transpose() * cz / static_cast<double>(n - 1);
  for (Index a = 0; a < cells; ++a) {
    s.max_var_rel_err = std::max(s.max_var_rel_err, std::abs(cov(a, a) / sigma2 - 1.0));
    s.max_mean_z = std::max(s.max_mean_z, std::abs(mean[a]) / std::sqrt(sigma2 / static_cast<double>(n)));
    for (Index b = a + 1; b < cells; ++b)
      s.max_abs_corr = std::max(s.max_abs_corr, std::abs(cov(a, b) / std::sqrt(cov(a, a) * cov(b, b))));
  }
  return s;
}

struct DecorrelationReport {
  DecorrelationStats baseline;  // Y(0) projected by the alpha modes
  DecorrelationStats slope;     // Y(t) − α projected by the beta modes at a fixed t
};

// Known state with CSC-PING modes on a (6,6,6) grid; one subject in group `g`.
inline DecorrelationReport run_decorrelation(Index n = 10000, std::uint64_t seed = 11) {
  BasisOptions bo;
  bo.m_s = {5, 5, 5};
  bo.q_beta = 3;
  bo.n_splines = 5;
  const ModelSetup setup = make_setup({6, 6, 6}, 2, bo, Hyperparameters{});
  Stream rng(seed, 0, block_tag(31), 0);
  ModelState st;
  st.structure = Structure::tucker;
  auto fill = [&](ComponentState& c, const std::vector<ModeBasis>& bases, const Dims& ranks) {
    for (std::size_t s = 0; s < bases.size(); ++s) c.modes.push_back(csc_ping_draw(bases[s], ranks[s], setup.hyper, rng));
    DenseTensor k(ranks);
    for (Index z = 0; z < k.size(); ++z) k[z] = rng.normal();
    c.cores.push_back(k);
    c.mean_core = k;
  };
  fill(st.alpha, setup.alpha_bases, {2, 2, 3, 2});
  fill(st.beta, setup.beta_bases, {2, 3, 2, 2, 2});
  st.sigma2_eps = 0.49;
  const Index g = 1;
  const double t = 0.7;
  DecorrelationReport rep;
  const DenseTensor a = eval_alpha(setup, st, 0, g);
  rep.baseline = projection_decorrelation(a, spatial_core(st.structure, st.alpha.cores[0], group_row(st.alpha, g)),
                                          st.alpha.modes, st.sigma2_eps, n, rng);
  const DenseTensor b = eval_beta(setup, st, 0, g, t);
  rep.slope = projection_decorrelation(
      b, spatial_core(st.structure, st.beta.cores[0], group_row(st.beta, g), temporal_weights(setup, st, t)), st.beta.modes,
      st.sigma2_eps, n, rng);
  return rep;
}

}  // namespace tlmm::validation
