#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tlmm/constrained_mvn.hpp"
#include "tlmm/model.hpp"
#include "tlmm/parallel.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/rng.hpp"
#include "tlmm/sampler.hpp"

// Simulation-based calibration: draw a truth from the prior, simulate data, run the sampler, and
// record the rank of each truth functional among the posterior draws. Correct samplers give
// uniform ranks.
namespace tlmm::validation {

// Mode factor drawn from the stationary law of the Gibbs γ/ς conditionals without data: a
// sequential CSC-PING draw followed by `steps` no-data sweeps over (γ, ς).
inline ModeFactor mode_prior_chain(const ModeBasis& b, Index r, const Hyperparameters& hp, bool orthogonal, int steps,
                                   Stream& rng) {
  ModeFactor f = csc_ping_draw(b, r, hp, rng);
  ColumnLikelihood none;
  none.h_diag = Eigen::VectorXd::Zero(b.d());
  none.linear = Eigen::VectorXd::Zero(b.d());
  for (int it = 0; it < steps; ++it) {
    const Eigen::VectorXd sig = f.shrink.sigma(hp.shrinkage);
    for (Index l = 0; l < r; ++l)
      for (int k = 0; k < b.q; ++k) {
        const GaussianBlock blk = gamma_conditional(b, f, l, k, none, 1.0, sig[l], orthogonal);
        f.gamma[static_cast<std::size_t>(k)].col(l) =
            ConditionedGaussian::from_natural(blk.precision, blk.linear, blk.constraint).draw(rng);
        f.columns.col(l) = component_product(b, f, l);
      }
    Eigen::VectorXd quad(r);
    for (Index z = 0; z < r; ++z) quad[z] = f.gamma[0].col(z).dot(b.precision * f.gamma[0].col(z));
    const double nu = static_cast<double>(b.m()) - (orthogonal ? static_cast<double>(r - 1) : 0.0);
    f.shrink = shrinkage_gibbs_update(f.shrink, quad, nu, hp, rng);
  }
  return f;
}

inline ComponentState prior_component(const std::vector<ModeBasis>& bases, const Dims& ranks, Index n_subjects,
                                      const Hyperparameters& hp, int steps, Stream& rng) {
  ComponentState c;
  for (std::size_t s = 0; s < bases.size(); ++s) c.modes.push_back(mode_prior_chain(bases[s], ranks[s], hp, true, steps, rng));
  c.mean_core_var = 1.0 / rng.gamma(hp.a_c, hp.b_c);
  c.tau2 = 1.0 / rng.gamma(hp.a_tau, hp.b_tau);
  c.mean_core = DenseTensor(ranks);
  c.cell_var = DenseTensor(ranks);
  for (Index z = 0; z < c.mean_core.size(); ++z) {
    c.mean_core[z] = std::sqrt(c.mean_core_var) * rng.normal();
    c.cell_var[z] = 1.0 / rng.gamma(hp.a_s, hp.b_s);
  }
  for (Index i = 0; i < n_subjects; ++i) {
    DenseTensor k(ranks);
    for (Index z = 0; z < k.size(); ++z) k[z] = c.mean_core[z] + std::sqrt(c.tau2 * c.cell_var[z]) * rng.normal();
    c.cores.push_back(std::move(k));
  }
  return c;
}

struct SbcConfig {
  Dims grid{4, 4, 4};
  Index n_groups = 2;
  Index n_subjects = 6;
  Index visits = 3;
  Dims ranks_alpha{2, 2, 2, 2};
  Dims ranks_beta{2, 2, 2, 2, 2};
  int q_beta = 3;
  Index n_splines = 4;
  int replications = 200;
  int prior_chain_steps = 50;
  int burn_in = 200;
  int draws = 99;  // ranks take values 0..draws
  int thin = 5;
  int bins = 10;
  std::uint64_t seed = 2024;
  int threads = 1;
};

// Informative hyperparameters that keep prior-drawn truths on a sane scale.
inline Hyperparameters sbc_hyperparameters() {
  Hyperparameters hp;
  hp.a_tau = hp.b_tau = 3.0;
  hp.a_s = hp.b_s = 5.0;
  hp.a_eps = 10.0;
  hp.b_eps = 2.5;
  hp.a_c = hp.b_c = 3.0;
  hp.shrinkage = ShrinkageMode::inverse_scale;
  return hp;
}

inline ModelSetup sbc_setup(const SbcConfig& cfg) {
  BasisOptions bo;
  bo.m_s = cfg.grid;
  bo.q_alpha = 1;
  bo.q_beta = cfg.q_beta;
  bo.n_splines = cfg.n_splines;
  return make_setup(cfg.grid, cfg.n_groups, bo, sbc_hyperparameters());
}

inline constexpr int kSbcFunctionals = 10;

inline const std::array<const char*, kSbcFunctionals>& sbc_functional_names() {
  static const std::array<const char*, kSbcFunctionals> n = {
      "alpha_pop_g1_voxel0",   "alpha_pop_g2_mean",    "beta_pop_g1_t0.5_voxel21", "beta_pop_g2_t1_mean",
      "alpha_subj1_voxel42",   "beta_subj2_t1_voxel10", "log_sigma2_eps",          "alpha_pop_g1_meansq",
      "beta_t1_group_gap_msq", "alpha_subj4_dev_mean"};
  return n;
}

inline std::array<double, kSbcFunctionals> sbc_functionals(const ModelSetup& setup, const LongitudinalDataset& d,
                                                           const ModelState& st) {
  auto mean = [](const DenseTensor& t) { return t.vec().mean(); };
  const DenseTensor a0 = eval_alpha(setup, st, -1, 0);
  const DenseTensor a1 = eval_alpha(setup, st, -1, 1);
  const DenseTensor b0 = eval_beta(setup, st, -1, 0, 1.0);
  const DenseTensor b1 = eval_beta(setup, st, -1, 1, 1.0);
  const Index g3 = d.subjects[3].group;
  std::array<double, kSbcFunctionals> f{};
  f[0] = a0[0];
  f[1] = mean(a1);
  f[2] = eval_beta(setup, st, -1, 0, 0.5)[21];
  f[3] = mean(b1);
  f[4] = eval_alpha(setup, st, 0, d.subjects[0].group)[42];
  f[5] = eval_beta(setup, st, 1, d.subjects[1].group, 1.0)[10];
  f[6] = std::log(st.sigma2_eps);
  f[7] = a0.vec().squaredNorm() / static_cast<double>(a0.size());
  f[8] = (b0.vec() - b1.vec()).squaredNorm() / static_cast<double>(b0.size());
  f[9] = mean(eval_alpha(setup, st, 3, g3)) - mean(g3 == 0 ? a0 : a1);
  return f;
}

struct SbcTruth {
  ModelState state;
  LongitudinalDataset data;
};

inline SbcTruth sbc_draw_truth(const SbcConfig& cfg, const ModelSetup& setup, int rep) {
  Stream rng(cfg.seed, static_cast<std::uint32_t>(rep), block_tag(30), 0);
  const Hyperparameters& hp = setup.hyper;
  SbcTruth t;
  t.state.structure = Structure::tucker;
  t.state.alpha = prior_component(setup.alpha_bases, cfg.ranks_alpha, cfg.n_subjects, hp, cfg.prior_chain_steps, rng);
  t.state.beta = prior_component(setup.beta_bases, cfg.ranks_beta, cfg.n_subjects, hp, cfg.prior_chain_steps, rng);
  t.state.sigma2_eps = 1.0 / rng.gamma(hp.a_eps, hp.b_eps);
  t.data.grid = cfg.grid;
  t.data.n_groups = cfg.n_groups;
  const double sd = std::sqrt(t.state.sigma2_eps);
  for (Index i = 0; i < cfg.n_subjects; ++i) {
    Subject s;
    s.id = "R" + std::to_string(i + 1);
    s.group = i % cfg.n_groups;
    s.times.push_back(0.0);
    for (Index j = 1; j < cfg.visits; ++j) s.times.push_back(rng.uniform());
    std::sort(s.times.begin(), s.times.end());
    const DenseTensor a = eval_alpha(setup, t.state, i, s.group);
    for (double tm : s.times) {
      DenseTensor y = eval_beta(setup, t.state, i, s.group, tm);
      for (Index v = 0; v < y.size(); ++v) y[v] += a[v] + sd * rng.normal();
      s.obs.push_back(std::move(y));
    }
    t.data.subjects.push_back(std::move(s));
  }
  return t;
}

struct SbcResult {
  std::vector<std::array<int, kSbcFunctionals>> ranks;  // per replication
  std::array<double, kSbcFunctionals> chi2{};
  std::array<double, kSbcFunctionals> p_value{};
  std::uint64_t failures = 0;  // replications whose chain raised a numerical error

  double min_p() const { return *std::min_element(p_value.begin(), p_value.end()); }
};

inline double chi2_upper_tail(double stat, double df) { return boost::math::gamma_q(0.5 * df, 0.5 * stat); }

// χ² uniformity statistic of integer ranks in [0, max_rank] grouped into equal-width bins.
inline std::pair<double, double> rank_uniformity(const std::vector<int>& ranks, int max_rank, int bins) {
  const int per = (max_rank + 1) / bins;
  if (per * bins != max_rank + 1) throw ConfigError("rank count must be a multiple of the bin count");
  std::vector<double> obs(static_cast<std::size_t>(bins), 0.0);
  for (int r : ranks) obs[static_cast<std::size_t>(std::min(r / per, bins - 1))] += 1.0;
  const double e = static_cast<double>(ranks.size()) / bins;
  double stat = 0.0;
  for (double o : obs) stat += (o - e) * (o - e) / e;
  return {stat, chi2_upper_tail(stat, bins - 1)};
}

inline std::array<int, kSbcFunctionals> sbc_replication(const SbcConfig& cfg, const ModelSetup& setup, int rep) {
  const SbcTruth truth = sbc_draw_truth(cfg, setup, rep);
  const auto ft = sbc_functionals(setup, truth.data, truth.state);
  SamplerConfig sc;
  sc.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(rep);
  sc.ranks_alpha = cfg.ranks_alpha;
  sc.ranks_beta = cfg.ranks_beta;
  sc.burn_in = static_cast<std::uint64_t>(cfg.burn_in);
  sc.iterations = sc.burn_in + static_cast<std::uint64_t>(cfg.draws * cfg.thin);
  GibbsSampler sampler(setup, truth.data, sc);
  sampler.initialize();
  for (int k = 0; k < cfg.burn_in; ++k) sampler.sweep();
  std::array<int, kSbcFunctionals> rank{};
  for (int d = 0; d < cfg.draws; ++d) {
    for (int k = 0; k < cfg.thin; ++k) sampler.sweep();
    const auto f = sbc_functionals(setup, truth.data, sampler.state());
    for (int j = 0; j < kSbcFunctionals; ++j) rank[static_cast<std::size_t>(j)] += f[static_cast<std::size_t>(j)] < ft[static_cast<std::size_t>(j)];
  }
  return rank;
}

inline SbcResult run_sbc(const SbcConfig& cfg) {
  const ModelSetup setup = sbc_setup(cfg);
  SbcResult res;
  res.ranks.resize(static_cast<std::size_t>(cfg.replications));
  std::vector<int> failed(static_cast<std::size_t>(cfg.replications), 0);
  parallel_for(cfg.replications, cfg.threads, [&](Index rep) {
    try {
      res.ranks[static_cast<std::size_t>(rep)] = sbc_replication(cfg, setup, static_cast<int>(rep));
    } catch (const NumericalError&) {
      failed[static_cast<std::size_t>(rep)] = 1;
    }
  });
  std::vector<std::array<int, kSbcFunctionals>> kept;
  for (std::size_t r = 0; r < res.ranks.size(); ++r) {
    if (failed[r])
      ++res.failures;
    else
      kept.push_back(res.ranks[r]);
  }
  res.ranks = kept;
  for (int j = 0; j < kSbcFunctionals; ++j) {
    std::vector<int> col;
    for (const auto& r : res.ranks) col.push_back(r[static_cast<std::size_t>(j)]);
    const auto [stat, p] = rank_uniformity(col, cfg.draws, cfg.bins);
    res.chi2[static_cast<std::size_t>(j)] = stat;
    res.p_value[static_cast<std::size_t>(j)] = p;
  }
  return res;
}

}  // namespace tlmm::validation
