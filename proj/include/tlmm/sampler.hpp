#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "tlmm/checkpoint.hpp"
#include "tlmm/constrained_mvn.hpp"
#include "tlmm/model.hpp"
#include "tlmm/parallel.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/rng.hpp"

namespace tlmm {

struct AdaptiveRankConfig {
  bool enabled = false;
  double log_p0 = -1.0;  // p(iter) = exp(log_p0 + log_p1 * iter)
  double log_p1 = -5e-4;
  double threshold = 1e-4;
  std::uint64_t window = 0;  // last adapting sweep; 0 means burn_in
};

struct SamplerConfig {
  std::uint64_t iterations = 2000;
  std::uint64_t burn_in = 1000;
  std::uint64_t thin = 1;
  std::uint64_t seed = 1;
  Dims ranks_alpha{3, 5, 5, 5};
  Dims ranks_beta{3, 5, 5, 5, 4};
  Structure structure = Structure::tucker;
  AdaptiveRankConfig adaptive;
  int threads = 1;
  std::uint64_t checkpoint_every = 0;
  int max_consecutive_jitter = 5;

  std::uint64_t retained() const { return iterations > burn_in ? (iterations - burn_in) / thin : 0; }

  void validate(const ModelSetup& setup) const {
    if (!(burn_in < iterations)) throw ConfigError("burn_in must be smaller than iterations");
    if (thin < 1) throw ConfigError("thin must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (ranks_alpha.size() != 4 || ranks_beta.size() != 5)
      throw ConfigError("ranks need 4 entries for alpha and 5 for beta");
    for (Index r : ranks_alpha)
      if (r < 1) throw ConfigError("ranks must be >= 1");
    for (Index r : ranks_beta)
      if (r < 1) throw ConfigError("ranks must be >= 1");
    if (structure == Structure::cp) {
      for (Index r : ranks_alpha)
        if (r != ranks_alpha[0]) throw ConfigError("CP needs one common rank");
      for (Index r : ranks_beta)
        if (r != ranks_beta[0]) throw ConfigError("CP needs one common rank");
      return;
    }
    auto check = [](const std::vector<ModeBasis>& b, const Dims& r, const char* name) {
      for (std::size_t s = 0; s < r.size(); ++s)
        if (r[s] > b[s].d() || r[s] > b[s].m())
          throw RankError(std::string(name) + " rank " + std::to_string(r[s]) + " for mode " + std::to_string(s) +
                          " exceeds basis size " + std::to_string(std::min(b[s].d(), b[s].m())));
    };
    check(setup.alpha_bases, ranks_alpha, "alpha");
    check(setup.beta_bases, ranks_beta, "beta");
  }
};

struct GammaParams {
  double shape = 0.0, rate = 0.0;
};

struct VarianceConditionals {
  GammaParams eps;
  struct Part {
    std::vector<GammaParams> cell;  // precision of each core cell
    GammaParams tau, mean_core;
  } alpha, beta;
};

struct TraceRecord {
  std::uint64_t iteration = 0;
  double loglik = 0.0;
  double sigma_eps = 0.0;
  Dims ranks_alpha, ranks_beta;
  std::uint64_t jitter = 0;
};

inline nlohmann::json to_json(const TraceRecord& t) {
  return {{"iteration", t.iteration}, {"loglik", t.loglik}, {"sigma_eps", t.sigma_eps},
          {"ranks_alpha", t.ranks_alpha}, {"ranks_beta", t.ranks_beta}, {"jitter", t.jitter}};
}

namespace kernels {

inline std::pair<int, int> other_axes(int s) {
  if (s == 0) return {1, 2};
  if (s == 1) return {0, 2};
  return {0, 1};
}

// Slice of a (r1,r2,r3) core with spatial axis s fixed at l, over the two other axes.
inline RowMajorMatrix core_slice(const DenseTensor& k, int s, Index l) {
  const Index r0 = k.dim(0), r1 = k.dim(1), r2 = k.dim(2);
  if (s == 0) return Eigen::Map<const RowMajorMatrix>(k.data() + l * r1 * r2, r1, r2);
  RowMajorMatrix m(r0, s == 1 ? r2 : r1);
  for (Index a = 0; a < m.rows(); ++a)
    for (Index b = 0; b < m.cols(); ++b) m(a, b) = s == 1 ? k(a, l, b) : k(a, b, l);
  return m;
}

// Field over the two other axes multiplying column l of spatial axis s.
inline RowMajorMatrix slice_expand(const DenseTensor& k, int s, Index l, const std::vector<ModeFactor>& modes) {
  const auto [a, b] = other_axes(s);
  return modes[static_cast<std::size_t>(a + 1)].columns * core_slice(k, s, l) *
         modes[static_cast<std::size_t>(b + 1)].columns.transpose();
}

// v(h_s) = Σ over the other axes of e(h) z(h_a, h_b).
inline Eigen::VectorXd contract_except(const DenseTensor& e, int s, const RowMajorMatrix& z) {
  const Index d0 = e.dim(0), d1 = e.dim(1), d2 = e.dim(2);
  const Eigen::Map<const Eigen::VectorXd> zv(z.data(), z.size());
  if (s == 0) return Eigen::Map<const RowMajorMatrix>(e.data(), d0, d1 * d2) * zv;
  if (s == 2) return Eigen::Map<const RowMajorMatrix>(e.data(), d0 * d1, d2).transpose() * zv;
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d1);
  for (Index h = 0; h < d0; ++h)
    v.noalias() += Eigen::Map<const RowMajorMatrix>(e.data() + h * d1 * d2, d1, d2) * z.row(h).transpose();
  return v;
}

// e(h) += scale v(h_s) z(h_a, h_b).
inline void add_outer(DenseTensor& e, int s, const Eigen::VectorXd& v, const RowMajorMatrix& z, double scale) {
  const Index d0 = e.dim(0), d1 = e.dim(1), d2 = e.dim(2);
  const Eigen::Map<const Eigen::RowVectorXd> zv(z.data(), z.size());
  if (s == 0) {
    Eigen::Map<RowMajorMatrix>(e.data(), d0, d1 * d2).noalias() += (scale * v) * zv;
  } else if (s == 2) {
    Eigen::Map<RowMajorMatrix>(e.data(), d0 * d1, d2).noalias() += zv.transpose() * (scale * v).transpose();
  } else {
    for (Index h = 0; h < d0; ++h)
      Eigen::Map<RowMajorMatrix>(e.data() + h * d1 * d2, d1, d2).noalias() += (scale * v) * z.row(h);
  }
}

// Visits every offset of t whose index along `mode` equals idx.
template <class F>
void for_each_in_slice(const Dims& dims, std::size_t mode, Index idx, F&& f) {
  Index pre = 1, post = 1;
  for (std::size_t k = 0; k < mode; ++k) pre *= dims[k];
  for (std::size_t k = mode + 1; k < dims.size(); ++k) post *= dims[k];
  for (Index p = 0; p < pre; ++p)
    for (Index q = 0; q < post; ++q) f((p * dims[mode] + idx) * post + q);
}

// New tensor whose slices along `mode` are old slices src[j], or zero where src[j] < 0.
inline DenseTensor remap_mode(const DenseTensor& t, std::size_t mode, const std::vector<Index>& src) {
  Dims nd = t.dims();
  nd[mode] = static_cast<Index>(src.size());
  DenseTensor out(nd);
  Index pre = 1, post = 1;
  for (std::size_t k = 0; k < mode; ++k) pre *= nd[k];
  for (std::size_t k = mode + 1; k < nd.size(); ++k) post *= nd[k];
  for (Index p = 0; p < pre; ++p)
    for (std::size_t j = 0; j < src.size(); ++j) {
      if (src[j] < 0) continue;
      for (Index q = 0; q < post; ++q)
        out[(p * nd[mode] + static_cast<Index>(j)) * post + q] = t[(p * t.dim(mode) + src[j]) * post + q];
    }
  return out;
}

}  // namespace kernels

// Blocked Gibbs sampler over a ModelState. Working tensors (fits and residuals) are rebuilt
// from the state at the start of every sweep, so a state fully determines what follows.
class GibbsSampler {
public:
  GibbsSampler(const ModelSetup& setup, const LongitudinalDataset& data, SamplerConfig cfg)
      : setup_(setup), data_(data), cfg_(std::move(cfg)) {
    data_.validate();
    if (data_.grid != setup_.grid) throw DataError("dataset grid does not match the model grid");
    if (data_.n_groups != setup_.n_groups) throw DataError("dataset group count does not match the model");
    setup_.hyper.validate();
    cfg_.validate(setup_);
    const Index n = data_.n_subjects();
    y_.resize(static_cast<std::size_t>(n));
    b_.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const Subject& s = data_.subjects[static_cast<std::size_t>(i)];
      y_[static_cast<std::size_t>(i)] = s.obs;
      for (double t : s.times) b_[static_cast<std::size_t>(i)].push_back(setup_.spline.eval(t));
      for (Index j = 0; j < s.n_obs(); ++j) obs_.emplace_back(i, j);
    }
    if (data_.mask) {
      for (Index v = 0; v < data_.voxels(); ++v)
        if (data_.mask->labels[static_cast<std::size_t>(v)] == 0) masked_.push_back(v);
      if (static_cast<Index>(masked_.size()) == data_.voxels()) throw DataError("mask excludes every voxel");
      // Masked entries start at the observation's mean over retained voxels.
      for (auto& ys : y_)
        for (auto& t : ys) {
          double sum = 0.0;
          for (Index v = 0; v < t.size(); ++v) sum += t[v];
          for (Index v : masked_) sum -= t[v];
          const double m = sum / static_cast<double>(t.size() - static_cast<Index>(masked_.size()));
          for (Index v : masked_) t[v] = m;
        }
    }
    alpha_.resize(static_cast<std::size_t>(n));
    beta_.resize(static_cast<std::size_t>(n));
    resid_.resize(static_cast<std::size_t>(n));
  }

  const ModelState& state() const { return st_; }
  const SamplerConfig& config() const { return cfg_; }
  std::uint64_t jitter_events() const { return jitter_total_; }
  double last_loglik() const { return last_loglik_; }

  void set_state(const ModelState& st) {
    st_ = st;
    refresh();
  }

  // Deterministic warm start: truncated SVDs for the modes, least-squares cores, moment variances.
  void initialize() {
    st_ = ModelState{};
    st_.structure = cfg_.structure;
    const Index n = data_.n_subjects();
    const Index dg = setup_.n_groups;
    Dims gdims = {dg, setup_.grid[0], setup_.grid[1], setup_.grid[2]};
    DenseTensor base(gdims), slope(gdims);
    std::vector<double> nb(static_cast<std::size_t>(dg), 0.0), ns(static_cast<std::size_t>(dg), 0.0);
    const Index vox = setup_.voxels();
    for (Index i = 0; i < n; ++i) {
      const Subject& s = data_.subjects[static_cast<std::size_t>(i)];
      const auto& y = y_[static_cast<std::size_t>(i)];
      nb[static_cast<std::size_t>(s.group)] += 1.0;
      for (Index v = 0; v < vox; ++v) base[s.group * vox + v] += y[0][v];
      if (s.n_obs() >= 2) {
        const double dt = s.times.back() - s.times.front();
        ns[static_cast<std::size_t>(s.group)] += 1.0;
        for (Index v = 0; v < vox; ++v) slope[s.group * vox + v] += (y.back()[v] - y.front()[v]) / dt;
      }
    }
    for (Index g = 0; g < dg; ++g)
      for (Index v = 0; v < vox; ++v) {
        if (nb[static_cast<std::size_t>(g)] > 0) base[g * vox + v] /= nb[static_cast<std::size_t>(g)];
        if (ns[static_cast<std::size_t>(g)] > 0) slope[g * vox + v] /= ns[static_cast<std::size_t>(g)];
      }
    init_component(Component::alpha, base);
    init_component(Component::beta, slope);

    // Least-squares cores under a vague prior.
    for (auto* c : {&st_.alpha, &st_.beta}) {
      c->mean_core = DenseTensor(core_dims(*c));
      c->cell_var = DenseTensor(core_dims(*c), 1e8);
      c->cores.assign(static_cast<std::size_t>(n), DenseTensor(core_dims(*c)));
      c->tau2 = 1.0;
      c->mean_core_var = 1.0;
    }
    st_.sigma2_eps = 1.0;
    refresh();
    begin_alpha(true);
    update_cores_alpha(0, false, true);
    rebuild_resid();
    update_cores_beta(0, false);
    begin_alpha(false);
    update_cores_alpha(0, false, false);
    rebuild_resid();

    for (auto* c : {&st_.alpha, &st_.beta}) {
      const Index cells = c->mean_core.size();
      for (Index z = 0; z < cells; ++z) {
        double m = 0.0, v = 0.0;
        for (const auto& k : c->cores) m += k[z];
        m /= static_cast<double>(n);
        for (const auto& k : c->cores) v += (k[z] - m) * (k[z] - m);
        c->mean_core[z] = m;
        c->cell_var[z] = v / static_cast<double>(n);
      }
      const double scale = c->mean_core.vec().squaredNorm() / static_cast<double>(cells);
      for (Index z = 0; z < cells; ++z) c->cell_var[z] = std::max(c->cell_var[z], 1e-3 * scale + 1e-12);
      c->mean_core_var = scale + 1e-12;
    }
    double ss = 0.0;
    for (const auto& rs : resid_)
      for (const auto& r : rs) ss += r.vec().squaredNorm();
    st_.sigma2_eps = std::max(ss / static_cast<double>(data_.n_obs() * vox), 1e-12);
    check_finite("initialize");
  }

  void sweep() {
    const auto sw = static_cast<std::uint32_t>(st_.iteration + 1);
    refresh();
    impute(sw);

    begin_alpha(false);
    for (std::size_t s = 0; s < 4; ++s) {
      if (s == 1) prepare_spatial(Component::alpha);
      for (Index l = 0; l < st_.alpha.modes[s].rank(); ++l) update_column(Component::alpha, s, l, sw);
    }
    check_finite("alpha modes");
    update_cores_alpha(sw, true, false);
    rebuild_resid();
    check_finite("alpha cores");

    for (std::size_t s = 0; s < 5; ++s) {
      if (s == 1) prepare_spatial(Component::beta);
      for (Index l = 0; l < st_.beta.modes[s].rank(); ++l) update_column(Component::beta, s, l, sw);
    }
    check_finite("beta modes");
    update_cores_beta(sw, true);
    check_finite("beta cores");

    update_mean_cores(sw);
    update_shrinkage(sw);
    update_variances(sw);
    check_finite("hyperparameters");
    last_loglik_ = log_likelihood();
    adapt(sw);
    st_.iteration = sw;
  }

  // Gaussian log-likelihood of the retained voxels at the current working fits.
  double log_likelihood() const {
    double ss = 0.0;
    Index count = 0;
    for (const auto& rs : resid_)
      for (const auto& r : rs) {
        double part = r.vec().squaredNorm();
        for (Index v : masked_) part -= r[v] * r[v];
        ss += part;
        count += r.size() - static_cast<Index>(masked_.size());
      }
    const double s2 = st_.sigma2_eps;
    return -0.5 * (static_cast<double>(count) * std::log(2.0 * M_PI * s2) + ss / s2);
  }

  // Full conditional of γ for column `col`, PING component k, of the given mode.
  GaussianBlock gamma_block(Component c, std::size_t mode, Index col, int k) {
    prepare_for(c);
    if (mode >= 1 && mode <= 3) prepare_spatial(c);
    ColumnCache cache;
    const ColumnLikelihood lik = column_stats(c, mode, col, cache);
    const ModeFactor& f = comp(c).modes[mode];
    const Eigen::VectorXd sig = f.shrink.sigma(setup_.hyper.shrinkage);
    return gamma_conditional(bases(c)[mode], f, col, k, lik, st_.sigma2_eps, sig[col], orthogonal());
  }

  // Full conditional of one core block: Tucker blocks are indexed by the spatial cell
  // (z1,z2,z3) and run over z_g (alpha) or (z_g, z_t) (beta); CP blocks are whole subjects.
  GaussianBlock core_block(Component c, Index subject, Index cell) {
    prepare_for(c);
    const auto i = static_cast<std::size_t>(subject);
    if (c == Component::alpha) {
      const DenseTensor p = spatial_project(s_[i], st_.alpha.modes);
      return alpha_core_natural(subject, cell, p, static_cast<double>(data_.subjects[i].n_obs()));
    }
    std::vector<DenseTensor> p;
    for (Index j = 0; j < data_.subjects[i].n_obs(); ++j) {
      DenseTensor t = y_[i][static_cast<std::size_t>(j)];
      t.vec() -= alpha_[i].vec();
      p.push_back(spatial_project(t, st_.beta.modes));
    }
    return beta_core_natural(subject, cell, p);
  }

  GaussianBlock mean_core_block(Component c, Index cell) const {
    const ComponentState& cs = comp(c);
    const double pv = 1.0 / (cs.tau2 * cs.cell_var[cell]);
    GaussianBlock blk;
    blk.precision = Eigen::MatrixXd::Constant(1, 1, static_cast<double>(cs.cores.size()) * pv + 1.0 / cs.mean_core_var);
    double sum = 0.0;
    for (const auto& k : cs.cores) sum += k[cell];
    blk.linear = Eigen::VectorXd::Constant(1, sum * pv);
    blk.constraint.resize(0, 1);
    return blk;
  }

  VarianceConditionals variance_conditionals() {
    refresh();
    VarianceConditionals out;
    const auto& hp = setup_.hyper;
    for (Component c : {Component::alpha, Component::beta}) {
      const ComponentState& cs = comp(c);
      auto& part = c == Component::alpha ? out.alpha : out.beta;
      const double n = static_cast<double>(cs.cores.size());
      double tau_ss = 0.0;
      for (Index z = 0; z < cs.mean_core.size(); ++z) {
        double ss = 0.0;
        for (const auto& k : cs.cores) ss += (k[z] - cs.mean_core[z]) * (k[z] - cs.mean_core[z]);
        part.cell.push_back({hp.a_s + 0.5 * n, hp.b_s + 0.5 * ss / cs.tau2});
        tau_ss += ss / cs.cell_var[z];
      }
      const double cells = static_cast<double>(cs.mean_core.size());
      part.tau = {hp.a_tau + 0.5 * n * cells, hp.b_tau + 0.5 * tau_ss};
      part.mean_core = {hp.a_c + 0.5 * cells, hp.b_c + 0.5 * cs.mean_core.vec().squaredNorm()};
    }
    double ss = 0.0;
    for (const auto& rs : resid_)
      for (const auto& r : rs) ss += r.vec().squaredNorm();
    out.eps = {hp.a_eps + 0.5 * static_cast<double>(data_.n_obs() * setup_.voxels()), hp.b_eps + 0.5 * ss};
    return out;
  }

private:
  struct ColumnCache {
    std::vector<RowMajorMatrix> zeta2;
    std::vector<DenseTensor> zeta3;
  };

  bool orthogonal() const { return st_.structure == Structure::tucker; }
  ComponentState& comp(Component c) { return c == Component::alpha ? st_.alpha : st_.beta; }
  const ComponentState& comp(Component c) const { return c == Component::alpha ? st_.alpha : st_.beta; }
  const std::vector<ModeBasis>& bases(Component c) const {
    return c == Component::alpha ? setup_.alpha_bases : setup_.beta_bases;
  }
  Index group_of(Index i) const { return data_.subjects[static_cast<std::size_t>(i)].group; }
  Stream stream(std::uint32_t sweep, std::uint32_t tag, std::uint32_t cell = 0) const {
    return Stream(cfg_.seed, sweep, tag, cell);
  }

  Dims core_dims(const ComponentState& c) const {
    if (st_.structure == Structure::cp) return {c.modes[0].rank()};
    return c.ranks();
  }

  Eigen::VectorXd weights(Index i, Index j) const {
    return st_.beta.modes[kTimeMode].columns.transpose() * b_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }

  // Units: subjects for alpha (residual = sum over visits), observations for beta.
  Index n_units(Component c) const {
    return c == Component::alpha ? data_.n_subjects() : static_cast<Index>(obs_.size());
  }
  Index unit_subject(Component c, Index u) const { return c == Component::alpha ? u : obs_[static_cast<std::size_t>(u)].first; }
  double unit_mult(Component c, Index u) const {
    return c == Component::alpha ? static_cast<double>(data_.subjects[static_cast<std::size_t>(u)].n_obs()) : 1.0;
  }
  DenseTensor& unit_resid(Component c, Index u) {
    if (c == Component::alpha) return esum_[static_cast<std::size_t>(u)];
    const auto [i, j] = obs_[static_cast<std::size_t>(u)];
    return resid_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  DenseTensor& unit_fit(Component c, Index u) {
    if (c == Component::alpha) return alpha_[static_cast<std::size_t>(u)];
    const auto [i, j] = obs_[static_cast<std::size_t>(u)];
    return beta_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }

  DenseTensor eval_subject_alpha(Index i) const {
    return spatial_expand(spatial_core(st_.structure, st_.alpha.cores[static_cast<std::size_t>(i)], group_row(st_.alpha, group_of(i))),
                          st_.alpha.modes);
  }
  DenseTensor eval_subject_beta(Index i, Index j) const {
    return spatial_expand(spatial_core(st_.structure, st_.beta.cores[static_cast<std::size_t>(i)], group_row(st_.beta, group_of(i)),
                                       weights(i, j)),
                          st_.beta.modes);
  }

  // Fits and residuals from the state.
  void refresh() {
    parallel_for(data_.n_subjects(), cfg_.threads, [&](Index i) {
      const auto si = static_cast<std::size_t>(i);
      alpha_[si] = eval_subject_alpha(i);
      const Index no = data_.subjects[si].n_obs();
      beta_[si].resize(static_cast<std::size_t>(no));
      for (Index j = 0; j < no; ++j) beta_[si][static_cast<std::size_t>(j)] = eval_subject_beta(i, j);
    });
    rebuild_resid();
  }

  void rebuild_resid() {
    parallel_for(data_.n_subjects(), cfg_.threads, [&](Index i) {
      const auto si = static_cast<std::size_t>(i);
      resid_[si].resize(y_[si].size());
      for (std::size_t j = 0; j < y_[si].size(); ++j) {
        DenseTensor r = y_[si][j];
        r.vec() -= alpha_[si].vec() + beta_[si][j].vec();
        resid_[si][j] = std::move(r);
      }
    });
  }

  // Masked voxels drawn from their predictive given the state.
  void impute(std::uint32_t sw) {
    if (masked_.empty()) return;
    const double sd = std::sqrt(st_.sigma2_eps);
    parallel_for(static_cast<Index>(obs_.size()), cfg_.threads, [&](Index o) {
      const auto [i, j] = obs_[static_cast<std::size_t>(o)];
      const auto si = static_cast<std::size_t>(i), sj = static_cast<std::size_t>(j);
      Stream rng = stream(sw, block_tag(10), static_cast<std::uint32_t>(o));
      for (Index v : masked_) {
        const double fit = alpha_[si][v] + beta_[si][sj][v];
        const double e = sd * rng.normal();
        y_[si][sj][v] = fit + e;
        resid_[si][sj][v] = e;
      }
    });
  }

  // Sufficient sums for the alpha block: S_i = Σ_j (Y_ij - β_ij), residual S_i - n_i α_i.
  void begin_alpha(bool baseline_only) {
    const Index n = data_.n_subjects();
    s_.resize(static_cast<std::size_t>(n));
    esum_.resize(static_cast<std::size_t>(n));
    parallel_for(n, cfg_.threads, [&](Index i) {
      const auto si = static_cast<std::size_t>(i);
      const std::size_t no = baseline_only ? 1 : y_[si].size();
      DenseTensor s(setup_.grid);
      for (std::size_t j = 0; j < no; ++j) s.vec() += y_[si][j].vec() - beta_[si][j].vec();
      DenseTensor e = s;
      e.vec() -= static_cast<double>(no) * alpha_[si].vec();
      s_[si] = std::move(s);
      esum_[si] = std::move(e);
    });
  }

  void prepare_for(Component c) {
    refresh();
    if (c == Component::alpha) begin_alpha(false);
  }

  // Spatial coefficient tensors of every unit, fixed while spatial modes are updated.
  void prepare_spatial(Component c) {
    const Index nu = n_units(c);
    kcores_.resize(static_cast<std::size_t>(nu));
    parallel_for(nu, cfg_.threads, [&](Index u) {
      const Index i = unit_subject(c, u);
      const ComponentState& cs = comp(c);
      const auto& core = cs.cores[static_cast<std::size_t>(i)];
      const Eigen::VectorXd g = group_row(cs, group_of(i));
      if (c == Component::alpha) {
        kcores_[static_cast<std::size_t>(u)] = spatial_core(st_.structure, core, g);
      } else {
        const auto [si, j] = obs_[static_cast<std::size_t>(u)];
        kcores_[static_cast<std::size_t>(u)] = spatial_core(st_.structure, core, g, weights(si, j));
      }
    });
  }

  ColumnLikelihood column_stats(Component c, std::size_t s, Index l, ColumnCache& cache) {
    ComponentState& cs = comp(c);
    const Eigen::VectorXd a_old = cs.modes[s].columns.col(l);
    ColumnLikelihood lik;
    if (s == kGroupMode) {
      const Index nu = n_units(c);
      cache.zeta3.assign(static_cast<std::size_t>(nu), DenseTensor());
      std::vector<double> part(static_cast<std::size_t>(nu)), nrm(static_cast<std::size_t>(nu));
      const Eigen::VectorXd e = Eigen::VectorXd::Unit(cs.modes[0].rank(), l);
      parallel_for(nu, cfg_.threads, [&](Index u) {
        const auto su = static_cast<std::size_t>(u);
        const Index i = unit_subject(c, u);
        const auto& core = cs.cores[static_cast<std::size_t>(i)];
        DenseTensor k;
        if (c == Component::alpha) {
          k = spatial_core(st_.structure, core, e);
        } else {
          const auto [si, j] = obs_[su];
          k = spatial_core(st_.structure, core, e, weights(si, j));
        }
        cache.zeta3[su] = spatial_expand(k, cs.modes);
        part[su] = unit_resid(c, u).vec().dot(cache.zeta3[su].vec());
        nrm[su] = cache.zeta3[su].vec().squaredNorm();
      });
      lik.h_diag = Eigen::VectorXd::Zero(setup_.n_groups);
      lik.linear = Eigen::VectorXd::Zero(setup_.n_groups);
      for (Index u = 0; u < nu; ++u) {
        const auto su = static_cast<std::size_t>(u);
        const Index g = group_of(unit_subject(c, u));
        const double w = unit_mult(c, u) * nrm[su];
        lik.h_diag[g] += w;
        lik.linear[g] += part[su] + w * a_old[g];
      }
      return lik;
    }
    if (s == kTimeMode) {
      const Index n = data_.n_subjects();
      const Index dt = a_old.size();
      cache.zeta3.assign(static_cast<std::size_t>(n), DenseTensor());
      std::vector<Eigen::MatrixXd> hpart(static_cast<std::size_t>(n));
      std::vector<Eigen::VectorXd> lpart(static_cast<std::size_t>(n));
      const Eigen::VectorXd e = Eigen::VectorXd::Unit(cs.modes[kTimeMode].rank(), l);
      parallel_for(n, cfg_.threads, [&](Index i) {
        const auto si = static_cast<std::size_t>(i);
        const DenseTensor k = spatial_core(st_.structure, cs.cores[si], group_row(cs, group_of(i)), e);
        cache.zeta3[si] = spatial_expand(k, cs.modes);
        const double nrm = cache.zeta3[si].vec().squaredNorm();
        hpart[si] = Eigen::MatrixXd::Zero(dt, dt);
        lpart[si] = Eigen::VectorXd::Zero(dt);
        for (std::size_t j = 0; j < y_[si].size(); ++j) {
          const Eigen::VectorXd& b = b_[si][j];
          hpart[si].noalias() += nrm * b * b.transpose();
          lpart[si] += b * (resid_[si][j].vec().dot(cache.zeta3[si].vec()) + b.dot(a_old) * nrm);
        }
      });
      lik.h_full = Eigen::MatrixXd::Zero(dt, dt);
      lik.linear = Eigen::VectorXd::Zero(dt);
      for (Index i = 0; i < n; ++i) {
        lik.h_full += hpart[static_cast<std::size_t>(i)];
        lik.linear += lpart[static_cast<std::size_t>(i)];
      }
      return lik;
    }
    const int ax = static_cast<int>(s) - 1;
    const Index nu = n_units(c);
    cache.zeta2.assign(static_cast<std::size_t>(nu), RowMajorMatrix());
    std::vector<Eigen::VectorXd> part(static_cast<std::size_t>(nu));
    std::vector<double> nrm(static_cast<std::size_t>(nu));
    parallel_for(nu, cfg_.threads, [&](Index u) {
      const auto su = static_cast<std::size_t>(u);
      cache.zeta2[su] = kernels::slice_expand(kcores_[su], ax, l, cs.modes);
      part[su] = kernels::contract_except(unit_resid(c, u), ax, cache.zeta2[su]);
      nrm[su] = cache.zeta2[su].squaredNorm();
    });
    double h = 0.0;
    lik.linear = Eigen::VectorXd::Zero(a_old.size());
    for (Index u = 0; u < nu; ++u) {
      const auto su = static_cast<std::size_t>(u);
      h += unit_mult(c, u) * nrm[su];
      lik.linear += part[su];
    }
    lik.h_diag = Eigen::VectorXd::Constant(a_old.size(), h);
    lik.linear += h * a_old;
    return lik;
  }

  void apply_column_change(Component c, std::size_t s, const Eigen::VectorXd& delta, const ColumnCache& cache) {
    if (s == kTimeMode) {
      parallel_for(data_.n_subjects(), cfg_.threads, [&](Index i) {
        const auto si = static_cast<std::size_t>(i);
        for (std::size_t j = 0; j < y_[si].size(); ++j) {
          const double sc = b_[si][j].dot(delta);
          beta_[si][j].vec() += sc * cache.zeta3[si].vec();
          resid_[si][j].vec() -= sc * cache.zeta3[si].vec();
        }
      });
      return;
    }
    parallel_for(n_units(c), cfg_.threads, [&](Index u) {
      const auto su = static_cast<std::size_t>(u);
      const double mult = unit_mult(c, u);
      if (s == kGroupMode) {
        const double sc = delta[group_of(unit_subject(c, u))];
        unit_fit(c, u).vec() += sc * cache.zeta3[su].vec();
        unit_resid(c, u).vec() -= (mult * sc) * cache.zeta3[su].vec();
      } else {
        const int ax = static_cast<int>(s) - 1;
        kernels::add_outer(unit_fit(c, u), ax, delta, cache.zeta2[su], 1.0);
        kernels::add_outer(unit_resid(c, u), ax, delta, cache.zeta2[su], -mult);
      }
    });
  }

  void note_jitter(bool jittered) {
    if (!jittered) {
      jitter_run_ = 0;
      return;
    }
    ++jitter_total_;
    if (++jitter_run_ > cfg_.max_consecutive_jitter)
      throw NumericalError("conditional precision needed jitter more than " + std::to_string(cfg_.max_consecutive_jitter) +
                           " times in a row");
  }

  void update_column(Component c, std::size_t s, Index l, std::uint32_t sw) {
    ColumnCache cache;
    const ColumnLikelihood lik = column_stats(c, s, l, cache);
    ModeFactor& f = comp(c).modes[s];
    const ModeBasis& basis = bases(c)[s];
    const Eigen::VectorXd sig = f.shrink.sigma(setup_.hyper.shrinkage);
    const Eigen::VectorXd a_old = f.columns.col(l);
    const std::uint32_t kind = c == Component::alpha ? 1 : 3;
    for (int k = 0; k < static_cast<int>(f.gamma.size()); ++k) {
      const GaussianBlock blk = gamma_conditional(basis, f, l, k, lik, st_.sigma2_eps, sig[l], orthogonal());
      const auto cg = ConditionedGaussian::from_natural(blk.precision, blk.linear, blk.constraint);
      note_jitter(cg.jittered());
      Stream rng = stream(sw, block_tag(kind, static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(l),
                                        static_cast<std::uint32_t>(k)));
      f.gamma[static_cast<std::size_t>(k)].col(l) = cg.draw(rng);
      f.columns.col(l) = component_product(basis, f, l);
    }
    apply_column_change(c, s, f.columns.col(l) - a_old, cache);
  }

  Eigen::VectorXd column_sq_norms(const ModeFactor& f) const { return f.columns.colwise().squaredNorm().transpose(); }

  // Product of mode Gram matrices (CP) or of column norms (Tucker cell δ).
  Eigen::MatrixXd cp_gram(const ComponentState& cs) const {
    Eigen::MatrixXd g = cross_products(cs.modes[1].columns);
    for (std::size_t s = 2; s <= 3; ++s) g = g.cwiseProduct(cross_products(cs.modes[s].columns));
    return g;
  }

  double cell_delta(const ComponentState& cs, Index cell) const {
    const Index r2 = cs.modes[2].rank(), r3 = cs.modes[3].rank();
    const Index z1 = cell / (r2 * r3), z2 = (cell / r3) % r2, z3 = cell % r3;
    return cs.modes[1].columns.col(z1).squaredNorm() * cs.modes[2].columns.col(z2).squaredNorm() *
           cs.modes[3].columns.col(z3).squaredNorm();
  }

  GaussianBlock alpha_core_natural(Index i, Index cell, const DenseTensor& p, double n) const {
    const ComponentState& cs = st_.alpha;
    const auto& core = cs.cores[static_cast<std::size_t>(i)];
    const Eigen::VectorXd u = group_row(cs, group_of(i));
    const double s2 = st_.sigma2_eps;
    GaussianBlock blk;
    if (st_.structure == Structure::cp) {
      const Index r = core.size();
      Eigen::VectorXd dp(r);
      for (Index z = 0; z < r; ++z) dp[z] = p(z, z, z);
      blk.precision = n * (u * u.transpose()).cwiseProduct(cp_gram(cs)) / s2;
      blk.linear = u.cwiseProduct(dp) / s2;
      for (Index z = 0; z < r; ++z) {
        const double pv = 1.0 / (cs.tau2 * cs.cell_var[z]);
        blk.precision(z, z) += pv;
        blk.linear[z] += cs.mean_core[z] * pv;
      }
    } else {
      const Index rg = cs.modes[0].rank();
      const Index r3 = core.size() / rg;
      const double delta = cell_delta(cs, cell);
      blk.precision = n * delta * u * u.transpose() / s2;
      blk.linear = p[cell] * u / s2;
      for (Index zg = 0; zg < rg; ++zg) {
        const Index off = zg * r3 + cell;
        const double pv = 1.0 / (cs.tau2 * cs.cell_var[off]);
        blk.precision(zg, zg) += pv;
        blk.linear[zg] += cs.mean_core[off] * pv;
      }
    }
    blk.constraint.resize(0, blk.linear.size());
    return blk;
  }

  GaussianBlock beta_core_natural(Index i, Index cell, const std::vector<DenseTensor>& p) const {
    const ComponentState& cs = st_.beta;
    const auto& core = cs.cores[static_cast<std::size_t>(i)];
    const Eigen::VectorXd u = group_row(cs, group_of(i));
    const double s2 = st_.sigma2_eps;
    GaussianBlock blk;
    if (st_.structure == Structure::cp) {
      const Index r = core.size();
      const Eigen::MatrixXd gram = cp_gram(cs);
      blk.precision = Eigen::MatrixXd::Zero(r, r);
      blk.linear = Eigen::VectorXd::Zero(r);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const Eigen::VectorXd v = u.cwiseProduct(weights(i, static_cast<Index>(j)));
        Eigen::VectorXd dp(r);
        for (Index z = 0; z < r; ++z) dp[z] = p[j](z, z, z);
        blk.precision += (v * v.transpose()).cwiseProduct(gram) / s2;
        blk.linear += v.cwiseProduct(dp) / s2;
      }
      for (Index z = 0; z < r; ++z) {
        const double pv = 1.0 / (cs.tau2 * cs.cell_var[z]);
        blk.precision(z, z) += pv;
        blk.linear[z] += cs.mean_core[z] * pv;
      }
    } else {
      const Index rg = cs.modes[0].rank(), rt = cs.modes[kTimeMode].rank();
      const Index r3 = core.size() / (rg * rt);
      const double delta = cell_delta(cs, cell);
      const Index nb = rg * rt;
      blk.precision = Eigen::MatrixXd::Zero(nb, nb);
      blk.linear = Eigen::VectorXd::Zero(nb);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const Eigen::MatrixXd x = kronecker(u, weights(i, static_cast<Index>(j)));
        blk.precision.noalias() += (delta / s2) * x * x.transpose();
        blk.linear += (p[j][cell] / s2) * x.col(0);
      }
      for (Index zg = 0; zg < rg; ++zg)
        for (Index zt = 0; zt < rt; ++zt) {
          const Index off = (zg * r3 + cell) * rt + zt;
          const double pv = 1.0 / (cs.tau2 * cs.cell_var[off]);
          blk.precision(zg * rt + zt, zg * rt + zt) += pv;
          blk.linear[zg * rt + zt] += cs.mean_core[off] * pv;
        }
    }
    blk.constraint.resize(0, blk.linear.size());
    return blk;
  }

  Eigen::VectorXd solve_block(const GaussianBlock& blk, bool sample, std::uint32_t sw, std::uint32_t tag,
                              std::uint32_t cell, bool& jittered) const {
    const auto cg = ConditionedGaussian::from_natural(blk.precision, blk.linear, blk.constraint);
    jittered = cg.jittered();
    if (!sample) return cg.unconstrained_mean();
    Stream rng = stream(sw, tag, cell);
    return cg.draw(rng);
  }

  void update_cores_alpha(std::uint32_t sw, bool sample, bool baseline_only) {
    ComponentState& cs = st_.alpha;
    const Index n = data_.n_subjects();
    const Index rg = cs.modes[0].rank();
    const Index cells = st_.structure == Structure::cp ? 1 : cs.cores[0].size() / rg;
    std::vector<int> jit(static_cast<std::size_t>(n * cells), 0);
    parallel_for(n, cfg_.threads, [&](Index i) {
      const auto si = static_cast<std::size_t>(i);
      const double nobs = baseline_only ? 1.0 : static_cast<double>(y_[si].size());
      const DenseTensor p = spatial_project(s_[si], cs.modes);
      DenseTensor& core = cs.cores[si];
      for (Index cell = 0; cell < cells; ++cell) {
        bool j = false;
        const Eigen::VectorXd x = solve_block(alpha_core_natural(i, cell, p, nobs), sample, sw, block_tag(2),
                                              static_cast<std::uint32_t>(i * cells + cell), j);
        jit[static_cast<std::size_t>(i * cells + cell)] = j;
        if (st_.structure == Structure::cp)
          core.vec() = x;
        else
          for (Index zg = 0; zg < rg; ++zg) core[zg * cells + cell] = x[zg];
      }
      alpha_[si] = eval_subject_alpha(i);
    });
    for (int j : jit) note_jitter(j != 0);
  }

  void update_cores_beta(std::uint32_t sw, bool sample) {
    ComponentState& cs = st_.beta;
    const Index n = data_.n_subjects();
    const Index rg = cs.modes[0].rank(), rt = cs.modes[kTimeMode].rank();
    const Index cells = st_.structure == Structure::cp ? 1 : cs.cores[0].size() / (rg * rt);
    std::vector<int> jit(static_cast<std::size_t>(n * cells), 0);
    parallel_for(n, cfg_.threads, [&](Index i) {
      const auto si = static_cast<std::size_t>(i);
      std::vector<DenseTensor> p;
      for (std::size_t j = 0; j < y_[si].size(); ++j) {
        DenseTensor t = y_[si][j];
        t.vec() -= alpha_[si].vec();
        p.push_back(spatial_project(t, cs.modes));
      }
      DenseTensor& core = cs.cores[si];
      for (Index cell = 0; cell < cells; ++cell) {
        bool j = false;
        const Eigen::VectorXd x = solve_block(beta_core_natural(i, cell, p), sample, sw, block_tag(5),
                                              static_cast<std::uint32_t>(i * cells + cell), j);
        jit[static_cast<std::size_t>(i * cells + cell)] = j;
        if (st_.structure == Structure::cp) {
          core.vec() = x;
        } else {
          for (Index zg = 0; zg < rg; ++zg)
            for (Index zt = 0; zt < rt; ++zt) core[(zg * cells + cell) * rt + zt] = x[zg * rt + zt];
        }
      }
      for (std::size_t j = 0; j < y_[si].size(); ++j) {
        beta_[si][j] = eval_subject_beta(i, static_cast<Index>(j));
        DenseTensor r = y_[si][j];
        r.vec() -= alpha_[si].vec() + beta_[si][j].vec();
        resid_[si][j] = std::move(r);
      }
    });
    for (int j : jit) note_jitter(j != 0);
  }

  void update_mean_cores(std::uint32_t sw) {
    for (Component c : {Component::alpha, Component::beta}) {
      ComponentState& cs = comp(c);
      const std::uint32_t tag = block_tag(6, c == Component::alpha ? 0 : 1);
      for (Index z = 0; z < cs.mean_core.size(); ++z) {
        const GaussianBlock blk = mean_core_block(c, z);
        const double prec = blk.precision(0, 0);
        Stream rng = stream(sw, tag, static_cast<std::uint32_t>(z));
        cs.mean_core[z] = blk.linear[0] / prec + rng.normal() / std::sqrt(prec);
      }
    }
  }

  void update_shrinkage(std::uint32_t sw) {
    for (Component c : {Component::alpha, Component::beta}) {
      ComponentState& cs = comp(c);
      for (std::size_t s = 0; s < cs.modes.size(); ++s) {
        ModeFactor& f = cs.modes[s];
        const ModeBasis& b = bases(c)[s];
        const Index r = f.rank();
        Eigen::VectorXd quad(r);
        for (Index z = 0; z < r; ++z) quad[z] = f.gamma[0].col(z).dot(b.precision * f.gamma[0].col(z));
        const double nu = static_cast<double>(b.m()) - (orthogonal() ? static_cast<double>(r - 1) : 0.0);
        Stream rng = stream(sw, block_tag(7, c == Component::alpha ? 0 : 1, static_cast<std::uint32_t>(s)));
        f.shrink = shrinkage_gibbs_update(f.shrink, quad, nu, setup_.hyper, rng);
      }
    }
  }

  void update_variances(std::uint32_t sw) {
    const auto& hp = setup_.hyper;
    for (Component c : {Component::alpha, Component::beta}) {
      ComponentState& cs = comp(c);
      const std::uint32_t ci = c == Component::alpha ? 0 : 1;
      const double n = static_cast<double>(cs.cores.size());
      const Index cells = cs.mean_core.size();
      std::vector<double> ss(static_cast<std::size_t>(cells), 0.0);
      for (Index z = 0; z < cells; ++z)
        for (const auto& k : cs.cores) ss[static_cast<std::size_t>(z)] += (k[z] - cs.mean_core[z]) * (k[z] - cs.mean_core[z]);
      for (Index z = 0; z < cells; ++z) {
        Stream rng = stream(sw, block_tag(8, ci, 0), static_cast<std::uint32_t>(z));
        cs.cell_var[z] = 1.0 / variance_gibbs(hp.a_s, hp.b_s, n, ss[static_cast<std::size_t>(z)] / cs.tau2, rng);
      }
      double tss = 0.0;
      for (Index z = 0; z < cells; ++z) tss += ss[static_cast<std::size_t>(z)] / cs.cell_var[z];
      Stream rt = stream(sw, block_tag(8, ci, 1));
      cs.tau2 = 1.0 / variance_gibbs(hp.a_tau, hp.b_tau, n * static_cast<double>(cells), tss, rt);
      Stream rc = stream(sw, block_tag(8, ci, 2));
      cs.mean_core_var = 1.0 / variance_gibbs(hp.a_c, hp.b_c, static_cast<double>(cells), cs.mean_core.vec().squaredNorm(), rc);
    }
    double ss = 0.0;
    for (const auto& rs : resid_)
      for (const auto& r : rs) ss += r.vec().squaredNorm();
    Stream re = stream(sw, block_tag(8, 2));
    st_.sigma2_eps = 1.0 / variance_gibbs(hp.a_eps, hp.b_eps, static_cast<double>(data_.n_obs() * setup_.voxels()), ss, re);
  }

  std::size_t core_mode(std::size_t s) const { return s; }

  void adapt(std::uint32_t sw) {
    if (!cfg_.adaptive.enabled || st_.structure != Structure::tucker) return;
    const std::uint64_t window = cfg_.adaptive.window ? cfg_.adaptive.window : cfg_.burn_in;
    if (sw > window) return;
    const double p = std::exp(cfg_.adaptive.log_p0 + cfg_.adaptive.log_p1 * static_cast<double>(sw));
    for (Component c : {Component::alpha, Component::beta}) {
      ComponentState& cs = comp(c);
      const Dims& start = c == Component::alpha ? cfg_.ranks_alpha : cfg_.ranks_beta;
      const std::uint32_t ci = c == Component::alpha ? 0 : 1;
      for (std::size_t s = 0; s < cs.modes.size(); ++s) {
        Stream rng = stream(sw, block_tag(9, ci, static_cast<std::uint32_t>(s)));
        if (rng.uniform() >= p) continue;
        const Index r = cs.modes[s].rank();
        Eigen::VectorXd contrib(r);
        for (Index l = 0; l < r; ++l) {
          double ss = 0.0;
          for (const auto& k : cs.cores) kernels::for_each_in_slice(k.dims(), s, l, [&](Index o) { ss += k[o] * k[o]; });
          contrib[l] = cs.modes[s].columns.col(l).norm() * std::sqrt(ss / static_cast<double>(cs.cores.size()));
        }
        const double top = contrib.maxCoeff();
        std::vector<Index> keep;
        for (Index l = 0; l < r; ++l)
          if (top > 0.0 && contrib[l] >= cfg_.adaptive.threshold * top) keep.push_back(l);
        if (keep.empty()) keep.push_back(0);
        const ModeBasis& b = bases(c)[s];
        if (static_cast<Index>(keep.size()) < r) {
          drop_columns(cs, s, keep);
        } else if (r < start[s] && r < b.m() && r < b.d()) {
          add_column(cs, s, b, rng);
        }
      }
    }
  }

  void drop_columns(ComponentState& cs, std::size_t s, const std::vector<Index>& keep) {
    ModeFactor& f = cs.modes[s];
    const Index nr = static_cast<Index>(keep.size());
    Eigen::MatrixXd cols(f.columns.rows(), nr);
    Eigen::VectorXd vs(nr);
    std::vector<Eigen::MatrixXd> gam(f.gamma.size(), Eigen::MatrixXd(f.gamma[0].rows(), nr));
    for (Index j = 0; j < nr; ++j) {
      cols.col(j) = f.columns.col(keep[static_cast<std::size_t>(j)]);
      vs[j] = f.shrink.varsigma[keep[static_cast<std::size_t>(j)]];
      for (std::size_t k = 0; k < f.gamma.size(); ++k) gam[k].col(j) = f.gamma[k].col(keep[static_cast<std::size_t>(j)]);
    }
    f.columns = cols;
    f.shrink.varsigma = vs;
    f.gamma = gam;
    for (auto& k : cs.cores) k = kernels::remap_mode(k, s, keep);
    cs.mean_core = kernels::remap_mode(cs.mean_core, s, keep);
    cs.cell_var = kernels::remap_mode(cs.cell_var, s, keep);
  }

  void add_column(ComponentState& cs, std::size_t s, const ModeBasis& b, Stream& rng) {
    ModeFactor& f = cs.modes[s];
    const Index r = f.rank();
    const auto& hp = setup_.hyper;
    Eigen::VectorXd vs(r + 1);
    vs << f.shrink.varsigma, rng.gamma(hp.kappa2, 1.0);
    f.shrink.varsigma = vs;
    const double sigma = f.shrink.sigma(hp.shrinkage)[r];
    const PingColumn pc = ping_column_draw(b, f.columns, sigma, rng);
    Eigen::MatrixXd cols(f.columns.rows(), r + 1);
    cols << f.columns, pc.column;
    f.columns = cols;
    for (std::size_t k = 0; k < f.gamma.size(); ++k) {
      Eigen::MatrixXd g(f.gamma[k].rows(), r + 1);
      g << f.gamma[k], pc.components.col(static_cast<Index>(k));
      f.gamma[k] = g;
    }
    std::vector<Index> src;
    for (Index l = 0; l < r; ++l) src.push_back(l);
    src.push_back(-1);
    cs.mean_core = kernels::remap_mode(cs.mean_core, s, src);
    cs.cell_var = kernels::remap_mode(cs.cell_var, s, src);
    for (auto& k : cs.cores) k = kernels::remap_mode(k, s, src);
    const double mcs = std::sqrt(cs.mean_core_var);
    kernels::for_each_in_slice(cs.mean_core.dims(), s, r, [&](Index o) {
      cs.mean_core[o] = mcs * rng.normal();
      cs.cell_var[o] = 1.0 / rng.gamma(hp.a_s, hp.b_s);
    });
    for (auto& k : cs.cores)
      kernels::for_each_in_slice(k.dims(), s, r, [&](Index o) {
        k[o] = cs.mean_core[o] + std::sqrt(cs.tau2 * cs.cell_var[o]) * rng.normal();
      });
  }

  // Mode factor fitted to target columns u (d x r) under the basis, then orthogonalized.
  ModeFactor fit_mode(const ModeBasis& b, const Eigen::MatrixXd& u, bool orth) const {
    const Index r = u.cols();
    ModeFactor f;
    const Eigen::MatrixXd gt = b.G.transpose();  // d x m
    const auto ls = gt.completeOrthogonalDecomposition();
    const Eigen::VectorXd ones_fit = ls.solve(Eigen::VectorXd::Ones(b.d()));
    Eigen::VectorXd other = Eigen::VectorXd::Ones(b.d());
    for (int k = 1; k < b.q; ++k) other.array() *= (gt * ones_fit).array();
    const Eigen::MatrixXd dg = other.asDiagonal() * gt;
    const auto dls = dg.completeOrthogonalDecomposition();
    f.gamma.assign(static_cast<std::size_t>(b.q), Eigen::MatrixXd::Zero(b.m(), r));
    f.columns.resize(b.d(), r);
    for (Index l = 0; l < r; ++l) {
      Eigen::VectorXd g0 = dls.solve(u.col(l));
      if (orth && l > 0) {
        const Eigen::MatrixXd gam = f.columns.leftCols(l).transpose() * dg;
        const auto pr = prune_constraint_rows(gam, Eigen::VectorXd::Zero(gam.rows()));
        if (pr.a.rows() > 0) g0 -= pr.a.transpose() * (pr.a * pr.a.transpose()).ldlt().solve(pr.a * g0);
      }
      f.gamma[0].col(l) = g0;
      for (int k = 1; k < b.q; ++k) f.gamma[static_cast<std::size_t>(k)].col(l) = ones_fit;
      f.columns.col(l) = component_product(b, f, l);
    }
    // Shrinkage chain matched to the fitted column scales.
    f.shrink.varsigma.resize(r);
    double prev = 1.0;
    for (Index l = 0; l < r; ++l) {
      const double quad = f.gamma[0].col(l).dot(b.precision * f.gamma[0].col(l));
      const double sigma = std::sqrt(std::max(quad / static_cast<double>(b.m()), 1e-12));
      const double cur = setup_.hyper.shrinkage == ShrinkageMode::as_written ? sigma : 1.0 / (sigma * sigma);
      f.shrink.varsigma[l] = cur / prev;
      prev = cur;
    }
    return f;
  }

  // Leading left singular vectors, padded for CP ranks above the available count.
  Eigen::MatrixXd leading_vectors(const Eigen::MatrixXd& x, Index r, std::uint32_t tag) const {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU);
    const Eigen::MatrixXd& u = svd.matrixU();
    Eigen::MatrixXd out(x.rows(), r);
    Stream rng = stream(0, tag);
    for (Index l = 0; l < r; ++l) {
      if (l < u.cols()) {
        out.col(l) = u.col(l);
      } else {
        out.col(l) = u.col(l % u.cols()) + 0.1 * rng.normal_vector(x.rows());
        out.col(l).normalize();
      }
    }
    return out;
  }

  void init_component(Component c, const DenseTensor& target) {
    ComponentState& cs = comp(c);
    const Dims& ranks = c == Component::alpha ? cfg_.ranks_alpha : cfg_.ranks_beta;
    const auto& bs = bases(c);
    const std::uint32_t ci = c == Component::alpha ? 0 : 1;
    cs.modes.clear();
    for (std::size_t s = 0; s < 4; ++s) {
      const Eigen::MatrixXd u = leading_vectors(unfold(target, s), ranks[s], block_tag(11, ci, static_cast<std::uint32_t>(s)));
      cs.modes.push_back(fit_mode(bs[s], u, orthogonal()));
    }
    if (c == Component::beta) cs.modes.push_back(fit_mode(bs[kTimeMode], temporal_targets(ranks[kTimeMode]), orthogonal()));
  }

  // Spline coefficient vectors (in range(M)) approximating t^(l+1), Gram-Schmidt orthonormalized for Tucker.
  Eigen::MatrixXd temporal_targets(Index r) const {
    const Index dt = setup_.spline.n_bases();
    const Eigen::MatrixXd m = constraint_expander(dt);
    std::vector<double> grid;
    for (int k = 0; k <= 100; ++k) grid.push_back(k / 100.0);
    const Eigen::MatrixXd bm = setup_.spline.design(grid) * m;
    const auto ls = bm.completeOrthogonalDecomposition();
    Eigen::MatrixXd a(dt, r);
    for (Index l = 0; l < r; ++l) {
      Eigen::VectorXd f(static_cast<Index>(grid.size()));
      for (std::size_t k = 0; k < grid.size(); ++k) f[static_cast<Index>(k)] = std::pow(grid[k], static_cast<double>(l + 1));
      Eigen::VectorXd col = m * ls.solve(f);
      if (orthogonal())
        for (Index p = 0; p < l; ++p) col -= a.col(p).dot(col) * a.col(p);
      a.col(l) = col.normalized();
    }
    return a;
  }

  void check_finite(const char* block) const {
    auto bad = [](const Eigen::Ref<const Eigen::MatrixXd>& m) { return !m.allFinite(); };
    bool fail = !std::isfinite(st_.sigma2_eps) || !(st_.sigma2_eps > 0.0);
    for (const auto* c : {&st_.alpha, &st_.beta}) {
      fail = fail || !std::isfinite(c->tau2) || !std::isfinite(c->mean_core_var);
      for (const auto& m : c->modes) fail = fail || bad(m.columns) || bad(m.shrink.varsigma);
      for (const auto& k : c->cores) fail = fail || !k.vec().allFinite();
      fail = fail || !c->mean_core.vec().allFinite() || !c->cell_var.vec().allFinite();
    }
    if (fail)
      throw NumericalError(std::string("non-finite value in state after block '") + block + "' at sweep " +
                           std::to_string(st_.iteration + 1));
  }

  const ModelSetup& setup_;
  const LongitudinalDataset& data_;
  SamplerConfig cfg_;
  ModelState st_;
  std::vector<std::vector<DenseTensor>> y_;
  std::vector<std::vector<Eigen::VectorXd>> b_;
  std::vector<std::pair<Index, Index>> obs_;
  std::vector<Index> masked_;
  std::vector<DenseTensor> alpha_;
  std::vector<std::vector<DenseTensor>> beta_, resid_;
  std::vector<DenseTensor> s_, esum_, kcores_;
  int jitter_run_ = 0;
  std::uint64_t jitter_total_ = 0;
  double last_loglik_ = 0.0;
};

// Retained draws with per-subject cores dropped (population-level surfaces only).
struct PosteriorDraws {
  std::vector<ModelState> states;
  std::vector<TraceRecord> trace;
  nlohmann::json meta = nlohmann::json::object();

  std::size_t size() const { return states.size(); }
};

inline ModelState population_state(const ModelState& st) {
  ModelState out = st;
  out.alpha.cores.clear();
  out.beta.cores.clear();
  return out;
}

inline void save_draws(const std::string& path, const PosteriorDraws& d) {
  Container c;
  c.meta = d.meta;
  c.meta["count"] = d.states.size();
  for (std::size_t k = 0; k < d.states.size(); ++k) save_state(c, "draw/" + std::to_string(k) + "/", d.states[k]);
  c.write(path);
}

inline PosteriorDraws load_draws(const std::string& path) {
  const Container c = Container::read(path);
  PosteriorDraws d;
  d.meta = c.meta;
  const std::size_t n = c.meta.value("count", std::size_t{0});
  for (std::size_t k = 0; k < n; ++k) d.states.push_back(load_state(c, "draw/" + std::to_string(k) + "/"));
  return d;
}

struct ChainOptions {
  std::string out_dir;  // empty: nothing written
  bool resume = false;
  std::ostream* progress = nullptr;
  std::optional<ModelState> init_state;
};

inline nlohmann::json config_meta(const SamplerConfig& cfg) {
  return {{"iterations", cfg.iterations}, {"burn_in", cfg.burn_in}, {"thin", cfg.thin}, {"seed", cfg.seed},
          {"structure", cfg.structure == Structure::cp ? "cp" : "tucker"}, {"ranks_alpha", cfg.ranks_alpha},
          {"ranks_beta", cfg.ranks_beta}, {"adaptive", cfg.adaptive.enabled}};
}

inline PosteriorDraws run_chain(const ModelSetup& setup, const LongitudinalDataset& data, const SamplerConfig& cfg,
                                const ChainOptions& opt = {}) {
  namespace fs = std::filesystem;
  Eigen::setNbThreads(1);
  GibbsSampler sampler(setup, data, cfg);
  PosteriorDraws draws;
  draws.meta = config_meta(cfg);
  const bool io = !opt.out_dir.empty();
  const std::string ckpt = io ? (fs::path(opt.out_dir) / "checkpoint.ltmc").string() : "";
  const std::string dpath = io ? (fs::path(opt.out_dir) / "draws.ltmc").string() : "";
  if (io) fs::create_directories(opt.out_dir);

  if (io && opt.resume && fs::exists(ckpt)) {
    sampler.set_state(read_checkpoint(ckpt));
    if (fs::exists(dpath)) {
      PosteriorDraws prev = load_draws(dpath);
      draws.states = std::move(prev.states);
    }
  } else if (opt.init_state) {
    sampler.set_state(*opt.init_state);
  } else {
    sampler.initialize();
  }
  std::ofstream trace;
  if (io) trace.open((fs::path(opt.out_dir) / "trace.jsonl").string(), opt.resume ? std::ios::app : std::ios::trunc);

  auto save_all = [&]() {
    if (!io) return;
    write_checkpoint(ckpt, sampler.state(), draws.meta);
    save_draws(dpath, draws);
  };

  while (sampler.state().iteration < cfg.iterations) {
    try {
      sampler.sweep();
    } catch (const NumericalError&) {
      if (io) write_checkpoint((fs::path(opt.out_dir) / "failure.ltmc").string(), sampler.state(), draws.meta);
      throw;
    }
    const ModelState& st = sampler.state();
    TraceRecord rec{st.iteration, sampler.last_loglik(), std::sqrt(st.sigma2_eps), st.alpha.ranks(), st.beta.ranks(),
                    sampler.jitter_events()};
    draws.trace.push_back(rec);
    const std::string line = to_json(rec).dump();
    if (io) trace << line << '\n';
    if (opt.progress) *opt.progress << line << '\n';
    if (st.iteration > cfg.burn_in && (st.iteration - cfg.burn_in) % cfg.thin == 0)
      draws.states.push_back(population_state(st));
    if (cfg.checkpoint_every && st.iteration % cfg.checkpoint_every == 0) save_all();
  }
  draws.meta["count"] = draws.states.size();
  draws.meta["jitter_events"] = sampler.jitter_events();
  save_all();
  return draws;
}

inline SamplerConfig cp_config(SamplerConfig cfg, Index rank) {
  cfg.structure = Structure::cp;
  cfg.ranks_alpha.assign(4, rank);
  cfg.ranks_beta.assign(5, rank);
  cfg.adaptive.enabled = false;
  return cfg;
}

// CP baseline: same chain machinery with diagonal cores and unconstrained modes.
inline PosteriorDraws run_cp_baseline(const ModelSetup& setup, const LongitudinalDataset& data,
                                      const SamplerConfig& cfg, Index rank, const ChainOptions& opt = {}) {
  return run_chain(setup, data, cp_config(cfg, rank), opt);
}

}  // namespace tlmm
