#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "tlmm/datagen.hpp"
#include "tlmm/dataset_io.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/model.hpp"
#include "tlmm/parallel.hpp"
#include "tlmm/sampler.hpp"

namespace tlmm {

// Surface over the grid for a group at time t.
using SurfaceFn = std::function<DenseTensor(Index g, double t)>;

inline constexpr std::int32_t kWholeVolume = -1;

enum class Reducer { median, mean };

struct SummaryRequest {
  std::vector<double> times;  // empty: l/20 for l = 1..20
  std::vector<std::int32_t> regions{kWholeVolume};
  std::map<std::int32_t, std::string> region_names;
  std::vector<double> quantiles{0.05, 0.5, 0.95};
  std::vector<std::pair<Index, Index>> group_pairs;  // empty: all pairs
  Reducer reducer = Reducer::median;
  Index n_times = 20;

  std::vector<double> time_grid() const {
    if (!times.empty()) return times;
    std::vector<double> t;
    for (Index l = 1; l <= n_times; ++l) t.push_back(static_cast<double>(l) / static_cast<double>(n_times));
    return t;
  }

  void validate() const {
    if (times.empty() && n_times < 1) throw ConfigError("summary needs at least one time point");
    for (double t : times)
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("summary times must lie in [0,1]");
    if (quantiles.empty()) throw ConfigError("summary needs at least one quantile");
    for (std::size_t k = 0; k < quantiles.size(); ++k) {
      if (!(quantiles[k] > 0.0 && quantiles[k] < 1.0)) throw ConfigError("quantiles must lie in (0,1)");
      if (k > 0 && !(quantiles[k] > quantiles[k - 1])) throw ConfigError("quantiles must be increasing");
    }
    if (regions.empty()) throw ConfigError("summary needs at least one region");
  }

  std::string region_name(std::int32_t r) const {
    if (r == kWholeVolume) return "all";
    auto it = region_names.find(r);
    return it == region_names.end() ? std::to_string(r) : it->second;
  }
};

inline std::vector<double> uniform_times(Index n) {
  std::vector<double> t;
  for (Index l = 1; l <= n; ++l) t.push_back(static_cast<double>(l) / static_cast<double>(n));
  return t;
}

// Voxel indices of a region; kWholeVolume selects every voxel not excluded by the mask (label 0).
inline std::vector<Index> region_voxels(const Dims& grid, const LabelVolume* mask, std::int32_t region) {
  const Index n = dims_product(grid);
  std::vector<Index> out;
  if (mask && mask->dims != grid) throw DataError("mask dims do not match the grid");
  if (region == kWholeVolume) {
    for (Index v = 0; v < n; ++v)
      if (!mask || mask->labels[static_cast<std::size_t>(v)] != 0) out.push_back(v);
    if (out.empty()) throw DataError("mask excludes every voxel");
    return out;
  }
  if (!mask) throw ConfigError("region " + std::to_string(region) + " requested without a mask");
  for (Index v = 0; v < n; ++v)
    if (mask->labels[static_cast<std::size_t>(v)] == region) out.push_back(v);
  if (out.empty()) throw DataError("region " + std::to_string(region) + " has no voxels");
  return out;
}

// Type-7 sample quantile (linear interpolation between order statistics).
inline double quantile(std::vector<double> x, double p) {
  if (x.empty()) throw DomainError("quantile of an empty sample");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline double median(std::vector<double> x) { return quantile(std::move(x), 0.5); }

// Mean over times and voxels of |dβ/dt|.
inline double arc_length_of(const SurfaceFn& dbeta, Index g, const std::vector<double>& times,
                            const std::vector<Index>& voxels) {
  double sum = 0.0;
  for (double t : times) {
    const DenseTensor d = dbeta(g, t);
    for (Index v : voxels) sum += std::abs(d[v]);
  }
  return sum / (static_cast<double>(times.size()) * static_cast<double>(voxels.size()));
}

// Mean over times and voxels of (β_g − β_g')².
inline double cgd_of(const SurfaceFn& beta, Index g, Index g2, const std::vector<double>& times,
                     const std::vector<Index>& voxels) {
  double sum = 0.0;
  for (double t : times) {
    const DenseTensor a = beta(g, t);
    const DenseTensor b = beta(g2, t);
    for (Index v : voxels) sum += (a[v] - b[v]) * (a[v] - b[v]);
  }
  return sum / (static_cast<double>(times.size()) * static_cast<double>(voxels.size()));
}

// Population β surface and its analytic time derivative for one posterior state.
inline SurfaceFn beta_surface(const ModelSetup& setup, const ModelState& st) {
  return [&setup, &st](Index g, double t) { return eval_beta(setup, st, -1, g, t); };
}

inline SurfaceFn beta_derivative(const ModelSetup& setup, const ModelState& st) {
  return [&setup, &st](Index g, double t) {
    check_group(setup, g);
    const Eigen::VectorXd w = st.beta.modes[kTimeMode].columns.transpose() * setup.spline.eval_derivative(t);
    return spatial_expand(spatial_core(st.structure, st.beta.mean_core, group_row(st.beta, g), w), st.beta.modes);
  };
}

inline SurfaceFn truth_surface(const SimulationSpec& spec) {
  return [&spec](Index g, double t) { return true_beta_surface(spec, g, t); };
}

// d/dt of the closed-form trajectory: the t² factor differentiates to 2t.
inline SurfaceFn truth_derivative(const SimulationSpec& spec) {
  return [&spec](Index g, double t) {
    DenseTensor s = true_beta_surface(spec, g, 1.0);
    s.vec() *= 2.0 * t;
    return s;
  };
}

struct PosteriorScalar {
  double mean = 0.0;
  std::vector<double> quantiles;
  std::vector<double> draws;
};

inline PosteriorScalar summarize_scalar(std::vector<double> draws, const std::vector<double>& probs) {
  PosteriorScalar s;
  if (draws.empty()) throw DomainError("no posterior draws to summarize");
  for (double x : draws) s.mean += x;
  s.mean /= static_cast<double>(draws.size());
  for (double p : probs) s.quantiles.push_back(quantile(draws, p));
  s.draws = std::move(draws);
  return s;
}

inline PosteriorScalar arc_length(const ModelSetup& setup, const PosteriorDraws& d, Index g,
                                  const std::vector<double>& times, const std::vector<Index>& voxels,
                                  const std::vector<double>& probs = {0.05, 0.5, 0.95}, int threads = 1) {
  std::vector<double> v(d.size());
  parallel_for(static_cast<Index>(d.size()), threads, [&](Index k) {
    v[static_cast<std::size_t>(k)] = arc_length_of(beta_derivative(setup, d.states[static_cast<std::size_t>(k)]), g, times, voxels);
  });
  return summarize_scalar(std::move(v), probs);
}

inline PosteriorScalar cgd(const ModelSetup& setup, const PosteriorDraws& d, Index g, Index g2,
                           const std::vector<double>& times, const std::vector<Index>& voxels,
                           const std::vector<double>& probs = {0.05, 0.5, 0.95}, int threads = 1) {
  std::vector<double> v(d.size());
  parallel_for(static_cast<Index>(d.size()), threads, [&](Index k) {
    v[static_cast<std::size_t>(k)] = cgd_of(beta_surface(setup, d.states[static_cast<std::size_t>(k)]), g, g2, times, voxels);
  });
  return summarize_scalar(std::move(v), probs);
}

// Posterior-mean population β surface (linear in the draws, so the mean of surfaces).
inline DenseTensor posterior_mean_beta(const ModelSetup& setup, const PosteriorDraws& d, Index g, double t) {
  if (d.size() == 0) throw DomainError("no posterior draws");
  DenseTensor out(setup.grid);
  for (const auto& s : d.states) out.vec() += eval_beta(setup, s, -1, g, t).vec();
  out.vec() /= static_cast<double>(d.size());
  return out;
}

struct MseReport {
  double nonzero = 0.0;
  double zero = 0.0;
  Index n_nonzero = 0;
  Index n_zero = 0;
};

// Estimate vs truth over groups and times; a location is nonzero when |truth at t=1| > 1e-6.
inline MseReport mse_report(const SurfaceFn& estimate, const SurfaceFn& truth, Index n_groups,
                            const std::vector<double>& times) {
  MseReport r;
  double sn = 0.0, sz = 0.0;
  for (Index g = 0; g < n_groups; ++g) {
    const DenseTensor ref = truth(g, 1.0);
    for (double t : times) {
      const DenseTensor e = estimate(g, t);
      const DenseTensor x = truth(g, t);
      for (Index v = 0; v < e.size(); ++v) {
        const double d2 = (e[v] - x[v]) * (e[v] - x[v]);
        if (std::abs(ref[v]) > 1e-6) {
          sn += d2;
          ++r.n_nonzero;
        } else {
          sz += d2;
          ++r.n_zero;
        }
      }
    }
  }
  r.nonzero = r.n_nonzero ? sn / static_cast<double>(r.n_nonzero) : 0.0;
  r.zero = r.n_zero ? sz / static_cast<double>(r.n_zero) : 0.0;
  return r;
}

// t = l/20 for l = 1..20.
inline std::vector<double> mse_times() { return uniform_times(20); }

inline MseReport mse_report(const ModelSetup& setup, const PosteriorDraws& d, const SimulationSpec& truth,
                            const std::vector<double>& times = mse_times()) {
  std::map<std::pair<Index, double>, DenseTensor> cache;
  auto est = [&](Index g, double t) {
    auto key = std::make_pair(g, t);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, posterior_mean_beta(setup, d, g, t)).first;
    return it->second;
  };
  return mse_report(est, truth_surface(truth), setup.n_groups, times);
}

// Naive per-voxel fit: for each group and voxel, y_ij = μ_i + b(t_ij)ᵀMθ + ε with a N(0, 1/λ)
// prior on every coefficient; returns the posterior-mean β surface.
struct VoxelwiseFit {
  SplineBasis spline;
  Eigen::MatrixXd expander;            // d_t x (d_t - 1)
  std::vector<Eigen::MatrixXd> theta;  // per group: voxels x (d_t - 1)
  Dims grid;

  DenseTensor beta(Index g, double t) const {
    if (g < 0 || g >= static_cast<Index>(theta.size())) throw DomainError("group out of range");
    const Eigen::VectorXd w = expander.transpose() * spline.eval(t);
    DenseTensor out(grid);
    out.vec() = theta[static_cast<std::size_t>(g)] * w;
    return out;
  }
  SurfaceFn surface() const {
    return [this](Index g, double t) { return beta(g, t); };
  }
};

inline VoxelwiseFit voxelwise_fit(const LongitudinalDataset& d, const SplineBasis& spline, double prior_precision = 1e-6) {
  d.validate();
  VoxelwiseFit fit;
  fit.spline = spline;
  fit.expander = constraint_expander(spline.n_bases());
  fit.grid = d.grid;
  const Index nf = fit.expander.cols(), vox = d.voxels();
  for (Index g = 0; g < d.n_groups; ++g) {
    std::vector<Index> members;
    Index rows = 0;
    for (Index i = 0; i < d.n_subjects(); ++i)
      if (d.subjects[static_cast<std::size_t>(i)].group == g) {
        members.push_back(i);
        rows += d.subjects[static_cast<std::size_t>(i)].n_obs();
      }
    const Index ns = static_cast<Index>(members.size());
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(rows, ns + nf);
    Eigen::MatrixXd y(rows, vox);
    Index r = 0;
    for (Index m = 0; m < ns; ++m) {
      const Subject& s = d.subjects[static_cast<std::size_t>(members[static_cast<std::size_t>(m)])];
      for (Index j = 0; j < s.n_obs(); ++j, ++r) {
        x(r, m) = 1.0;
        x.row(r).tail(nf) = (fit.expander.transpose() * spline.eval(s.times[static_cast<std::size_t>(j)])).transpose();
        y.row(r) = s.obs[static_cast<std::size_t>(j)].vec().transpose();
      }
    }
    Eigen::MatrixXd p = x.transpose() * x;
    p.diagonal().array() += prior_precision;
    const Eigen::MatrixXd coef = p.ldlt().solve(x.transpose() * y);
    fit.theta.push_back(ns > 0 ? Eigen::MatrixXd(coef.bottomRows(nf).transpose()) : Eigen::MatrixXd::Zero(vox, nf));
  }
  return fit;
}

struct TrajectoryRow {
  Index group = 0;  // 0-based
  std::int32_t region = kWholeVolume;
  double time = 0.0;
  std::vector<double> q;
};

// Per draw, reduce β over the region's voxels; then take quantiles across draws.
inline std::vector<TrajectoryRow> summarize_trajectories(const ModelSetup& setup, const PosteriorDraws& d,
                                                         const SummaryRequest& req, const LabelVolume* mask,
                                                         int threads = 1) {
  req.validate();
  if (d.size() == 0) throw DomainError("no posterior draws to summarize");
  const auto times = req.time_grid();
  std::vector<std::vector<Index>> vox;
  for (auto r : req.regions) vox.push_back(region_voxels(setup.grid, mask, r));
  const Index ng = setup.n_groups, nt = static_cast<Index>(times.size()), nr = static_cast<Index>(req.regions.size());
  // reduced[draw][(g * nt + t) * nr + r]
  std::vector<std::vector<double>> reduced(d.size(), std::vector<double>(static_cast<std::size_t>(ng * nt * nr)));
  parallel_for(static_cast<Index>(d.size()), threads, [&](Index k) {
    const ModelState& st = d.states[static_cast<std::size_t>(k)];
    for (Index g = 0; g < ng; ++g)
      for (Index ti = 0; ti < nt; ++ti) {
        const DenseTensor b = eval_beta(setup, st, -1, g, times[static_cast<std::size_t>(ti)]);
        for (Index r = 0; r < nr; ++r) {
          std::vector<double> vals;
          vals.reserve(vox[static_cast<std::size_t>(r)].size());
          for (Index v : vox[static_cast<std::size_t>(r)]) vals.push_back(b[v]);
          double x = 0.0;
          if (req.reducer == Reducer::median) {
            x = median(std::move(vals));
          } else {
            for (double y : vals) x += y;
            x /= static_cast<double>(vals.size());
          }
          reduced[static_cast<std::size_t>(k)][static_cast<std::size_t>((g * nt + ti) * nr + r)] = x;
        }
      }
  });
  std::vector<TrajectoryRow> rows;
  for (Index g = 0; g < ng; ++g)
    for (Index r = 0; r < nr; ++r)
      for (Index ti = 0; ti < nt; ++ti) {
        std::vector<double> across;
        for (const auto& rd : reduced) across.push_back(rd[static_cast<std::size_t>((g * nt + ti) * nr + r)]);
        TrajectoryRow row{g, req.regions[static_cast<std::size_t>(r)], times[static_cast<std::size_t>(ti)], {}};
        for (double p : req.quantiles) row.q.push_back(quantile(across, p));
        rows.push_back(std::move(row));
      }
  return rows;
}

inline std::string quantile_label(double p) {
  const double pct = p * 100.0;
  const long r = std::lround(pct);
  if (std::abs(pct - static_cast<double>(r)) < 1e-9) {
    std::string s = std::to_string(r);
    return "q" + (s.size() < 2 ? "0" + s : s);
  }
  std::string s = csv::format_double(pct);
  std::replace(s.begin(), s.end(), '.', '_');
  return "q" + s;
}

inline void write_trajectories_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows, const SummaryRequest& req) {
  out << "group,region,time";
  for (double p : req.quantiles) out << ',' << quantile_label(p);
  out << '\n';
  for (const auto& r : rows) {
    out << r.group + 1 << ',' << csv::quote(req.region_name(r.region)) << ',' << csv::format_double(r.time);
    for (double x : r.q) out << ',' << csv::format_double(x);
    out << '\n';
  }
}

}  // namespace tlmm
