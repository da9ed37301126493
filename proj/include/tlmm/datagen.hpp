#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"
#include "tlmm/ltf_io.hpp"
#include "tlmm/model.hpp"
#include "tlmm/parallel.hpp"
#include "tlmm/rng.hpp"

namespace tlmm {

// Visit months of an irregular longitudinal design (1 to 5 visits per subject).
inline const std::vector<std::vector<double>>& default_schedule() {
  static const std::vector<std::vector<double>> s = {
      {0, 6, 12, 24, 36}, {0, 6, 12, 24},     {0, 12, 24, 36, 48}, {0, 6, 12},      {0, 12},
      {0, 6},             {0},                 {0, 6, 12, 18, 24},  {0, 12, 24},     {0, 24, 48},
      {0, 6, 24},         {0, 12, 36},         {0, 6, 12, 36},      {0, 3, 6, 12},   {0, 6, 18, 30, 42},
      {0, 12, 24, 48},    {0, 6, 12, 24, 48},  {0, 36},             {0, 6, 12, 18},  {0, 24},
      {0, 12, 18, 30},    {0, 6, 30},          {0, 9, 18, 27, 36},  {0, 6, 12, 24, 30}, {0, 18, 36},
      {0, 6, 12, 30, 42}, {0, 12, 24, 36},     {0, 48},             {0, 6, 18},      {0, 3, 12, 24, 36},
  };
  return s;
}

enum class TimeSource { schedule, uniform };
enum class AlphaSource { synthetic, file };

struct SimulationSpec {
  Dims grid{15, 15, 15};
  Index n_groups = 3;
  Index subjects_per_group = 10;
  TimeSource times = TimeSource::schedule;
  std::vector<std::vector<double>> schedule;  // empty: default_schedule()
  std::array<std::vector<double>, 3> centers = {
      std::vector<double>{0.50, 0.50, 0.30, 0.80, 0.30, 0.60},
      std::vector<double>{0.40, 0.80, 0.40, 0.80, 0.60, 0.40},
      std::vector<double>{0.20, 0.20, 0.60, 0.60, 0.50, 0.50}};
  double bump_scale = 5.0;
  double time_factor = 4.0;
  double beta_noise_sd = 0.1;
  bool beta_noise_per_voxel = false;
  double obs_noise_sd = 0.5;
  AlphaSource alpha = AlphaSource::synthetic;
  std::string alpha_path;  // LTF1 (n_subjects, d1, d2, d3) when alpha = file
  std::uint64_t seed = 1;

  Index n_bumps() const { return static_cast<Index>(centers[0].size()); }

  void validate() const {
    if (grid.size() != 3) throw ConfigError("simulation grid needs three dims");
    for (Index d : grid)
      if (d < 8) throw ConfigError("simulation grid dims must be >= 8 to resolve the bumps");
    if (n_groups < 1 || subjects_per_group < 1) throw ConfigError("simulation needs groups and subjects");
    for (const auto& c : centers) {
      if (static_cast<Index>(c.size()) != n_bumps()) throw ConfigError("bump center lists differ in length");
      for (double u : c)
        if (!(u > 0.0 && u < 1.0)) throw ConfigError("bump centers must lie in (0,1)");
    }
    if (!(bump_scale > 0.0)) throw ConfigError("bump scale must be positive");
    if (beta_noise_sd < 0.0 || obs_noise_sd < 0.0) throw ConfigError("noise sds must be >= 0");
    if (alpha == AlphaSource::file && alpha_path.empty()) throw ConfigError("alpha file source needs alpha_path");
  }
};

// Bump l (0-based) is active in group g (0-based) when l < 2(g+1).
inline bool bump_active(Index l, Index g) { return l < 2 * (g + 1); }

// True population trajectory at voxel h (0-based indices, unit-spaced 1-based coordinates).
inline double true_beta(const SimulationSpec& spec, Index g, Index h1, Index h2, Index h3, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time outside [0,1]");
  const Index h[3] = {h1, h2, h3};
  for (int s = 0; s < 3; ++s)
    if (h[s] < 0 || h[s] >= spec.grid[static_cast<std::size_t>(s)]) throw DomainError("voxel outside the grid");
  double sum = 0.0;
  for (Index l = 0; l < spec.n_bumps(); ++l) {
    if (!bump_active(l, g)) continue;
    double e = 0.0;
    for (int s = 0; s < 3; ++s) {
      const double x = static_cast<double>(h[s] + 1) -
                       static_cast<double>(spec.grid[static_cast<std::size_t>(s)]) * spec.centers[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)];
      e += x * x / spec.bump_scale;
    }
    sum += std::exp(-e);
  }
  return spec.time_factor * t * t * sum;
}

inline DenseTensor true_beta_surface(const SimulationSpec& spec, Index g, double t) {
  DenseTensor out(spec.grid);
  for (Index a = 0; a < spec.grid[0]; ++a)
    for (Index b = 0; b < spec.grid[1]; ++b)
      for (Index c = 0; c < spec.grid[2]; ++c) out(a, b, c) = true_beta(spec, g, a, b, c, t);
  return out;
}

// Smooth rank-(3,3,3) baseline field per group: cosine columns and a group core, plus a
// per-subject core perturbation.
inline DenseTensor synthetic_alpha(const SimulationSpec& spec, Index g, Stream* subject_rng) {
  std::vector<Eigen::MatrixXd> cols;
  for (Index d : spec.grid) {
    Eigen::MatrixXd c(d, 3);
    for (Index h = 0; h < d; ++h)
      for (Index z = 0; z < 3; ++z) c(h, z) = std::cos(M_PI * static_cast<double>(z) * (static_cast<double>(h) + 0.5) / static_cast<double>(d));
    cols.push_back(c);
  }
  DenseTensor core({3, 3, 3});
  for (Index a = 0; a < 3; ++a)
    for (Index b = 0; b < 3; ++b)
      for (Index c = 0; c < 3; ++c) {
        const double decay = 1.0 / static_cast<double>(1 + a + b + c);
        core(a, b, c) = decay * std::sin(1.0 + static_cast<double>(a + 2 * b + 3 * c) + 0.7 * static_cast<double>(g));
      }
  core(0, 0, 0) = 2.0 + 0.2 * static_cast<double>(g);
  if (subject_rng)
    for (Index k = 0; k < core.size(); ++k) core[k] += 0.1 * subject_rng->normal();
  DenseTensor t = mode_product(core, cols[0], 0);
  t = mode_product(t, cols[1], 1);
  return mode_product(t, cols[2], 2);
}

struct GroundTruth {
  SimulationSpec spec;
  std::vector<DenseTensor> alpha;        // per subject
  std::vector<double> beta_offset;       // per subject (constant offsets)
  std::vector<DenseTensor> beta_noise;   // per subject, when per-voxel
};

struct SimulationResult {
  LongitudinalDataset data;
  GroundTruth truth;
};

inline SimulationResult generate_dataset(const SimulationSpec& spec, int threads = 1) {
  spec.validate();
  const auto& sched = spec.schedule.empty() ? default_schedule() : spec.schedule;
  double tmax = 0.0;
  for (const auto& s : sched)
    for (double t : s) tmax = std::max(tmax, t);
  if (spec.times == TimeSource::schedule && !(tmax > 0.0)) throw ConfigError("schedule needs a positive visit time");
  const Index n = spec.n_groups * spec.subjects_per_group;
  DenseTensor alpha_file;
  if (spec.alpha == AlphaSource::file) {
    alpha_file = read_ltf(spec.alpha_path);
    if (alpha_file.order() != 4 || alpha_file.dim(0) < n || Dims(alpha_file.dims().begin() + 1, alpha_file.dims().end()) != spec.grid)
      throw DataError(spec.alpha_path + ": alpha surfaces must have dims (n_subjects, d1, d2, d3)");
  }
  std::vector<DenseTensor> beta_surface;
  for (Index g = 0; g < spec.n_groups; ++g) beta_surface.push_back(true_beta_surface(spec, g, 1.0));

  SimulationResult res;
  res.truth.spec = spec;
  res.data.grid = spec.grid;
  res.data.n_groups = spec.n_groups;
  res.data.subjects.resize(static_cast<std::size_t>(n));
  res.truth.alpha.resize(static_cast<std::size_t>(n));
  res.truth.beta_offset.resize(static_cast<std::size_t>(n));
  res.truth.beta_noise.resize(static_cast<std::size_t>(n));
  const Index vox = dims_product(spec.grid);
  parallel_for(n, threads, [&](Index i) {
    const auto si = static_cast<std::size_t>(i);
    Stream rng(spec.seed, static_cast<std::uint32_t>(i), block_tag(20), 0);
    Subject& s = res.data.subjects[si];
    s.group = i / spec.subjects_per_group;
    s.id = "S" + std::to_string(i + 1);
    if (spec.times == TimeSource::schedule) {
      const auto& pick = sched[static_cast<std::size_t>(rng() % sched.size())];
      for (double t : pick) s.times.push_back(t / tmax);
    } else {
      const Index nv = 1 + static_cast<Index>(rng() % 5);
      s.times.push_back(0.0);
      for (Index k = 1; k < nv; ++k) s.times.push_back(rng.uniform());
      std::sort(s.times.begin(), s.times.end());
      s.times.erase(std::unique(s.times.begin(), s.times.end()), s.times.end());
    }
    DenseTensor a = spec.alpha == AlphaSource::file
                        ? DenseTensor(spec.grid, std::vector<double>(alpha_file.values().begin() + i * vox,
                                                                     alpha_file.values().begin() + (i + 1) * vox))
                        : synthetic_alpha(spec, s.group, &rng);
    const double offset = spec.beta_noise_sd * rng.normal();
    DenseTensor vnoise;
    if (spec.beta_noise_per_voxel) {
      vnoise = DenseTensor(spec.grid);
      for (Index v = 0; v < vox; ++v) vnoise[v] = spec.beta_noise_sd * rng.normal();
    }
    for (double t : s.times) {
      DenseTensor y(spec.grid);
      const double tf = t * t;
      for (Index v = 0; v < vox; ++v) {
        const double b = tf * beta_surface[static_cast<std::size_t>(s.group)][v] +
                         (spec.beta_noise_per_voxel ? vnoise[v] : offset);
        y[v] = a[v] + b + spec.obs_noise_sd * rng.normal();
      }
      s.obs.push_back(std::move(y));
    }
    res.truth.alpha[si] = std::move(a);
    res.truth.beta_offset[si] = spec.beta_noise_per_voxel ? 0.0 : offset;
    res.truth.beta_noise[si] = std::move(vnoise);
  });
  res.data.validate();
  return res;
}

}  // namespace tlmm
