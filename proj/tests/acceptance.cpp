#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tlmm/tlmm.hpp"
#include "tlmm/validation/decorrelation.hpp"
#include "tlmm/validation/oracle.hpp"
#include "tlmm/validation/sbc.hpp"

using namespace tlmm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

Eigen::MatrixXd random_matrix(Index r, Index c, Stream& rng) {
  Eigen::MatrixXd m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

Index uniform_int(Stream& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); }

// 1. Random Tucker factors converted to compact HOSVD.
Outcome hosvd_round_trip() {
  Stream rng(101, 0, 0, 0);
  double worst_recon = 0.0, worst_diag = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    TuckerFactor f;
    Dims rk;
    for (int j = 0; j < 3; ++j) {
      const Index d = uniform_int(rng, 2, 10);
      const Index r = uniform_int(rng, 1, std::min<Index>(4, d));
      rk.push_back(r);
      f.modes.emplace_back(random_matrix(d, r, rng));
    }
    f.core = DenseTensor(rk);
    for (Index k = 0; k < f.core.size(); ++k) f.core[k] = rng.normal();
    const TuckerFactor h = tucker_to_hosvd(f);
    const DenseTensor a = reconstruct(f), b = reconstruct(h);
    worst_recon = std::max(worst_recon, frobenius(DenseTensor(a.dims(), [&] {
                                           std::vector<double> v(a.values());
                                           for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.values()[i];
                                           return v;
                                         }())) / frobenius(a));
    for (const auto& m : h.modes) worst_diag = std::max(worst_diag, orthogonality_defect(m.entries));
  }
  return {worst_recon <= 1e-10 && worst_diag <= 1e-8,
          "max rel recon " + fmt("%.2e", worst_recon) + ", max off-diagonal " + fmt("%.2e", worst_diag)};
}

// 2. B-spline partition of unity and quadratic boundary values.
Outcome spline_contract() {
  double worst = 0.0;
  for (int q = 1; q <= 3; ++q) {
    const SplineBasis sb(q, q + 5);
    for (int i = 0; i < 1000; ++i) worst = std::max(worst, std::abs(sb.eval(i / 999.0).sum() - 1.0));
  }
  const Eigen::VectorXd b0 = SplineBasis(2, 8).eval(0.0);
  const bool boundary = b0[0] == 0.5 && b0[1] == 0.5 && b0.tail(b0.size() - 2).cwiseAbs().maxCoeff() == 0.0;
  return {worst <= 1e-12 && boundary, "max |sum - 1| " + fmt("%.2e", worst) + ", b(0) = (" + fmt("%.17g", b0[0]) + ", " +
                                          fmt("%.17g", b0[1]) + ", 0...)"};
}

// 3. Constrained Gaussian law against the analytic conditional.
Outcome constrained_sampler_law() {
  Stream rng(303, 0, 0, 0);
  const int n_draws = 200000;
  double worst_z = 0.0, worst_resid = 0.0, worst_band = 0.0;
  bool all_banded = true;
  for (int rep = 0; rep < 20; ++rep) {
    const Index n = uniform_int(rng, 2, 8);
    const Index k = uniform_int(rng, 1, std::min<Index>(3, n - 1));
    const Eigen::VectorXd mu = random_matrix(n, 1, rng);
    const Eigen::MatrixXd l = random_matrix(n, n, rng);
    Eigen::MatrixXd sigma = l * l.transpose() / static_cast<double>(n);
    sigma.diagonal().array() += 0.5;
    const Eigen::MatrixXd a = random_matrix(k, n, rng);
    const Eigen::VectorXd c = random_matrix(k, 1, rng);
    const Eigen::MatrixXd sa = sigma * a.transpose();
    const Eigen::MatrixXd w = (a * sa).inverse();
    const Eigen::VectorXd m_ref = mu - sa * w * (a * mu - c);
    const Eigen::MatrixXd s_ref = sigma - sa * w * sa.transpose();
    const bool precision_form = rep % 2 == 1;
    const ConditionedGaussian g(mu, precision_form ? Eigen::MatrixXd(sigma.inverse()) : sigma,
                                precision_form ? MatrixForm::precision : MatrixForm::covariance, a, c);
    Stream draw_rng(303, 1, static_cast<std::uint32_t>(rep), 0);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(n, n);
    for (int d = 0; d < n_draws; ++d) {
      const Eigen::VectorXd x = g.draw(draw_rng);
      worst_resid = std::max(worst_resid, (a * x - c).cwiseAbs().maxCoeff());
      const Eigen::VectorXd e = x - m_ref;
      sum += e;
      sq.noalias() += e * e.transpose();
    }
    const Eigen::VectorXd mean_err = sum / n_draws;
    const Eigen::MatrixXd cov_emp = sq / n_draws - mean_err * mean_err.transpose();
    for (Index i = 0; i < n; ++i) {
      const double se = std::sqrt(std::max(s_ref(i, i), 0.0) / n_draws);
      worst_z = std::max(worst_z, std::abs(mean_err[i]) / std::max(se, 1e-12));
      for (Index j = 0; j < n; ++j) {
        const double vse = std::sqrt((std::abs(s_ref(i, i) * s_ref(j, j)) + s_ref(i, j) * s_ref(i, j)) / n_draws);
        worst_z = std::max(worst_z, std::abs(cov_emp(i, j) - s_ref(i, j)) / std::max(vse, 1e-12));
      }
    }
  }
  // Banded path against the dense path on tridiagonal precisions.
  for (int rep = 0; rep < 10; ++rep) {
    const Index n = uniform_int(rng, 5, 40);
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
      p(i, i) = 2.5 + rng.uniform();
      if (i + 1 < n) p(i, i + 1) = p(i + 1, i) = -1.0 + 0.2 * rng.uniform();
    }
    const Eigen::VectorXd mu = random_matrix(n, 1, rng);
    const Eigen::MatrixXd a = random_matrix(2, n, rng);
    const Eigen::VectorXd c = random_matrix(2, 1, rng);
    ConditionOptions band, dense;
    band.path = FactorPath::banded;
    dense.path = FactorPath::dense;
    const ConditionedGaussian gb(mu, p, MatrixForm::precision, a, c, band);
    const ConditionedGaussian gd(mu, p, MatrixForm::precision, a, c, dense);
    all_banded = all_banded && gb.used_banded() && !gd.used_banded();
    for (int d = 0; d < 50; ++d) {
      Stream r1(304, static_cast<std::uint32_t>(rep), static_cast<std::uint32_t>(d), 0), r2 = r1;
      worst_band = std::max(worst_band, (gb.draw(r1) - gd.draw(r2)).cwiseAbs().maxCoeff());
    }
    const auto mb = gb.moments(), md = gd.moments();
    worst_band = std::max({worst_band, (mb.mean - md.mean).cwiseAbs().maxCoeff(), (mb.cov - md.cov).cwiseAbs().maxCoeff()});
  }
  return {worst_z <= 4.0 && worst_resid <= 1e-10 && worst_band <= 1e-10 && all_banded,
          "max |err|/SE " + fmt("%.2f", worst_z) + ", max |Ax-c| " + fmt("%.2e", worst_resid) + ", banded vs dense " +
              fmt("%.2e", worst_band)};
}

// 4. Every Gibbs block against dense joint-Gaussian conditioning.
Outcome oracle_equivalence() {
  const auto t = validation::run_oracle_check(Structure::tucker);
  const auto c = validation::run_oracle_check(Structure::cp);
  std::string worst_name;
  double w = 0.0;
  for (const auto* r : {&t, &c})
    for (const auto& b : r->checks)
      if (std::max(b.mean_err, b.cov_err) > w) {
        w = std::max(b.mean_err, b.cov_err);
        worst_name = b.name;
      }
  return {w <= 1e-8, std::to_string(t.checks.size() + c.checks.size()) + " blocks, worst rel " + fmt("%.2e", w) + " (" +
                         worst_name + ")"};
}

// 5. Simulation-based calibration.
Outcome sbc(int threads) {
  validation::SbcConfig cfg;
  cfg.threads = threads;
  const auto r = validation::run_sbc(cfg);
  std::ostringstream os;
  os << "min p " << fmt("%.4f", r.min_p()) << " over " << r.ranks.size() << " reps (";
  for (int j = 0; j < validation::kSbcFunctionals; ++j) os << (j ? " " : "") << fmt("%.3f", r.p_value[static_cast<std::size_t>(j)]);
  os << ")";
  if (r.failures) os << ", " << r.failures << " failed chains";
  return {r.min_p() > 0.01 && r.failures == 0, os.str()};
}

struct DesignFit {
  SimulationResult sim;
  ModelSetup gls, glns, cp;
};

SamplerConfig table3_config(std::uint64_t seed, int threads) {
  SamplerConfig cfg;
  cfg.iterations = 2000;
  cfg.burn_in = 1000;
  cfg.seed = seed;
  cfg.threads = threads;
  cfg.adaptive.enabled = true;
  return cfg;
}

BasisOptions gls_basis() {
  BasisOptions bo;
  bo.n_splines = 5;
  return bo;
}

BasisOptions glns_basis() {
  BasisOptions bo = gls_basis();
  bo.raw = RawBasis::identity;
  bo.q_beta = 1;
  return bo;
}

BasisOptions cp_basis() {
  BasisOptions bo = gls_basis();
  bo.q_beta = 1;
  return bo;
}

int table3_threads() { return static_cast<int>(std::max(1u, std::min(8u, std::thread::hardware_concurrency()))); }

// 6. Desk-scale replication of the simulation table.
Outcome table3() {
  const int threads = table3_threads();
  SimulationSpec spec;
  spec.seed = 2025;
  const SimulationResult sim = generate_dataset(spec, threads);
  const Hyperparameters hp;
  const ModelSetup gls = make_setup(spec.grid, spec.n_groups, gls_basis(), hp);
  const ModelSetup glns = make_setup(spec.grid, spec.n_groups, glns_basis(), hp);
  const ModelSetup cps = make_setup(spec.grid, spec.n_groups, cp_basis(), hp);
  const SamplerConfig cfg = table3_config(77, threads);
  const MseReport m_gls = mse_report(gls, run_chain(gls, sim.data, cfg), spec);
  const MseReport m_glns = mse_report(glns, run_chain(glns, sim.data, cfg), spec);
  const MseReport m_cp5 = mse_report(cps, run_cp_baseline(cps, sim.data, cfg, 5), spec);
  const MseReport m_cp10 = mse_report(cps, run_cp_baseline(cps, sim.data, cfg, 10), spec);
  const double best_cp = std::min(m_cp5.nonzero, m_cp10.nonzero);
  const bool a = m_gls.nonzero <= 0.05;
  const bool b = best_cp >= 10.0 * m_gls.nonzero;
  const bool c = m_gls.zero <= m_glns.zero;
  std::ostringstream os;
  os << "(a) GLS nonzero " << fmt("%.5f", m_gls.nonzero) << (a ? " ok" : " FAIL") << "; (b) CP5 " << fmt("%.5f", m_cp5.nonzero)
     << " CP10 " << fmt("%.5f", m_cp10.nonzero) << " ratio " << fmt("%.1f", best_cp / m_gls.nonzero) << (b ? " ok" : " FAIL")
     << "; (c) zero GLS " << fmt("%.6f", m_gls.zero) << " vs GLNS " << fmt("%.6f", m_glns.zero) << (c ? " ok" : " FAIL")
     << "; GLNS nonzero " << fmt("%.5f", m_glns.nonzero) << "; workers " << threads;
  return {a && b && c, os.str()};
}

// 7. Projection decorrelation of cell noises.
Outcome decorrelation() {
  const auto r = validation::run_decorrelation(10000);
  const auto& s0 = r.baseline;
  const auto& s1 = r.slope;
  const double bound = s0.corr_bound();
  const bool ok = s0.max_abs_corr < bound && s1.max_abs_corr < bound && s0.max_var_rel_err <= 0.05 &&
                  s1.max_var_rel_err <= 0.05;
  return {ok, "baseline max|corr| " + fmt("%.4f", s0.max_abs_corr) + " var err " + fmt("%.3f", s0.max_var_rel_err) +
                  "; slope max|corr| " + fmt("%.4f", s1.max_abs_corr) + " var err " + fmt("%.3f", s1.max_var_rel_err) +
                  "; bound " + fmt("%.4f", bound)};
}

// Direct nested-sum β from the Tucker definition.
double beta_nested(const ModelSetup& setup, const ModelState& st, Index g, Index h1, Index h2, Index h3, double t) {
  const auto& m = st.beta.modes;
  const Eigen::VectorXd b = setup.spline.eval(t);
  const Dims r = st.beta.ranks();
  double sum = 0.0;
  for (Index zg = 0; zg < r[0]; ++zg)
    for (Index z1 = 0; z1 < r[1]; ++z1)
      for (Index z2 = 0; z2 < r[2]; ++z2)
        for (Index z3 = 0; z3 < r[3]; ++z3)
          for (Index zt = 0; zt < r[4]; ++zt) {
            double w = 0.0;
            for (Index k = 0; k < b.size(); ++k) w += b[k] * m[4].columns(k, zt);
            sum += st.beta.mean_core(zg, z1, z2, z3, zt) * m[0].columns(g, zg) * m[1].columns(h1, z1) *
                   m[2].columns(h2, z2) * m[3].columns(h3, z3) * w;
          }
  return sum;
}

// Second-order one-sided difference, exact for a quadratic piece.
double beta_nested_derivative(const ModelSetup& setup, const ModelState& st, Index g, Index h1, Index h2, Index h3,
                              double t) {
  const double h = 1e-4;
  auto f = [&](double x) { return beta_nested(setup, st, g, h1, h2, h3, x); };
  if (t + 2 * h <= 1.0) return (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2 * h)) / (2 * h);
  return (3.0 * f(t) - 4.0 * f(t - h) + f(t - 2 * h)) / (2 * h);
}

// 8. Metric oracles and simulated-design orderings.
Outcome metric_oracles() {
  BasisOptions bo;
  bo.m_s = {4, 4, 4};
  bo.n_splines = 6;
  const ModelSetup setup = make_setup({6, 6, 6}, 3, bo, Hyperparameters{});
  Stream rng(808, 0, 0, 0);
  ModelState st;
  const Dims rb = {3, 3, 2, 3, 3};
  for (std::size_t s = 0; s < 5; ++s) st.beta.modes.push_back(csc_ping_draw(setup.beta_bases[s], rb[s], setup.hyper, rng));
  st.beta.mean_core = DenseTensor(rb);
  for (Index z = 0; z < st.beta.mean_core.size(); ++z) st.beta.mean_core[z] = rng.normal();
  const auto times = uniform_times(20);
  const auto all = region_voxels(setup.grid, nullptr, kWholeVolume);
  double worst = 0.0;
  for (Index g = 0; g < 3; ++g) {
    double arc_ref = 0.0;
    for (double t : times)
      for (Index a = 0; a < 6; ++a)
        for (Index b = 0; b < 6; ++b)
          for (Index c = 0; c < 6; ++c) arc_ref += std::abs(beta_nested_derivative(setup, st, g, a, b, c, t));
    arc_ref /= 20.0 * 216.0;
    const double arc = arc_length_of(beta_derivative(setup, st), g, times, all);
    worst = std::max(worst, std::abs(arc - arc_ref) / std::max(1.0, std::abs(arc_ref)));
    for (Index g2 = 0; g2 < 3; ++g2) {
      double cgd_ref = 0.0;
      for (double t : times)
        for (Index a = 0; a < 6; ++a)
          for (Index b = 0; b < 6; ++b)
            for (Index c = 0; c < 6; ++c) {
              const double d = beta_nested(setup, st, g, a, b, c, t) - beta_nested(setup, st, g2, a, b, c, t);
              cgd_ref += d * d;
            }
      cgd_ref /= 20.0 * 216.0;
      const double v = cgd_of(beta_surface(setup, st), g, g2, times, all);
      worst = std::max(worst, std::abs(v - cgd_ref) / std::max(1.0, std::abs(cgd_ref)));
    }
  }

  // Orderings from a fit of the simulated design on a 10^3 grid.
  SimulationSpec spec;
  spec.grid = {10, 10, 10};
  spec.seed = 88;
  const SimulationResult sim = generate_dataset(spec);
  const ModelSetup fs = make_setup(spec.grid, 3, gls_basis(), Hyperparameters{});
  SamplerConfig cfg;
  cfg.iterations = 800;
  cfg.burn_in = 400;
  cfg.seed = 89;
  const PosteriorDraws d = run_chain(fs, sim.data, cfg);
  const auto vox = region_voxels(fs.grid, nullptr, kWholeVolume);
  double arc[3], arc_true[3], cg[3][3];
  for (Index g = 0; g < 3; ++g) {
    arc[g] = arc_length(fs, d, g, times, vox).mean;
    arc_true[g] = arc_length_of(truth_derivative(spec), g, times, vox);
    for (Index g2 = 0; g2 < 3; ++g2) cg[g][g2] = g2 > g ? cgd(fs, d, g, g2, times, vox).mean : 0.0;
  }
  const bool arc_order = arc[0] < arc[1] && arc[1] < arc[2];
  const bool truth_order = arc_true[0] < arc_true[1] && arc_true[1] < arc_true[2];
  const bool cgd_order = cg[0][2] > cg[0][1] && cg[0][2] > cg[1][2];
  std::ostringstream os;
  os << "oracle max rel " << fmt("%.2e", worst) << "; fitted Arc " << fmt("%.4f", arc[0]) << " < " << fmt("%.4f", arc[1])
     << " < " << fmt("%.4f", arc[2]) << (arc_order ? " ok" : " FAIL") << " (truth " << fmt("%.4f", arc_true[0]) << ", "
     << fmt("%.4f", arc_true[1]) << ", " << fmt("%.4f", arc_true[2]) << "); CGD(1,3) " << fmt("%.4f", cg[0][2]) << " vs (1,2) "
     << fmt("%.4f", cg[0][1]) << ", (2,3) " << fmt("%.4f", cg[1][2]) << (cgd_order ? " ok" : " FAIL");
  return {worst <= 1e-10 && arc_order && truth_order && cgd_order, os.str()};
}

// 9. Same seed at 1 and 8 workers gives bitwise-identical draws.
Outcome determinism() {
  SimulationSpec spec;
  spec.seed = 2025;
  std::vector<unsigned char> bytes[2];
  std::vector<unsigned char> data_bytes[2];
  const int workers[2] = {1, 8};
  for (int k = 0; k < 2; ++k) {
    const SimulationResult sim = generate_dataset(spec, workers[k]);
    Container dc;
    for (std::size_t i = 0; i < sim.data.subjects.size(); ++i)
      for (std::size_t j = 0; j < sim.data.subjects[i].obs.size(); ++j)
        dc.put(std::to_string(i) + "/" + std::to_string(j), sim.data.subjects[i].obs[j]);
    data_bytes[k] = dc.encode();
    const ModelSetup gls = make_setup(spec.grid, spec.n_groups, gls_basis(), Hyperparameters{});
    const PosteriorDraws d = run_chain(gls, sim.data, table3_config(77, workers[k]));
    Container c;
    for (std::size_t s = 0; s < d.states.size(); ++s) save_state(c, std::to_string(s) + "/", d.states[s]);
    bytes[k] = c.encode();
  }
  const bool same_data = data_bytes[0] == data_bytes[1];
  const bool same_draws = bytes[0] == bytes[1];
  return {same_data && same_draws, std::string("data ") + (same_data ? "identical" : "DIFFER") + ", draws " +
                                       (same_draws ? "identical" : "DIFFER") + " (" + std::to_string(bytes[0].size()) + " bytes)"};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  int threads = 1;
  app.add_option("--criterion", only, "run a single criterion (1-9); 0 runs all");
  app.add_option("--threads", threads, "workers for the calibration run");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "tucker-to-hosvd round trip", 5, hosvd_round_trip},
      {2, "b-spline contract", 1, spline_contract},
      {3, "constrained sampler law", 120, constrained_sampler_law},
      {4, "full-conditional oracle equivalence", 60, oracle_equivalence},
      {5, "simulation-based calibration", 1800, [&] { return sbc(threads); }},
      {6, "simulation table replication", 3600, table3},
      {7, "projection decorrelation", 120, decorrelation},
      {8, "metric oracles and orderings", 0, metric_oracles},
      {9, "determinism across workers", 0, determinism},
  };
  bool ok = true;
  for (const auto& c : all) {
    if (only && c.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    ok = ok && pass;
    std::cout << "criterion " << c.id << " [" << c.name << "]: " << (pass ? "PASS" : "FAIL") << " - " << o.detail << "; "
              << fmt("%.1f", secs) << " s" << (c.limit_s > 0 ? " (limit " + fmt("%.0f", c.limit_s) + " s)" : "")
              << (in_time ? "" : " OVER TIME") << std::endl;
  }
  return ok ? 0 : 1;
}
