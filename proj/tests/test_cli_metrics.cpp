#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include "test_util.hpp"
#include "tlmm/config.hpp"
#include "tlmm/metrics.hpp"
#include "tlmm/validation/sbc.hpp"

using namespace tlmm;
using namespace tlmm::testing;

namespace {

struct Fixture {
  validation::SbcConfig sc;
  ModelSetup setup;
  PosteriorDraws draws;
};

Fixture prior_draws(int n) {
  Fixture f;
  f.sc.grid = {4, 5, 3};
  f.sc.n_groups = 3;
  f.setup = validation::sbc_setup(f.sc);
  for (int k = 0; k < n; ++k) f.draws.states.push_back(validation::sbc_draw_truth(f.sc, f.setup, k).state);
  return f;
}

std::vector<Index> all_voxels(const Dims& grid) { return region_voxels(grid, nullptr, kWholeVolume); }

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TLMM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class EnvGuard {
 public:
  explicit EnvGuard(const char* value) {
    if (const char* old = std::getenv("TLMM_THREADS")) saved_ = old;
    if (value) {
      setenv("TLMM_THREADS", value, 1);
    } else {
      unsetenv("TLMM_THREADS");
    }
  }
  ~EnvGuard() {
    if (saved_) {
      setenv("TLMM_THREADS", saved_->c_str(), 1);
    } else {
      unsetenv("TLMM_THREADS");
    }
  }

 private:
  std::optional<std::string> saved_;
};

}  // namespace

TEST(Metrics, ZeroSurfaceHasZeroArcLength) {
  const Dims grid{3, 3, 3};
  const SurfaceFn zero = [&](Index, double) { return DenseTensor(grid, 0.0); };
  EXPECT_EQ(arc_length_of(zero, 0, uniform_times(20), all_voxels(grid)), 0.0);
  EXPECT_EQ(cgd_of(zero, 0, 1, uniform_times(20), all_voxels(grid)), 0.0);
}

TEST(Metrics, LinearTrajectoryArcLength) {
  const Dims grid{2, 3, 2};
  DenseTensor w(grid);
  for (Index v = 0; v < w.size(); ++v) w[v] = static_cast<double>(v) - 5.5;
  double mean_abs = 0.0;
  for (Index v = 0; v < w.size(); ++v) mean_abs += std::abs(w[v]);
  mean_abs /= static_cast<double>(w.size());
  const double c[2] = {-1.5, 3.0};
  const SurfaceFn slope = [&](Index g, double) {
    DenseTensor d = w;
    d.vec() *= c[g];
    return d;
  };
  for (Index g = 0; g < 2; ++g)
    EXPECT_NEAR(arc_length_of(slope, g, uniform_times(20), all_voxels(grid)), std::abs(c[g]) * mean_abs, 1e-12);
  const SurfaceFn line = [&](Index g, double t) {
    DenseTensor d = w;
    d.vec() *= c[g] * t;
    return d;
  };
  // Mean over t = l/20 of (4.5 t)^2 w^2.
  double mt2 = 0.0;
  for (double t : uniform_times(20)) mt2 += t * t;
  mt2 /= 20.0;
  const double mw2 = w.vec().squaredNorm() / static_cast<double>(w.size());
  EXPECT_NEAR(cgd_of(line, 0, 1, uniform_times(20), all_voxels(grid)), 4.5 * 4.5 * mt2 * mw2, 1e-10);
  EXPECT_EQ(cgd_of(line, 1, 1, uniform_times(20), all_voxels(grid)), 0.0);
}

TEST(Metrics, UniformTimesAndRegions) {
  const auto t = uniform_times(4);
  EXPECT_EQ(t, (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  LabelVolume mask{{2, 2, 1}, {0, 1, 2, 1}};
  EXPECT_EQ(region_voxels({2, 2, 1}, &mask, 1), (std::vector<Index>{1, 3}));
  EXPECT_EQ(region_voxels({2, 2, 1}, &mask, kWholeVolume), (std::vector<Index>{1, 2, 3}));
  EXPECT_EQ(region_voxels({2, 2, 1}, nullptr, kWholeVolume).size(), 4u);
}

TEST(Metrics, PosteriorCgdSymmetricAndZeroOnDiagonal) {
  const Fixture f = prior_draws(4);
  const auto times = uniform_times(10);
  const auto vox = all_voxels(f.setup.grid);
  for (Index g = 0; g < 3; ++g) {
    EXPECT_EQ(cgd(f.setup, f.draws, g, g, times, vox).mean, 0.0);
    for (Index g2 = 0; g2 < 3; ++g2) {
      const auto a = cgd(f.setup, f.draws, g, g2, times, vox), b = cgd(f.setup, f.draws, g2, g, times, vox);
      EXPECT_NEAR(a.mean, b.mean, 1e-14 * std::max(1.0, a.mean));
      EXPECT_GE(a.mean, 0.0);
    }
  }
}

TEST(Metrics, AnalyticDerivativeMatchesDifferences) {
  const Fixture f = prior_draws(3);
  const double h = 1e-5;
  for (const auto& st : f.draws.states) {
    const SurfaceFn b = beta_surface(f.setup, st), db = beta_derivative(f.setup, st);
    for (Index g = 0; g < 3; ++g)
      for (double t : {0.1, 0.37, 0.62, 0.9}) {
        const Eigen::VectorXd fd = (b(g, t + h).vec() - b(g, t - h).vec()) / (2 * h);
        const Eigen::VectorXd an = db(g, t).vec();
        EXPECT_LE((fd - an).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, an.cwiseAbs().maxCoeff()));
      }
  }
}

TEST(Metrics, ArcLengthPosteriorSummary) {
  const Fixture f = prior_draws(5);
  const auto times = uniform_times(8);
  const auto vox = all_voxels(f.setup.grid);
  const auto p = arc_length(f.setup, f.draws, 1, times, vox, {0.1, 0.9});
  ASSERT_EQ(p.draws.size(), 5u);
  double m = 0.0;
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(p.draws[k], arc_length_of(beta_derivative(f.setup, f.draws.states[k]), 1, times, vox));
    m += p.draws[k];
  }
  EXPECT_NEAR(p.mean, m / 5.0, 1e-15 * m);
  EXPECT_LE(p.quantiles[0], p.quantiles[1]);
  EXPECT_THROW(arc_length(f.setup, PosteriorDraws{}, 0, times, vox), DomainError);
}

TEST(Mse, PerfectAndZeroEstimates) {
  SimulationSpec spec;
  spec.grid = {8, 8, 8};
  const auto times = uniform_times(20);
  const auto perfect = mse_report(truth_surface(spec), truth_surface(spec), 3, times);
  EXPECT_EQ(perfect.nonzero, 0.0);
  EXPECT_EQ(perfect.zero, 0.0);
  EXPECT_EQ(perfect.n_nonzero + perfect.n_zero, 3 * 20 * 512);
  const SurfaceFn zero = [&](Index, double) { return DenseTensor(spec.grid, 0.0); };
  const auto z = mse_report(zero, truth_surface(spec), 3, times);
  double sn = 0.0;
  Index nn = 0;
  for (Index g = 0; g < 3; ++g) {
    const DenseTensor ref = true_beta_surface(spec, g, 1.0);
    for (double t : times) {
      const DenseTensor x = true_beta_surface(spec, g, t);
      for (Index v = 0; v < x.size(); ++v)
        if (std::abs(ref[v]) > 1e-6) {
          sn += x[v] * x[v];
          ++nn;
        }
    }
  }
  EXPECT_EQ(z.n_nonzero, nn);
  EXPECT_NEAR(z.nonzero, sn / static_cast<double>(nn), 1e-12);
  EXPECT_LE(z.zero, 1e-12);
}

TEST(Summaries, QuantilesInterpolateLinearly) {
  EXPECT_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_EQ(quantile({4, 1, 3, 2}, 0.25), 1.75);
  EXPECT_EQ(quantile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_EQ(quantile({7}, 0.3), 7.0);
  EXPECT_EQ(median({5, 1, 3}), 3.0);
  EXPECT_THROW(summarize_scalar({}, {0.5}), DomainError);
}

TEST(Summaries, QuantileLabels) {
  EXPECT_EQ(quantile_label(0.05), "q05");
  EXPECT_EQ(quantile_label(0.5), "q50");
  EXPECT_EQ(quantile_label(0.95), "q95");
  EXPECT_EQ(quantile_label(0.975), "q97_5");
}

TEST(Summaries, CsvHelpers) {
  EXPECT_EQ(csv::split("a,\"b,c\",\"d\"\"e\","), (std::vector<std::string>{"a", "b,c", "d\"e", ""}));
  EXPECT_EQ(csv::quote("plain"), "plain");
  EXPECT_EQ(csv::quote("a,b"), "\"a,b\"");
  EXPECT_EQ(csv::split(csv::quote("x\"y,z")), (std::vector<std::string>{"x\"y,z"}));
  EXPECT_EQ(csv::format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(csv::format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Summaries, TrajectoriesDeterministicAcrossWorkers) {
  const Fixture f = prior_draws(6);
  SummaryRequest req;
  req.n_times = 5;
  req.regions = {1, 2};
  req.region_names = {{1, "left"}};
  LabelVolume mask{f.setup.grid, std::vector<std::int32_t>(60, 1)};
  for (Index v = 30; v < 60; ++v) mask.labels[static_cast<std::size_t>(v)] = 2;
  const auto a = summarize_trajectories(f.setup, f.draws, req, &mask, 1);
  const auto b = summarize_trajectories(f.setup, f.draws, req, &mask, 3);
  ASSERT_EQ(a.size(), 3u * 2u * 5u);
  std::ostringstream sa, sb;
  write_trajectories_csv(sa, a, req);
  write_trajectories_csv(sb, b, req);
  EXPECT_EQ(sa.str(), sb.str());
  const auto l = lines(sa.str());
  EXPECT_EQ(l[0], "group,region,time,q05,q50,q95");
  EXPECT_EQ(l[1].rfind("1,left,0.2,", 0), 0u) << l[1];
  EXPECT_EQ(l[6].rfind("1,2,0.2,", 0), 0u) << l[6];
  for (const auto& r : a) {
    EXPECT_LE(r.q[0], r.q[1]);
    EXPECT_LE(r.q[1], r.q[2]);
  }
}

TEST(Summaries, MeanReducerMatchesDirectAverage) {
  const Fixture f = prior_draws(3);
  SummaryRequest req;
  req.times = {0.4};
  req.quantiles = {0.5};
  req.reducer = Reducer::mean;
  const auto rows = summarize_trajectories(f.setup, f.draws, req, nullptr);
  for (const auto& r : rows) {
    std::vector<double> per;
    for (const auto& st : f.draws.states) per.push_back(eval_beta(f.setup, st, -1, r.group, 0.4).vec().mean());
    std::sort(per.begin(), per.end());
    EXPECT_NEAR(r.q[0], per[1], 1e-13);
  }
}

TEST(Config, DefaultsAndOverrides) {
  EnvGuard env(nullptr);
  const RunConfig d = parse_config(nullptr);
  EXPECT_EQ(d.sampler.iterations, 2000u);
  EXPECT_EQ(d.sampler.threads, 1);
  EXPECT_EQ(d.basis.n_splines, 8);
  const RunConfig c = parse_config(nlohmann::json::parse(R"({"sampler": {"iterations": 50, "structure": "cp"},
      "summary": {"region_names": {"3": "hippocampus"}}})"));
  EXPECT_EQ(c.sampler.iterations, 50u);
  EXPECT_EQ(c.sampler.burn_in, 1000u);
  EXPECT_EQ(c.sampler.structure, Structure::cp);
  EXPECT_EQ(c.summary.region_name(3), "hippocampus");
  const RunConfig back = parse_config(to_json_config(c));
  EXPECT_EQ(to_json_config(back), to_json_config(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EnvGuard env(nullptr);
  auto bad = [](const char* text) { return parse_config(nlohmann::json::parse(text)); };
  EXPECT_THROW(bad(R"({"sampler": {"iteration": 5}})"), ConfigError);
  EXPECT_THROW(bad(R"({"extra": 1})"), ConfigError);
  EXPECT_THROW(bad(R"({"sampler": {"structure": "parafac"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"sampler": {"iterations": "many"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"sampler": 3})"), ConfigError);
  EXPECT_THROW(bad(R"({"summary": {"quantiles": [0.9, 0.1]}})"), ConfigError);
  EXPECT_THROW(bad(R"({"summary": {"times": [1.5]}})"), ConfigError);
  EXPECT_THROW(bad(R"([1, 2])"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ThreadsFromEnvironment) {
  {
    EnvGuard env("3");
    EXPECT_EQ(default_threads(), 3);
    EXPECT_EQ(parse_config(nullptr).sampler.threads, 3);
  }
  for (const char* v : {"0", "abc", "2x", "-1"}) {
    EnvGuard env(v);
    EXPECT_THROW(default_threads(), ConfigError) << v;
  }
}

TEST(Cli, EndToEnd) {
  TempDir dir("tlmm_cli");
  write_text(dir / "spec.json", R"({"grid": [8, 8, 8], "subjects_per_group": 2, "seed": 5})");
  write_text(dir / "config.json", R"({"sampler": {"iterations": 6, "burn_in": 3, "seed": 9,
      "ranks_alpha": [2, 2, 2, 2], "ranks_beta": [2, 2, 2, 2, 2]},
      "basis": {"n_splines": 5}, "summary": {"n_times": 4}})");
  write_text(dir / "request.json", R"({"n_times": 3, "quantiles": [0.25, 0.75], "reducer": "mean"})");
  ASSERT_EQ(run_cli("simulate --spec " + (dir / "spec.json") + " --out " + (dir / "data")), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "data/manifest.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "data/truth.json"));
  ASSERT_EQ(run_cli("fit --data " + (dir / "data/manifest.csv") + " --config " + (dir / "config.json") + " --out " +
                    (dir / "chain") + " --threads 2"),
            0);
  for (const char* f : {"run.json", "draws.ltmc", "checkpoint.ltmc", "trace.jsonl"})
    EXPECT_TRUE(std::filesystem::exists(dir / (std::string("chain/") + f))) << f;
  EXPECT_EQ(lines(slurp(dir / "chain/trace.jsonl")).size(), 6u);

  ASSERT_EQ(run_cli("summarize --chain " + (dir / "chain") + " --request " + (dir / "request.json") + " --out " +
                    (dir / "traj.csv")),
            0);
  const auto traj = lines(slurp(dir / "traj.csv"));
  ASSERT_EQ(traj.size(), 1u + 3u * 3u);
  EXPECT_EQ(traj[0], "group,region,time,q25,q75");
  ASSERT_EQ(run_cli("summarize --chain " + (dir / "chain") + " --request " + (dir / "request.json") + " --out " +
                    (dir / "traj2.csv") + " --threads 3"),
            0);
  EXPECT_EQ(slurp(dir / "traj2.csv"), slurp(dir / "traj.csv"));

  ASSERT_EQ(run_cli("metrics --chain " + (dir / "chain") + " --truth " + (dir / "data") + " --out " + (dir / "m.csv")), 0);
  const auto m = lines(slurp(dir / "m.csv"));
  ASSERT_EQ(m.size(), 1u + 2u + 3u + 3u);
  EXPECT_EQ(m[0], "metric,group,group2,mean,q05,q50,q95,truth");
  EXPECT_EQ(m[1].rfind("mse_nonzero,,,", 0), 0u);
  EXPECT_EQ(m[3].rfind("arc_length,1,,", 0), 0u);
  EXPECT_EQ(m[6].rfind("cgd,1,2,", 0), 0u);

  ASSERT_EQ(run_cli("fit-cp --rank 2 --data " + (dir / "data/manifest.csv") + " --config " + (dir / "config.json") +
                    " --out " + (dir / "cp")),
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "cp/draws.ltmc"));
}

TEST(Cli, ExitCodes) {
  TempDir dir("tlmm_cli_err");
  write_text(dir / "bad.json", R"({"sampler": {"itrations": 5}})");
  EXPECT_EQ(run_cli("fit --data " + (dir / "missing.csv") + " --config " + (dir / "bad.json") + " --out " + (dir / "c")), 2);
  EXPECT_EQ(run_cli("fit --data " + (dir / "missing.csv") + " --out " + (dir / "c")), 3);
  EXPECT_EQ(run_cli("fit --bogus-flag"), 2);
  EXPECT_EQ(run_cli("simulate --spec " + (dir / "bad.json") + " --out " + (dir / "d")), 2);
  write_text(dir / "small.json", R"({"grid": [4, 8, 8]})");
  EXPECT_EQ(run_cli("simulate --spec " + (dir / "small.json") + " --out " + (dir / "d")), 2);
  EXPECT_EQ(run_cli("--help"), 0);
}
