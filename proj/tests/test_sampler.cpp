#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "tlmm/checkpoint.hpp"
#include "tlmm/sampler.hpp"
#include "tlmm/validation/oracle.hpp"
#include "tlmm/validation/sbc.hpp"

using namespace tlmm;
using namespace tlmm::testing;

namespace {

std::vector<unsigned char> encode_draws(const PosteriorDraws& d) {
  Container c;
  for (std::size_t k = 0; k < d.states.size(); ++k) save_state(c, std::to_string(k) + "/", d.states[k]);
  return c.encode();
}

std::vector<unsigned char> encode_state(const ModelState& st) {
  Container c;
  save_state(c, "", st);
  return c.encode();
}

// Mean of x over [a, b) and a batch-means standard error.
std::pair<double, double> batch_mean(const std::vector<double>& x, std::size_t a, std::size_t b, std::size_t batches) {
  const std::size_t len = (b - a) / batches;
  std::vector<double> means;
  for (std::size_t k = 0; k < batches; ++k) {
    double s = 0.0;
    for (std::size_t i = a + k * len; i < a + (k + 1) * len; ++i) s += x[i];
    means.push_back(s / static_cast<double>(len));
  }
  double m = 0.0, v = 0.0;
  for (double y : means) m += y;
  m /= static_cast<double>(batches);
  for (double y : means) v += (y - m) * (y - m);
  v /= static_cast<double>(batches - 1);
  return {m, std::sqrt(v / static_cast<double>(batches))};
}

}  // namespace

TEST(Philox, KnownAnswers) {
  const auto z = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(z[0], 0x6627e8d5u);
  EXPECT_EQ(z[1], 0xe169c58du);
  EXPECT_EQ(z[2], 0xbc57ac4cu);
  EXPECT_EQ(z[3], 0x9b00dbd8u);
  const auto f = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(f[0], 0x408f276du);
  EXPECT_EQ(f[1], 0x41c83b0eu);
  EXPECT_EQ(f[2], 0xa20bc7c6u);
  EXPECT_EQ(f[3], 0x6d5451fdu);
}

TEST(Stream, IdentityDeterminesSequence) {
  Stream a(5, 1, 2, 3), b(5, 1, 2, 3), c(5, 1, 2, 4), d(6, 1, 2, 3);
  for (int i = 0; i < 10; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
    EXPECT_NE(x, d());
  }
  Stream u(9, 0, 0, 0);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
}

TEST(Oracle, EveryBlockMatchesDenseConditioning) {
  for (Structure s : {Structure::tucker, Structure::cp}) {
    const auto r = validation::run_oracle_check(s);
    EXPECT_GT(r.checks.size(), 20u);
    for (const auto& c : r.checks) {
      EXPECT_LE(c.mean_err, 1e-8) << c.name;
      EXPECT_LE(c.cov_err, 1e-8) << c.name;
    }
  }
}

TEST(Sampler, ConstraintsHoldAfterEverySweep) {
  const auto t = validation::tiny_instance(Structure::tucker, 3);
  GibbsSampler s(t.setup, t.data, t.cfg);
  s.initialize();
  for (int k = 0; k < 15; ++k) {
    s.sweep();
    const ModelState& st = s.state();
    for (const ComponentState* c : {&st.alpha, &st.beta})
      for (const auto& m : c->modes) EXPECT_LE(orthogonality_defect(m.columns), 1e-10);
    for (Index g = 0; g < 2; ++g) {
      EXPECT_LE(sup_norm(eval_beta(t.setup, st, -1, g, 0.0)), 1e-14 * std::max(1.0, sup_norm(eval_beta(t.setup, st, -1, g, 1.0))));
      for (Index i = 0; i < 4; ++i)
        EXPECT_LE(sup_norm(eval_beta(t.setup, st, i, g, 0.0)), 1e-14 * std::max(1.0, sup_norm(eval_beta(t.setup, st, i, g, 1.0))));
    }
    EXPECT_GT(st.sigma2_eps, 0.0);
    EXPECT_GT(st.alpha.cell_var.vec().minCoeff(), 0.0);
    EXPECT_GT(st.beta.cell_var.vec().minCoeff(), 0.0);
  }
}

TEST(Sampler, DeterministicAcrossWorkerCounts) {
  const auto t = validation::tiny_instance(Structure::tucker, 4);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 12;
  cfg.burn_in = 4;
  cfg.threads = 1;
  const auto a = encode_draws(run_chain(t.setup, t.data, cfg));
  cfg.threads = 3;
  const auto b = encode_draws(run_chain(t.setup, t.data, cfg));
  EXPECT_EQ(a, b);
  cfg.seed += 1;
  EXPECT_NE(a, encode_draws(run_chain(t.setup, t.data, cfg)));
}

TEST(Sampler, CpDeterministicAndRankConstant) {
  const auto t = validation::tiny_instance(Structure::cp, 5);
  SamplerConfig cfg = cp_config(t.cfg, 2);
  const PosteriorDraws a = run_chain(t.setup, t.data, cfg);
  const PosteriorDraws b = run_chain(t.setup, t.data, cfg);
  EXPECT_EQ(encode_draws(a), encode_draws(b));
  for (const auto& st : a.states) {
    EXPECT_EQ(st.structure, Structure::cp);
    EXPECT_EQ(st.beta.mean_core.order(), 1u);
    EXPECT_EQ(st.beta.mean_core.size(), 2);
  }
}

TEST(Sampler, NoRetainedIterationsGivesEmptyDraws) {
  const auto t = validation::tiny_instance(Structure::tucker);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 5;
  cfg.burn_in = 4;
  cfg.thin = 2;
  const PosteriorDraws d = run_chain(t.setup, t.data, cfg);
  EXPECT_EQ(d.size(), 0u);
  EXPECT_EQ(d.meta.at("count").get<std::size_t>(), 0u);
  EXPECT_EQ(d.meta.at("iterations").get<std::uint64_t>(), 5u);
  EXPECT_EQ(d.trace.size(), 5u);
}

TEST(Sampler, ThinningAndTrace) {
  const auto t = validation::tiny_instance(Structure::tucker);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 12;
  cfg.burn_in = 2;
  cfg.thin = 3;
  const PosteriorDraws d = run_chain(t.setup, t.data, cfg);
  EXPECT_EQ(d.size(), cfg.retained());
  EXPECT_EQ(d.states.front().iteration, 5u);
  EXPECT_TRUE(d.states.front().alpha.cores.empty());
}

TEST(Sampler, AdaptationDisabledKeepsRanks) {
  const auto t = validation::tiny_instance(Structure::tucker, 6);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 20;
  const PosteriorDraws d = run_chain(t.setup, t.data, cfg);
  for (const auto& r : d.trace) {
    EXPECT_EQ(r.ranks_alpha, cfg.ranks_alpha);
    EXPECT_EQ(r.ranks_beta, cfg.ranks_beta);
  }
}

TEST(Sampler, AdaptationNeverExceedsStartingRanks) {
  const auto t = validation::tiny_instance(Structure::tucker, 8);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 40;
  cfg.burn_in = 30;
  cfg.adaptive.enabled = true;
  cfg.adaptive.log_p0 = 0.0;
  cfg.adaptive.log_p1 = 0.0;
  cfg.adaptive.threshold = 0.2;
  const PosteriorDraws d = run_chain(t.setup, t.data, cfg);
  for (const auto& r : d.trace)
    for (std::size_t s = 0; s < 5; ++s) {
      EXPECT_LE(r.ranks_beta[s], cfg.ranks_beta[s]);
      EXPECT_GE(r.ranks_beta[s], 1);
      if (s < 4) EXPECT_LE(r.ranks_alpha[s], cfg.ranks_alpha[s]);
    }
  for (const auto& st : d.states)
    for (const ComponentState* c : {&st.alpha, &st.beta})
      for (const auto& m : c->modes) EXPECT_LE(orthogonality_defect(m.columns), 1e-10);
}

TEST(Sampler, RejectsBadConfigs) {
  const auto t = validation::tiny_instance(Structure::tucker);
  SamplerConfig cfg = t.cfg;
  cfg.burn_in = cfg.iterations;
  EXPECT_THROW(GibbsSampler(t.setup, t.data, cfg), ConfigError);
  cfg = t.cfg;
  cfg.ranks_alpha = {2, 4, 2, 2};
  EXPECT_THROW(GibbsSampler(t.setup, t.data, cfg), RankError);
  cfg = t.cfg;
  cfg.ranks_beta = {2, 2, 2};
  EXPECT_THROW(GibbsSampler(t.setup, t.data, cfg), ConfigError);
  LongitudinalDataset d = t.data;
  d.n_groups = 3;
  EXPECT_THROW(GibbsSampler(t.setup, d, t.cfg), DataError);
}

TEST(Checkpoint, StateRoundTripIsExact) {
  const auto t = validation::tiny_instance(Structure::tucker, 9);
  GibbsSampler s(t.setup, t.data, t.cfg);
  s.initialize();
  s.sweep();
  TempDir dir("tlmm_ckpt");
  write_checkpoint(dir / "c.ltmc", s.state());
  const ModelState back = read_checkpoint(dir / "c.ltmc");
  EXPECT_EQ(encode_state(back), encode_state(s.state()));
  EXPECT_EQ(back.iteration, 1u);
}

TEST(Checkpoint, ResumeMatchesUninterruptedChain) {
  const auto t = validation::tiny_instance(Structure::tucker, 10);
  SamplerConfig cfg = t.cfg;
  cfg.iterations = 14;
  cfg.burn_in = 4;
  const auto full = encode_draws(run_chain(t.setup, t.data, cfg));
  TempDir dir("tlmm_resume");
  ChainOptions opt;
  opt.out_dir = dir.path.string();
  SamplerConfig first = cfg;
  first.iterations = 8;
  run_chain(t.setup, t.data, first, opt);
  opt.resume = true;
  const PosteriorDraws resumed = run_chain(t.setup, t.data, cfg, opt);
  EXPECT_EQ(encode_draws(resumed), full);
  EXPECT_EQ(encode_draws(load_draws(dir / "draws.ltmc")), full);
}

TEST(Sampler, LogLikelihoodStationaryFromTruth) {
  validation::SbcConfig sc;
  sc.grid = {5, 5, 5};
  sc.n_subjects = 8;
  sc.visits = 3;
  const ModelSetup setup = validation::sbc_setup(sc);
  const auto truth = validation::sbc_draw_truth(sc, setup, 3);
  SamplerConfig cfg;
  cfg.iterations = 600;
  cfg.burn_in = 599;
  cfg.ranks_alpha = sc.ranks_alpha;
  cfg.ranks_beta = sc.ranks_beta;
  cfg.seed = 31;
  ChainOptions opt;
  opt.init_state = truth.state;
  const PosteriorDraws d = run_chain(setup, truth.data, cfg, opt);
  std::vector<double> ll;
  for (const auto& r : d.trace) ll.push_back(r.loglik);
  const std::size_t n = ll.size();
  const auto [m1, s1] = batch_mean(ll, 0, n / 10, 6);
  const auto [m2, s2] = batch_mean(ll, n / 2, n, 10);
  const double z = (m1 - m2) / std::sqrt(s1 * s1 + s2 * s2);
  EXPECT_LE(std::abs(z), 3.0) << "first " << m1 << " last " << m2;
}
