#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "tlmm/tlmm.hpp"
#include "tlmm/validation/oracle.hpp"
#include "tlmm/validation/sbc.hpp"

namespace fs = std::filesystem;
using namespace tlmm;
using nlohmann::json;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  void add(CLI::App* app) {
    app->add_option("--seed", seed, "random seed (overrides the config)");
    app->add_option("--threads", threads, "worker threads (default: TLMM_THREADS or 1)")->check(CLI::PositiveNumber);
  }
  int thread_count(int fallback) const { return threads ? *threads : fallback; }
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::ofstream open_output(const std::string& path) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

// Spec files may hold a full config or only the simulation section.
SimulationSpec read_spec(const std::string& path) {
  if (path.empty()) return RunConfig{}.simulation;
  json j = read_json(path);
  if (!j.contains("simulation")) j = json{{"simulation", j}};
  return parse_config(j).simulation;
}

SummaryRequest read_request(const std::string& path) {
  if (path.empty()) return SummaryRequest{};
  json j = read_json(path);
  if (!j.contains("summary")) j = json{{"summary", j}};
  return parse_config(j).summary;
}

struct Chain {
  RunConfig config;
  ModelSetup setup;
  PosteriorDraws draws;
};

Chain load_chain(const std::string& dir) {
  const fs::path meta = fs::path(dir) / "run.json";
  if (!fs::exists(meta)) throw DataError(meta.string() + " not found; is this a chain directory?");
  const json j = read_json(meta.string());
  Chain c;
  c.config = parse_config(j.at("config"));
  c.setup = make_setup(j.at("grid").get<Dims>(), j.at("n_groups").get<Index>(), c.config.basis, c.config.hyper);
  c.draws = load_draws((fs::path(dir) / "draws.ltmc").string());
  if (c.draws.size() == 0) throw DataError(dir + " holds no posterior draws");
  return c;
}

int cmd_simulate(const std::string& spec_path, const std::string& out, const Common& co) {
  SimulationSpec spec = read_spec(spec_path);
  if (co.seed) spec.seed = *co.seed;
  const SimulationResult sim = generate_dataset(spec, co.thread_count(default_threads()));
  const std::string manifest = save_dataset(sim.data, out);
  write_json(fs::path(out) / "truth.json", json{{"simulation", spec}});
  std::cout << "wrote " << manifest << " (" << sim.data.n_subjects() << " subjects, " << sim.data.n_obs()
            << " scans)\n";
  return 0;
}

int cmd_fit(const std::string& manifest, const std::string& config, const std::string& mask, const std::string& out,
            bool resume, std::optional<Index> cp_rank, const Common& co) {
  RunConfig rc = load_config(config);
  if (co.seed) rc.sampler.seed = *co.seed;
  rc.sampler.threads = co.thread_count(rc.sampler.threads);
  if (cp_rank) {
    rc.sampler = cp_config(rc.sampler, *cp_rank);
    rc.basis.q_beta = 1;
  }
  LoadOptions lo;
  lo.mask_path = mask;
  const LongitudinalDataset data = load_dataset(manifest, lo);
  const ModelSetup setup = make_setup(data.grid, data.n_groups, rc.basis, rc.hyper);
  fs::create_directories(out);
  write_json(fs::path(out) / "run.json",
             json{{"config", to_json_config(rc)}, {"grid", data.grid}, {"n_groups", data.n_groups}, {"manifest", manifest}});
  ChainOptions opt;
  opt.out_dir = out;
  opt.resume = resume;
  opt.progress = &std::cerr;
  const PosteriorDraws d = run_chain(setup, data, rc.sampler, opt);
  std::cout << "kept " << d.size() << " draws in " << (fs::path(out) / "draws.ltmc").string() << "\n";
  return 0;
}

int cmd_summarize(const std::string& chain, const std::string& request, const std::string& mask, const std::string& out,
                  const Common& co) {
  const Chain c = load_chain(chain);
  const SummaryRequest req = read_request(request);
  std::optional<LabelVolume> labels;
  if (!mask.empty()) {
    labels = read_label_ltf(mask);
    if (labels->dims != c.setup.grid) throw DataError("mask dims " + dims_string(labels->dims) + " differ from grid");
  }
  const auto rows = summarize_trajectories(c.setup, c.draws, req, labels ? &*labels : nullptr,
                                           co.thread_count(default_threads()));
  std::ofstream os = open_output(out);
  write_trajectories_csv(os, rows, req);
  return 0;
}

void write_metric_row(std::ostream& os, const std::string& name, Index g, Index g2, const PosteriorScalar& p,
                      double truth) {
  os << name << "," << (g < 0 ? std::string() : std::to_string(g + 1)) << "," << (g2 < 0 ? std::string() : std::to_string(g2 + 1)) << ","
     << csv::format_double(p.mean);
  for (double q : p.quantiles) os << "," << csv::format_double(q);
  os << "," << csv::format_double(truth) << "\n";
}

int cmd_metrics(const std::string& chain, const std::string& truth_dir, const std::string& out, const Common& co) {
  const Chain c = load_chain(chain);
  const SimulationSpec spec = read_spec((fs::path(truth_dir) / "truth.json").string());
  if (spec.grid != c.setup.grid || spec.n_groups != c.setup.n_groups)
    throw DataError("truth design " + dims_string(spec.grid) + " does not match the chain");
  const int threads = co.thread_count(default_threads());
  const auto& req = c.config.summary;
  const auto times = req.time_grid();
  const auto vox = region_voxels(c.setup.grid, nullptr, kWholeVolume);
  std::ofstream os = open_output(out);
  os << "metric,group,group2,mean";
  for (double p : req.quantiles) os << "," << quantile_label(p);
  os << ",truth\n";
  const MseReport m = mse_report(c.setup, c.draws, spec);
  const std::vector<double> none(req.quantiles.size(), std::nan(""));
  write_metric_row(os, "mse_nonzero", -1, -1, {m.nonzero, none, {}}, 0.0);
  write_metric_row(os, "mse_zero", -1, -1, {m.zero, none, {}}, 0.0);
  for (Index g = 0; g < c.setup.n_groups; ++g)
    write_metric_row(os, "arc_length", g, -1, arc_length(c.setup, c.draws, g, times, vox, req.quantiles, threads),
                     arc_length_of(truth_derivative(spec), g, times, vox));
  auto pairs = req.group_pairs;
  if (pairs.empty())
    for (Index g = 0; g < c.setup.n_groups; ++g)
      for (Index g2 = g + 1; g2 < c.setup.n_groups; ++g2) pairs.emplace_back(g + 1, g2 + 1);
  for (auto [a, b] : pairs) {
    check_group(c.setup, a - 1);
    check_group(c.setup, b - 1);
    write_metric_row(os, "cgd", a - 1, b - 1, cgd(c.setup, c.draws, a - 1, b - 1, times, vox, req.quantiles, threads),
                     cgd_of(truth_surface(spec), a - 1, b - 1, times, vox));
  }
  std::cout << "mse nonzero " << m.nonzero << " zero " << m.zero << "\n";
  return 0;
}

int cmd_oracle_check(int replications, const Common& co) {
  bool ok = true;
  for (Structure s : {Structure::tucker, Structure::cp}) {
    const auto r = validation::run_oracle_check(s, 3, co.seed.value_or(7));
    const bool pass = r.worst() <= 1e-8;
    ok = ok && pass;
    std::cout << "oracle " << (s == Structure::tucker ? "tucker" : "cp") << ": " << (pass ? "PASS" : "FAIL") << " worst "
              << r.worst() << " over " << r.checks.size() << " blocks\n";
  }
  validation::SbcConfig cfg;
  cfg.replications = replications;
  if (co.seed) cfg.seed = *co.seed;
  cfg.threads = co.thread_count(default_threads());
  const auto r = validation::run_sbc(cfg);
  const bool pass = r.min_p() > 0.01 && r.failures == 0;
  ok = ok && pass;
  std::cout << "sbc: " << (pass ? "PASS" : "FAIL") << " min p " << r.min_p() << " over " << r.ranks.size()
            << " replications\n";
  return ok ? 0 : static_cast<int>(ExitCode::oracle);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian tensor longitudinal model for neuroimaging"};
  app.require_subcommand(1);
  Common co;
  std::string spec, out, data, config, mask, chain, request, truth;
  bool resume = false;
  Index rank = 5;
  int reps = 200;

  auto* sim = app.add_subcommand("simulate", "generate the synthetic bump design");
  sim->add_option("--spec", spec, "JSON simulation spec (default design when omitted)");
  sim->add_option("--out", out, "output dataset directory")->required();

  auto add_fit = [&](CLI::App* f) {
    f->add_option("--data", data, "manifest CSV")->required();
    f->add_option("--config", config, "JSON run config");
    f->add_option("--mask", mask, "label volume; label 0 is excluded");
    f->add_option("--out", out, "chain directory")->required();
    f->add_flag("--resume", resume, "continue from the checkpoint in the chain directory");
  };
  auto* fit = app.add_subcommand("fit", "run the Tucker Gibbs sampler");
  add_fit(fit);
  auto* fit_cp = app.add_subcommand("fit-cp", "run the CP baseline");
  add_fit(fit_cp);
  fit_cp->add_option("--rank", rank, "CP rank")->check(CLI::PositiveNumber);

  auto* sum = app.add_subcommand("summarize", "trajectory quantiles per group and region");
  sum->add_option("--chain", chain, "chain directory")->required();
  sum->add_option("--request", request, "JSON summary request");
  sum->add_option("--mask", mask, "label volume defining regions");
  sum->add_option("--out", out, "output CSV")->required();

  auto* met = app.add_subcommand("metrics", "MSE, arc length and CGD against a simulated truth");
  met->add_option("--chain", chain, "chain directory")->required();
  met->add_option("--truth", truth, "dataset directory written by simulate")->required();
  met->add_option("--out", out, "output CSV")->required();

  auto* orc = app.add_subcommand("oracle-check", "dense-conditioning and calibration suites");
  orc->add_option("--replications", reps, "calibration replications")->check(CLI::PositiveNumber);

  for (auto* s : {sim, fit, fit_cp, sum, met, orc}) co.add(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::config);
  }

  try {
    if (*sim) return cmd_simulate(spec, out, co);
    if (*fit) return cmd_fit(data, config, mask, out, resume, std::nullopt, co);
    if (*fit_cp) return cmd_fit(data, config, mask, out, resume, rank, co);
    if (*sum) return cmd_summarize(chain, request, mask, out, co);
    if (*met) return cmd_metrics(chain, truth, out, co);
    if (*orc) return cmd_oracle_check(reps, co);
  } catch (const Error& e) {
    std::cerr << "tlmm: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const json::exception& e) {
    std::cerr << "tlmm: config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::config);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "tlmm: data error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  } catch (const std::exception& e) {
    std::cerr << "tlmm: numerical error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::numerical);
  }
  return 0;
}
