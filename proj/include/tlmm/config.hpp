#pragma once

#include <json.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tlmm/datagen.hpp"
#include "tlmm/errors.hpp"
#include "tlmm/metrics.hpp"
#include "tlmm/model.hpp"
#include "tlmm/priors.hpp"
#include "tlmm/sampler.hpp"

// JSON run configuration. Every section is optional and starts from the defaults; unknown keys
// and type mismatches are ConfigErrors.
//
// {
//   "sampler":    {iterations, burn_in, thin, seed, ranks_alpha, ranks_beta, structure: "tucker"|"cp",
//                  threads, checkpoint_every, max_consecutive_jitter,
//                  adaptive: {enabled, log_p0, log_p1, threshold, window}},
//   "basis":      {raw: "gaussian"|"identity", m_s, q_alpha, q_beta, spline_degree, n_splines, eta},
//   "hyper":      {kappa1, kappa2, a_s, b_s, a_tau, b_tau, a_eps, b_eps, a_c, b_c,
//                  shrinkage: "as_written"|"inverse_scale"},
//   "simulation": {grid, n_groups, subjects_per_group, times: "schedule"|"uniform", schedule, centers,
//                  bump_scale, time_factor, beta_noise_sd, beta_noise_per_voxel, obs_noise_sd,
//                  alpha: "synthetic"|"file", alpha_path, seed},
//   "summary":    {times, n_times, regions, region_names, quantiles, group_pairs, reducer: "median"|"mean"}
// }
namespace tlmm {

namespace config_detail {

template <class E>
struct EnumNames;

#define TLMM_ENUM_NAMES(E, ...)                                                          \
  template <>                                                                            \
  struct EnumNames<E> {                                                                  \
    static const std::vector<std::pair<E, std::string>>& get() {                         \
      static const std::vector<std::pair<E, std::string>> v = {__VA_ARGS__};             \
      return v;                                                                          \
    }                                                                                    \
  };

TLMM_ENUM_NAMES(Structure, {Structure::tucker, "tucker"}, {Structure::cp, "cp"})
TLMM_ENUM_NAMES(RawBasis, {RawBasis::gaussian, "gaussian"}, {RawBasis::identity, "identity"})
TLMM_ENUM_NAMES(ShrinkageMode, {ShrinkageMode::as_written, "as_written"}, {ShrinkageMode::inverse_scale, "inverse_scale"})
TLMM_ENUM_NAMES(TimeSource, {TimeSource::schedule, "schedule"}, {TimeSource::uniform, "uniform"})
TLMM_ENUM_NAMES(AlphaSource, {AlphaSource::synthetic, "synthetic"}, {AlphaSource::file, "file"})
TLMM_ENUM_NAMES(Reducer, {Reducer::median, "median"}, {Reducer::mean, "mean"})
#undef TLMM_ENUM_NAMES

}  // namespace config_detail

template <class E, class = decltype(config_detail::EnumNames<E>::get())>
void to_json(nlohmann::json& j, const E& e) {
  for (const auto& [v, name] : config_detail::EnumNames<E>::get())
    if (v == e) {
      j = name;
      return;
    }
  throw ConfigError("unnamed enum value");
}

template <class E, class = decltype(config_detail::EnumNames<E>::get())>
void from_json(const nlohmann::json& j, E& e) {
  const std::string s = j.get<std::string>();
  std::string options;
  for (const auto& [v, name] : config_detail::EnumNames<E>::get()) {
    if (name == s) {
      e = v;
      return;
    }
    options += (options.empty() ? "" : ", ") + name;
  }
  throw ConfigError("unknown option '" + s + "' (expected one of " + options + ")");
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AdaptiveRankConfig, enabled, log_p0, log_p1, threshold, window)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SamplerConfig, iterations, burn_in, thin, seed, ranks_alpha, ranks_beta, structure,
                                   adaptive, threads, checkpoint_every, max_consecutive_jitter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BasisOptions, raw, m_s, q_alpha, q_beta, spline_degree, n_splines, eta)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Hyperparameters, kappa1, kappa2, a_s, b_s, a_tau, b_tau, a_eps, b_eps, a_c, b_c,
                                   shrinkage)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SimulationSpec, grid, n_groups, subjects_per_group, times, schedule, centers,
                                   bump_scale, time_factor, beta_noise_sd, beta_noise_per_voxel, obs_noise_sd, alpha,
                                   alpha_path, seed)
// region_names is a JSON object keyed by the decimal label, e.g. {"3": "hippocampus"}.
inline void to_json(nlohmann::json& j, const SummaryRequest& r) {
  nlohmann::json names = nlohmann::json::object();
  for (const auto& [id, name] : r.region_names) names[std::to_string(id)] = name;
  j = {{"times", r.times},         {"regions", r.regions},         {"region_names", names},
       {"quantiles", r.quantiles}, {"group_pairs", r.group_pairs}, {"reducer", r.reducer},
       {"n_times", r.n_times}};
}

inline void from_json(const nlohmann::json& j, SummaryRequest& r) {
  j.at("times").get_to(r.times);
  j.at("regions").get_to(r.regions);
  j.at("quantiles").get_to(r.quantiles);
  j.at("group_pairs").get_to(r.group_pairs);
  j.at("reducer").get_to(r.reducer);
  j.at("n_times").get_to(r.n_times);
  const auto& names = j.at("region_names");
  if (!names.is_object()) throw ConfigError("summary.region_names must be an object keyed by label");
  r.region_names.clear();
  for (auto it = names.begin(); it != names.end(); ++it) {
    const std::string& k = it.key();
    std::int32_t id = 0;
    const auto res = std::from_chars(k.data(), k.data() + k.size(), id);
    if (res.ec != std::errc() || res.ptr != k.data() + k.size())
      throw ConfigError("summary.region_names key '" + k + "' is not an integer label");
    r.region_names[id] = it.value().get<std::string>();
  }
}

struct RunConfig {
  SamplerConfig sampler;
  BasisOptions basis;
  Hyperparameters hyper;
  SimulationSpec simulation;
  SummaryRequest summary;
};

inline nlohmann::json to_json_config(const RunConfig& c) {
  return {{"sampler", c.sampler}, {"basis", c.basis}, {"hyper", c.hyper}, {"simulation", c.simulation},
          {"summary", c.summary}};
}

namespace config_detail {

// Objects whose keys are free-form rather than fixed fields.
inline bool free_keys(const std::string& path) { return path == "summary.region_names"; }

inline void check_keys(const nlohmann::json& defaults, const nlohmann::json& in, const std::string& path) {
  if (!in.is_object() || free_keys(path)) return;
  if (!defaults.is_object()) throw ConfigError("config key '" + path + "' must not be an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    check_keys(defaults[it.key()], it.value(), p);
  }
}

}  // namespace config_detail

inline int default_threads() {
  if (const char* e = std::getenv("TLMM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(e, &end, 10);
    if (end == e || *end != '\0' || v < 1) throw ConfigError(std::string("TLMM_THREADS must be a positive integer, got '") + e + "'");
    return static_cast<int>(v);
  }
  return 1;
}

inline RunConfig parse_config(const nlohmann::json& in) {
  RunConfig c;
  c.sampler.threads = default_threads();
  nlohmann::json merged = to_json_config(c);
  if (!in.is_null()) {
    if (!in.is_object()) throw ConfigError("config must be a JSON object");
    config_detail::check_keys(merged, in, "");
    merged.merge_patch(in);
  }
  try {
    merged.at("sampler").get_to(c.sampler);
    merged.at("basis").get_to(c.basis);
    merged.at("hyper").get_to(c.hyper);
    merged.at("simulation").get_to(c.simulation);
    merged.at("summary").get_to(c.summary);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.hyper.validate();
  c.summary.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  if (path.empty()) return parse_config(nullptr);
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace tlmm
