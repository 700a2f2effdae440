#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cafbifpn/afbifpn.hpp"
#include "cafbifpn/gradcheck.hpp"
#include "cafbifpn/io.hpp"
#include "cafbifpn/oracles.hpp"
#include "cafbifpn/selfcheck.hpp"

namespace cafbifpn::cli {

enum ExitCode : int { ok = 0, check_failed = 1, usage_error = 2 };

inline nlohmann::json to_json(const MacCounts& m) {
  return {{"routing", m.routing},
          {"gather", m.gather},
          {"qk_logits", m.qk_logits},
          {"av_aggregation", m.av_aggregation},
          {"lce", m.lce},
          {"total", m.total()}};
}

inline nlohmann::json level_summary(const std::string& name, const Tensor& t) {
  double lo = INFINITY, hi = -INFINITY, sum = 0.0, sq = 0.0;
  for (double v : t.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
    sq += v * v;
  }
  return {{"name", name},
          {"dims", t.dims()},
          {"min", lo},
          {"max", hi},
          {"mean", sum / static_cast<double>(t.size())},
          {"l2", std::sqrt(sq)}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(2) << '\n';
  if (!os) throw Error("cannot write " + path.string());
}

// --- commands --------------------------------------------------------------------------------

inline int gen_fixture(std::uint64_t seed, const std::filesystem::path& out_dir, std::ostream& out) {
  write_backbone_fixture(seed, out_dir);
  out << nlohmann::json{{"seed", seed}, {"out", out_dir.string()}}.dump() << '\n';
  return ok;
}

/// Parameters come from the config seed; channel counts from the inputs.
inline nlohmann::json forward_report(const RunConfig& cfg, const std::array<Tensor, 4>& backbone, PipelineRun& run) {
  std::array<std::size_t, 4> channels{};
  for (std::size_t l = 0; l < 4; ++l) {
    if (backbone[l].rank() != 3) throw ShapeError("backbone C" + std::to_string(l + 2) + " must be [C,H,W]");
    channels[l] = backbone[l].dim(0);
  }
  const PipelineParams params = make_pipeline_params(channels, cfg.pipeline, cfg.seed);
  run = c_afbifpn_forward(backbone, params);
  nlohmann::json levels = nlohmann::json::array();
  for (int l = 2; l <= 5; ++l) levels.push_back(level_summary("P" + std::to_string(l) + "O", run.levels.get(l, Stage::output)));
  return {{"config", to_json(cfg)},
          {"levels", levels},
          {"ba_invocations", run.ba_invocations},
          {"macs", to_json(run.macs)}};
}

inline int forward(const std::filesystem::path& config, const std::filesystem::path& input,
                   const std::filesystem::path& output, std::ostream& out) {
  const RunConfig cfg = config_load(config);
  const auto backbone = read_backbone(input);
  PipelineRun run;
  const nlohmann::json report = forward_report(cfg, backbone, run);
  std::filesystem::create_directories(output);
  for (int l = 2; l <= 5; ++l) {
    tensor_write(output / ("P" + std::to_string(l) + "O.tnsr"), run.levels.get(l, Stage::output));
  }
  write_json(output / "report.json", report);
  out << report.dump(2) << '\n';
  return ok;
}

inline int gradcheck(const std::filesystem::path& config, std::uint64_t seed, std::ostream& out) {
  const RunConfig cfg = config_load(config);
  const GradcheckReport r = run_gradcheck(cfg.pipeline, seed);
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"group", g.name},
                      {"checked", g.checked},
                      {"kink_resamples", g.resampled},
                      {"max_rel_error", g.max_error},
                      {"passed", g.passed}});
  }
  const nlohmann::json report{{"seed", seed},
                              {"seed_used", r.seed_used},
                              {"threshold", 1e-5},
                              {"fusion_width", r.fusion_width},
                              {"level2_extent", r.level2_extent},
                              {"routing_frozen", true},
                              {"routing_margin_resamples", r.routing_resamples},
                              {"min_routing_margin", r.min_routing_margin},
                              {"kink_resamples", r.resample_events()},
                              {"groups", groups},
                              {"passed", r.passed()}};
  out << report.dump(2) << '\n';
  return r.passed() ? ok : check_failed;
}

struct BenchPoint {
  std::size_t extent, S, k;
};

/// Median wall time of `reps` calls in milliseconds.
inline double time_ms(const std::function<void()>& fn, int reps) {
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

/// Dense attention is routed attention with one region (S = 1, k = 1), so
/// both timings exercise the same kernels.
inline int bench(const std::filesystem::path& config, const std::vector<std::size_t>& sizes, int reps,
                 std::ostream& out) {
  const RunConfig cfg = config_load(config);
  const std::size_t C = cfg.pipeline.fusion_width, heads = cfg.pipeline.heads, lk = cfg.pipeline.lce_kernel;
  std::vector<std::pair<std::size_t, std::size_t>> routes{{cfg.pipeline.regions_s, cfg.pipeline.topk_k}, {4, 2}};
  routes.emplace_back(cfg.pipeline.regions_s, cfg.pipeline.regions_s * cfg.pipeline.regions_s);
  std::sort(routes.begin(), routes.end());
  routes.erase(std::unique(routes.begin(), routes.end()), routes.end());

  bool exact = true, monotone = true;
  nlohmann::json points = nlohmann::json::array();
  for (auto [S, k] : routes) {
    double previous = 0.0;
    for (std::size_t e : sizes) {
      if (e % S != 0) continue;
      SplitMix64 rng(cfg.seed + e * 131 + S * 7 + k);
      const Tensor f = Tensor::uniform({C, e, e}, rng);
      const BraParams routed_p = random_bra(C, S, k, heads, rng, false, lk, 0.1);
      BraParams dense_p = routed_p;
      dense_p.regions_per_side = 1;
      dense_p.topk = 1;
      dense_p.lce_kernel = Tensor(routed_p.lce_kernel.dims());

      MacCounts runtime;
      ad::BaOptions opt;
      opt.macs = &runtime;
      ba_forward(f, routed_p, opt);
      const auto dense = oracles::attention_flops(e, e, C, 1, 1, heads, oracles::AttentionMode::dense);
      const auto routed = oracles::attention_flops(e, e, C, S, k, heads, oracles::AttentionMode::routed, lk);
      const bool ratio_exact = routed.qk_logits * S * S == dense.qk_logits * k &&
                               routed.av_aggregation * S * S == dense.av_aggregation * k && runtime == routed;
      exact = exact && ratio_exact;

      const double routed_ms = time_ms([&] { ba_forward(f, routed_p); }, reps);
      const double dense_ms = time_ms([&] { ba_forward(f, dense_p); }, reps);
      if (routed_ms < previous) monotone = false;
      previous = routed_ms;
      points.push_back({{"H", e},
                        {"W", e},
                        {"C", C},
                        {"S", S},
                        {"k", k},
                        {"dense_ms", dense_ms},
                        {"routed_ms", routed_ms},
                        {"dense_macs", to_json(dense)},
                        {"routed_macs", to_json(routed)},
                        {"runtime_macs", to_json(runtime)},
                        {"qk_mac_ratio", static_cast<double>(routed.qk_logits) / static_cast<double>(dense.qk_logits)},
                        {"expected_ratio", static_cast<double>(k) / static_cast<double>(S * S)},
                        {"ratio_exact", ratio_exact}});
    }
  }
  out << nlohmann::json{{"points", points}, {"mac_ratio_exact", exact}, {"routed_time_monotone_in_hw", monotone}}.dump(2)
      << '\n';
  return exact ? ok : check_failed;
}

inline int selfcheck(const std::string& inject_fault, std::ostream& out) {
  SelfcheckOptions opt;
  if (inject_fault == "topk-tiebreak") {
    opt.tie_break = TieBreak::descending_id;
  } else if (!inject_fault.empty()) {
    throw ConfigError("unknown fault \"" + inject_fault + "\" (known: topk-tiebreak)");
  }
  return run_selfcheck(out, opt) ? ok : check_failed;
}

/// Maps library errors to exit codes and prints the diagnostic to `err`.
inline int guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return usage_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return check_failed;
  }
}

}  // namespace cafbifpn::cli
