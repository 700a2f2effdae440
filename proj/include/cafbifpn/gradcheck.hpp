#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cafbifpn/afbifpn.hpp"
#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/io.hpp"
#include "cafbifpn/rng.hpp"

namespace cafbifpn {

/// A scalar loss evaluation together with the discrete branch signature of
/// the evaluation (see TapeDiagnostics).
struct Probe {
  double value = 0.0;
  std::uint64_t signature = 0;
};

using ProbeFn = std::function<Probe(const Tensor&)>;

/// |a - n| / max(1, |a|, |n|): relative for large gradients, absolute below 1.
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

struct GroupReport {
  std::string name;
  std::size_t checked = 0;
  std::size_t resampled = 0;  // coordinates skipped because a probe crossed a kink
  double max_error = 0.0;
  bool passed = true;
};

/// Compares `analytic` against central differences of `fn` at up to `wanted`
/// coordinates taken in order from `candidates`. A coordinate whose +h or -h
/// probe changes the branch signature straddles a kink; it is counted as a
/// resample event and the next candidate is used instead.
inline GroupReport check_coordinates(std::string name, const ProbeFn& fn, const Tensor& x, const Tensor& analytic,
                                     const std::vector<std::size_t>& candidates, std::size_t wanted,
                                     double threshold = 1e-5, double rel_step = 1e-5) {
  GroupReport r;
  r.name = std::move(name);
  const std::uint64_t base = fn(x).signature;
  Tensor probe = x;
  for (std::size_t idx : candidates) {
    if (r.checked >= wanted) break;
    const double h = rel_step * std::max(1.0, std::abs(x[idx]));
    probe[idx] = x[idx] + h;
    const Probe plus = fn(probe);
    probe[idx] = x[idx] - h;
    const Probe minus = fn(probe);
    probe[idx] = x[idx];
    if (plus.signature != base || minus.signature != base) {
      ++r.resampled;
      continue;
    }
    if (!std::isfinite(plus.value) || !std::isfinite(minus.value) || !std::isfinite(analytic[idx])) {
      throw NumericError("gradcheck " + r.name + ": non-finite value at coordinate " + std::to_string(idx));
    }
    const double numeric = (plus.value - minus.value) / (2.0 * h);
    r.max_error = std::max(r.max_error, gradient_error(analytic[idx], numeric));
    ++r.checked;
  }
  r.passed = r.max_error <= threshold;
  return r;
}

inline std::vector<std::size_t> all_coordinates(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

inline std::vector<std::size_t> shuffled_coordinates(std::size_t n, SplitMix64& rng) {
  auto v = all_coordinates(n);
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.next_u64() % i]);
  return v;
}

using GraphBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Checks d sum(build(inputs)) / d inputs[i] at every coordinate of every
/// input (or `wanted` shuffled coordinates per input when non-zero).
inline std::vector<GroupReport> check_function_gradients(const GraphBuilder& build, const std::vector<Tensor>& inputs,
                                                         const std::vector<std::string>& names,
                                                         double threshold = 1e-5, std::size_t wanted = 0,
                                                         std::uint64_t seed = 0) {
  Tape t;
  std::vector<Var> leaves;
  for (const auto& x : inputs) leaves.push_back(t.leaf(x));
  const Var loss = ad::sum(build(t, leaves));
  const Gradients grads = t.backward(loss, Tensor::scalar(1.0));
  SplitMix64 rng(seed);
  std::vector<GroupReport> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Tensor> scratch = inputs;
    ProbeFn fn = [&](const Tensor& v) {
      scratch[i] = v;
      Tape p;
      std::vector<Var> cs;
      for (const auto& x : scratch) cs.push_back(p.constant(x));
      const double value = cafbifpn::sum(p.value(build(p, cs)));
      return Probe{value, p.diagnostics().branch_signature};
    };
    const std::size_t n = inputs[i].size();
    const auto candidates = wanted == 0 ? all_coordinates(n) : shuffled_coordinates(n, rng);
    out.push_back(check_coordinates(i < names.size() ? names[i] : "input" + std::to_string(i), fn, inputs[i],
                                    grads.of(leaves[i]), candidates, wanted == 0 ? n : wanted, threshold));
  }
  return out;
}

// --- whole-pipeline check ----------------------------------------------------------------

struct GradcheckOptions {
  std::size_t samples_per_tensor = 3;
  double threshold = 1e-5;
  double routing_margin = 1e-3;
  int max_routing_resamples = 32;
};

struct GradcheckReport {
  std::vector<GroupReport> groups;
  std::size_t fusion_width = 0;
  std::size_t level2_extent = 0;
  std::uint64_t seed_used = 0;
  int routing_resamples = 0;  // parameter draws rejected for a thin top-k margin
  double min_routing_margin = 0.0;
  double min_relu_margin = 0.0;
  std::size_t resample_events() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.resampled;
    return n;
  }
  bool passed() const {
    return std::all_of(groups.begin(), groups.end(), [](const GroupReport& g) { return g.passed; });
  }
};

/// Desk-scale pipeline used for gradient checks: level 2 at 8S x 8S, small
/// widths, fractional deformable offsets, fusion weights away from 0 and
/// query/key projections large enough for well separated routing scores.
struct GradcheckSetup {
  PipelineConfig cfg;
  std::array<Tensor, 4> backbone;
  PipelineParams params;
};

inline std::size_t desk_fusion_width(const PipelineConfig& cfg) {
  std::size_t w = std::lcm<std::size_t>(3, cfg.heads);
  while (w < 6) w *= 2;
  return w;
}

inline GradcheckSetup make_gradcheck_setup(const PipelineConfig& base, std::uint64_t seed) {
  GradcheckSetup s;
  s.cfg = base;
  s.cfg.fusion_width = desk_fusion_width(base);
  s.cfg.validate();
  const std::size_t e = 8 * s.cfg.regions_s;
  const std::array<std::size_t, 4> channels{3, 4, 5, 6};
  std::array<Dims, 4> dims;
  for (std::size_t l = 0; l < 4; ++l) dims[l] = {channels[l], e >> l, e >> l};
  s.backbone = make_backbone_fixture(seed, dims);
  s.params = make_pipeline_params(channels, s.cfg, seed);
  SplitMix64 rng(seed ^ 0xA5A5A5A5A5A5A5A5ULL);
  for (auto& c : s.params.cfe) {
    auto& pred = c.deform.offset_predictor;
    pred.weights = Tensor::uniform(pred.weights.dims(), rng, -0.1, 0.1);
    pred.bias = Tensor::uniform(pred.bias.dims(), rng, -0.5, 0.5);
  }
  for (auto& w : s.params.fusion.raw) w = rng.uniform(0.5, 1.5);
  for (BraParams* b : {&s.params.bra4, &s.params.bra3}) {
    b->w_q = Tensor::uniform(b->w_q.dims(), rng, -1.0, 1.0);
    b->w_k = Tensor::uniform(b->w_k.dims(), rng, -1.0, 1.0);
  }
  return s;
}

namespace detail {

/// One learnable tensor of the pipeline: how to find it in the parameter
/// record and which tape variable it was bound to.
struct ParamRef {
  std::string group;
  std::function<Tensor&(PipelineParams&)> get;
  std::function<Var(const ad::PipelineVars&)> var;
};

inline std::vector<ParamRef> pipeline_param_refs(const PipelineParams& p) {
  std::vector<ParamRef> refs;
  for (std::size_t l = 0; l < 4; ++l) {
    auto add_conv = [&](const std::string& wgroup, const std::string& bgroup,
                        std::function<Conv2dParams&(PipelineParams&)> cp,
                        std::function<const ad::ConvVars&(const ad::PipelineVars&)> cv) {
      refs.push_back({wgroup, [cp](PipelineParams& q) -> Tensor& { return cp(q).weights; },
                      [cv](const ad::PipelineVars& v) { return cv(v).weights; }});
      refs.push_back({bgroup, [cp](PipelineParams& q) -> Tensor& { return cp(q).bias; },
                      [cv](const ad::PipelineVars& v) { return cv(v).bias; }});
    };
    if (p.cfe_enabled) {
      for (std::size_t i = 0; i < 4; ++i) {
        add_conv("cfe_kernels", "cfe_biases", [l, i](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].branch1[i]; },
                 [l, i](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].branch1[i]; });
        add_conv("cfe_kernels", "cfe_biases", [l, i](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].branch2[i]; },
                 [l, i](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].branch2[i]; });
      }
      for (std::size_t i = 0; i < 3; ++i) {
        add_conv("cfe_kernels", "cfe_biases", [l, i](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].branch3[i]; },
                 [l, i](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].branch3[i]; });
      }
      add_conv("cfe_kernels", "cfe_biases", [l](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].deform.base; },
               [l](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].deform_base; });
      add_conv("offsets", "offsets",
               [l](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].deform.offset_predictor; },
               [l](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].offset_predictor; });
    }
    add_conv("cfe_kernels", "cfe_biases", [l](PipelineParams& q) -> Conv2dParams& { return q.cfe[l].residual; },
             [l](const ad::PipelineVars& v) -> const ad::ConvVars& { return v.cfe[l].residual; });
  }
  if (p.attention_fusion_enabled) {
    for (int which : {4, 3}) {
      auto bra = [which](PipelineParams& q) -> BraParams& { return which == 4 ? q.bra4 : q.bra3; };
      auto brv = [which](const ad::PipelineVars& v) -> const ad::BraVars& { return which == 4 ? v.bra4 : v.bra3; };
      refs.push_back({"ba_projections", [bra](PipelineParams& q) -> Tensor& { return bra(q).w_q; },
                      [brv](const ad::PipelineVars& v) { return brv(v).w_q; }});
      refs.push_back({"ba_projections", [bra](PipelineParams& q) -> Tensor& { return bra(q).w_k; },
                      [brv](const ad::PipelineVars& v) { return brv(v).w_k; }});
      refs.push_back({"ba_projections", [bra](PipelineParams& q) -> Tensor& { return bra(q).w_v; },
                      [brv](const ad::PipelineVars& v) { return brv(v).w_v; }});
      refs.push_back({"lce_kernel", [bra](PipelineParams& q) -> Tensor& { return bra(q).lce_kernel; },
                      [brv](const ad::PipelineVars& v) { return brv(v).lce_kernel; }});
    }
  }
  return refs;
}

struct PipelineLoss {
  const GradcheckSetup& setup;
  std::optional<RoutingResult> routing4, routing3;

  /// Sum of all outputs with routing frozen at the unperturbed selection.
  Probe operator()(const PipelineParams& params, const std::array<Tensor, 4>& backbone) const {
    Tape t;
    std::array<Var, 4> in;
    for (std::size_t l = 0; l < 4; ++l) in[l] = t.constant(backbone[l]);
    ad::PipelineOptions o;
    o.frozen_routing4 = routing4 ? &*routing4 : nullptr;
    o.frozen_routing3 = routing3 ? &*routing3 : nullptr;
    auto n = ad::c_afbifpn_forward(in, ad::bind(t, params, false), o);
    double total = 0.0;
    for (Var v : n.output) total += cafbifpn::sum(t.value(v));
    return {total, t.diagnostics().branch_signature};
  }
};

}  // namespace detail

/// Analytic-versus-finite-difference check of every parameter group of the
/// full pipeline at desk scale. Routing indices are frozen at their
/// unperturbed values; draws whose top-k margin is thinner than
/// `routing_margin` are rejected and redrawn from the next seed.
inline GradcheckReport run_gradcheck(const PipelineConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt = {}) {
  GradcheckReport report;
  GradcheckSetup setup;
  ad::PipelineNodes nodes;
  std::uint64_t s = seed;
  for (;; ++s) {
    setup = make_gradcheck_setup(cfg, s);
    Tape probe;
    std::array<Var, 4> in;
    for (std::size_t l = 0; l < 4; ++l) in[l] = probe.constant(setup.backbone[l]);
    nodes = ad::c_afbifpn_forward(in, ad::bind(probe, setup.params, false));
    report.min_routing_margin = probe.diagnostics().min_routing_margin;
    if (report.min_routing_margin > opt.routing_margin) break;
    if (++report.routing_resamples > opt.max_routing_resamples) {
      throw NumericError("gradcheck: no parameter draw with routing margin above threshold");
    }
  }
  report.seed_used = s;
  report.fusion_width = setup.cfg.fusion_width;
  report.level2_extent = setup.backbone[0].dim(1);

  detail::PipelineLoss loss{setup, nodes.routing4, nodes.routing3};

  Tape t;
  std::array<Var, 4> in;
  for (std::size_t l = 0; l < 4; ++l) in[l] = t.leaf(setup.backbone[l]);
  const ad::PipelineVars vars = ad::bind(t, setup.params, true);
  ad::PipelineOptions o;
  o.frozen_routing4 = loss.routing4 ? &*loss.routing4 : nullptr;
  o.frozen_routing3 = loss.routing3 ? &*loss.routing3 : nullptr;
  auto out = ad::c_afbifpn_forward(in, vars, o);
  Var total = ad::sum(out.output[0]);
  for (std::size_t l = 1; l < 4; ++l) total = ad::add(total, ad::sum(out.output[l]));
  const Gradients grads = t.backward(total, Tensor::scalar(1.0));
  report.min_relu_margin = t.diagnostics().min_relu_margin;

  SplitMix64 rng(s * 0x9E3779B97F4A7C15ULL + 17);
  std::vector<std::string> order{"cfe_kernels", "cfe_biases", "ba_projections", "lce_kernel", "offsets"};
  std::map<std::string, GroupReport> by_group;
  for (const auto& ref : detail::pipeline_param_refs(setup.params)) {
    PipelineParams scratch = setup.params;
    Tensor& slot = ref.get(scratch);
    const Tensor x = slot;
    ProbeFn fn = [&](const Tensor& v) {
      slot = v;
      return loss(scratch, setup.backbone);
    };
    const auto candidates = shuffled_coordinates(x.size(), rng);
    GroupReport g = check_coordinates(ref.group, fn, x, grads.of(ref.var(vars)), candidates, opt.samples_per_tensor,
                                      opt.threshold);
    auto& acc = by_group[ref.group];
    acc.name = ref.group;
    acc.checked += g.checked;
    acc.resampled += g.resampled;
    acc.max_error = std::max(acc.max_error, g.max_error);
  }
  for (const auto& name : order) {
    auto it = by_group.find(name);
    if (it == by_group.end()) continue;
    it->second.passed = it->second.max_error <= opt.threshold;
    report.groups.push_back(it->second);
  }

  {
    PipelineParams scratch = setup.params;
    const Tensor x = scratch.fusion.as_tensor();
    ProbeFn fn = [&](const Tensor& v) {
      std::copy(v.data().begin(), v.data().end(), scratch.fusion.raw.begin());
      return loss(scratch, setup.backbone);
    };
    report.groups.push_back(check_coordinates("fusion_weights", fn, x, grads.of(vars.fusion),
                                              all_coordinates(x.size()), x.size(), opt.threshold));
  }
  {
    std::array<Tensor, 4> scratch = setup.backbone;
    GroupReport acc;
    acc.name = "backbone_input";
    for (std::size_t l = 0; l < 4; ++l) {
      const Tensor x = scratch[l];
      ProbeFn fn = [&](const Tensor& v) {
        scratch[l] = v;
        return loss(setup.params, scratch);
      };
      auto g = check_coordinates("backbone_input", fn, x, grads.of(in[l]), shuffled_coordinates(x.size(), rng),
                                 opt.samples_per_tensor, opt.threshold);
      scratch[l] = x;
      acc.checked += g.checked;
      acc.resampled += g.resampled;
      acc.max_error = std::max(acc.max_error, g.max_error);
    }
    acc.passed = acc.max_error <= opt.threshold;
    report.groups.push_back(acc);
  }
  return report;
}

}  // namespace cafbifpn
