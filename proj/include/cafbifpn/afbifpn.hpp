#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/cfe.hpp"
#include "cafbifpn/routing.hpp"

namespace cafbifpn {

enum class ResizeDirection { up2, down2 };

// --- resize ------------------------------------------------------------------------

/// up2: nearest-neighbour 2x replication. down2: 2x2 mean with stride 2.
inline Tensor resize(const Tensor& f, ResizeDirection dir) {
  if (f.rank() != 3) throw ShapeError("resize: expected [C,H,W], got " + to_string(f.dims()));
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
  if (dir == ResizeDirection::up2) {
    Tensor out({C, 2 * H, 2 * W});
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < 2 * H; ++y) {
        for (std::size_t x = 0; x < 2 * W; ++x) out[(c * 2 * H + y) * 2 * W + x] = f[(c * H + y / 2) * W + x / 2];
      }
    }
    return out;
  }
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("resize down2: extents must be even, got " + to_string(f.dims()));
  }
  Tensor out({C, H / 2, W / 2});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H / 2; ++y) {
      for (std::size_t x = 0; x < W / 2; ++x) {
        const double* r0 = &f.data()[(c * H + 2 * y) * W + 2 * x];
        const double* r1 = r0 + W;
        out[(c * (H / 2) + y) * (W / 2) + x] = (r0[0] + r0[1] + r1[0] + r1[1]) * 0.25;
      }
    }
  }
  return out;
}

// --- fast normalised fusion ------------------------------------------------------------

/// out = sum_i max(w_i,0) x_i / (sum_i max(w_i,0) + eps).
inline Tensor fuse(const std::vector<Tensor>& inputs, const std::vector<double>& raw_weights, double epsilon) {
  if (inputs.empty()) throw ShapeError("fuse: at least one input required");
  if (inputs.size() != raw_weights.size()) {
    throw ShapeError("fuse: " + std::to_string(inputs.size()) + " inputs but " + std::to_string(raw_weights.size()) +
                     " weights");
  }
  if (!(epsilon >= 0.0)) throw ConfigError("fuse: epsilon must be non-negative");
  double denom = epsilon;
  for (double w : raw_weights) denom += std::max(w, 0.0);
  if (!(denom > 0.0)) throw NumericError("fuse: normaliser is zero (all weights clamped and epsilon = 0)");
  Tensor out(inputs.front().dims());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].dims() != out.dims()) {
      throw ShapeError("fuse: input " + std::to_string(i) + " has dims " + to_string(inputs[i].dims()) +
                       ", expected " + to_string(out.dims()));
    }
    const double u = std::max(raw_weights[i], 0.0);
    if (u == 0.0) continue;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += u * inputs[i][j];
  }
  for (auto& v : out.data()) v /= denom;
  return out;
}

// --- fusion weights ------------------------------------------------------------------

/// Raw weights w_ij indexed by output level i and input branch j, stored as
/// w21 w22 | w31..w35 | w41..w45 | w51 w52.
struct FusionWeights {
  static constexpr std::size_t count = 14;
  std::array<double, count> raw{};
  double epsilon = 1e-4;

  static FusionWeights ones(double epsilon = 1e-4) {
    FusionWeights f;
    f.raw.fill(1.0);
    f.epsilon = epsilon;
    return f;
  }

  static std::size_t slot(int level, int branch) {
    static constexpr int base[] = {0, 2, 7, 12};
    static constexpr int branches[] = {2, 5, 5, 2};
    if (level < 2 || level > 5 || branch < 1 || branch > branches[level - 2]) {
      throw IndexError("fusion weight w" + std::to_string(level) + std::to_string(branch) + " does not exist");
    }
    return static_cast<std::size_t>(base[level - 2] + branch - 1);
  }

  double& w(int level, int branch) { return raw[slot(level, branch)]; }
  double w(int level, int branch) const { return raw[slot(level, branch)]; }

  Tensor as_tensor() const { return Tensor({count}, std::vector<double>(raw.begin(), raw.end())); }
};

namespace ad {

inline Var resize(Var f, ResizeDirection dir) {
  Tape& t = *f.tape;
  return t.record(dir == ResizeDirection::up2 ? "up2" : "down2", cafbifpn::resize(t.value(f), dir), {f},
                  [f, dir](const Tensor& g, GradientSink& s) {
                    const Dims& d = s.value(f).dims();
                    const std::size_t C = d[0], H = d[1], W = d[2];
                    Tensor out(d);
                    if (dir == ResizeDirection::up2) {
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t y = 0; y < 2 * H; ++y)
                          for (std::size_t x = 0; x < 2 * W; ++x)
                            out[(c * H + y / 2) * W + x / 2] += g[(c * 2 * H + y) * 2 * W + x];
                    } else {
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t y = 0; y < H; ++y)
                          for (std::size_t x = 0; x < W; ++x)
                            out[(c * H + y) * W + x] = 0.25 * g[(c * (H / 2) + y / 2) * (W / 2) + x / 2];
                    }
                    s.accumulate(f, out);
                  });
}

/// Fusion node reading its raw weights from `weights` at `slots`.
inline Var fuse(const std::vector<Var>& inputs, Var weights, const std::vector<std::size_t>& slots, double epsilon) {
  Tape& t = *weights.tape;
  const Tensor& wv = t.value(weights);
  std::vector<Tensor> values;
  std::vector<double> raw;
  std::uint64_t signs = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    values.push_back(t.value(inputs[i]));
    raw.push_back(wv[slots.at(i)]);
    signs = (signs << 1) | (raw.back() > 0.0 ? 1u : 0u);
  }
  t.diagnostics().note_branch(signs);
  Tensor out = cafbifpn::fuse(values, raw, epsilon);
  std::vector<Var> parents = inputs;
  parents.push_back(weights);
  const Var self{&t, t.size()};
  return t.record("fuse", std::move(out), parents,
                  [inputs, weights, slots, epsilon, self](const Tensor& g, GradientSink& s) {
                    const Tensor& w = s.value(weights);
                    const Tensor& y = s.value(self);
                    double denom = epsilon;
                    for (std::size_t slot : slots) denom += std::max(w[slot], 0.0);
                    Tensor dw(w.dims());
                    for (std::size_t i = 0; i < inputs.size(); ++i) {
                      const double u = std::max(w[slots[i]], 0.0);
                      if (s.wants(inputs[i])) s.accumulate(inputs[i], cafbifpn::scale(g, u / denom));
                      if (w[slots[i]] > 0.0) {
                        // d out / d u_i = (x_i - out) / denom
                        const Tensor& x = s.value(inputs[i]);
                        double acc = 0.0;
                        for (std::size_t j = 0; j < x.size(); ++j) acc += g[j] * (x[j] - y[j]);
                        dw[slots[i]] += acc / denom;
                      }
                    }
                    s.accumulate(weights, dw);
                  });
}

}  // namespace ad

// --- pyramid containers ------------------------------------------------------------------

enum class Stage { input, intermediate, output };

inline const char* stage_tag(Stage s) {
  switch (s) {
    case Stage::input: return "I";
    case Stage::intermediate: return "F";
    case Stage::output: return "O";
  }
  return "?";
}

/// Feature maps keyed by (level, stage); e.g. P4F is (4, intermediate).
class PyramidLevels {
 public:
  void set(int level, Stage stage, Tensor t) { maps_[{level, stage}] = std::move(t); }

  bool has(int level, Stage stage) const { return maps_.count({level, stage}) != 0; }

  const Tensor& get(int level, Stage stage) const {
    auto it = maps_.find({level, stage});
    if (it == maps_.end()) {
      throw PipelineError("pyramid node P" + std::to_string(level) + stage_tag(stage) + " is missing");
    }
    return it->second;
  }

 private:
  std::map<std::pair<int, Stage>, Tensor> maps_;
};

// --- configuration and parameters ---------------------------------------------------------

/// `input` fuses up2(P5I) into P4F literally; `output` is rejected because
/// P5O depends on P4O, which depends on P4F.
enum class TopdownSource { input, output };

struct PipelineConfig {
  std::size_t regions_s = 2;
  std::size_t topk_k = 2;
  std::size_t heads = 1;
  std::size_t fusion_width = 48;
  double epsilon = 1e-4;
  std::size_t dilation = 2;
  std::size_t lce_kernel = 5;
  Activation activation = Activation::relu;
  bool cfe_enabled = true;
  bool attention_fusion_enabled = true;
  TopdownSource topdown_source = TopdownSource::input;

  void validate() const {
    if (fusion_width == 0 || fusion_width % 3 != 0) {
      throw ConfigError("fusion_width % 3 == 0 violated (fusion_width = " + std::to_string(fusion_width) + ")");
    }
    if (regions_s == 0) throw ConfigError("regions_s must be positive");
    if (topk_k < 1 || topk_k > regions_s * regions_s) {
      throw ConfigError("topk_k <= S^2 violated (topk_k = " + std::to_string(topk_k) +
                        ", S^2 = " + std::to_string(regions_s * regions_s) + ")");
    }
    if (heads == 0 || fusion_width % heads != 0) {
      throw ConfigError("heads must divide fusion_width (heads = " + std::to_string(heads) + ")");
    }
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
    if (dilation == 0) throw ConfigError("dilation must be positive");
    if (lce_kernel == 0 || lce_kernel % 2 == 0) throw ConfigError("lce_kernel must be odd");
    if (topdown_source != TopdownSource::input) {
      throw ConfigError("topdown_source = output would make P4F depend on P5O, which depends on P4F");
    }
  }
};

struct PipelineParams {
  std::array<CfeParams, 4> cfe;  // levels 2..5; residual doubles as the plain projection
  BraParams bra4;
  BraParams bra3;
  FusionWeights fusion = FusionWeights::ones();
  bool cfe_enabled = true;
  bool attention_fusion_enabled = true;

  std::size_t fusion_width() const { return cfe[0].width(); }
};

inline BraParams make_bra_random(std::size_t channels, const PipelineConfig& cfg, SplitMix64& rng, double scale = 0.1) {
  BraParams p;
  p.w_q = Tensor::uniform({channels, channels}, rng, -scale, scale);
  p.w_k = Tensor::uniform({channels, channels}, rng, -scale, scale);
  p.w_v = Tensor::uniform({channels, channels}, rng, -scale, scale);
  p.lce_kernel = Tensor::uniform({channels, cfg.lce_kernel, cfg.lce_kernel}, rng, -scale, scale);
  p.regions_per_side = cfg.regions_s;
  p.topk = cfg.topk_k;
  p.heads = cfg.heads;
  return p;
}

/// Deterministic parameters: CFE for levels 2..5 (see make_cfe_random), then
/// BA for level 4 and level 3 (w_q, w_k, w_v, LCE), all uniform in (-0.1, 0.1)
/// from one SplitMix64 stream. Fusion weights start at 1.
inline PipelineParams make_pipeline_params(const std::array<std::size_t, 4>& backbone_channels,
                                           const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  PipelineParams p;
  for (std::size_t l = 0; l < 4; ++l) {
    p.cfe[l] = make_cfe_random(backbone_channels[l], cfg.fusion_width, rng, cfg.dilation, cfg.activation);
  }
  p.bra4 = make_bra_random(cfg.fusion_width, cfg, rng);
  p.bra3 = make_bra_random(cfg.fusion_width, cfg, rng);
  p.fusion = FusionWeights::ones(cfg.epsilon);
  p.cfe_enabled = cfg.cfe_enabled;
  p.attention_fusion_enabled = cfg.attention_fusion_enabled;
  return p;
}

// --- recorded pipeline ---------------------------------------------------------------------

namespace ad {

struct PipelineVars {
  std::array<CfeVars, 4> cfe;
  BraVars bra4;
  BraVars bra3;
  Var fusion;
  double epsilon = 1e-4;
  bool cfe_enabled = true;
  bool attention_fusion_enabled = true;
};

inline PipelineVars bind(Tape& t, const PipelineParams& p, bool requires_grad = true) {
  PipelineVars v;
  for (std::size_t l = 0; l < 4; ++l) v.cfe[l] = bind(t, p.cfe[l], requires_grad);
  v.bra4 = bind(t, p.bra4, requires_grad);
  v.bra3 = bind(t, p.bra3, requires_grad);
  v.fusion = t.leaf(p.fusion.as_tensor(), requires_grad);
  v.epsilon = p.fusion.epsilon;
  v.cfe_enabled = p.cfe_enabled;
  v.attention_fusion_enabled = p.attention_fusion_enabled;
  return v;
}

struct PipelineOptions {
  TieBreak tie_break = TieBreak::ascending_id;
  const RoutingResult* frozen_routing4 = nullptr;
  const RoutingResult* frozen_routing3 = nullptr;
  MacCounts* macs = nullptr;
};

struct PipelineNodes {
  std::array<Var, 4> input;   // P2I..P5I
  std::array<Var, 4> output;  // P2O..P5O
  Var p4f, p3f;
  Var a4, a3;  // BA(P4F), BA(P3F); identity when attention fusion is off
  std::optional<RoutingResult> routing4, routing3;
  int ba_invocations = 0;
};

inline void check_level(const Tensor& v, int level, std::size_t width, std::size_t h, std::size_t w) {
  if (v.dims() != Dims{width, h, w}) {
    throw PipelineError("node P" + std::to_string(level) + "I has dims " + to_string(v.dims()) + ", expected " +
                        to_string(Dims{width, h, w}));
  }
}

/// Fusion DAG over P2I..P5I, evaluated in dependency order with each BA
/// result computed once and reused:
///   P4F = fuse(P4I, up(P5I))            A4 = BA(P4F)
///   P3F = fuse(P3I, up(A4))             A3 = BA(P3F)
///   P2O = fuse(P2I, up(A3))
///   P3O = fuse(P3I, A3, down(P2O))
///   P4O = fuse(P4I, A4, down(P3O))
///   P5O = fuse(P5I, down(P4O))
inline PipelineNodes afbifpn_forward(const std::array<Var, 4>& inputs, const PipelineVars& p,
                                     const PipelineOptions& opt = {}) {
  Tape& t = *p.fusion.tape;
  const Tensor& p2 = t.value(inputs[0]);
  if (p2.rank() != 3) throw PipelineError("node P2I must be [C,H,W], got " + to_string(p2.dims()));
  const std::size_t width = p2.dim(0), H = p2.dim(1), W = p2.dim(2);
  for (int l = 0; l < 4; ++l) {
    const std::size_t f = std::size_t{1} << l;
    if (H % f != 0 || W % f != 0) throw PipelineError("node P" + std::to_string(l + 2) + "I: P2I extents not divisible by " + std::to_string(f));
    check_level(t.value(inputs[static_cast<std::size_t>(l)]), l + 2, width, H / f, W / f);
  }

  PipelineNodes n;
  n.input = inputs;
  auto slots = [](int level, std::initializer_list<int> branches) {
    std::vector<std::size_t> s;
    for (int b : branches) s.push_back(FusionWeights::slot(level, b));
    return s;
  };
  auto refine = [&](Var x, const BraVars& bra, const RoutingResult* frozen, std::optional<RoutingResult>& routing) {
    if (!p.attention_fusion_enabled) return x;
    ++n.ba_invocations;
    BaOptions o{opt.tie_break, frozen, opt.macs};
    BaResult r = ba_forward(x, bra, o);
    routing = std::move(r.routing);
    return r.output;
  };
  const auto& [P2I, P3I, P4I, P5I] = inputs;

  n.p4f = fuse({P4I, resize(P5I, ResizeDirection::up2)}, p.fusion, slots(4, {1, 2}), p.epsilon);
  n.a4 = refine(n.p4f, p.bra4, opt.frozen_routing4, n.routing4);
  n.p3f = fuse({P3I, resize(n.a4, ResizeDirection::up2)}, p.fusion, slots(3, {1, 2}), p.epsilon);
  n.a3 = refine(n.p3f, p.bra3, opt.frozen_routing3, n.routing3);
  n.output[0] = fuse({P2I, resize(n.a3, ResizeDirection::up2)}, p.fusion, slots(2, {1, 2}), p.epsilon);
  n.output[1] = fuse({P3I, n.a3, resize(n.output[0], ResizeDirection::down2)}, p.fusion, slots(3, {3, 4, 5}), p.epsilon);
  n.output[2] = fuse({P4I, n.a4, resize(n.output[1], ResizeDirection::down2)}, p.fusion, slots(4, {3, 4, 5}), p.epsilon);
  n.output[3] = fuse({P5I, resize(n.output[2], ResizeDirection::down2)}, p.fusion, slots(5, {1, 2}), p.epsilon);
  return n;
}

/// Backbone maps C2..C5 -> CFE (or the plain 1x1 projection) -> fusion DAG.
inline PipelineNodes c_afbifpn_forward(const std::array<Var, 4>& backbone, const PipelineVars& p,
                                       const PipelineOptions& opt = {}) {
  std::array<Var, 4> inputs;
  for (std::size_t l = 0; l < 4; ++l) {
    const Tensor& c = backbone[l].tape->value(backbone[l]);
    if (c.rank() != 3 || c.dim(0) != p.cfe[l].in_channels) {
      throw PipelineError("backbone C" + std::to_string(l + 2) + " has dims " + to_string(c.dims()) +
                          ", parameters expect " + std::to_string(p.cfe[l].in_channels) + " channels");
    }
    inputs[l] = p.cfe_enabled ? cfe_forward(backbone[l], p.cfe[l]) : conv2d(backbone[l], p.cfe[l].residual);
  }
  return afbifpn_forward(inputs, p, opt);
}

}  // namespace ad

// --- value-level entry points ----------------------------------------------------------------

struct PipelineRun {
  PyramidLevels levels;  // stages I, F and O
  int ba_invocations = 0;
  MacCounts macs;
  std::optional<RoutingResult> routing4, routing3;
};

namespace detail {

inline PipelineRun collect(const Tape& t, const ad::PipelineNodes& n, const MacCounts& macs) {
  PipelineRun r;
  for (int l = 0; l < 4; ++l) {
    r.levels.set(l + 2, Stage::input, t.value(n.input[static_cast<std::size_t>(l)]));
    r.levels.set(l + 2, Stage::output, t.value(n.output[static_cast<std::size_t>(l)]));
  }
  r.levels.set(4, Stage::intermediate, t.value(n.p4f));
  r.levels.set(3, Stage::intermediate, t.value(n.p3f));
  r.ba_invocations = n.ba_invocations;
  r.macs = macs;
  r.routing4 = n.routing4;
  r.routing3 = n.routing3;
  return r;
}

}  // namespace detail

inline PipelineRun afbifpn_forward(const PyramidLevels& inputs, const PipelineParams& params, TieBreak tie_break = TieBreak::ascending_id) {
  Tape t;
  std::array<Var, 4> in;
  for (int l = 0; l < 4; ++l) in[static_cast<std::size_t>(l)] = t.constant(inputs.get(l + 2, Stage::input));
  MacCounts macs;
  auto nodes = ad::afbifpn_forward(in, ad::bind(t, params, false), {tie_break, nullptr, nullptr, &macs});
  return detail::collect(t, nodes, macs);
}

inline PipelineRun c_afbifpn_forward(const std::array<Tensor, 4>& backbone, const PipelineParams& params,
                                     TieBreak tie_break = TieBreak::ascending_id) {
  Tape t;
  std::array<Var, 4> in;
  for (std::size_t l = 0; l < 4; ++l) in[l] = t.constant(backbone[l]);
  MacCounts macs;
  auto nodes = ad::c_afbifpn_forward(in, ad::bind(t, params, false), {tie_break, nullptr, nullptr, &macs});
  return detail::collect(t, nodes, macs);
}

}  // namespace cafbifpn
