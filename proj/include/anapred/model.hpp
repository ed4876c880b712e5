#pragma once

#include <cstring>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "anapred/graph_spatial.hpp"

namespace anapred {

enum class EncoderKind { SwinHierarchical, PlainViT, ConvPyramid };

std::string encoder_name(EncoderKind k);
EncoderKind encoder_from_name(const std::string& s);

struct ModelConfig {
  int in_channels = 7;
  Grid3 input_shape{128, 128, 32};
  Grid3 patch{4, 4, 2};
  int embed_dim = 96;
  std::vector<int> depths{2, 2, 4, 2};
  std::vector<int> heads{4, 4, 8, 8};
  Grid3 window{5, 5, 5};
  double mlp_ratio = 4.0;
  EncoderKind encoder_kind = EncoderKind::SwinHierarchical;
  int dvf_channels = 3;

  int stages() const { return int(depths.size()); }
  int stage_dim(int s) const { return embed_dim << s; }
  Grid3 token_grid() const {
    return {input_shape.x / patch.x, input_shape.y / patch.y,
            input_shape.z / patch.z};
  }
  // Token-grid resolution of every stage (halved per merge, ceil at odd).
  std::vector<Grid3> stage_grids() const {
    std::vector<Grid3> gs{token_grid()};
    for (int s = 1; s < stages(); ++s) gs.push_back(merged_grid(gs.back()));
    return gs;
  }
  // Upsampling ladder from token grid to full resolution: per-axis factor 2
  // per level until the patch factor is exhausted (patch axes must be powers
  // of two). Returned grids exclude the token grid, end at full resolution.
  std::vector<Grid3> ladder_grids() const {
    std::vector<Grid3> out;
    Grid3 g = token_grid();
    while (!(g == input_shape)) {
      g = {std::min(g.x * 2, input_shape.x), std::min(g.y * 2, input_shape.y),
           std::min(g.z * 2, input_shape.z)};
      out.push_back(g);
    }
    return out;
  }
  // Decoder conv width at ladder level k (0 = first level above token grid).
  int ladder_dim(int k) const { return std::max(8, embed_dim >> (k + 1)); }

  void validate() const;  // throws ConfigError on violated invariants
};

// ---------------------------------------------------------------------------
// Parameters

enum class ParamGroup { Embedding, Attention, Bias, Norm, Decoder, Head };

std::string group_name(ParamGroup g);

struct ParamInfo {
  std::string name;
  ParamGroup group;
  Eigen::Index rows = 0, cols = 0;
  std::int64_t offset = 0;

  std::int64_t count() const { return std::int64_t(rows) * cols; }
};

// Enumerates every parameter of the configured architecture, in the stable
// order used by flat vectors, checkpoints and the optimizer.
std::vector<ParamInfo> param_layout(const ModelConfig& cfg);

std::int64_t param_count(const std::vector<ParamInfo>& layout);

template <typename T>
struct ParamStore {
  std::vector<ParamInfo> infos;
  std::unordered_map<std::string, std::size_t> by_name;
  Vec<T> flat;

  static ParamStore zeros(const ModelConfig& cfg) {
    ParamStore p;
    p.infos = param_layout(cfg);
    for (std::size_t i = 0; i < p.infos.size(); ++i)
      p.by_name.emplace(p.infos[i].name, i);
    p.flat = Vec<T>::Zero(param_count(p.infos));
    return p;
  }

  Eigen::Map<Mat<T>> view(std::size_t i) {
    return {flat.data() + infos[i].offset, infos[i].rows, infos[i].cols};
  }
  Eigen::Map<const Mat<T>> view(std::size_t i) const {
    return {flat.data() + infos[i].offset, infos[i].rows, infos[i].cols};
  }
  Eigen::Map<const Mat<T>> view(const std::string& name) const {
    return view(by_name.at(name));
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    out.infos = infos;
    out.by_name = by_name;
    out.flat = flat.template cast<U>();
    return out;
  }
};

// Deterministic initialization: truncated-scale normals for projections,
// He-style for convs, identity norms, zero biases and zero DVF head.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward pass

// Long-lived cache of index maps and plans keyed by grid; not thread-safe,
// use one per worker.
struct PlanCache {
  std::map<std::array<int, 3>, ConvMapsPtr> conv;
  std::map<std::array<int, 6>, std::shared_ptr<const ResizePlan>> resize;
  std::map<std::array<int, 9>, std::shared_ptr<const WindowPlan>> window;
  std::map<std::array<int, 3>, std::shared_ptr<const std::vector<std::int32_t>>>
      rel_idx;
  std::map<int, std::shared_ptr<const std::vector<std::int32_t>>> flat_idx;
  std::map<std::array<int, 6>, std::vector<IndexMapPtr>> patch_maps;
  std::map<std::array<int, 3>, std::vector<IndexMapPtr>> merge_maps;

  ConvMapsPtr conv_maps(Grid3 g);
  std::shared_ptr<const ResizePlan> resize_to(Grid3 in, Grid3 out);
  std::shared_ptr<const WindowPlan> window_plan(Grid3 tokens, Grid3 win,
                                                Grid3 shift);
  std::shared_ptr<const std::vector<std::int32_t>> bias_index(Grid3 win);
  // all-zero index for bias-free attention (table row 0 everywhere)
  std::shared_ptr<const std::vector<std::int32_t>> zero_index(int wl);
  const std::vector<IndexMapPtr>& patch_offsets(Grid3 vol, Grid3 patch);
  const std::vector<IndexMapPtr>& merge_offsets(Grid3 tokens);
};

template <typename T>
struct ForwardResult {
  Var dvf;                      // dvf_channels × V of the input grid
  std::vector<Var> pyramid;     // stage outputs, dims C·2^s
  std::vector<Var> input_convs; // ladder-aligned input conv features
  std::unordered_map<std::string, Var> param_vars;
};

template <typename T>
ForwardResult<T> build_forward(Graph<T>& g, const ModelConfig& cfg,
                               const ParamStore<T>& params, Var x,
                               PlanCache& plans);

// Flattens per-parameter gradients back into layout order. Parameters that
// did not receive gradient (untouched branches) contribute zeros.
template <typename T>
Vec<T> collect_param_grads(const Graph<T>& g, const ParamStore<T>& params,
                           const std::unordered_map<std::string, Var>& vars) {
  Vec<T> out = Vec<T>::Zero(params.flat.size());
  for (const auto& info : params.infos) {
    auto it = vars.find(info.name);
    if (it == vars.end()) continue;
    const Mat<T>& gr = g.grad(it->second);
    if (gr.size() == 0) continue;
    Eigen::Map<Mat<T>>(out.data() + info.offset, info.rows, info.cols) = gr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// implementation

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<T> p = ParamStore<T>::zeros(cfg);
  for (std::size_t i = 0; i < p.infos.size(); ++i) {
    const ParamInfo& info = p.infos[i];
    Rng rng(Rng::derive(seed, i));
    auto m = p.view(i);
    auto tail = [&](const char* s) {
      return info.name.size() >= std::strlen(s) &&
             info.name.compare(info.name.size() - std::strlen(s),
                               std::string::npos, s) == 0;
    };
    if (info.group == ParamGroup::Head || info.group == ParamGroup::Bias) {
      m.setZero();
    } else if (tail(".b")) {
      m.setZero();
    } else if (tail("norm.g") || tail("norm1.g") || tail("norm2.g")) {
      m.setOnes();
    } else if (tail("norm.o") || tail("norm1.o") || tail("norm2.o")) {
      m.setZero();
    } else if (info.name.find("conv") != std::string::npos ||
               info.name.find("down") != std::string::npos) {
      T std_he = T(std::sqrt(2.0 / double(info.cols)));
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          m(r, c) = T(rng.normal()) * std_he;
    } else {
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          m(r, c) = T(rng.normal()) * T(0.02);
    }
  }
  return p;
}

namespace detail {

template <typename T>
struct BuildCtx {
  Graph<T>& g;
  const ModelConfig& cfg;
  const ParamStore<T>& store;
  PlanCache& plans;
  std::unordered_map<std::string, Var> vars;

  Var param(const std::string& name) {
    auto hit = vars.find(name);
    if (hit != vars.end()) return hit->second;
    auto it = store.by_name.find(name);
    if (it == store.by_name.end())
      throw std::runtime_error("unknown parameter: " + name);
    Var v = g.param(Mat<T>(store.view(it->second)));
    vars.emplace(name, v);
    return v;
  }
};

// Flatten non-overlapping patches and project: volume (Cin × V) to tokens
// (C × L).
template <typename T>
Var patch_embed(BuildCtx<T>& ctx, Var x, Grid3 vol, Grid3 patch,
                const std::string& prefix) {
  const auto& offsets = ctx.plans.patch_offsets(vol, patch);
  std::vector<Var> pieces;
  pieces.reserve(offsets.size());
  for (const auto& m : offsets) pieces.push_back(ctx.g.gather(x, m));
  Var flat = ctx.g.concat_rows(pieces);
  return ctx.g.linear(ctx.param(prefix + ".w"), flat, ctx.param(prefix + ".b"));
}

// 2x2x2 neighbor concat + linear projection to double width.
template <typename T>
Var patch_merge(BuildCtx<T>& ctx, Var tokens, Grid3 grid,
                const std::string& prefix) {
  const auto& offsets = ctx.plans.merge_offsets(grid);
  std::vector<Var> pieces;
  pieces.reserve(8);
  for (const auto& m : offsets) pieces.push_back(ctx.g.gather(tokens, m));
  Var cat = ctx.g.concat_rows(pieces);
  return ctx.g.linear(ctx.param(prefix + ".w"), cat, ctx.param(prefix + ".b"));
}

template <typename T>
Var attention_block(BuildCtx<T>& ctx, Var x, Grid3 grid, int heads, Grid3 win,
                    Grid3 shift, bool rel_bias, const std::string& prefix) {
  Graph<T>& g = ctx.g;
  Eigen::Index dim = g.val(x).rows();

  Var h = g.layer_norm(x, ctx.param(prefix + ".norm1.g"),
                       ctx.param(prefix + ".norm1.o"));
  auto plan = ctx.plans.window_plan(grid, win, shift);
  Var win_tokens = g.gather(h, plan->partition);
  Var qkv = g.linear(ctx.param(prefix + ".qkv.w"), win_tokens,
                     ctx.param(prefix + ".qkv.b"));
  Var q = g.slice_rows(qkv, 0, dim);
  Var k = g.slice_rows(qkv, dim, dim);
  Var v = g.slice_rows(qkv, 2 * dim, dim);

  auto key_pad = std::make_shared<std::vector<std::uint8_t>>();
  key_pad->reserve(plan->partition->size());
  for (auto idx : *plan->partition) key_pad->push_back(idx < 0 ? 1 : 0);

  Var bias = rel_bias ? ctx.param(prefix + ".bias_table")
                      : g.input(Mat<T>::Zero(1, heads));
  auto ridx = rel_bias ? ctx.plans.bias_index(win)
                       : ctx.plans.zero_index(plan->window_len);
  Var attn = window_attention(g, q, k, v, bias, ridx, key_pad,
                              plan->n_windows, plan->window_len, heads);
  Var proj = g.linear(ctx.param(prefix + ".proj.w"), attn,
                      ctx.param(prefix + ".proj.b"));
  Var back = g.gather(proj, plan->reverse);
  x = g.add(x, back);

  Var h2 = g.layer_norm(x, ctx.param(prefix + ".norm2.g"),
                        ctx.param(prefix + ".norm2.o"));
  Var mid = g.gelu(g.linear(ctx.param(prefix + ".fc1.w"), h2,
                            ctx.param(prefix + ".fc1.b")));
  Var out = g.linear(ctx.param(prefix + ".fc2.w"), mid,
                     ctx.param(prefix + ".fc2.b"));
  return g.add(x, out);
}

template <typename T>
Var conv_leaky(BuildCtx<T>& ctx, Var x, Grid3 grid, const std::string& prefix) {
  Var y = conv3(ctx.g, x, ctx.param(prefix + ".w"), ctx.param(prefix + ".b"),
                ctx.plans.conv_maps(grid));
  return ctx.g.leaky_relu(y, T(0.01));
}

template <typename T>
std::vector<Var> encode_pyramid(BuildCtx<T>& ctx, Var x) {
  const ModelConfig& cfg = ctx.cfg;
  auto grids = cfg.stage_grids();
  std::vector<Var> pyramid;

  if (cfg.encoder_kind == EncoderKind::PlainViT) {
    Var tokens = patch_embed(ctx, x, cfg.input_shape, cfg.patch, "embed.proj");
    tokens = ctx.g.add(tokens, ctx.param("embed.pos"));
    int blk = 0;
    for (int s = 0; s < cfg.stages(); ++s)
      for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b, ++blk)
        tokens = attention_block(ctx, tokens, grids[0], cfg.heads[0],
                                 /*win=*/grids[0], /*shift=*/{0, 0, 0},
                                 /*rel_bias=*/false,
                                 "enc.blk" + std::to_string(blk));
    for (int s = 0; s < cfg.stages(); ++s) {
      Var t = tokens;
      if (!(grids[std::size_t(s)] == grids[0]))
        t = resize_trilinear(ctx.g, t,
                             ctx.plans.resize_to(grids[0], grids[std::size_t(s)]));
      std::string pre = "enc.regrid" + std::to_string(s);
      pyramid.push_back(
          ctx.g.linear(ctx.param(pre + ".w"), t, ctx.param(pre + ".b")));
    }
    return pyramid;
  }

  Var tokens = patch_embed(ctx, x, cfg.input_shape, cfg.patch, "embed.proj");
  for (int s = 0; s < cfg.stages(); ++s) {
    std::string sp = "enc.s" + std::to_string(s);
    if (s > 0)
      tokens = patch_merge(ctx, tokens, grids[std::size_t(s - 1)], sp + ".merge");
    Grid3 grid = grids[std::size_t(s)];

    if (cfg.encoder_kind == EncoderKind::ConvPyramid) {
      tokens = conv_leaky(ctx, tokens, grid, sp + ".conv1");
      tokens = conv_leaky(ctx, tokens, grid, sp + ".conv2");
    } else {
      for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b) {
        bool shifted = (b % 2) == 1;
        Grid3 shift = shifted ? Grid3{cfg.window.x / 2, cfg.window.y / 2,
                                      cfg.window.z / 2}
                              : Grid3{0, 0, 0};
        tokens = attention_block(ctx, tokens, grid, cfg.heads[std::size_t(s)],
                                 cfg.window, shift, /*rel_bias=*/true,
                                 sp + ".b" + std::to_string(b));
      }
    }
    pyramid.push_back(tokens);
  }
  return pyramid;
}

template <typename T>
ForwardResult<T> decode(BuildCtx<T>& ctx, Var x,
                        const std::vector<Var>& pyramid) {
  const ModelConfig& cfg = ctx.cfg;
  Graph<T>& g = ctx.g;
  auto grids = cfg.stage_grids();
  auto ladder = cfg.ladder_grids();

  // Input conv features, one per ladder scale (the last is full resolution).
  std::vector<Var> input_convs(ladder.size());
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    Grid3 tgt = ladder[k];
    Var inp = x;
    if (!(tgt == cfg.input_shape)) {
      Grid3 f{cfg.input_shape.x / tgt.x, cfg.input_shape.y / tgt.y,
              cfg.input_shape.z / tgt.z};
      inp = avg_pool(g, x, cfg.input_shape, f);
    }
    input_convs[k] =
        conv_leaky(ctx, inp, tgt, "dec.in" + std::to_string(k) + ".conv");
  }

  // Stage levels: deepest to token grid.
  Var feat = pyramid.back();
  Grid3 cur = grids.back();
  for (int s = cfg.stages() - 2; s >= 0; --s) {
    Grid3 tgt = grids[std::size_t(s)];
    feat = resize_trilinear(g, feat, ctx.plans.resize_to(cur, tgt));
    feat = g.concat_rows({feat, pyramid[std::size_t(s)]});
    std::string pre = "dec.s" + std::to_string(s);
    feat = conv_leaky(ctx, feat, tgt, pre + ".conv1");
    feat = conv_leaky(ctx, feat, tgt, pre + ".conv2");
    cur = tgt;
  }

  // Ladder levels: token grid to full resolution with input-conv skips.
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    Grid3 tgt = ladder[k];
    feat = resize_trilinear(g, feat, ctx.plans.resize_to(cur, tgt));
    feat = g.concat_rows({feat, input_convs[k]});
    std::string pre = "dec.l" + std::to_string(k);
    feat = conv_leaky(ctx, feat, tgt, pre + ".conv1");
    feat = conv_leaky(ctx, feat, tgt, pre + ".conv2");
    cur = tgt;
  }

  Var dvf = conv3(g, feat, ctx.param("dec.head.w"), ctx.param("dec.head.b"),
                  ctx.plans.conv_maps(cfg.input_shape));

  ForwardResult<T> out;
  out.dvf = dvf;
  out.pyramid = pyramid;
  out.input_convs = std::move(input_convs);
  return out;
}

}  // namespace detail

template <typename T>
ForwardResult<T> build_forward(Graph<T>& g, const ModelConfig& cfg,
                               const ParamStore<T>& params, Var x,
                               PlanCache& plans) {
  cfg.validate();
  if (g.val(x).rows() != cfg.in_channels ||
      g.val(x).cols() != cfg.input_shape.count())
    throw std::runtime_error("forward input shape mismatch");
  detail::BuildCtx<T> ctx{g, cfg, params, plans, {}};
  auto pyramid = detail::encode_pyramid(ctx, x);
  ForwardResult<T> res = detail::decode(ctx, x, pyramid);
  res.param_vars = std::move(ctx.vars);
  return res;
}

}  // namespace anapred
