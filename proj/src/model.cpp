#include "anapred/model.hpp"

namespace anapred {

std::string encoder_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::SwinHierarchical: return "swin";
    case EncoderKind::PlainViT: return "vit";
    case EncoderKind::ConvPyramid: return "conv";
  }
  throw std::runtime_error("bad encoder kind");
}

EncoderKind encoder_from_name(const std::string& s) {
  if (s == "swin") return EncoderKind::SwinHierarchical;
  if (s == "vit") return EncoderKind::PlainViT;
  if (s == "conv") return EncoderKind::ConvPyramid;
  throw ConfigError("unknown encoder kind: " + s +
                    " (expected swin, vit or conv)");
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Embedding: return "embedding";
    case ParamGroup::Attention: return "attention";
    case ParamGroup::Bias: return "bias";
    case ParamGroup::Norm: return "norm";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::Head: return "head";
  }
  throw std::runtime_error("bad parameter group");
}

namespace {

bool power_of_two(int v) { return v >= 1 && (v & (v - 1)) == 0; }

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (dvf_channels != 3) throw ConfigError("dvf_channels must be 3");
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  if (depths.empty() || depths.size() != heads.size())
    throw ConfigError("depths and heads must be non-empty and equal length");
  for (int d : depths)
    if (d < 1) throw ConfigError("stage depth must be positive");
  for (std::size_t s = 0; s < heads.size(); ++s) {
    if (heads[s] < 1) throw ConfigError("head count must be positive");
    if (stage_dim(int(s)) % heads[s] != 0)
      throw ConfigError("stage dim " + std::to_string(stage_dim(int(s))) +
                        " not divisible by heads " + std::to_string(heads[s]));
  }
  if (window.x < 1 || window.y < 1 || window.z < 1)
    throw ConfigError("window must be positive");
  if (!power_of_two(patch.x) || !power_of_two(patch.y) || !power_of_two(patch.z))
    throw ConfigError("patch axes must be powers of two, got " + patch.str());
  if (input_shape.x < 1 || input_shape.y < 1 || input_shape.z < 1)
    throw ConfigError("input shape must be positive");
  if (input_shape.x % patch.x || input_shape.y % patch.y ||
      input_shape.z % patch.z)
    throw ConfigError("input shape " + input_shape.str() +
                      " not divisible by patch " + patch.str());
}

std::vector<ParamInfo> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamInfo> out;
  std::int64_t offset = 0;
  auto add = [&](const std::string& name, ParamGroup grp, Eigen::Index r,
                 Eigen::Index c) {
    out.push_back({name, grp, r, c, offset});
    offset += std::int64_t(r) * c;
  };
  auto add_block = [&](const std::string& p, int dim, int heads, bool bias,
                       int bias_rows) {
    int hidden = int(std::lround(cfg.mlp_ratio * dim));
    add(p + ".norm1.g", ParamGroup::Norm, dim, 1);
    add(p + ".norm1.o", ParamGroup::Norm, dim, 1);
    add(p + ".qkv.w", ParamGroup::Attention, 3 * dim, dim);
    add(p + ".qkv.b", ParamGroup::Attention, 3 * dim, 1);
    if (bias) add(p + ".bias_table", ParamGroup::Bias, bias_rows, heads);
    add(p + ".proj.w", ParamGroup::Attention, dim, dim);
    add(p + ".proj.b", ParamGroup::Attention, dim, 1);
    add(p + ".norm2.g", ParamGroup::Norm, dim, 1);
    add(p + ".norm2.o", ParamGroup::Norm, dim, 1);
    add(p + ".fc1.w", ParamGroup::Attention, hidden, dim);
    add(p + ".fc1.b", ParamGroup::Attention, hidden, 1);
    add(p + ".fc2.w", ParamGroup::Attention, dim, hidden);
    add(p + ".fc2.b", ParamGroup::Attention, dim, 1);
  };
  auto add_conv = [&](const std::string& p, ParamGroup grp, int cin, int cout) {
    add(p + ".w", grp, cout, 27 * cin);
    add(p + ".b", grp, cout, 1);
  };

  int c0 = cfg.embed_dim;
  add("embed.proj.w", ParamGroup::Embedding, c0,
      Eigen::Index(cfg.in_channels) * cfg.patch.count());
  add("embed.proj.b", ParamGroup::Embedding, c0, 1);

  if (cfg.encoder_kind == EncoderKind::PlainViT) {
    add("embed.pos", ParamGroup::Embedding, c0, cfg.token_grid().count());
    int blocks = 0;
    for (int d : cfg.depths) blocks += d;
    for (int b = 0; b < blocks; ++b)
      add_block("enc.blk" + std::to_string(b), c0, cfg.heads[0], false, 0);
    for (int s = 0; s < cfg.stages(); ++s) {
      std::string p = "enc.regrid" + std::to_string(s);
      add(p + ".w", ParamGroup::Embedding, cfg.stage_dim(s), c0);
      add(p + ".b", ParamGroup::Embedding, cfg.stage_dim(s), 1);
    }
  } else {
    int bias_rows = relative_bias_rows(cfg.window);
    for (int s = 0; s < cfg.stages(); ++s) {
      std::string sp = "enc.s" + std::to_string(s);
      int dim = cfg.stage_dim(s);
      if (s > 0) {
        add(sp + ".merge.w", ParamGroup::Embedding, dim, 4 * dim);
        add(sp + ".merge.b", ParamGroup::Embedding, dim, 1);
      }
      if (cfg.encoder_kind == EncoderKind::ConvPyramid) {
        add_conv(sp + ".conv1", ParamGroup::Attention, dim, dim);
        add_conv(sp + ".conv2", ParamGroup::Attention, dim, dim);
      } else {
        for (int b = 0; b < cfg.depths[std::size_t(s)]; ++b)
          add_block(sp + ".b" + std::to_string(b), dim,
                    cfg.heads[std::size_t(s)], true, bias_rows);
      }
    }
  }

  auto ladder = cfg.ladder_grids();
  for (std::size_t k = 0; k < ladder.size(); ++k)
    add_conv("dec.in" + std::to_string(k) + ".conv", ParamGroup::Decoder,
             cfg.in_channels, cfg.ladder_dim(int(k)));

  for (int s = cfg.stages() - 2; s >= 0; --s) {
    std::string p = "dec.s" + std::to_string(s);
    int dim = cfg.stage_dim(s);
    add_conv(p + ".conv1", ParamGroup::Decoder, 3 * dim, dim);
    add_conv(p + ".conv2", ParamGroup::Decoder, dim, dim);
  }
  int prev = c0;
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    std::string p = "dec.l" + std::to_string(k);
    int ch = cfg.ladder_dim(int(k));
    add_conv(p + ".conv1", ParamGroup::Decoder, prev + ch, ch);
    add_conv(p + ".conv2", ParamGroup::Decoder, ch, ch);
    prev = ch;
  }
  add_conv("dec.head", ParamGroup::Head, prev, cfg.dvf_channels);
  return out;
}

std::int64_t param_count(const std::vector<ParamInfo>& layout) {
  std::int64_t n = 0;
  for (const auto& i : layout) n += i.count();
  return n;
}

ConvMapsPtr PlanCache::conv_maps(Grid3 g) {
  auto key = std::array<int, 3>{g.x, g.y, g.z};
  auto it = conv.find(key);
  if (it == conv.end()) it = conv.emplace(key, anapred::conv_tap_maps(g)).first;
  return it->second;
}

std::shared_ptr<const ResizePlan> PlanCache::resize_to(Grid3 in, Grid3 out) {
  auto key = std::array<int, 6>{in.x, in.y, in.z, out.x, out.y, out.z};
  auto it = resize.find(key);
  if (it == resize.end())
    it = resize.emplace(key, std::make_shared<ResizePlan>(resize_plan(in, out)))
             .first;
  return it->second;
}

std::shared_ptr<const WindowPlan> PlanCache::window_plan(Grid3 tokens,
                                                         Grid3 win,
                                                         Grid3 shift) {
  auto key = std::array<int, 9>{tokens.x, tokens.y, tokens.z, win.x, win.y,
                                win.z,    shift.x,  shift.y,  shift.z};
  auto it = window.find(key);
  if (it == window.end())
    it = window
             .emplace(key, std::make_shared<WindowPlan>(
                               window_partition_plan(tokens, win, shift)))
             .first;
  return it->second;
}

std::shared_ptr<const std::vector<std::int32_t>> PlanCache::bias_index(
    Grid3 win) {
  auto key = std::array<int, 3>{win.x, win.y, win.z};
  auto it = rel_idx.find(key);
  if (it == rel_idx.end())
    it = rel_idx
             .emplace(key, std::make_shared<std::vector<std::int32_t>>(
                               relative_bias_index(win)))
             .first;
  return it->second;
}

std::shared_ptr<const std::vector<std::int32_t>> PlanCache::zero_index(int wl) {
  auto it = flat_idx.find(wl);
  if (it == flat_idx.end())
    it = flat_idx
             .emplace(wl, std::make_shared<std::vector<std::int32_t>>(
                              std::size_t(wl) * std::size_t(wl), 0))
             .first;
  return it->second;
}

const std::vector<IndexMapPtr>& PlanCache::patch_offsets(Grid3 vol,
                                                         Grid3 patch) {
  auto key = std::array<int, 6>{vol.x, vol.y, vol.z, patch.x, patch.y, patch.z};
  auto it = patch_maps.find(key);
  if (it == patch_maps.end()) {
    std::vector<IndexMapPtr> maps;
    for (int oz = 0; oz < patch.z; ++oz)
      for (int oy = 0; oy < patch.y; ++oy)
        for (int ox = 0; ox < patch.x; ++ox)
          maps.push_back(patch_offset_map(vol, patch, ox, oy, oz));
    it = patch_maps.emplace(key, std::move(maps)).first;
  }
  return it->second;
}

const std::vector<IndexMapPtr>& PlanCache::merge_offsets(Grid3 tokens) {
  auto key = std::array<int, 3>{tokens.x, tokens.y, tokens.z};
  auto it = merge_maps.find(key);
  if (it == merge_maps.end()) {
    std::vector<IndexMapPtr> maps;
    for (int oz = 0; oz < 2; ++oz)
      for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox)
          maps.push_back(merge_offset_map(tokens, ox, oy, oz));
    it = merge_maps.emplace(key, std::move(maps)).first;
  }
  return it->second;
}

}  // namespace anapred
