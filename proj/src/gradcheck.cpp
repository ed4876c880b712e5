#include "anapred/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include <json.hpp>

#include "anapred/loss.hpp"

namespace anapred {

namespace {

using nlohmann::ordered_json;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central difference at two step sizes; a probe only counts when both agree.
struct Probe {
  double value = 0;
  bool reliable = false;
};

Probe probe(const std::function<double(double)>& eval_at, double x0) {
  const double e1 = 1e-6, e2 = 1e-7;
  double n1 = (eval_at(x0 + e1) - eval_at(x0 - e1)) / (2 * e1);
  double n2 = (eval_at(x0 + e2) - eval_at(x0 - e2)) / (2 * e2);
  return {n1, rel_err(n1, n2) <= 1e-5};
}

void finish_row(GradCheckRow& row, double tol) {
  row.pass =
      row.checked > 0 && row.worst_rel <= tol && row.checked >= 3 * row.skipped;
}

Mat<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                          double lo, double hi) {
  Mat<double> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

Mat<double> random_mask(Rng& rng, Eigen::Index cols, double fill) {
  Mat<double> m(1, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    m(0, j) = rng.uniform() < fill ? 1.0 : 0.0;
  return m;
}

}  // namespace

GradCheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                              int min_params, double tol,
                              const std::string& corrupt_group) {
  cfg.validate();
  static const ParamGroup kGroups[] = {ParamGroup::Embedding,
                                       ParamGroup::Attention,
                                       ParamGroup::Bias,
                                       ParamGroup::Norm,
                                       ParamGroup::Decoder,
                                       ParamGroup::Head};
  if (!corrupt_group.empty()) {
    bool known = false;
    for (ParamGroup g : kGroups) known = known || group_name(g) == corrupt_group;
    if (!known)
      throw ConfigError("unknown parameter group: " + corrupt_group);
  }

  GradCheckReport rep;
  rep.tolerance = tol;

  // -------------------------------------------------------------------------
  // Model parameters against the full composite objective.

  const Grid3 grid = cfg.input_shape;
  const Eigen::Index v = grid.count();
  Rng data_rng(Rng::derive(seed, 11));
  Mat<double> x = random_matrix(data_rng, cfg.in_channels, v, -0.5, 0.5);
  Mat<double> bi = random_matrix(data_rng, 1, v, -0.8, 0.8);
  Mat<double> bp = random_mask(data_rng, v, 0.25);
  Mat<double> bn = random_mask(data_rng, v, 0.25);
  Mat<double> ti = random_matrix(data_rng, 1, v, -0.8, 0.8);
  Mat<double> tp = random_mask(data_rng, v, 0.25);
  Mat<double> tn = random_mask(data_rng, v, 0.25);
  LossWeights weights;

  // The standard initialization zeroes the deformation head, which would
  // leave every upstream gradient identically zero; jitter all parameters so
  // the probe exercises real signal paths.
  ParamStore<double> params = init_params<double>(cfg, Rng::derive(seed, 1));
  Rng jitter(Rng::derive(seed, 2));
  for (Eigen::Index i = 0; i < params.flat.size(); ++i)
    params.flat[i] += 0.02 * jitter.normal();

  PlanCache plans;
  auto model_loss = [&]() {
    Graph<double> g;
    Var xv = g.input(x);
    ForwardResult<double> fr = build_forward(g, cfg, params, xv, plans);
    auto nodes =
        composite_loss_nodes(g, g.input(bi), g.input(bp), g.input(bn),
                             g.input(ti), g.input(tp), g.input(tn), fr.dvf,
                             grid, weights);
    return g.val(nodes.total)(0, 0);
  };

  Vec<double> analytic;
  {
    Graph<double> g;
    Var xv = g.input(x);
    ForwardResult<double> fr = build_forward(g, cfg, params, xv, plans);
    auto nodes =
        composite_loss_nodes(g, g.input(bi), g.input(bp), g.input(bn),
                             g.input(ti), g.input(tp), g.input(tn), fr.dvf,
                             grid, weights);
    g.backward(nodes.total);
    analytic = collect_param_grads(g, params, fr.param_vars);
  }

  auto entry_name = [&](std::int64_t idx) {
    for (const auto& info : params.infos)
      if (idx >= info.offset && idx < info.offset + info.count())
        return info.name + "[" + std::to_string(idx - info.offset) + "]";
    return std::string("?");
  };

  const int per_group = std::max(1, min_params / 6 + 7);
  bool corrupt_pending = !corrupt_group.empty();
  for (std::size_t gi = 0; gi < std::size(kGroups); ++gi) {
    ParamGroup group = kGroups[gi];
    GradCheckRow row;
    row.name = group_name(group);

    std::vector<std::int64_t> pool;
    for (const auto& info : params.infos)
      if (info.group == group)
        for (std::int64_t k = 0; k < info.count(); ++k)
          pool.push_back(info.offset + k);

    Rng pick(Rng::derive(seed, 20 + gi));
    std::set<std::int64_t> chosen;
    std::size_t want = std::min<std::size_t>(pool.size(), per_group);
    while (chosen.size() < want)
      chosen.insert(pool[pick.uniform_int(std::uint64_t(pool.size()))]);

    for (std::int64_t idx : chosen) {
      const double orig = params.flat[idx];
      Probe p = probe(
          [&](double val) {
            params.flat[idx] = val;
            double out = model_loss();
            params.flat[idx] = orig;
            return out;
          },
          orig);
      if (!p.reliable) {
        ++row.skipped;
        continue;
      }
      double a = analytic[idx];
      if (corrupt_pending && row.name == corrupt_group) {
        a += 1.0;
        corrupt_pending = false;
      }
      double r = rel_err(a, p.value);
      ++row.checked;
      if (r > row.worst_rel) {
        row.worst_rel = r;
        row.worst_entry = entry_name(idx);
      }
    }
    finish_row(row, tol);
    rep.params_checked += row.checked;
    rep.groups.push_back(std::move(row));
  }

  // -------------------------------------------------------------------------
  // Deformation-field inputs through the warp and each loss term.

  const Grid3 gs{6, 5, 4};
  const Eigen::Index vs = gs.count();
  Rng field_rng(Rng::derive(seed, 12));
  Mat<double> phi0 = random_matrix(field_rng, 3, vs, -1.2, 1.2);
  Mat<double> fbi = random_matrix(field_rng, 1, vs, -0.8, 0.8);
  Mat<double> fbp = random_mask(field_rng, vs, 0.3);
  Mat<double> fbn = random_mask(field_rng, vs, 0.3);
  Mat<double> fti = random_matrix(field_rng, 1, vs, -0.8, 0.8);
  Mat<double> ftp = random_mask(field_rng, vs, 0.3);
  Mat<double> ftn = random_mask(field_rng, vs, 0.3);
  Mat<double> proj = random_matrix(field_rng, 1, vs, -1.0, 1.0);

  using FieldBuilder = std::function<Var(Graph<double>&, Var)>;
  const std::vector<std::pair<std::string, FieldBuilder>> components = {
      {"warp",
       [&](Graph<double>& g, Var phi) {
         Var warped = warp_trilinear(g, g.input(fbi), phi, gs);
         return g.dot_all(warped, g.input(proj));
       }},
      {"ssim",
       [&](Graph<double>& g, Var phi) {
         Var warped = warp_trilinear(g, g.input(fbi), phi, gs);
         return ssim_loss_node(g, warped, g.input(fti), gs);
       }},
      {"dice_gtvp",
       [&](Graph<double>& g, Var phi) {
         Var warped = warp_trilinear(g, g.input(fbp), phi, gs);
         return soft_dice_loss_node(g, warped, g.input(ftp));
       }},
      {"dice_gtvn",
       [&](Graph<double>& g, Var phi) {
         Var warped = warp_trilinear(g, g.input(fbn), phi, gs);
         return soft_dice_loss_node(g, warped, g.input(ftn));
       }},
      {"diffusion",
       [&](Graph<double>& g, Var phi) {
         return diffusion_penalty(g, phi, gs);
       }},
      {"total", [&](Graph<double>& g, Var phi) {
         return composite_loss_nodes(g, g.input(fbi), g.input(fbp),
                                     g.input(fbn), g.input(fti), g.input(ftp),
                                     g.input(ftn), phi, gs, weights)
             .total;
       }}};

  for (std::size_t ci = 0; ci < components.size(); ++ci) {
    const auto& [name, build] = components[ci];
    GradCheckRow row;
    row.name = name;

    Mat<double> grad;
    {
      Graph<double> g;
      Var phi = g.param(phi0);
      Var loss = build(g, phi);
      g.backward(loss);
      grad = g.grad(phi);
    }
    auto eval_at = [&](Eigen::Index r, Eigen::Index c, double val) {
      Mat<double> p = phi0;
      p(r, c) = val;
      Graph<double> g;
      return g.val(build(g, g.input(p)))(0, 0);
    };

    Rng pick(Rng::derive(seed, 40 + ci));
    std::set<std::int64_t> chosen;
    while (chosen.size() < 60)
      chosen.insert(std::int64_t(pick.uniform_int(std::uint64_t(3 * vs))));
    for (std::int64_t lin : chosen) {
      Eigen::Index r = lin % 3, c = lin / 3;
      Probe p = probe([&](double val) { return eval_at(r, c, val); },
                      phi0(r, c));
      if (!p.reliable) {
        ++row.skipped;
        continue;
      }
      double rerr = rel_err(grad(r, c), p.value);
      ++row.checked;
      if (rerr > row.worst_rel) {
        row.worst_rel = rerr;
        row.worst_entry =
            "phi(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
    finish_row(row, tol);
    rep.field.push_back(std::move(row));
  }

  rep.pass = rep.params_checked >= min_params;
  for (const auto& row : rep.groups)
    if (!row.pass && rep.failure.empty()) rep.failure = row.name;
  for (const auto& row : rep.field)
    if (!row.pass && rep.failure.empty()) rep.failure = row.name;
  if (rep.params_checked < min_params && rep.failure.empty())
    rep.failure = "sample-count";
  for (const auto& row : rep.groups) rep.pass = rep.pass && row.pass;
  for (const auto& row : rep.field) rep.pass = rep.pass && row.pass;
  return rep;
}

std::string gradcheck_report_json(const GradCheckReport& r) {
  ordered_json j;
  j["tolerance"] = r.tolerance;
  j["params_checked"] = r.params_checked;
  j["pass"] = r.pass;
  if (!r.failure.empty()) j["failure"] = r.failure;
  auto rows = [](const std::vector<GradCheckRow>& list) {
    ordered_json out = ordered_json::array();
    for (const auto& row : list)
      out.push_back({{"name", row.name},
                     {"worst_rel", row.worst_rel},
                     {"worst_entry", row.worst_entry},
                     {"checked", row.checked},
                     {"skipped", row.skipped},
                     {"pass", row.pass}});
    return out;
  };
  j["groups"] = rows(r.groups);
  j["field"] = rows(r.field);
  return j.dump();
}

}  // namespace anapred
