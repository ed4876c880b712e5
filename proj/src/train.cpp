#include "anapred/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

namespace anapred {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void write_exact(std::ofstream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

constexpr char kMagic[8] = {'A', 'N', 'A', 'P', 'C', 'K', 'P', 'T'};

}  // namespace

// ---------------------------------------------------------------------------
// Scheduler

PlateauResult plateau_update(PlateauState& s, double val_loss,
                             const TrainConfig& c) {
  PlateauResult r;
  if (val_loss < s.best - c.plateau_threshold) {
    s.best = val_loss;
    s.bad_epochs = 0;
    r.improved = true;
  } else if (++s.bad_epochs > c.plateau_patience) {
    s.lr = std::max(s.lr * c.plateau_factor, c.min_lr);
    s.bad_epochs = 0;
    r.reduced = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  ordered_json header;
  header["format_version"] = 1;
  header["model"] = model_config_to_json(c.model);
  header["seed"] = c.seed;
  header["epochs_done"] = c.epochs_done;
  header["adam_step"] = c.adam.step;
  header["scheduler"] = {{"lr", c.sched.lr},
                         {"best", std::isfinite(c.sched.best)
                                      ? ordered_json(c.sched.best)
                                      : ordered_json(nullptr)},
                         {"bad_epochs", c.sched.bad_epochs}};
  ordered_json arrays = ordered_json::array();
  for (const auto& info : c.params.infos)
    arrays.push_back(
        {{"name", info.name}, {"rows", info.rows}, {"cols", info.cols}});
  arrays.push_back(
      {{"name", "optimizer.m"}, {"rows", c.adam.m.size()}, {"cols", 1}});
  arrays.push_back(
      {{"name", "optimizer.v"}, {"rows", c.adam.v.size()}, {"cols", 1}});
  header["arrays"] = arrays;
  std::string htext = header.dump();

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw MissingInputError("cannot write checkpoint: " + tmp.string());
    write_exact(out, kMagic, 8);
    unsigned char lb[8];
    std::uint64_t len = htext.size();
    for (int i = 0; i < 8; ++i) lb[i] = (len >> (8 * i)) & 0xff;
    write_exact(out, lb, 8);
    write_exact(out, htext.data(), htext.size());
    write_exact(out, c.params.flat.data(),
                sizeof(float) * std::size_t(c.params.flat.size()));
    write_exact(out, c.adam.m.data(),
                sizeof(float) * std::size_t(c.adam.m.size()));
    write_exact(out, c.adam.v.data(),
                sizeof(float) * std::size_t(c.adam.v.size()));
    if (!out)
      throw MissingInputError("checkpoint write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw ConfigError("not a checkpoint file: " + path.string());
  unsigned char lb[8];
  if (!in.read(reinterpret_cast<char*>(lb), 8))
    throw ConfigError("truncated checkpoint: " + path.string());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(lb[i]) << (8 * i);
  if (len == 0 || len > (1ull << 26))
    throw ConfigError("corrupt checkpoint header: " + path.string());
  std::string htext(len, '\0');
  if (!in.read(htext.data(), std::streamsize(len)))
    throw ConfigError("truncated checkpoint: " + path.string());

  Checkpoint c;
  try {
    ordered_json header = ordered_json::parse(htext);
    c.model = model_config_from_json(header.at("model"));
    c.seed = header.at("seed").get<std::uint64_t>();
    c.epochs_done = header.at("epochs_done").get<int>();
    c.adam.step = header.at("adam_step").get<std::int64_t>();
    const auto& sj = header.at("scheduler");
    c.sched.lr = sj.at("lr").get<double>();
    c.sched.best = sj.at("best").is_null()
                       ? std::numeric_limits<double>::infinity()
                       : sj.at("best").get<double>();
    c.sched.bad_epochs = sj.at("bad_epochs").get<int>();

    c.model.validate();
    c.params = ParamStore<float>::zeros(c.model);
    const auto& arrays = header.at("arrays");
    const auto mismatch = [&] {
      return ConfigError(
          "checkpoint parameter manifest does not match the model "
          "configuration: " +
          path.string());
    };
    if (!arrays.is_array() || arrays.size() != c.params.infos.size() + 2)
      throw mismatch();
    for (std::size_t i = 0; i < c.params.infos.size(); ++i) {
      const auto& a = arrays[i];
      const ParamInfo& info = c.params.infos[i];
      if (a.at("name").get<std::string>() != info.name ||
          a.at("rows").get<Eigen::Index>() != info.rows ||
          a.at("cols").get<Eigen::Index>() != info.cols)
        throw mismatch();
    }
    Eigen::Index n = c.params.flat.size();
    const auto& am = arrays[c.params.infos.size()];
    const auto& av = arrays[c.params.infos.size() + 1];
    if (am.at("name").get<std::string>() != "optimizer.m" ||
        am.at("rows").get<Eigen::Index>() != n ||
        av.at("name").get<std::string>() != "optimizer.v" ||
        av.at("rows").get<Eigen::Index>() != n)
      throw mismatch();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint header in " + path.string() +
                      ": " + e.what());
  }

  Eigen::Index n = c.params.flat.size();
  c.adam.m.resize(n);
  c.adam.v.resize(n);
  auto read_array = [&](float* dst, Eigen::Index count) {
    if (!in.read(reinterpret_cast<char*>(dst),
                 std::streamsize(sizeof(float) * std::size_t(count))))
      throw ConfigError("truncated checkpoint: " + path.string());
  };
  read_array(c.params.flat.data(), n);
  read_array(c.adam.m.data(), n);
  read_array(c.adam.v.data(), n);
  if (in.peek() != std::char_traits<char>::eof())
    throw ConfigError("checkpoint has trailing data: " + path.string());
  return c;
}

// ---------------------------------------------------------------------------
// Inference

Prediction predict_case(const ModelConfig& model,
                        const ParamStore<float>& params, const CaseBundle& c,
                        const InputSelection& sel, PlanCache& plans) {
  if (!(model.input_shape == c.ct.shape))
    throw ConfigError("model input shape " + model.input_shape.str() +
                      " does not match case grid " + c.ct.shape.str());
  Graph<float> g;
  Var x = g.input(stack_input(c, sel));
  ForwardResult<float> fr = build_forward(g, model, params, x, plans);
  Mat<float> phi = g.val(fr.dvf);
  if (phi.rows() != 3)
    throw ConfigError("prediction requires a 3-component deformation field");

  const Volume& base = baseline_image(c, sel);
  Grid3 grid = base.shape;

  Prediction p;
  p.image = base;
  p.image.channel = "image";
  p.image.data =
      warp_trilinear_value<float>(base.data.transpose(), phi, grid)
          .row(0)
          .transpose();
  p.gtvp = c.gtvp01;
  p.gtvp.channel = "gtvp";
  p.gtvp.data = warp_nearest_value<float>(c.gtvp01.data.transpose(), phi, grid)
                    .row(0)
                    .transpose();
  p.gtvn = c.gtvn01;
  p.gtvn.channel = "gtvn";
  p.gtvn.data = warp_nearest_value<float>(c.gtvn01.data.transpose(), phi, grid)
                    .row(0)
                    .transpose();
  p.dvf = Dvf{grid, base.spacing_mm, std::move(phi)};
  return p;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct CaseEval {
  Vec<float> grad;
  LossBreakdown loss;
};

CaseEval eval_case(const ModelConfig& model, const ParamStore<float>& params,
                   const CaseBundle& b, const InputSelection& sel,
                   const LossWeights& w, PlanCache& plans, bool want_grad) {
  Graph<float> g;
  Var x = g.input(stack_input(b, sel));
  ForwardResult<float> fr = build_forward(g, model, params, x, plans);
  auto row = [](const Volume& v) { return Mat<float>(v.data.transpose()); };
  const Volume& base = baseline_image(b, sel);
  Var bi = g.input(row(base));
  Var bp = g.input(row(b.gtvp01));
  Var bn = g.input(row(b.gtvn01));
  Var ti = g.input(row(*b.cbct21));
  Var tp = g.input(row(*b.gtvp21));
  Var tn = g.input(row(*b.gtvn21));
  auto nodes = composite_loss_nodes(g, bi, bp, bn, ti, tp, tn, fr.dvf,
                                    model.input_shape, w);
  CaseEval ev;
  ev.loss = breakdown_of(g, nodes);
  if (want_grad) {
    g.backward(nodes.total);
    ev.grad = collect_param_grads(g, params, fr.param_vars);
  }
  return ev;
}

struct LoadedCorpus {
  std::vector<std::string> train_ids, val_ids;
  std::vector<CaseBundle> train_cases, val_cases;
};

CaseBundle load_training_case(const fs::path& data_dir,
                              const std::map<std::string, CaseEntry>& by_id,
                              const std::string& id) {
  auto it = by_id.find(id);
  if (it == by_id.end())
    throw MissingInputError("split references unknown case: " + id);
  CaseBundle b = read_case(data_dir, it->second);
  if (!b.has_targets())
    throw MissingInputError("case " + id +
                            " has no target volumes; training requires them");
  return b;
}

LoadedCorpus load_corpus(const fs::path& data_dir, const Grid3& expect_shape) {
  std::vector<CaseEntry> entries = read_manifest(data_dir / "manifest.json");
  std::map<std::string, CaseEntry> by_id;
  for (const auto& e : entries) by_id.emplace(e.case_id, e);
  SplitIds split = read_split(data_dir / "split.json");
  if (split.train.empty())
    throw ConfigError("split has no training cases");

  LoadedCorpus out;
  out.train_ids = split.train;
  out.val_ids = split.val;
  for (const auto& id : split.train)
    out.train_cases.push_back(load_training_case(data_dir, by_id, id));
  for (const auto& id : split.val)
    out.val_cases.push_back(load_training_case(data_dir, by_id, id));
  for (const auto& b : out.train_cases)
    if (!(b.ct.shape == expect_shape))
      throw ConfigError("case " + b.case_id + " grid " + b.ct.shape.str() +
                        " does not match the model input shape " +
                        expect_shape.str());
  for (const auto& b : out.val_cases)
    if (!(b.ct.shape == expect_shape))
      throw ConfigError("case " + b.case_id + " grid " + b.ct.shape.str() +
                        " does not match the model input shape " +
                        expect_shape.str());
  return out;
}

// Evaluates a list of (possibly augmented) cases, fanning out over jobs
// worker threads; results land by slot so the reduction order is fixed.
void eval_cases(const ModelConfig& model, const ParamStore<float>& params,
                const std::vector<const CaseBundle*>& cases,
                const InputSelection& sel, const LossWeights& w,
                std::vector<PlanCache>& caches, bool want_grad, int jobs,
                std::vector<CaseEval>& out) {
  out.resize(cases.size());
  int nw = std::max(1, std::min<int>(jobs, int(cases.size())));
  if (int(caches.size()) < nw) caches.resize(std::size_t(nw));
  if (nw == 1) {
    for (std::size_t i = 0; i < cases.size(); ++i)
      out[i] = eval_case(model, params, *cases[i], sel, w, caches[0],
                         want_grad);
    return;
  }
  std::vector<std::exception_ptr> errors;
  errors.resize(std::size_t(nw));
  std::vector<std::thread> threads;
  for (int wk = 0; wk < nw; ++wk)
    threads.emplace_back([&, wk] {
      try {
        for (std::size_t i = std::size_t(wk); i < cases.size();
             i += std::size_t(nw))
          out[i] = eval_case(model, params, *cases[i], sel, w,
                             caches[std::size_t(wk)], want_grad);
      } catch (...) {
        errors[std::size_t(wk)] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_finite(const CaseEval& ev, const std::string& case_id) {
  if (!std::isfinite(ev.loss.total))
    throw NumericError("non-finite loss for case " + case_id);
}

void write_events(const fs::path& path, const std::vector<ordered_json>& ev) {
  ordered_json arr = ordered_json::array();
  for (const auto& e : ev) arr.push_back(e);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << arr.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

}  // namespace

TrainResult train(const fs::path& data_dir, const RunConfig& cfg,
                  const fs::path& out_dir,
                  const std::optional<fs::path>& resume, int jobs) {
  cfg.train.validate();
  cfg.model.validate();
  if (cfg.model.in_channels != 7)
    throw ConfigError("the input stack always carries 7 channels");

  LoadedCorpus corpus = load_corpus(data_dir, cfg.model.input_shape);
  fs::create_directories(out_dir);

  ParamStore<float> params;
  AdamState<float> adam;
  PlateauState sched;
  int start_epoch = 0;
  std::vector<ordered_json> events;

  if (resume) {
    Checkpoint ck = load_checkpoint(*resume);
    if (model_config_to_json(ck.model) != model_config_to_json(cfg.model))
      throw ConfigError(
          "checkpoint was trained with a different model configuration");
    params = std::move(ck.params);
    adam = std::move(ck.adam);
    sched = ck.sched;
    start_epoch = ck.epochs_done;
    std::ifstream ev(out_dir / "events.json");
    if (ev) {
      try {
        ordered_json arr = ordered_json::parse(ev);
        for (auto& e : arr) events.push_back(e);
      } catch (const nlohmann::json::exception&) {
        events.clear();
      }
    }
  } else {
    params = init_params<float>(cfg.model, Rng::derive(cfg.train.seed, 1));
    adam = AdamState<float>::zeros(params.flat.size());
    sched.lr = cfg.train.lr0;
  }

  std::ofstream log(out_dir / "train.log.jsonl",
                    resume ? std::ios::app : std::ios::trunc);
  if (!log)
    throw MissingInputError("cannot write training log in " +
                            out_dir.string());

  std::vector<PlanCache> caches(1);
  bool augment_on = cfg.train.augment.probability > 0.0;
  std::size_t n_train = corpus.train_cases.size();

  TrainResult result;
  result.last_checkpoint = out_dir / "last.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";

  for (int e = start_epoch; e < cfg.train.epochs; ++e) {
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng shuffle_rng(Rng::derive(cfg.train.seed, 70000 + std::uint64_t(e)));
    for (std::size_t i = n_train; i > 1; --i)
      std::swap(order[i - 1],
                order[shuffle_rng.uniform_int(std::uint64_t(i))]);

    double epoch_loss = 0;
    std::size_t epoch_cases = 0;
    std::uint64_t epoch_stream = Rng::derive(cfg.train.seed,
                                             71000 + std::uint64_t(e));

    for (std::size_t b0 = 0; b0 < n_train;
         b0 += std::size_t(cfg.train.batch_size)) {
      std::size_t bn =
          std::min(std::size_t(cfg.train.batch_size), n_train - b0);
      std::vector<CaseBundle> augmented;
      std::vector<const CaseBundle*> batch;
      augmented.reserve(bn);
      for (std::size_t k = 0; k < bn; ++k) {
        const CaseBundle& src = corpus.train_cases[order[b0 + k]];
        if (augment_on) {
          AugmentSpec a = cfg.train.augment;
          a.seed = Rng::derive(epoch_stream, std::uint64_t(b0 + k));
          augmented.push_back(augment(src, a));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&src);
        }
      }

      std::vector<CaseEval> evals;
      eval_cases(cfg.model, params, batch, cfg.inputs, cfg.train.loss, caches,
                 /*want_grad=*/true, jobs, evals);

      Vec<double> acc = Vec<double>::Zero(params.flat.size());
      LossBreakdown mean;
      for (std::size_t k = 0; k < bn; ++k) {
        check_finite(evals[k], batch[k]->case_id);
        acc += evals[k].grad.cast<double>();
        mean.total += evals[k].loss.total / double(bn);
        mean.ssim += evals[k].loss.ssim / double(bn);
        mean.dice_p += evals[k].loss.dice_p / double(bn);
        mean.dice_n += evals[k].loss.dice_n / double(bn);
        mean.diffusion += evals[k].loss.diffusion / double(bn);
      }
      Vec<float> grad = (acc / double(bn)).cast<float>();
      bool applied =
          adam_step(params.flat, adam, grad, sched.lr, cfg.train);
      if (!applied) {
        log_info("skipped a non-finite gradient step in epoch " +
                 std::to_string(e));
        events.push_back({{"epoch", e},
                          {"event", "skipped_nonfinite_gradient"},
                          {"step", adam.step}});
      }
      ordered_json line = {{"step", adam.step},     {"epoch", e},
                           {"lr", sched.lr},        {"total", mean.total},
                           {"ssim", mean.ssim},     {"dice_p", mean.dice_p},
                           {"dice_n", mean.dice_n}, {"diffusion", mean.diffusion},
                           {"applied", applied}};
      log << line.dump() << "\n";
      epoch_loss += mean.total * double(bn);
      epoch_cases += bn;
    }
    log.flush();
    double train_loss = epoch_loss / double(epoch_cases);

    double val_loss = train_loss;
    if (!corpus.val_cases.empty()) {
      std::vector<const CaseBundle*> vcases;
      for (const auto& b : corpus.val_cases) vcases.push_back(&b);
      std::vector<CaseEval> evals;
      eval_cases(cfg.model, params, vcases, cfg.inputs, cfg.train.loss,
                 caches, /*want_grad=*/false, jobs, evals);
      double sum = 0;
      for (std::size_t k = 0; k < evals.size(); ++k) {
        check_finite(evals[k], corpus.val_cases[k].case_id);
        sum += evals[k].loss.total;
      }
      val_loss = sum / double(evals.size());
    }

    PlateauResult pr = plateau_update(sched, val_loss, cfg.train);
    events.push_back({{"epoch", e},
                      {"event", "validation"},
                      {"val_loss", val_loss},
                      {"lr", sched.lr}});
    if (pr.reduced)
      events.push_back(
          {{"epoch", e}, {"event", "lr_reduced"}, {"lr", sched.lr}});

    Checkpoint ck{cfg.model, params, adam, sched, e + 1, cfg.train.seed};
    save_checkpoint(result.last_checkpoint, ck);
    if (pr.improved) {
      save_checkpoint(result.best_checkpoint, ck);
      events.push_back(
          {{"epoch", e}, {"event", "checkpoint"}, {"path", "best.ckpt"}});
    }
    write_events(out_dir / "events.json", events);
    result.epochs.push_back({e, train_loss, val_loss, sched.lr});
    log_info("epoch " + std::to_string(e) + ": train " +
             std::to_string(train_loss) + " val " + std::to_string(val_loss) +
             " lr " + std::to_string(sched.lr));
  }
  result.best_val = sched.best;
  return result;
}

// ---------------------------------------------------------------------------
// Report harnesses

namespace {

struct TestSet {
  std::vector<CaseBundle> cases;
};

TestSet load_test_set(const fs::path& data_dir) {
  std::vector<CaseEntry> entries = read_manifest(data_dir / "manifest.json");
  std::map<std::string, CaseEntry> by_id;
  for (const auto& e : entries) by_id.emplace(e.case_id, e);
  SplitIds split = read_split(data_dir / "split.json");
  if (split.test.empty())
    throw ConfigError("split has no test cases to evaluate");
  TestSet out;
  for (const auto& id : split.test)
    out.cases.push_back(load_training_case(data_dir, by_id, id));
  return out;
}

MetricsReport score_predictions(
    const TestSet& ts,
    const std::vector<std::pair<std::string, std::vector<Prediction>>>& preds,
    bool include_baselines) {
  std::vector<std::vector<MetricsRow>> per_case;
  for (std::size_t i = 0; i < ts.cases.size(); ++i) {
    const CaseBundle& c = ts.cases[i];
    std::vector<SubjectVolumes> cands;
    if (include_baselines) {
      cands.push_back({"PlanningCT", c.ct, c.gtvp01, c.gtvn01});
      cands.push_back({"CBCT01", c.cbct01, c.gtvp01, c.gtvn01});
    }
    for (const auto& [label, list] : preds)
      cands.push_back({label, list[i].image, list[i].gtvp, list[i].gtvn});
    per_case.push_back(
        evaluate_case(cands, *c.cbct21, *c.gtvp21, *c.gtvn21));
  }
  return aggregate(per_case);
}

}  // namespace

std::vector<std::string> comparison_subjects() {
  return {"PlanningCT", "CBCT01", "Predicted_swin", "Predicted_conv",
          "Predicted_vit"};
}

std::vector<std::string> ablation_subjects() {
  return {"no_ct", "no_dose", "no_gtv", "all_ct", "all_cbct01"};
}

MetricsReport run_comparison(const fs::path& data_dir, const RunConfig& base,
                             const fs::path& out_dir, int jobs) {
  const EncoderKind kinds[] = {EncoderKind::SwinHierarchical,
                               EncoderKind::ConvPyramid,
                               EncoderKind::PlainViT};
  TestSet ts = load_test_set(data_dir);
  std::vector<std::pair<std::string, std::vector<Prediction>>> preds;
  for (EncoderKind kind : kinds) {
    RunConfig cfg = base;
    cfg.model.encoder_kind = kind;
    std::string name = encoder_name(kind);
    log_info("comparison: training " + name + " encoder");
    train(data_dir, cfg, out_dir / ("model_" + name), {}, jobs);
    Checkpoint ck = load_checkpoint(out_dir / ("model_" + name) / "best.ckpt");
    PlanCache plans;
    std::vector<Prediction> list;
    for (const CaseBundle& c : ts.cases)
      list.push_back(predict_case(ck.model, ck.params, c, cfg.inputs, plans));
    preds.emplace_back("Predicted_" + name, std::move(list));
  }
  return score_predictions(ts, preds, /*include_baselines=*/true);
}

MetricsReport run_ablation(const fs::path& data_dir, const RunConfig& base,
                           const fs::path& out_dir, int jobs) {
  struct Ablation {
    std::string label;
    InputSelection sel;
  };
  std::vector<Ablation> configs;
  {
    InputSelection s;
    s.use_ct = false;
    configs.push_back({"no_ct", s});
    s = InputSelection{};
    s.use_dose = false;
    configs.push_back({"no_dose", s});
    s = InputSelection{};
    s.use_gtv_masks = false;
    configs.push_back({"no_gtv", s});
    s = InputSelection{};
    s.baseline = BaselineKind::CT;
    configs.push_back({"all_ct", s});
    s = InputSelection{};
    s.baseline = BaselineKind::CBCT01;
    configs.push_back({"all_cbct01", s});
  }

  TestSet ts = load_test_set(data_dir);
  std::vector<std::pair<std::string, std::vector<Prediction>>> preds;
  for (const Ablation& ab : configs) {
    RunConfig cfg = base;
    cfg.inputs = ab.sel;
    log_info("ablation: training configuration " + ab.label);
    train(data_dir, cfg, out_dir / ("run_" + ab.label), {}, jobs);
    Checkpoint ck =
        load_checkpoint(out_dir / ("run_" + ab.label) / "best.ckpt");
    PlanCache plans;
    std::vector<Prediction> list;
    for (const CaseBundle& c : ts.cases)
      list.push_back(predict_case(ck.model, ck.params, c, ab.sel, plans));
    preds.emplace_back(ab.label, std::move(list));
  }
  return score_predictions(ts, preds, /*include_baselines=*/false);
}

}  // namespace anapred
