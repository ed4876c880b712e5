#include "anapred/cli.hpp"

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "anapred/common.hpp"
#include "anapred/config.hpp"
#include "anapred/dataset.hpp"
#include "anapred/phantom.hpp"

namespace anapred {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// Flags shared by every subcommand.
struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool out_required = true) {
  cmd->add_option("--config", o.config_path, "JSON run configuration file");
  auto* out = cmd->add_option("--out", o.out_dir, "output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", o.seed, "master random seed");
  cmd->add_flag("--deterministic", o.deterministic,
                "bit-reproducible mode (fixed reduction order)");
  cmd->add_option("--jobs", o.jobs, "worker thread cap")
      ->check(CLI::PositiveNumber);
}

RunConfig resolve_config(const CommonOpts& o) {
  if (o.config_path.empty()) return RunConfig{};
  return load_run_config(o.config_path);
}

int cmd_generate(const CommonOpts& o, std::optional<int> n_override) {
  RunConfig cfg = resolve_config(o);
  if (n_override) cfg.data.n_cases = *n_override;

  fs::path out(o.out_dir);
  fs::create_directories(out);

  log_info("generating " + std::to_string(cfg.data.n_cases) + " cases into " +
           out.string());
  std::vector<CaseBundle> bundles =
      generate_corpus(cfg.data.n_cases, cfg.phantom, o.seed);

  std::vector<CaseEntry> entries;
  std::vector<std::string> ids;
  for (const CaseBundle& b : bundles) {
    entries.push_back(write_case(out, b));
    ids.push_back(b.case_id);
    log_debug("wrote case " + b.case_id);
  }
  write_manifest(out / "manifest.json", entries);

  double train_frac =
      1.0 - cfg.data.val_fraction - cfg.data.test_fraction;
  SplitIds split = split_cases(ids, train_frac, cfg.data.val_fraction,
                               cfg.data.test_fraction,
                               Rng::derive(o.seed, 9000));
  write_split(out / "split.json", split);
  save_run_config(out / "config.json", cfg);

  ordered_json summary = {
      {"cases", cfg.data.n_cases},
      {"out", out.string()},
      {"manifest", "manifest.json"},
      {"split",
       {{"train", split.train.size()},
        {"val", split.val.size()},
        {"test", split.test.size()}}}};
  std::printf("%s\n", summary.dump().c_str());
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"anapred: anatomy-change prediction toolkit"};
  app.require_subcommand(1);

  CommonOpts gen_opts;
  std::optional<int> gen_n;
  auto* gen = app.add_subcommand(
      "generate", "create a synthetic corpus with known deformations");
  add_common(gen, gen_opts);
  gen->add_option("--n", gen_n, "number of cases (overrides config)");

  int rc = 0;
  gen->callback([&] { rc = cmd_generate(gen_opts, gen_n); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and friends exit 0; genuine usage errors map to the
    // configuration-error code.
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const MissingInputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}

}  // namespace anapred
