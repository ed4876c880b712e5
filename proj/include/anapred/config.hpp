#pragma once

#include <filesystem>

#include <json.hpp>

#include "anapred/dataset.hpp"
#include "anapred/loss.hpp"
#include "anapred/model.hpp"
#include "anapred/phantom.hpp"

namespace anapred {

// Corpus sizing and split fractions.
struct DataConfig {
  int n_cases = 24;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

// Optimization hyperparameters. Defaults: Adam at lr 0.001 with standard
// moments, 100 epochs at batch size 4, learning rate halved after 5 epochs
// without validation improvement.
struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double lr0 = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  double plateau_threshold = 1e-6;
  double min_lr = 1e-6;
  std::uint64_t seed = 0;
  bool deterministic = true;
  LossWeights loss;
  AugmentSpec augment;

  void validate() const;
};

// One document aggregating every knob a run needs. The JSON form mirrors the
// struct fields; parsing is strict — unknown keys are a ConfigError so typos
// fail loudly instead of silently taking defaults.
struct RunConfig {
  CorpusRanges phantom;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  InputSelection inputs;
};

RunConfig run_config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json run_config_to_json(const RunConfig& c);

// Model section alone — shared with the checkpoint header.
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json model_config_to_json(const ModelConfig& m);

// Missing file -> MissingInputError; malformed JSON or keys -> ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace anapred
