#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "anapred/config.hpp"
#include "anapred/metrics.hpp"

namespace anapred {

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamState {
  Vec<T> m, v;
  std::int64_t step = 0;

  static AdamState zeros(Eigen::Index n) {
    return {Vec<T>::Zero(n), Vec<T>::Zero(n), 0};
  }
};

// One bias-corrected Adam update in place:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
// A non-finite gradient leaves parameters, moments and the step counter
// untouched and returns false so the caller can log and skip.
template <typename T>
bool adam_step(Vec<T>& params, AdamState<T>& st, const Vec<T>& grad, double lr,
               const TrainConfig& c) {
  if (params.size() != grad.size() || st.m.size() != params.size() ||
      st.v.size() != params.size())
    throw ConfigError("optimizer state does not match the parameter count");
  if (!grad.allFinite()) return false;
  ++st.step;
  const T b1 = T(c.adam_beta1), b2 = T(c.adam_beta2);
  st.m = b1 * st.m + (T(1) - b1) * grad;
  st.v = b2 * st.v + (T(1) - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(c.adam_beta1, double(st.step));
  const double c2 = 1.0 - std::pow(c.adam_beta2, double(st.step));
  Vec<T> denom =
      ((st.v / T(c2)).cwiseSqrt().array() + T(c.adam_eps)).matrix();
  params -= T(lr / c1) * st.m.cwiseQuotient(denom);
  return true;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct PlateauState {
  double lr = 0.001;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
};

struct PlateauResult {
  bool improved = false;  // val beat best by more than the threshold
  bool reduced = false;   // the rate was cut this call
};

// Called once per epoch with the validation loss. After plateau_patience
// consecutive non-improving epochs the rate is multiplied by plateau_factor
// (floored at min_lr) and the counter resets.
PlateauResult plateau_update(PlateauState& s, double val_loss,
                             const TrainConfig& c);

// ---------------------------------------------------------------------------
// Checkpoints: magic + length-prefixed JSON header (model configuration,
// scheduler/optimizer scalars, array manifest) followed by the named
// little-endian f32 arrays. Written atomically.

struct Checkpoint {
  ModelConfig model;
  ParamStore<float> params;
  AdamState<float> adam;
  PlateauState sched;
  int epochs_done = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Volume image;  // baseline image pulled through the predicted field
  Volume gtvp, gtvn;  // nearest-warped baseline masks (binary)
  Dvf dvf;
};

Prediction predict_case(const ModelConfig& model,
                        const ParamStore<float>& params, const CaseBundle& c,
                        const InputSelection& sel, PlanCache& plans);

// ---------------------------------------------------------------------------
// Training loop

struct EpochSummary {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
};

struct TrainResult {
  std::filesystem::path best_checkpoint, last_checkpoint;
  std::vector<EpochSummary> epochs;  // epochs executed by this call
  double best_val = std::numeric_limits<double>::infinity();
};

// Optimizes the model on the corpus at data_dir (manifest.json + split.json
// written by generation) and writes last.ckpt / best.ckpt, a per-step
// train.log.jsonl and an events.json into out_dir. Deterministic given the
// seed: shuffling and augmentation draws derive statelessly from
// (seed, epoch, position), so a resumed run continues the exact stream.
TrainResult train(const std::filesystem::path& data_dir, const RunConfig& cfg,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = {},
                  int jobs = 1);

// ---------------------------------------------------------------------------
// Report harnesses

// Trains one model per encoder kind under identical seeds and split, then
// scores the planning image, the baseline image, and every model's
// prediction against the targets on the test split.
MetricsReport run_comparison(const std::filesystem::path& data_dir,
                             const RunConfig& base,
                             const std::filesystem::path& out_dir,
                             int jobs = 1);

// Trains the five input-selection configurations (drop CT, drop dose, drop
// masks, all inputs with planning-CT baseline, all inputs with first-fraction
// baseline) and scores their predictions on the test split.
MetricsReport run_ablation(const std::filesystem::path& data_dir,
                           const RunConfig& base,
                           const std::filesystem::path& out_dir,
                           int jobs = 1);

// Row labels used by the harnesses, in emission order.
std::vector<std::string> comparison_subjects();
std::vector<std::string> ablation_subjects();

}  // namespace anapred
