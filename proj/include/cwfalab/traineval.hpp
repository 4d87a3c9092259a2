#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cwfalab/corruptions.hpp"
#include "cwfalab/cwfa.hpp"
#include "cwfalab/metrics.hpp"
#include "cwfalab/segmenter.hpp"
#include "cwfalab/synthdata.hpp"
#include "json.hpp"

namespace cwfalab {

// flip + 48px crop: the same 3/4 linear crop ratio the full-scale recipe uses,
// and a 9/16 per-iteration compute saving at 64px scenes
AugmentOptions default_train_augment();

// CWFA defaults at desk scale; p_augm = 0 turns the augmentation off without
// touching any other stream
cwfa::CwfaConfig default_cwfa_config();

struct TrainConfig {
  std::size_t iterations = 8000;
  std::size_t batch_size = 8;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  double poly_power = 0.9;  // lr(t) = lr * (1 - t/total)^power
  std::uint64_t seed = 1;
  cwfa::CwfaConfig cwfa = default_cwfa_config();
  AugmentOptions augment = default_train_augment();
  std::size_t log_every = 50;  // loss-curve sampling interval
};

struct TrainResult {
  seg::Segmenter model;
  std::vector<std::pair<std::size_t, double>> loss_curve;  // (iteration, batch mean loss)
};

// Trains a fresh randomly initialized model on the train split. Deterministic
// in (data, cfg): every random stream derives from cfg.seed. Throws
// NumericError if the loss stops being finite.
TrainResult train(const DatasetSpec& data, const TrainConfig& cfg);

// Same loop on an existing model and materialized scenes; train() wraps this.
std::vector<std::pair<std::size_t, double>> train_from(seg::Segmenter& model,
                                                       const std::vector<Scene>& scenes,
                                                       const TrainConfig& cfg);

// Plain forward + per-pixel argmax (ties to the lowest class id).
MaskImage predict(const seg::Segmenter& model, const Tensor& image);

// Logit-sum aggregation over clamped window positions with a coverage-count
// normalizer; window == image size reproduces predict() bit-exactly.
MaskImage sliding_window_predict(const seg::Segmenter& model, const Tensor& image,
                                 std::size_t window, std::size_t stride);

struct EvalReport {
  double clean_miou = 0.0;
  std::map<CorruptionKind, std::array<double, 5>> grid;  // severity 1..5 mIoU
  std::map<CorruptionKind, double> per_kind_avg;         // severity rule applied
  std::map<CorruptionFamily, double> family_avg;
  double overall_avg = 0.0;  // mean of per_kind_avg
  double retention = 0.0;    // 100 * overall_avg / clean_miou
};

// Full protocol on the validation scenes: clean mIoU, the corruption grid
// (cells regenerated from (seed, image, kind, severity), so repeated calls
// see identical pixels), severity rule, family and overall averages,
// retention. No training hooks run here.
EvalReport evaluate(const seg::Segmenter& model, const std::vector<Scene>& val,
                    const std::vector<CorruptionKind>& kinds, std::uint64_t seed);

// Clean-val mIoU with the channel shift force-applied (gate probability 1)
// at one encoder during inference; returns (epsilon, miou) per input epsilon.
std::vector<std::pair<double, double>> inference_perturbation_sweep(
    const seg::Segmenter& model, const std::vector<Scene>& val, int encoder_idx,
    const std::vector<double>& epsilons);

// ---- serialization ----

nlohmann::json eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

// JSON (stable key order) next to a flat CSV: Clean,0 row then kind rows.
void write_eval_report(const EvalReport& report, const std::string& json_path,
                       const std::string& csv_path);

void write_loss_curve_csv(const std::vector<std::pair<std::size_t, double>>& curve,
                          const std::string& path);

nlohmann::json train_config_json(const TrainConfig& cfg, const DatasetSpec& data);
TrainConfig train_config_from_json(const nlohmann::json& j);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

}  // namespace cwfalab
