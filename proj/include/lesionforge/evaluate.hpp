#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "lesionforge/manipulate.hpp"
#include "lesionforge/synthgan.hpp"

namespace lesionforge {

// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(const std::vector<double>& v);
// Pearson correlation of the average ranks; throws when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct CurveRow {
  int count = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  std::vector<double> scores;
};

struct SeverityCurve {
  std::vector<CurveRow> rows;
  double spearman = 0.0;  // over (count, mean); NaN with fewer than two distinct rows
};

struct CountedGenerator {
  int count = 0;
  const Generator* generator = nullptr;
};

// n_per_mask images per mask and generator, each from fresh noise. Row r draws
// its noise from a stream seeded by (seed, count), so rows are independent of
// their order.
SeverityCurve severity_curve(const std::vector<CountedGenerator>& generators,
                             const DetectorNet& detector, const std::vector<FeatureMap>& masks,
                             int n_per_mask, double noise_stddev, std::uint64_t seed);

std::string curve_csv(const SeverityCurve& curve);

// Trains `init` without pathological terms (w_dp = w_mv = 0, empty plan).
GanModel train_base_generator(const GanModel& init, const std::vector<TrainingPair>& pairs,
                              const DetectorNet& detector, const LossWeights& weights,
                              const GanTrainConfig& train, std::uint64_t seed,
                              const std::function<void(const GanStepLog&)>& progress = {});

struct CurveTraining {
  std::vector<int> counts{0, 1, 2, 4};
  int steps = 150;  // fine-tuning steps per count, starting from the base model
  LossWeights weights = [] {
    LossWeights w;
    w.w_dp = 0.05;
    return w;
  }();
  // L_dp averages over placements, so k copies would each get 1/k of the pull
  // of a single copy. Scaling w_dp by k keeps the per-lesion pull fixed.
  bool scale_w_dp = true;
  PlanOptions placement;
};

void to_json(nlohmann::json& j, const CurveTraining& c);
void from_json(const nlohmann::json& j, CurveTraining& c);

struct CountModel {
  int count = 0;
  PlacementPlan plan;
  GanModel model;
};

// One generator per count: every descriptor is placed `count` times inside
// the field of view, then the base model is fine-tuned against that plan.
std::vector<CountModel> train_count_generators(
    const GanModel& base, const std::vector<TrainingPair>& pairs, const DetectorNet& detector,
    const std::vector<PathologicalDescriptor>& descriptors, const FieldOfView& fov,
    const CurveTraining& cfg, const GanTrainConfig& train, std::uint64_t seed,
    const std::function<void(int count, const GanStepLog&)>& progress = {});

enum class SweepParameter { w_dp, w_dd };

NLOHMANN_JSON_SERIALIZE_ENUM(SweepParameter, {{SweepParameter::w_dp, "w_dp"}, {SweepParameter::w_dd, "w_dd"}})

struct SweepConfig {
  SweepParameter parameter = SweepParameter::w_dp;
  std::vector<double> values{0.0, 1.0, 10.0};
  LossWeights weights;
  int samples_per_mask = 10;
  int samples_kept = 4;
};

void to_json(nlohmann::json& j, const SweepConfig& c);
void from_json(const nlohmann::json& j, SweepConfig& c);

struct SweepRow {
  double value = 0.0;
  double mean_severity = 0.0;
  double l_dd = 0.0;  // mean over the evaluation pairs
  bool flagged = false;
  std::string error;
  std::uint64_t seed = 0;
  std::string config_hash;  // SHA-256 of the row's training configuration
  std::vector<FeatureMap> samples;
};

// One run per value, all from `start` with the same seed; a failed run is
// flagged and the sweep moves on.
std::vector<SweepRow> ablation_sweep(const GanModel& start, const std::vector<TrainingPair>& train,
                                     const std::vector<TrainingPair>& eval,
                                     const DetectorNet& detector,
                                     const std::vector<PathologicalDescriptor>& descriptors,
                                     const PlacementPlan& plan, const SweepConfig& cfg,
                                     const GanTrainConfig& train_cfg, std::uint64_t seed);

std::string sweep_csv(const std::vector<SweepRow>& rows, SweepParameter parameter);

// Tiles equally shaped images row-major with `columns` per row and a 1-pixel
// gutter at -1.
FeatureMap image_grid(const std::vector<FeatureMap>& images, int columns);

}  // namespace lesionforge
