#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "lesionforge/gan_nets.hpp"
#include "lesionforge/losses.hpp"

namespace lesionforge {

struct GanTrainConfig {
  int steps = 300;
  double g_learning_rate = 2e-4;
  double d_learning_rate = 1e-4;
  double beta1 = 0.5;
  int g_updates = 2;  // generator updates per step
  int d_updates = 1;  // discriminator updates per step
  double train_noise = 0.001;
  double test_noise = 0.1;
  bool augment = true;
  LossNormalization normalization = LossNormalization::mean;
};

void to_json(nlohmann::json& j, const GanTrainConfig& c);
void from_json(const nlohmann::json& j, GanTrainConfig& c);

struct GanModel {
  GeneratorConfig generator_config;
  DiscriminatorConfig discriminator_config;
  ExtractorConfig extractor_config;
  Generator generator;
  Discriminator discriminator;
  long steps_trained = 0;

  static GanModel build(const GeneratorConfig& g, const DiscriminatorConfig& d,
                        const ExtractorConfig& e, std::uint64_t seed);
  void round_to_float();
  void save(const std::filesystem::path& path) const;
  static GanModel load(const std::filesystem::path& path);
};

struct TrainingPair {
  FeatureMap image;  // x, [-1, 1]
  FeatureMap mask;   // y, {0, 1}
};

struct GanStepLog {
  long step = 0;
  double l_adv = 0.0;
  double l_adv_g = 0.0;
  double l_dd = 0.0;
  double l_tv = 0.0;
  double l_dp = 0.0;
  double l_mv = 0.0;
  double l_g = 0.0;
  double severity = 0.0;
};

std::string gan_log_header();
std::string gan_log_row(const GanStepLog& s);

// Owns the optimizer state of one training run.
class GanTrainer {
 public:
  GanTrainer(GanModel& model, const DetectorNet& detector, PathologicalSetup setup,
             const LossWeights& weights, const GanTrainConfig& cfg, std::uint64_t seed);

  // Two generator updates then one discriminator update (per the config) on
  // one augmented pair; throws "diverged" on a non-finite loss.
  GanStepLog step(const TrainingPair& pair);
  long steps() const { return step_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  GanModel& model_;
  const DetectorNet& detector_;
  DetailExtractor extractor_;
  PathologicalSetup setup_;
  LossWeights weights_;
  GanTrainConfig cfg_;
  std::mt19937_64 rng_;
  Adam g_opt_, d_opt_;
  std::vector<KernelBank> g_grads_;
  std::vector<KernelBank> d_grads_;
  long step_ = 0;
  GanStepLog last_finite_;
};

// L_G for a fixed (pair, noise), with d(L_G)/d(generator output) when asked.
struct GeneratorObjective {
  double l_g = 0.0;
  AdversarialLosses adv;
  RetinaLoss retina;
  PathoLoss patho;
};

GeneratorObjective generator_objective(const Discriminator& d, const DetailExtractor& ex,
                                       const DetectorNet& det, const PathologicalSetup& setup,
                                       const LossWeights& w, LossNormalization norm,
                                       const TrainingPair& pair, const FeatureMap& x_hat,
                                       FeatureMap* grad);

std::vector<GanStepLog> train_gan(GanModel& model, const std::vector<TrainingPair>& pairs,
                                  const DetectorNet& detector, const PathologicalSetup& setup,
                                  const LossWeights& weights, const GanTrainConfig& cfg,
                                  std::uint64_t seed,
                                  const std::function<void(const GanStepLog&)>& progress = {});

FeatureMap synthesize(const Generator& g, const FeatureMap& mask, double noise_stddev,
                      std::mt19937_64& rng);

}  // namespace lesionforge
