#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "json.hpp"

#include "lesionforge/convstack.hpp"
#include "lesionforge/optim.hpp"

namespace lesionforge {

struct DetectorConfig {
  int image_size = 64;
  std::vector<int> block_channels{8, 16, 24};
  int convs_per_block = 2;
  int bottleneck_dim = 64;
  double slope = 0.01;
  int grades = 5;

  void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

enum class DetectorOptimizer { nadam, nesterov_sgd };

struct DetectorTrainConfig {
  int epochs = 30;
  int batch_size = 16;
  DetectorOptimizer optimizer = DetectorOptimizer::nadam;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool augment = true;
  // cosine decay of the learning rate down to this fraction at the last epoch
  double final_lr_fraction = 0.05;
};

void to_json(nlohmann::json& j, const DetectorTrainConfig& c);
void from_json(const nlohmann::json& j, DetectorTrainConfig& c);

// Severity CNN: blocks of 3x3 conv + leaky ReLU with a 2x2 max pool closing
// each block, a valid convolution that collapses the map to a 1x1 bottleneck,
// and a dense head (a 1x1 convolution) producing one logit per grade.
class DetectorNet {
 public:
  static DetectorNet build(const DetectorConfig& cfg, std::uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  const ConvStack& body() const { return body_; }
  ConvStack& body() { return body_; }
  const KernelBank& head() const { return head_; }
  KernelBank& head() { return head_; }

  std::size_t bottleneck_level() const { return body_.depth(); }
  // Spatial shape of every level (0 = input) for a configured input.
  std::vector<Shape> level_shapes() const;
  // Downsampling factor of each level relative to the input.
  std::vector<int> level_scales() const;
  // Levels carrying spatial maps (every level except the 1x1 bottleneck).
  std::vector<std::size_t> descriptor_levels() const;

  ParamList parameters();
  void round_to_float();

  void save(const std::filesystem::path& path) const;
  static DetectorNet load(const std::filesystem::path& path);

 private:
  DetectorConfig cfg_;
  ConvStack body_;
  KernelBank head_;
};

struct FeatureStack {
  StackTrace trace;
  std::vector<double> bottleneck;
  std::vector<double> logits;

  const FeatureMap& level(std::size_t l) const { return trace.levels.at(l); }
  std::size_t depth() const { return trace.levels.size() - 1; }
};

FeatureStack forward_with_stack(const DetectorNet& net, const FeatureMap& image);

struct SeverityResult {
  std::vector<double> probs;
  int grade = 0;
  double score = 0.0;  // expected grade sum_g g * p(g)
};

SeverityResult severity_from_probs(std::vector<double> probs);
SeverityResult severity_from_logits(const std::vector<double>& logits);
SeverityResult severity(const DetectorNet& net, const FeatureMap& image);

struct DetectorGradients {
  std::vector<KernelBank> body;
  KernelBank head;

  explicit DetectorGradients(const DetectorNet& net);
  ParamList parameters();
};

// Backpropagates d(loss)/d(logits) (may be empty) plus gradients injected at
// feature levels; returns d(loss)/d(image). Parameter gradients accumulate
// into `grads` when given.
FeatureMap detector_backward(const DetectorNet& net, const FeatureStack& stack,
                             const std::vector<double>& logit_grad,
                             const std::vector<FeatureMap>& level_grads, DetectorGradients* grads);

// Softmax cross-entropy of one sample; fills d(loss)/d(logits).
double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>* grad);

struct LabeledImage {
  FeatureMap image;
  int grade = 0;
};

struct DetectorEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
};

struct DetectorTrainReport {
  double initial_train_loss = 0.0;
  double initial_validation_loss = 0.0;
  std::vector<DetectorEpoch> epochs;
};

double mean_cross_entropy(const DetectorNet& net, const std::vector<LabeledImage>& data);
double grade_accuracy(const DetectorNet& net, const std::vector<LabeledImage>& data);

DetectorTrainReport train_detector(DetectorNet& net, const std::vector<LabeledImage>& train,
                                   const std::vector<LabeledImage>& validation,
                                   const DetectorTrainConfig& cfg, std::uint64_t seed,
                                   const std::function<void(const DetectorEpoch&)>& progress = {});

}  // namespace lesionforge
