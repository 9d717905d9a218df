#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "json.hpp"

#include "lesionforge/convstack.hpp"
#include "lesionforge/optim.hpp"

namespace lesionforge {

struct GeneratorConfig {
  int image_size = 64;
  int base_channels = 16;
  int depth = 3;      // stride-2 encoder stages
  int noise_dim = 4;  // z channels concatenated to the vessel mask
  double slope = 0.2;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct GeneratorTrace {
  FeatureMap input;                       // y ++ z
  std::vector<FeatureMap> enc;            // enc[0] full resolution, enc[k] at 1/2^k
  std::vector<FeatureMap> dec_in;         // concat(up(previous), skip) per decoder stage
  std::vector<FeatureMap> dec;            // decoder outputs, coarse to fine
  FeatureMap output;                      // tanh
};

// U-Net: a full-resolution conv, `depth` stride-2 convs, then per scale a
// nearest upsample, concatenation with the encoder skip and a conv; a 3x3
// conv with tanh produces the RGB image.
class Generator {
 public:
  static Generator build(const GeneratorConfig& cfg, std::uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }
  std::vector<KernelBank>& banks() { return banks_; }
  const std::vector<KernelBank>& banks() const { return banks_; }

  GeneratorTrace forward(const FeatureMap& mask, const FeatureMap& noise) const;
  FeatureMap generate(const FeatureMap& mask, const FeatureMap& noise) const {
    return forward(mask, noise).output;
  }
  // Accumulates parameter gradients for d(loss)/d(output).
  void backward(const GeneratorTrace& trace, const FeatureMap& grad_output,
                std::vector<KernelBank>& grads) const;

  std::vector<KernelBank> zero_grads() const;
  ParamList parameters();
  static ParamList parameters(std::vector<KernelBank>& banks);

 private:
  GeneratorConfig cfg_;
  // [0] input conv, [1..depth] encoder, [depth+1..2*depth] decoder, last = output
  std::vector<KernelBank> banks_;
};

FeatureMap sample_noise(int height, int width, int channels, double stddev, std::mt19937_64& rng);

struct DiscriminatorConfig {
  std::vector<int> channels{16, 32, 64};  // hidden stride-2 convs; a final one gives 1 logit map
  double slope = 0.2;
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

constexpr double kProbClamp = 1e-7;

struct DiscriminatorOutput {
  StackTrace trace;
  double logit = 0.0;  // mean of the final logit map
  double prob = 0.5;   // clamped sigmoid
  bool clamped = false;
};

class Discriminator {
 public:
  static Discriminator build(const DiscriminatorConfig& cfg, int image_channels,
                             std::uint64_t seed);

  const DiscriminatorConfig& config() const { return cfg_; }
  ConvStack& body() { return body_; }
  const ConvStack& body() const { return body_; }

  DiscriminatorOutput forward(const FeatureMap& image, const FeatureMap& mask) const;
  // d(loss)/d(image) given d(loss)/d(mean logit); parameter grads accumulate.
  FeatureMap backward(const DiscriminatorOutput& out, double grad_logit,
                      std::vector<KernelBank>* grads) const;

  ParamList parameters();

 private:
  DiscriminatorConfig cfg_;
  int image_channels_ = 3;
  ConvStack body_;
};

struct ExtractorConfig {
  std::vector<int> block_channels{8, 16, 32, 32};
  int convs_per_block = 2;
  int layer_block = 1;  // lambda: conv `layer_conv` of block `layer_block` (1-based)
  int layer_conv = 1;
  std::uint64_t seed = 19;
  // scales the lambda features (ReLU stacks are positively homogeneous, so this
  // is a plain rescale of the last conv). Untrained deep features carry little
  // color or layout signal, hence a shallow lambda with a large gain.
  double feature_gain = 1000.0;
};

void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);

// Fixed, seed-deterministic stand-in for a pretrained feature network: ReLU
// conv blocks with 2x2 max pools between them. Weights may be replaced.
class DetailExtractor {
 public:
  static DetailExtractor build(const ExtractorConfig& cfg);

  const ExtractorConfig& config() const { return cfg_; }
  const ConvStack& body() const { return body_; }
  ConvStack& body() { return body_; }
  std::size_t layer() const { return layer_; }

  StackTrace run(const FeatureMap& image) const;
  const FeatureMap& features(const StackTrace& t) const { return t.levels[layer_]; }
  FeatureMap backward(const StackTrace& t, const FeatureMap& grad_features) const;

 private:
  ExtractorConfig cfg_;
  ConvStack body_;
  std::size_t layer_ = 0;
};

}  // namespace lesionforge
