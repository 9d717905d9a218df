#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "lesionforge/netops.hpp"

namespace lesionforge {

// conv -> optional leaky ReLU -> optional max pool.
struct ConvUnit {
  KernelBank bank;
  bool activate = true;
  int pool = 0;  // window == stride; 0 disables pooling
};

// Forward record of a ConvStack. Level 0 is the input; level l >= 1 is the
// output of unit l after its activation and before its pool.
struct StackTrace {
  std::vector<FeatureMap> levels;
  std::vector<std::optional<PoolRecord>> pools;  // pool applied after level l

  const FeatureMap& unit_input(std::size_t unit) const;  // unit is 1-based
};

// A plain feed-forward stack of convolution units. Used for the detector body,
// the discriminator and the detail extractor.
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(std::vector<ConvUnit> units, double slope);

  std::size_t depth() const { return units_.size(); }
  double slope() const { return slope_; }
  const std::vector<ConvUnit>& units() const { return units_; }
  std::vector<ConvUnit>& units() { return units_; }

  // Runs units 1..last_level (all when last_level < 0).
  StackTrace forward(const FeatureMap& input, int last_level = -1) const;

  // Training gradient. level_grads[l] (empty = zero) is injected at level l;
  // returns d(loss)/d(input). Parameter gradients accumulate into
  // `param_grads` (one bank per unit) when given.
  FeatureMap backward(const StackTrace& trace, const std::vector<FeatureMap>& level_grads,
                      std::vector<KernelBank>* param_grads) const;

  // Activation-network reverse pass from `seed` at level `top`: per unit,
  // unpool through the recorded argmax, plain ReLU for every forward
  // activation, and transposed convolution with the forward weights (no bias).
  // Returns the projections at levels 0..top.
  std::vector<FeatureMap> project(const StackTrace& trace, std::size_t top,
                                  const FeatureMap& seed) const;

  std::vector<KernelBank> zero_grads() const;
  std::size_t parameter_count() const;
  void append_parameters(std::vector<std::span<double>>& out);
  void init_he(std::mt19937_64& rng);

 private:
  std::vector<ConvUnit> units_;
  double slope_ = 0.01;
};

void append_bank_parameters(KernelBank& bank, std::vector<std::span<double>>& out);
void init_bank_he(KernelBank& bank, std::mt19937_64& rng, double gain = 2.0);

}  // namespace lesionforge
