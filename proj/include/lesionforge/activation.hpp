#pragma once

#include <vector>

#include "lesionforge/convstack.hpp"
#include "lesionforge/detector.hpp"
#include "lesionforge/forest.hpp"

namespace lesionforge {

// A_0 .. A_top; A_l has the shape of forward level l.
struct ProjectionStack {
  std::vector<FeatureMap> levels;

  const FeatureMap& level(std::size_t l) const { return levels.at(l); }
};

// Keeps the key channels of `top` at their forward values and zeroes the rest.
FeatureMap masked_seed(const FeatureMap& top, const std::vector<int>& keys);

// Reverse pass of `stack` from its last level seeded with the key channels.
ProjectionStack project(const ConvStack& stack, const StackTrace& trace,
                        const std::vector<int>& keys);

// Detector form: starts at the bottleneck (the severity head is not reversed).
ProjectionStack project(const DetectorNet& net, const FeatureStack& stack,
                        const KeyFeatureSet& keys);

}  // namespace lesionforge
