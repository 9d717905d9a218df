#include "lesionforge/activation.hpp"

namespace lesionforge {

FeatureMap masked_seed(const FeatureMap& top, const std::vector<int>& keys) {
  FeatureMap seed(top.shape());
  for (int k : keys) {
    if (k < 0 || k >= top.channels()) {
      throw Error("bad_key_features", "key feature " + std::to_string(k) + " exceeds " +
                                          std::to_string(top.channels()) + " channels");
    }
    for (int r = 0; r < top.height(); ++r) {
      for (int c = 0; c < top.width(); ++c) seed.at(r, c, k) = top.at(r, c, k);
    }
  }
  return seed;
}

ProjectionStack project(const ConvStack& stack, const StackTrace& trace,
                        const std::vector<int>& keys) {
  if (trace.levels.size() != stack.depth() + 1) {
    throw Error("stack_mismatch", "feature stack depth does not match the network");
  }
  for (std::size_t l = 1; l < trace.levels.size(); ++l) {
    if (trace.levels[l].channels() != stack.units()[l - 1].bank.out_channels) {
      throw Error("stack_mismatch", "feature stack was not produced by this network");
    }
  }
  const std::size_t top = stack.depth();
  return {stack.project(trace, top, masked_seed(trace.levels[top], keys))};
}

ProjectionStack project(const DetectorNet& net, const FeatureStack& stack,
                        const KeyFeatureSet& keys) {
  return project(net.body(), stack.trace, keys.indices);
}

}  // namespace lesionforge
