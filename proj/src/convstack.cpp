#include "lesionforge/convstack.hpp"

#include <cmath>

namespace lesionforge {

const FeatureMap& StackTrace::unit_input(std::size_t unit) const {
  const std::size_t prev = unit - 1;
  if (pools[prev]) return pools[prev]->pooled;
  return levels[prev];
}

ConvStack::ConvStack(std::vector<ConvUnit> units, double slope)
    : units_(std::move(units)), slope_(slope) {
  for (const auto& u : units_) u.bank.validate();
  for (std::size_t i = 1; i < units_.size(); ++i) {
    if (units_[i].bank.in_channels != units_[i - 1].bank.out_channels) {
      throw Error("bad_network", "unit " + std::to_string(i + 1) +
                                     " input channels do not chain with the previous unit");
    }
  }
}

StackTrace ConvStack::forward(const FeatureMap& input, int last_level) const {
  const std::size_t last =
      last_level < 0 ? units_.size() : std::min<std::size_t>(last_level, units_.size());
  StackTrace t;
  t.levels.reserve(last + 1);
  t.pools.resize(last + 1);
  t.levels.push_back(input);
  for (std::size_t l = 1; l <= last; ++l) {
    const ConvUnit& u = units_[l - 1];
    FeatureMap out = conv2d(t.unit_input(l), u.bank);
    if (u.activate) out = leaky_relu(out, slope_);
    t.levels.push_back(std::move(out));
    if (u.pool > 0 && l < last) t.pools[l] = max_pool(t.levels[l], u.pool, u.pool);
  }
  return t;
}

FeatureMap ConvStack::backward(const StackTrace& trace, const std::vector<FeatureMap>& level_grads,
                               std::vector<KernelBank>* param_grads) const {
  const std::size_t top = trace.levels.size() - 1;
  auto injected = [&](std::size_t l) -> const FeatureMap* {
    if (l < level_grads.size() && !level_grads[l].empty()) return &level_grads[l];
    return nullptr;
  };
  FeatureMap g(trace.levels[top].shape());
  if (const FeatureMap* inj = injected(top)) g += *inj;
  for (std::size_t l = top; l >= 1; --l) {
    const ConvUnit& u = units_[l - 1];
    if (u.activate) g = leaky_relu_backward(trace.levels[l], g, slope_);
    KernelBank* pg = param_grads != nullptr ? &(*param_grads)[l - 1] : nullptr;
    g = conv2d_backward(trace.unit_input(l), g, u.bank, pg);
    if (trace.pools[l - 1]) g = unpool(*trace.pools[l - 1], g);
    if (const FeatureMap* inj = injected(l - 1)) g += *inj;
  }
  return g;
}

std::vector<FeatureMap> ConvStack::project(const StackTrace& trace, std::size_t top,
                                           const FeatureMap& seed) const {
  if (top == 0 || top >= trace.levels.size()) {
    throw Error("bad_level", "projection must start at a computed unit level");
  }
  if (!(seed.shape() == trace.levels[top].shape())) {
    throw Error("shape_mismatch", "projection seed " + seed.shape().str() +
                                      " does not match level shape " +
                                      trace.levels[top].shape().str());
  }
  std::vector<FeatureMap> proj(top + 1);
  proj[top] = units_[top - 1].activate ? relu_reverse(seed) : seed;
  for (std::size_t l = top; l >= 1; --l) {
    const ConvUnit& u = units_[l - 1];
    const FeatureMap& in = trace.unit_input(l);
    FeatureMap s = transposed_conv2d(proj[l], u.bank, in.height(), in.width());
    if (trace.pools[l - 1]) s = unpool(*trace.pools[l - 1], s);
    const bool rectify = l - 1 >= 1 && units_[l - 2].activate;
    proj[l - 1] = rectify ? relu_reverse(s) : std::move(s);
  }
  return proj;
}

std::vector<KernelBank> ConvStack::zero_grads() const {
  std::vector<KernelBank> g;
  g.reserve(units_.size());
  for (const auto& u : units_) g.push_back(u.bank.zeros_like());
  return g;
}

std::size_t ConvStack::parameter_count() const {
  std::size_t n = 0;
  for (const auto& u : units_) n += u.bank.parameter_count();
  return n;
}

void ConvStack::append_parameters(std::vector<std::span<double>>& out) {
  for (auto& u : units_) append_bank_parameters(u.bank, out);
}

void ConvStack::init_he(std::mt19937_64& rng) {
  for (auto& u : units_) init_bank_he(u.bank, rng);
}

void append_bank_parameters(KernelBank& bank, std::vector<std::span<double>>& out) {
  out.emplace_back(bank.weights);
  out.emplace_back(bank.bias);
}

void init_bank_he(KernelBank& bank, std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(bank.kernel_h) * bank.kernel_w * bank.in_channels;
  std::normal_distribution<double> n(0.0, std::sqrt(gain / fan_in));
  for (double& w : bank.weights) w = n(rng);
  std::fill(bank.bias.begin(), bank.bias.end(), 0.0);
}

}  // namespace lesionforge
