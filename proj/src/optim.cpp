#include "lesionforge/optim.hpp"

#include <algorithm>
#include <cmath>

#include "lesionforge/tensor.hpp"

namespace lesionforge {

namespace {

void check_lists(const ParamList& params, const ParamList& grads,
                 std::vector<std::vector<double>>& state) {
  if (params.size() != grads.size()) {
    throw Error("optimizer_mismatch", "parameter and gradient lists differ in length");
  }
  if (state.empty()) {
    for (const auto& p : params) state.emplace_back(p.size(), 0.0);
  }
  if (state.size() != params.size()) {
    throw Error("optimizer_mismatch", "parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || params[i].size() != state[i].size()) {
      throw Error("optimizer_mismatch", "parameter array size changed between steps");
    }
  }
}

}  // namespace

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon, bool nesterov)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon), nesterov_(nesterov) {}

void Adam::step(const ParamList& params, const ParamList& grads) {
  check_lists(params, grads, m_);
  check_lists(params, grads, v_);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double c1_next = 1.0 - std::pow(beta1_, static_cast<double>(t_ + 1));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat =
          nesterov_ ? beta1_ * m[j] / c1_next + (1.0 - beta1_) * g / c1 : m[j] / c1;
      params[i][j] -= lr_ * mhat / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

NesterovSgd::NesterovSgd(double learning_rate, double momentum, double weight_decay)
    : lr_(learning_rate), mu_(momentum), decay_(weight_decay) {}

void NesterovSgd::step(const ParamList& params, const ParamList& grads) {
  check_lists(params, grads, velocity_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j] + decay_ * params[i][j];
      vel[j] = mu_ * vel[j] - lr_ * g;
      params[i][j] += mu_ * vel[j] - lr_ * g;
    }
  }
}

void zero(const ParamList& grads) {
  for (const auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
}

}  // namespace lesionforge
