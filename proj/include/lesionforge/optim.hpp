#pragma once

#include <span>
#include <vector>

namespace lesionforge {

using ParamList = std::vector<std::span<double>>;

// Adam; with `nesterov` set it applies the Nesterov look-ahead to the first
// moment (NAdam).
class Adam {
 public:
  Adam(double learning_rate, double beta1 = 0.5, double beta2 = 0.999, double epsilon = 1e-8,
       bool nesterov = false);
  // params and grads must list the same arrays in the same order every call.
  void step(const ParamList& params, const ParamList& grads);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  bool nesterov_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// SGD with Nesterov momentum in the "look-ahead" form used by most frameworks.
class NesterovSgd {
 public:
  NesterovSgd(double learning_rate, double momentum, double weight_decay = 0.0);
  void step(const ParamList& params, const ParamList& grads);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, mu_, decay_;
  std::vector<std::vector<double>> velocity_;
};

void zero(const ParamList& grads);

}  // namespace lesionforge
