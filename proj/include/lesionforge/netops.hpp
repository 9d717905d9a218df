#pragma once

#include <cstdint>
#include <vector>

#include "lesionforge/tensor.hpp"

namespace lesionforge {

enum class Padding { same, valid };

// Convolution weights laid out (kh, kw, in_channels, out_channels) row-major,
// which is also the (kh*kw*in) x out matrix used by the im2col product.
struct KernelBank {
  int kernel_h = 1;
  int kernel_w = 1;
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
  Padding padding = Padding::same;
  Buffer weights;
  Buffer bias;

  static KernelBank zeros(int kh, int kw, int in, int out, int stride = 1,
                          Padding padding = Padding::same);

  double& weight(int r, int c, int i, int o) {
    return weights[((static_cast<std::size_t>(r) * kernel_w + c) * in_channels + i) *
                       out_channels + o];
  }
  double weight(int r, int c, int i, int o) const {
    return weights[((static_cast<std::size_t>(r) * kernel_w + c) * in_channels + i) *
                       out_channels + o];
  }
  int pad_top() const { return padding == Padding::same ? (kernel_h - 1) / 2 : 0; }
  int pad_left() const { return padding == Padding::same ? (kernel_w - 1) / 2 : 0; }

  // Same-shaped bank filled with zeros, used as a gradient accumulator.
  KernelBank zeros_like() const;
  void validate() const;
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

Shape conv_output_shape(const Shape& input, const KernelBank& k);

FeatureMap conv2d(const FeatureMap& input, const KernelBank& k);

// Gradient of conv2d. Returns d(loss)/d(input); when `grad` is non-null the
// weight and bias gradients are accumulated into it.
FeatureMap conv2d_backward(const FeatureMap& input, const FeatureMap& grad_output,
                           const KernelBank& k, KernelBank* grad);

// Adjoint of conv2d with respect to its input (bias excluded). The output
// shape is the forward input shape; the two-argument form assumes the
// canonical inverse of the stride/padding arithmetic.
FeatureMap transposed_conv2d(const FeatureMap& act, const KernelBank& k);
FeatureMap transposed_conv2d(const FeatureMap& act, const KernelBank& k, int out_height,
                             int out_width);

struct WindowOffset {
  std::int32_t row = 0;
  std::int32_t col = 0;
  bool operator==(const WindowOffset&) const = default;
};

struct PoolRecord {
  FeatureMap pooled;
  // One entry per pooled element (row, col, channel order), relative to the
  // top-left corner of that element's window.
  std::vector<WindowOffset> argmax;
  int window = 2;
  int stride = 2;
  Shape input_shape;
};

PoolRecord max_pool(const FeatureMap& input, int window, int stride);

// Scatters `values` to the recorded argmax positions; everything else is zero.
// Overlapping windows accumulate, so this is also the max-pool gradient.
FeatureMap unpool(const PoolRecord& rec, const FeatureMap& values);

FeatureMap leaky_relu(const FeatureMap& input, double slope);
// Uses the forward output: the sign of a leaky output matches its input
// (outputs <= 0 take the negative branch, which also covers slope 0).
FeatureMap leaky_relu_backward(const FeatureMap& output, const FeatureMap& grad_output,
                               double slope);
// Reverse-path rectifier of the activation network: plain ReLU.
FeatureMap relu_reverse(const FeatureMap& act);

FeatureMap upsample_nearest(const FeatureMap& input, int factor);
FeatureMap upsample_nearest_backward(const FeatureMap& grad_output, int factor);

}  // namespace lesionforge
