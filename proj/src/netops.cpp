#include "lesionforge/netops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>

namespace lesionforge {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

int conv_extent(int in, int kernel, int stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

bool is_pointwise(const KernelBank& k) {
  return k.kernel_h == 1 && k.kernel_w == 1 && k.stride == 1;
}

// (out_h*out_w) x (kh*kw*C) patch matrix with zero fill outside the input.
RowMat im2col(const FeatureMap& in, const KernelBank& k, int out_h, int out_w) {
  const int c = in.channels();
  const int row_len = k.kernel_h * k.kernel_w * c;
  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(out_h) * out_w, row_len);
  const int pt = k.pad_top();
  const int pl = k.pad_left();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      double* dst = cols.data() + (static_cast<std::size_t>(oy) * out_w + ox) * row_len;
      for (int ky = 0; ky < k.kernel_h; ++ky) {
        const int iy = oy * k.stride + ky - pt;
        if (iy < 0 || iy >= in.height()) continue;
        for (int kx = 0; kx < k.kernel_w; ++kx) {
          const int ix = ox * k.stride + kx - pl;
          if (ix < 0 || ix >= in.width()) continue;
          std::copy_n(in.data() + in.index(iy, ix, 0), c,
                      dst + (static_cast<std::size_t>(ky) * k.kernel_w + kx) * c);
        }
      }
    }
  }
  return cols;
}

void col2im(const RowMat& cols, const KernelBank& k, int out_h, int out_w, FeatureMap& dst) {
  const int c = dst.channels();
  const int row_len = k.kernel_h * k.kernel_w * c;
  const int pt = k.pad_top();
  const int pl = k.pad_left();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const double* src = cols.data() + (static_cast<std::size_t>(oy) * out_w + ox) * row_len;
      for (int ky = 0; ky < k.kernel_h; ++ky) {
        const int iy = oy * k.stride + ky - pt;
        if (iy < 0 || iy >= dst.height()) continue;
        for (int kx = 0; kx < k.kernel_w; ++kx) {
          const int ix = ox * k.stride + kx - pl;
          if (ix < 0 || ix >= dst.width()) continue;
          double* d = dst.data() + dst.index(iy, ix, 0);
          const double* s = src + (static_cast<std::size_t>(ky) * k.kernel_w + kx) * c;
          for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
        }
      }
    }
  }
}

void check_input(const FeatureMap& input, const KernelBank& k) {
  if (input.channels() != k.in_channels) {
    throw Error("channel_mismatch", "input has " + std::to_string(input.channels()) +
                                        " channels, kernel expects " +
                                        std::to_string(k.in_channels));
  }
}

}  // namespace

KernelBank KernelBank::zeros(int kh, int kw, int in, int out, int stride, Padding padding) {
  KernelBank k;
  k.kernel_h = kh;
  k.kernel_w = kw;
  k.in_channels = in;
  k.out_channels = out;
  k.stride = stride;
  k.padding = padding;
  k.weights.assign(static_cast<std::size_t>(kh) * kw * in * out, 0.0);
  k.bias.assign(static_cast<std::size_t>(out), 0.0);
  k.validate();
  return k;
}

KernelBank KernelBank::zeros_like() const {
  KernelBank k = *this;
  std::fill(k.weights.begin(), k.weights.end(), 0.0);
  std::fill(k.bias.begin(), k.bias.end(), 0.0);
  return k;
}

void KernelBank::validate() const {
  if (kernel_h < 1 || kernel_w < 1 || in_channels < 1 || out_channels < 1 || stride < 1) {
    throw Error("bad_kernel", "kernel dimensions and stride must be positive");
  }
  if (padding == Padding::same && (kernel_h % 2 == 0 || kernel_w % 2 == 0)) {
    throw Error("bad_kernel", "same padding requires odd kernel sizes");
  }
  if (weights.size() != static_cast<std::size_t>(kernel_h) * kernel_w * in_channels * out_channels ||
      bias.size() != static_cast<std::size_t>(out_channels)) {
    throw Error("bad_kernel", "kernel storage does not match its dimensions");
  }
}

Shape conv_output_shape(const Shape& input, const KernelBank& k) {
  return Shape{conv_extent(input.height, k.kernel_h, k.stride, k.padding),
               conv_extent(input.width, k.kernel_w, k.stride, k.padding), k.out_channels};
}

FeatureMap conv2d(const FeatureMap& input, const KernelBank& k) {
  check_input(input, k);
  require_finite(input, "conv2d input");
  const Shape os = conv_output_shape(input.shape(), k);
  if (os.height < 1 || os.width < 1) {
    throw Error("bad_shape", "kernel larger than input " + input.shape().str());
  }
  FeatureMap out(os);
  RowMap out_m(out.data(), static_cast<Eigen::Index>(os.pixels()), os.channels);
  ConstRowMap w(k.weights.data(), static_cast<Eigen::Index>(k.kernel_h) * k.kernel_w * k.in_channels,
                k.out_channels);
  if (is_pointwise(k)) {
    ConstRowMap in_m(input.data(), static_cast<Eigen::Index>(input.shape().pixels()),
                     input.channels());
    out_m.noalias() = in_m * w;
  } else {
    const RowMat cols = im2col(input, k, os.height, os.width);
    out_m.noalias() = cols * w;
  }
  out_m.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(k.bias.data(), k.out_channels);
  return out;
}

FeatureMap conv2d_backward(const FeatureMap& input, const FeatureMap& grad_output,
                           const KernelBank& k, KernelBank* grad) {
  check_input(input, k);
  const Shape os = conv_output_shape(input.shape(), k);
  if (!(grad_output.shape() == os)) {
    throw Error("shape_mismatch", "gradient " + grad_output.shape().str() +
                                      " does not match conv output " + os.str());
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(os.pixels());
  const Eigen::Index row_len = static_cast<Eigen::Index>(k.kernel_h) * k.kernel_w * k.in_channels;
  ConstRowMap g(grad_output.data(), rows, os.channels);
  ConstRowMap w(k.weights.data(), row_len, k.out_channels);
  FeatureMap grad_in(input.shape());
  if (is_pointwise(k)) {
    ConstRowMap in_m(input.data(), rows, input.channels());
    if (grad != nullptr) {
      RowMap gw(grad->weights.data(), row_len, k.out_channels);
      gw.noalias() += in_m.transpose() * g;
    }
    RowMap gi(grad_in.data(), rows, input.channels());
    gi.noalias() = g * w.transpose();
  } else {
    if (grad != nullptr) {
      const RowMat cols = im2col(input, k, os.height, os.width);
      RowMap gw(grad->weights.data(), row_len, k.out_channels);
      gw.noalias() += cols.transpose() * g;
    }
    const RowMat gcols = g * w.transpose();
    col2im(gcols, k, os.height, os.width, grad_in);
  }
  if (grad != nullptr) {
    Eigen::Map<Eigen::RowVectorXd> gb(grad->bias.data(), k.out_channels);
    gb += g.colwise().sum();
  }
  return grad_in;
}

FeatureMap transposed_conv2d(const FeatureMap& act, const KernelBank& k) {
  int h = 0;
  int w = 0;
  if (k.padding == Padding::same) {
    h = act.height() * k.stride;
    w = act.width() * k.stride;
  } else {
    h = (act.height() - 1) * k.stride + k.kernel_h;
    w = (act.width() - 1) * k.stride + k.kernel_w;
  }
  return transposed_conv2d(act, k, h, w);
}

FeatureMap transposed_conv2d(const FeatureMap& act, const KernelBank& k, int out_height,
                             int out_width) {
  if (act.channels() != k.out_channels) {
    throw Error("channel_mismatch", "projection has " + std::to_string(act.channels()) +
                                        " channels, kernel produces " +
                                        std::to_string(k.out_channels));
  }
  const Shape target{out_height, out_width, k.in_channels};
  const Shape fwd = conv_output_shape(target, k);
  if (fwd.height != act.height() || fwd.width != act.width()) {
    throw Error("bad_shape", "output " + target.str() + " does not map forward onto " +
                                 act.shape().str());
  }
  FeatureMap out(target);
  const Eigen::Index rows = static_cast<Eigen::Index>(act.shape().pixels());
  const Eigen::Index row_len = static_cast<Eigen::Index>(k.kernel_h) * k.kernel_w * k.in_channels;
  ConstRowMap a(act.data(), rows, act.channels());
  ConstRowMap w(k.weights.data(), row_len, k.out_channels);
  if (is_pointwise(k)) {
    RowMap o(out.data(), rows, k.in_channels);
    o.noalias() = a * w.transpose();
  } else {
    const RowMat cols = a * w.transpose();
    col2im(cols, k, act.height(), act.width(), out);
  }
  return out;
}

PoolRecord max_pool(const FeatureMap& input, int window, int stride) {
  if (window < 2 || stride < 1) {
    throw Error("bad_pool", "pool window must be >= 2 and stride >= 1");
  }
  if (window > input.height() || window > input.width()) {
    throw Error("bad_pool", "pool window " + std::to_string(window) +
                                " larger than input " + input.shape().str());
  }
  const int oh = (input.height() - window + stride - 1) / stride + 1;
  const int ow = (input.width() - window + stride - 1) / stride + 1;
  const int ch = input.channels();
  PoolRecord rec;
  rec.window = window;
  rec.stride = stride;
  rec.input_shape = input.shape();
  rec.pooled = FeatureMap(oh, ow, ch);
  rec.argmax.resize(rec.pooled.size());
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int y0 = oy * stride;
      const int x0 = ox * stride;
      const int y1 = std::min(y0 + window, input.height());
      const int x1 = std::min(x0 + window, input.width());
      for (int c = 0; c < ch; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        WindowOffset arg;
        // Row-major scan with strict '>' keeps the first maximum on ties.
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) {
            const double v = input.at(y, x, c);
            if (v > best) {
              best = v;
              arg = {y - y0, x - x0};
            }
          }
        }
        rec.pooled.at(oy, ox, c) = best;
        rec.argmax[rec.pooled.index(oy, ox, c)] = arg;
      }
    }
  }
  return rec;
}

FeatureMap unpool(const PoolRecord& rec, const FeatureMap& values) {
  if (!(values.shape() == rec.pooled.shape())) {
    throw Error("shape_mismatch", "unpool values " + values.shape().str() +
                                      " do not match pooled " + rec.pooled.shape().str());
  }
  FeatureMap out(rec.input_shape);
  for (int oy = 0; oy < values.height(); ++oy) {
    for (int ox = 0; ox < values.width(); ++ox) {
      for (int c = 0; c < values.channels(); ++c) {
        const std::size_t i = values.index(oy, ox, c);
        const WindowOffset a = rec.argmax[i];
        out.at(oy * rec.stride + a.row, ox * rec.stride + a.col, c) += values.data()[i];
      }
    }
  }
  return out;
}

FeatureMap leaky_relu(const FeatureMap& input, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) {
    throw Error("bad_slope", "leaky slope must lie in [0, 1)");
  }
  require_finite(input, "leaky_relu input");
  FeatureMap out = input;
  for (double& v : out.values()) {
    if (v < 0.0) v *= slope;
  }
  return out;
}

FeatureMap leaky_relu_backward(const FeatureMap& output, const FeatureMap& grad_output,
                               double slope) {
  if (!(output.shape() == grad_output.shape())) {
    throw Error("shape_mismatch", "leaky_relu gradient shape mismatch");
  }
  FeatureMap g = grad_output;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (output.data()[i] <= 0.0) g.data()[i] *= slope;
  }
  return g;
}

FeatureMap relu_reverse(const FeatureMap& act) {
  FeatureMap out = act;
  for (double& v : out.values()) v = std::max(v, 0.0);
  return out;
}

FeatureMap upsample_nearest(const FeatureMap& input, int factor) {
  FeatureMap out(input.height() * factor, input.width() * factor, input.channels());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      std::copy_n(input.data() + input.index(y / factor, x / factor, 0), input.channels(),
                  out.data() + out.index(y, x, 0));
    }
  }
  return out;
}

FeatureMap upsample_nearest_backward(const FeatureMap& grad_output, int factor) {
  if (grad_output.height() % factor != 0 || grad_output.width() % factor != 0) {
    throw Error("bad_shape", "upsample gradient not divisible by factor");
  }
  FeatureMap g(grad_output.height() / factor, grad_output.width() / factor,
               grad_output.channels());
  for (int y = 0; y < grad_output.height(); ++y) {
    for (int x = 0; x < grad_output.width(); ++x) {
      for (int c = 0; c < g.channels(); ++c) {
        g.at(y / factor, x / factor, c) += grad_output.at(y, x, c);
      }
    }
  }
  return g;
}

}  // namespace lesionforge
