#include "lesionforge/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace lesionforge {

std::string Shape::str() const {
  return std::to_string(height) + "x" + std::to_string(width) + "x" +
         std::to_string(channels);
}

FeatureMap::FeatureMap(Shape shape, double fill) : shape_(shape) {
  if (shape.height < 0 || shape.width < 0 || shape.channels < 0) {
    throw Error("bad_shape", "negative dimension in shape " + shape.str());
  }
  data_.assign(shape.size(), fill);
}

FeatureMap::FeatureMap(Shape shape, std::vector<double> data)
    : FeatureMap(shape, Buffer(data.begin(), data.end())) {}

FeatureMap::FeatureMap(Shape shape, Buffer data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape.size()) {
    throw Error("bad_shape", "data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape.str());
  }
}

void FeatureMap::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool FeatureMap::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double FeatureMap::sum() const {
  return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double FeatureMap::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

FeatureMap& FeatureMap::operator+=(const FeatureMap& other) {
  if (!(shape_ == other.shape_)) {
    throw Error("shape_mismatch",
                "cannot add " + other.shape_.str() + " to " + shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

FeatureMap& FeatureMap::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

FeatureMap FeatureMap::crop(int row, int col, int h, int w) const {
  if (row < 0 || col < 0 || h < 1 || w < 1 || row + h > height() ||
      col + w > width()) {
    throw Error("crop_out_of_bounds",
                "crop (" + std::to_string(row) + "," + std::to_string(col) + "," +
                    std::to_string(h) + "," + std::to_string(w) +
                    ") outside map " + shape_.str());
  }
  FeatureMap out(h, w, channels());
  const std::size_t run = static_cast<std::size_t>(w) * channels();
  for (int r = 0; r < h; ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(index(row + r, col, 0)),
                run, out.data_.begin() + static_cast<std::ptrdiff_t>(out.index(r, 0, 0)));
  }
  return out;
}

void FeatureMap::add_patch(const FeatureMap& patch, int row, int col) {
  if (patch.channels() != channels() || row < 0 || col < 0 ||
      row + patch.height() > height() || col + patch.width() > width()) {
    throw Error("crop_out_of_bounds", "patch " + patch.shape().str() +
                                          " does not fit into " + shape_.str());
  }
  for (int r = 0; r < patch.height(); ++r) {
    for (int c = 0; c < patch.width(); ++c) {
      for (int ch = 0; ch < channels(); ++ch) {
        at(row + r, col + c, ch) += patch.at(r, c, ch);
      }
    }
  }
}

FeatureMap FeatureMap::concat_channels(const FeatureMap& a, const FeatureMap& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error("shape_mismatch",
                "concat of " + a.shape().str() + " and " + b.shape().str());
  }
  FeatureMap out(a.height(), a.width(), a.channels() + b.channels());
  double* dst = out.data();
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t p = 0; p < a.shape().pixels(); ++p) {
    dst = std::copy_n(pa, a.channels(), dst);
    dst = std::copy_n(pb, b.channels(), dst);
    pa += a.channels();
    pb += b.channels();
  }
  return out;
}

void FeatureMap::split_channels(int first, FeatureMap& a, FeatureMap& b) const {
  if (first < 0 || first > channels()) {
    throw Error("shape_mismatch", "split index out of range");
  }
  a = FeatureMap(height(), width(), first);
  b = FeatureMap(height(), width(), channels() - first);
  const double* src = data();
  double* pa = a.data();
  double* pb = b.data();
  for (std::size_t p = 0; p < shape_.pixels(); ++p) {
    pa = std::copy_n(src, first, pa);
    pb = std::copy_n(src + first, channels() - first, pb);
    src += channels();
  }
}

double dot(const FeatureMap& a, const FeatureMap& b) {
  if (!(a.shape() == b.shape())) {
    throw Error("shape_mismatch", "dot of " + a.shape().str() + " and " + b.shape().str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double l2_norm(const FeatureMap& a) { return std::sqrt(dot(a, a)); }

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void require_finite(const FeatureMap& m, const char* where) {
  if (!m.all_finite()) {
    throw Error("non_finite", std::string("non-finite value in ") + where);
  }
}

}  // namespace lesionforge
