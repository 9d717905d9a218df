#pragma once

#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lesionforge {

// Every failure surfaced to callers carries a short machine-readable code
// next to the human message so the CLI can emit an error record.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Cache-line aligned storage. Vectorized reductions peel a different number of
// leading elements depending on the address, so an unaligned buffer makes
// results depend on the heap layout of the process.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Rank-3 real array, row-major with channels fastest (H, W, C).
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(Shape shape, double fill = 0.0);
  FeatureMap(int height, int width, int channels, double fill = 0.0)
      : FeatureMap(Shape{height, width, channels}, fill) {}
  FeatureMap(Shape shape, std::vector<double> data);
  FeatureMap(Shape shape, Buffer data);

  const Shape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int r, int c, int ch) { return data_[index(r, c, ch)]; }
  double at(int r, int c, int ch) const { return data_[index(r, c, ch)]; }
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * shape_.width + c) * shape_.channels + ch;
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  Buffer& storage() { return data_; }
  const Buffer& storage() const { return data_; }

  void fill(double v);
  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  FeatureMap& operator+=(const FeatureMap& other);
  FeatureMap& operator*=(double s);

  bool operator==(const FeatureMap& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  // Rectangle crop (all channels); the rectangle must lie inside the map.
  FeatureMap crop(int row, int col, int height, int width) const;
  // Adds `patch` into this map at (row, col).
  void add_patch(const FeatureMap& patch, int row, int col);
  // Channel selection / concatenation used by U-Net skips and RGB splits.
  static FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b);
  void split_channels(int first_channels, FeatureMap& a, FeatureMap& b) const;

 private:
  Shape shape_;
  Buffer data_;
};

double dot(const FeatureMap& a, const FeatureMap& b);
double l2_norm(const FeatureMap& a);

// Rounds every entry through float32; used before persisting arrays so that
// a save/load cycle is lossless.
void round_to_float(std::span<double> values);

void require_finite(const FeatureMap& m, const char* where);

}  // namespace lesionforge
