#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "lesionforge/activation.hpp"
#include "lesionforge/convstack.hpp"
#include "lesionforge/detector.hpp"

namespace lesionforge {

struct Rect {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  int bottom() const { return row + height; }
  int right() const { return col + width; }
  long area() const { return static_cast<long>(height) * width; }
  bool operator==(const Rect&) const = default;
};

void to_json(nlohmann::json& j, const Rect& r);
void from_json(const nlohmann::json& j, Rect& r);

// Maps an input-pixel rectangle to a level with the given downsampling factor:
// floor on the start, ceil on the end, clipped to the level.
Rect map_rect(const Rect& r, int scale, int level_height, int level_width, bool* clamped = nullptr);

struct BinarizePolicy {
  enum class Kind { percentile, absolute, otsu };
  Kind kind = Kind::percentile;
  double value = 95.0;  // percentile in (0, 100] or absolute threshold
};

void to_json(nlohmann::json& j, const BinarizePolicy& p);
void from_json(const nlohmann::json& j, BinarizePolicy& p);

// Per-pixel max over channels of |A|.
FeatureMap projection_magnitude(const FeatureMap& a);
double binarize_threshold(const FeatureMap& magnitude, const BinarizePolicy& policy);
// Single-channel {0, 1} mask; an all-zero projection gives an all-zero mask.
FeatureMap binarize_projection(const FeatureMap& a0, const BinarizePolicy& policy);

struct LesionRegion {
  Rect rect;
  int area = 0;
  bool operator==(const LesionRegion&) const = default;
};

// 8-connected components of a single-channel mask (nonzero = set), dropping
// those smaller than min_area, sorted by (row, col) of their bounding box.
std::vector<LesionRegion> connected_regions(const FeatureMap& mask, int min_area);

// The n regions with the largest sum of magnitude * mask inside their box,
// strongest first (ties keep input order).
std::vector<LesionRegion> strongest_regions(const std::vector<LesionRegion>& regions,
                                            const FeatureMap& magnitude, const FeatureMap& mask,
                                            std::size_t n);

struct DescriptorLayer {
  std::uint32_t level = 0;
  std::uint32_t scale = 1;
  FeatureMap mask;        // M_lr, one channel
  FeatureMap activation;  // A_lr
  FeatureMap feature;     // F_lr
  bool clamped = false;

  bool operator==(const DescriptorLayer&) const = default;
};

struct PathologicalDescriptor {
  std::string source_image_id;
  LesionRegion region;
  std::vector<DescriptorLayer> layers;

  bool operator==(const PathologicalDescriptor&) const = default;
  bool clamped() const;
};

// Downsampling factor of every level of `stack` relative to its input.
std::vector<int> stack_scales(const ConvStack& stack);

// Any-nonzero downsampling of a single-channel mask to a level shape.
FeatureMap downsample_mask(const FeatureMap& m0, int scale, int height, int width);

std::vector<PathologicalDescriptor> build_descriptors(const ConvStack& stack,
                                                      const StackTrace& trace,
                                                      const ProjectionStack& proj,
                                                      const FeatureMap& m0,
                                                      const std::vector<LesionRegion>& regions,
                                                      const std::vector<std::size_t>& levels,
                                                      const std::string& image_id);

std::vector<PathologicalDescriptor> build_descriptors(const DetectorNet& net,
                                                      const FeatureStack& stack,
                                                      const ProjectionStack& proj,
                                                      const FeatureMap& m0,
                                                      const std::vector<LesionRegion>& regions,
                                                      const std::string& image_id);

// PDSC format:
//   "PDSC" | version u16 | lesion count u32 | per lesion: id (u32 len + bytes),
//   rect 4 x u32, area u32, flags u8, layer count u32 | per layer: level u32,
//   scale u32, flags u8, then arrays M, A, F each as name (u8 len + bytes),
//   ndims u32, dims u32..., float32 payload | CRC32 u32 over all prior bytes.
std::vector<std::uint8_t> encode_descriptors(const std::vector<PathologicalDescriptor>& ds);
std::vector<PathologicalDescriptor> decode_descriptors(std::span<const std::uint8_t> bytes);
void save_descriptors(const std::vector<PathologicalDescriptor>& ds,
                      const std::filesystem::path& path);
std::vector<PathologicalDescriptor> load_descriptors(const std::filesystem::path& path);

}  // namespace lesionforge
