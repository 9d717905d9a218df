#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "lesionforge/descriptor.hpp"
#include "lesionforge/phantom.hpp"

namespace lesionforge {

struct PlanEntry {
  int descriptor = 0;
  Rect region;  // rho(d), input pixels
  bool operator==(const PlanEntry&) const = default;
};

struct PlacementPlan {
  std::string descriptor_file;
  int height = 0;
  int width = 0;
  FieldOfView fov;
  double max_overlap = 0.1;
  double disc_margin = 2.0;
  std::optional<Rect> constraint;
  std::vector<PlanEntry> entries;
};

nlohmann::json plan_to_json(const PlacementPlan& p);
PlacementPlan plan_from_json(const nlohmann::json& j);
void save_plan(const PlacementPlan& p, const std::filesystem::path& path);
PlacementPlan load_plan(const std::filesystem::path& path);

// Intersection area over the smaller rectangle's area.
double overlap_fraction(const Rect& a, const Rect& b);

// Circular field of view centered on the image; the optic disc is placed at
// the densest vessel window (vessel trees converge there).
FieldOfView estimate_fov(const FeatureMap& vessel_mask, double fov_fraction = 0.46,
                         double disc_radius_fraction = 0.085);

// Throws when an entry references a missing descriptor, leaves the field of
// view or the constraint, touches the disc zone, changes its descriptor's
// size, or overlaps another entry beyond max_overlap.
void check_plan(const PlacementPlan& plan, const std::vector<PathologicalDescriptor>& ds);

struct PlanOptions {
  double max_overlap = 0.1;
  double disc_margin = 2.0;
  int max_attempts = 1000;
};

// Each descriptor placed `multiplicity` times at rejection-sampled positions.
PlacementPlan plan_random(const std::vector<PathologicalDescriptor>& ds, const FieldOfView& fov,
                          int height, int width, std::uint64_t seed, const PlanOptions& opt = {},
                          int multiplicity = 1);
PlacementPlan plan_random(const std::vector<PathologicalDescriptor>& ds,
                          const FeatureMap& vessel_mask, std::uint64_t seed,
                          const PlanOptions& opt = {});

struct DropOp {
  int entry = 0;
};
struct CloneOp {
  int entry = 0;
  std::optional<Rect> region;  // sampled when absent
};
struct ConstrainOp {
  Rect region;
};
using PlanOp = std::variant<DropOp, CloneOp, ConstrainOp>;

PlanOp plan_op_from_json(const nlohmann::json& j);
nlohmann::json plan_op_to_json(const PlanOp& op);

PlacementPlan edit_plan(const PlacementPlan& plan, const std::vector<PathologicalDescriptor>& ds,
                        const std::vector<PlanOp>& ops, std::uint64_t seed, int max_attempts = 1000);

}  // namespace lesionforge
