#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "lesionforge/tensor.hpp"

namespace lesionforge {

enum class LesionKind { microaneurysm, hard_exudate, soft_exudate };

std::string to_string(LesionKind kind);
LesionKind lesion_kind_from_string(const std::string& s);

struct Lesion {
  double row = 0.0;
  double col = 0.0;
  double radius = 0.0;
  LesionKind kind = LesionKind::microaneurysm;
};

// Circular field of view plus the optic disc inside it, in pixel units.
struct FieldOfView {
  double center_row = 0.0;
  double center_col = 0.0;
  double radius = 0.0;
  double disc_row = 0.0;
  double disc_col = 0.0;
  double disc_radius = 0.0;

  bool contains(double row, double col) const;
  bool in_disc(double row, double col, double margin = 0.0) const;
};

struct PhantomConfig {
  int image_size = 64;
  int pool_layers = 3;
  int trunk_count = 4;
  int branch_depth = 3;
  double step_length = 1.4;
  int trunk_steps = 18;
  // Grade g holds microaneurysm counts in [thresholds[g-1], thresholds[g]).
  std::vector<int> ma_thresholds{1, 3, 6, 10};
  int max_microaneurysms = 12;
  // Inclusive exudate count range per grade.
  std::vector<std::vector<int>> exudates_per_grade{{0, 0}, {0, 0}, {0, 1}, {0, 2}, {1, 2}};
  double fov_fraction = 0.46;
  double disc_radius_fraction = 0.085;
  double texture_amplitude = 0.03;
  // -1 draws the grade uniformly; 0..4 forces it.
  int grade = -1;

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

struct PhantomSample {
  FeatureMap fundus;       // H x W x 3 in [-1, 1]
  FeatureMap vessel_mask;  // H x W x 1 in {0, 1}
  std::vector<Lesion> lesions;
  int grade = 0;
  FieldOfView fov;

  int microaneurysm_count() const;
};

int grade_from_microaneurysms(int count, const std::vector<int>& thresholds);

PhantomSample generate_phantom(const PhantomConfig& cfg, std::uint64_t seed);

// Rotation by quarter turns followed by optional flips; applied to an image
// and its mask together for augmentation.
FeatureMap rotate_flip(const FeatureMap& image, int quarter_turns, bool flip_h, bool flip_v);

nlohmann::json truth_json(const PhantomSample& s);
FieldOfView fov_from_json(const nlohmann::json& j);
nlohmann::json fov_to_json(const FieldOfView& f);

struct DatasetEntry {
  std::string id;
  FeatureMap fundus;
  FeatureMap vessel_mask;
  int grade = 0;
  FieldOfView fov;
  std::vector<Lesion> lesions;
};

// Writes samples/NNNN.png, masks/NNNN.png, truth/NNNN.json and manifest.json.
std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir,
                                                 const PhantomConfig& cfg,
                                                 const std::vector<std::uint64_t>& seeds);
std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir);

}  // namespace lesionforge
