#include "lesionforge/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <iomanip>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

using Rgb = std::array<double, 3>;

struct Point {
  double row;
  double col;
};

struct VesselPath {
  std::vector<Point> points;
  double radius;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

class VesselGrower {
 public:
  VesselGrower(const PhantomConfig& cfg, const FieldOfView& fov, std::mt19937_64& rng)
      : cfg_(cfg), fov_(fov), rng_(rng) {}

  void grow(Point start, double heading, int steps, int depth, double radius) {
    std::normal_distribution<double> wobble(0.0, 0.16);
    VesselPath path{{start}, radius};
    Point p = start;
    for (int s = 0; s < steps; ++s) {
      heading += wobble(rng_);
      const Point next{p.row + cfg_.step_length * std::sin(heading),
                       p.col + cfg_.step_length * std::cos(heading)};
      const double dr = next.row - fov_.center_row;
      const double dc = next.col - fov_.center_col;
      if (std::hypot(dr, dc) > fov_.radius - 2.0) break;
      p = next;
      path.points.push_back(p);
    }
    const auto n = path.points.size();
    paths_.push_back(path);
    if (depth <= 0 || n < 5) return;
    std::uniform_real_distribution<double> where(0.3, 0.75);
    std::uniform_real_distribution<double> angle(0.45, 0.95);
    std::bernoulli_distribution second(0.5);
    const int children = second(rng_) ? 2 : 1;
    for (int c = 0; c < children; ++c) {
      const auto at = static_cast<std::size_t>(where(rng_) * static_cast<double>(n - 1));
      const Point from = path.points[at];
      const Point prev = path.points[at > 0 ? at - 1 : 0];
      const double base = std::atan2(from.row - prev.row, from.col - prev.col);
      const double sign = (c == 0) == second(rng_) ? 1.0 : -1.0;
      grow(from, base + sign * angle(rng_), static_cast<int>(steps * 0.6) + 1, depth - 1,
           std::max(0.55, radius * 0.8));
    }
  }

  const std::vector<VesselPath>& paths() const { return paths_; }

 private:
  const PhantomConfig& cfg_;
  const FieldOfView& fov_;
  std::mt19937_64& rng_;
  std::vector<VesselPath> paths_;
};

void rasterize(const std::vector<VesselPath>& paths, FeatureMap& mask) {
  for (const auto& path : paths) {
    for (std::size_t i = 0; i + 1 < path.points.size(); ++i) {
      const Point a = path.points[i];
      const Point b = path.points[i + 1];
      const double len = std::hypot(b.row - a.row, b.col - a.col);
      const int samples = std::max(1, static_cast<int>(std::ceil(len / 0.25)));
      for (int s = 0; s <= samples; ++s) {
        const double t = static_cast<double>(s) / samples;
        const double r = a.row + (b.row - a.row) * t;
        const double c = a.col + (b.col - a.col) * t;
        const int r0 = static_cast<int>(std::floor(r - path.radius));
        const int c0 = static_cast<int>(std::floor(c - path.radius));
        for (int y = r0; y <= r0 + 2 * static_cast<int>(std::ceil(path.radius)) + 1; ++y) {
          for (int x = c0; x <= c0 + 2 * static_cast<int>(std::ceil(path.radius)) + 1; ++x) {
            if (y < 0 || x < 0 || y >= mask.height() || x >= mask.width()) continue;
            if (std::hypot(y + 0.5 - r, x + 0.5 - c) <= path.radius) mask.at(y, x, 0) = 1.0;
          }
        }
      }
    }
  }
}

double distance_to_mask(const FeatureMap& mask, double row, double col, int window) {
  double best = 1e9;
  const int r = static_cast<int>(row);
  const int c = static_cast<int>(col);
  for (int y = std::max(0, r - window); y <= std::min(mask.height() - 1, r + window); ++y) {
    for (int x = std::max(0, c - window); x <= std::min(mask.width() - 1, c + window); ++x) {
      if (mask.at(y, x, 0) > 0.5) best = std::min(best, std::hypot(y + 0.5 - row, x + 0.5 - col));
    }
  }
  return best;
}

bool far_from(const std::vector<Lesion>& lesions, double row, double col, double spacing) {
  return std::all_of(lesions.begin(), lesions.end(), [&](const Lesion& l) {
    return std::hypot(l.row - row, l.col - col) >= spacing;
  });
}

}  // namespace

std::string to_string(LesionKind kind) {
  switch (kind) {
    case LesionKind::microaneurysm: return "microaneurysm";
    case LesionKind::hard_exudate: return "hard_exudate";
    case LesionKind::soft_exudate: return "soft_exudate";
  }
  return "unknown";
}

LesionKind lesion_kind_from_string(const std::string& s) {
  if (s == "microaneurysm") return LesionKind::microaneurysm;
  if (s == "hard_exudate") return LesionKind::hard_exudate;
  if (s == "soft_exudate") return LesionKind::soft_exudate;
  throw Error("bad_truth", "unknown lesion kind '" + s + "'");
}

bool FieldOfView::contains(double row, double col) const {
  return std::hypot(row - center_row, col - center_col) <= radius;
}

bool FieldOfView::in_disc(double row, double col, double margin) const {
  return std::hypot(row - disc_row, col - disc_col) < disc_radius + margin;
}

void PhantomConfig::validate() const {
  if (image_size < 32) throw Error("bad_config", "phantom image_size must be >= 32");
  if (pool_layers < 0 || image_size % (1 << pool_layers) != 0) {
    throw Error("bad_config", "phantom image_size must be divisible by 2^pool_layers");
  }
  if (ma_thresholds.size() != 4 ||
      !std::is_sorted(ma_thresholds.begin(), ma_thresholds.end()) || ma_thresholds[0] < 1 ||
      std::adjacent_find(ma_thresholds.begin(), ma_thresholds.end()) != ma_thresholds.end()) {
    throw Error("bad_config", "ma_thresholds must be 4 strictly increasing counts >= 1");
  }
  if (max_microaneurysms < ma_thresholds.back()) {
    throw Error("bad_config", "max_microaneurysms must reach the grade-4 threshold");
  }
  if (exudates_per_grade.size() != 5) {
    throw Error("bad_config", "exudates_per_grade needs one [lo, hi] range per grade");
  }
  for (const auto& r : exudates_per_grade) {
    if (r.size() != 2 || r[0] < 0 || r[0] > r[1]) {
      throw Error("bad_config", "exudates_per_grade ranges must be [lo, hi] with 0 <= lo <= hi");
    }
  }
  if (grade < -1 || grade > 4) throw Error("bad_config", "grade must be -1 or 0..4");
  if (trunk_count < 1 || trunk_steps < 2 || step_length <= 0.0) {
    throw Error("bad_config", "vessel tree parameters must be positive");
  }
}

void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = {{"image_size", c.image_size},
       {"pool_layers", c.pool_layers},
       {"trunk_count", c.trunk_count},
       {"branch_depth", c.branch_depth},
       {"step_length", c.step_length},
       {"trunk_steps", c.trunk_steps},
       {"ma_thresholds", c.ma_thresholds},
       {"max_microaneurysms", c.max_microaneurysms},
       {"exudates_per_grade", c.exudates_per_grade},
       {"fov_fraction", c.fov_fraction},
       {"disc_radius_fraction", c.disc_radius_fraction},
       {"texture_amplitude", c.texture_amplitude},
       {"grade", c.grade}};
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
  reject_unknown_keys(j,
                      {"image_size", "pool_layers", "trunk_count", "branch_depth", "step_length",
                       "trunk_steps", "ma_thresholds", "max_microaneurysms",
                       "exudates_per_grade", "fov_fraction", "disc_radius_fraction",
                       "texture_amplitude", "grade"},
                      "phantom");
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "pool_layers", c.pool_layers);
  read_opt(j, "trunk_count", c.trunk_count);
  read_opt(j, "branch_depth", c.branch_depth);
  read_opt(j, "step_length", c.step_length);
  read_opt(j, "trunk_steps", c.trunk_steps);
  read_opt(j, "ma_thresholds", c.ma_thresholds);
  read_opt(j, "max_microaneurysms", c.max_microaneurysms);
  read_opt(j, "exudates_per_grade", c.exudates_per_grade);
  read_opt(j, "fov_fraction", c.fov_fraction);
  read_opt(j, "disc_radius_fraction", c.disc_radius_fraction);
  read_opt(j, "texture_amplitude", c.texture_amplitude);
  read_opt(j, "grade", c.grade);
}

int PhantomSample::microaneurysm_count() const {
  return static_cast<int>(std::count_if(lesions.begin(), lesions.end(), [](const Lesion& l) {
    return l.kind == LesionKind::microaneurysm;
  }));
}

int grade_from_microaneurysms(int count, const std::vector<int>& thresholds) {
  return static_cast<int>(std::count_if(thresholds.begin(), thresholds.end(),
                                        [count](int t) { return count >= t; }));
}

PhantomSample generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int n = cfg.image_size;
  const double size = n;
  auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };

  PhantomSample s;
  s.fov.center_row = size / 2.0;
  s.fov.center_col = size / 2.0;
  s.fov.radius = cfg.fov_fraction * size;
  s.fov.disc_row = size * uniform(0.45, 0.55);
  s.fov.disc_col = size * uniform(0.26, 0.32);
  s.fov.disc_radius = cfg.disc_radius_fraction * size;

  VesselGrower grower(cfg, s.fov, rng);
  for (int t = 0; t < cfg.trunk_count; ++t) {
    const double spread = cfg.trunk_count == 1 ? 0.0
                                               : -2.2 + 4.4 * t / (cfg.trunk_count - 1);
    grower.grow({s.fov.disc_row, s.fov.disc_col}, spread + uniform(-0.2, 0.2), cfg.trunk_steps,
                cfg.branch_depth, 0.85);
  }
  s.vessel_mask = FeatureMap(n, n, 1);
  rasterize(grower.paths(), s.vessel_mask);

  std::uniform_int_distribution<int> pick_grade(0, 4);
  const int grade = cfg.grade >= 0 ? cfg.grade : pick_grade(rng);
  int ma_count = 0;
  if (grade > 0) {
    const int lo = cfg.ma_thresholds[grade - 1];
    const int hi = grade < 4 ? cfg.ma_thresholds[grade] - 1 : cfg.max_microaneurysms;
    ma_count = std::uniform_int_distribution<int>(lo, hi)(rng);
  }
  const auto& ex_range = cfg.exudates_per_grade[grade];
  const int ex_count = std::uniform_int_distribution<int>(ex_range[0], ex_range[1])(rng);

  // Microaneurysms sit within 3 px of the far ends of vessels.
  std::vector<Point> candidates;
  for (const auto& path : grower.paths()) {
    const std::size_t from = path.points.size() / 2;
    if (from >= path.points.size()) continue;
    for (std::size_t k = 0; k < 4 * (path.points.size() - from); ++k) {
      const std::size_t i = from + k % (path.points.size() - from);
      const double a = uniform(0.0, 2.0 * std::numbers::pi);
      const double d = uniform(1.0, 3.0);
      const Point p{path.points[i].row + d * std::sin(a), path.points[i].col + d * std::cos(a)};
      const double dr = p.row - s.fov.center_row;
      const double dc = p.col - s.fov.center_col;
      if (std::hypot(dr, dc) > s.fov.radius - 3.0 || s.fov.in_disc(p.row, p.col, 3.0)) continue;
      const double to_vessel = distance_to_mask(s.vessel_mask, p.row, p.col, 4);
      if (to_vessel < 1.5 || to_vessel > 3.0) continue;
      candidates.push_back(p);
    }
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  for (const Point& p : candidates) {
    if (static_cast<int>(s.lesions.size()) == ma_count) break;
    if (!far_from(s.lesions, p.row, p.col, 4.0)) continue;
    s.lesions.push_back({p.row, p.col, uniform(0.85, 1.1), LesionKind::microaneurysm});
  }
  if (static_cast<int>(s.lesions.size()) < ma_count) {
    throw Error("fov_too_small", "field of view too small for " + std::to_string(ma_count) +
                                     " microaneurysms (placed " +
                                     std::to_string(s.lesions.size()) + ")");
  }

  // Exudates stay off-vessel.
  int placed = 0;
  for (int attempt = 0; attempt < 400 && placed < ex_count; ++attempt) {
    const double a = uniform(0.0, 2.0 * std::numbers::pi);
    const double d = std::sqrt(uniform(0.0, 1.0)) * (s.fov.radius - 5.0);
    const double row = s.fov.center_row + d * std::sin(a);
    const double col = s.fov.center_col + d * std::cos(a);
    if (s.fov.in_disc(row, col, 4.0) || !far_from(s.lesions, row, col, 6.0) ||
        distance_to_mask(s.vessel_mask, row, col, 4) < 3.0) {
      continue;
    }
    const bool hard = uniform(0.0, 1.0) < 0.6;
    s.lesions.push_back({row, col, hard ? uniform(1.2, 1.7) : uniform(1.9, 2.5),
                         hard ? LesionKind::hard_exudate : LesionKind::soft_exudate});
    ++placed;
  }
  if (placed < ex_count) {
    throw Error("fov_too_small", "field of view too small for " + std::to_string(ex_count) +
                                     " exudates");
  }
  s.grade = grade_from_microaneurysms(ma_count, cfg.ma_thresholds);

  // Low-frequency texture: a few random plane waves.
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    waves.push_back({uniform(-0.25, 0.25), uniform(-0.25, 0.25), uniform(0.0, 6.3),
                     cfg.texture_amplitude * uniform(0.5, 1.0)});
  }

  const Rgb background{0.80, 0.36, 0.16};
  const Rgb disc_color{0.98, 0.86, 0.56};
  const Rgb vessel_color{0.52, 0.14, 0.08};
  const Rgb ma_color{0.16, 0.0, 0.0};
  const Rgb hard_color{0.98, 0.90, 0.40};
  const Rgb soft_color{0.93, 0.82, 0.64};

  s.fundus = FeatureMap(n, n, 3, -1.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double py = y + 0.5;
      const double px = x + 0.5;
      if (!s.fov.contains(py, px)) continue;
      const double rr = std::hypot(py - s.fov.center_row, px - s.fov.center_col) / s.fov.radius;
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.fy * py + w.fx * px + w.phase);
      const double shade = 1.0 - 0.35 * rr * rr + tex;
      Rgb c{background[0] * shade, background[1] * shade, background[2] * shade};
      const double dd = std::hypot(py - s.fov.disc_row, px - s.fov.disc_col) / s.fov.disc_radius;
      c = mix(c, disc_color, 0.9 * std::exp(-std::pow(dd, 4.0)));
      c = mix(c, vessel_color, 0.55 * s.vessel_mask.at(y, x, 0));
      for (const auto& l : s.lesions) {
        const double d2 = (py - l.row) * (py - l.row) + (px - l.col) * (px - l.col);
        const double g = std::exp(-d2 / (2.0 * l.radius * l.radius));
        switch (l.kind) {
          case LesionKind::microaneurysm: c = mix(c, ma_color, 0.95 * g); break;
          case LesionKind::hard_exudate: c = mix(c, hard_color, 0.85 * g); break;
          case LesionKind::soft_exudate: c = mix(c, soft_color, 0.6 * g); break;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        s.fundus.at(y, x, ch) = 2.0 * std::clamp(c[ch], 0.0, 1.0) - 1.0;
      }
    }
  }
  return s;
}

FeatureMap rotate_flip(const FeatureMap& image, int quarter_turns, bool flip_h, bool flip_v) {
  if (image.height() != image.width()) {
    throw Error("bad_shape", "rotation augmentation needs a square image");
  }
  const int n = image.height();
  FeatureMap out(image.shape());
  const int turns = ((quarter_turns % 4) + 4) % 4;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int sy = y;
      int sx = x;
      if (flip_v) sy = n - 1 - sy;
      if (flip_h) sx = n - 1 - sx;
      for (int t = 0; t < turns; ++t) {
        const int ty = sx;
        sx = n - 1 - sy;
        sy = ty;
      }
      std::copy_n(image.data() + image.index(sy, sx, 0), image.channels(),
                  out.data() + out.index(y, x, 0));
    }
  }
  return out;
}

nlohmann::json fov_to_json(const FieldOfView& f) {
  return {{"center_row", f.center_row}, {"center_col", f.center_col}, {"radius", f.radius},
          {"disc_row", f.disc_row},     {"disc_col", f.disc_col},     {"disc_radius", f.disc_radius}};
}

FieldOfView fov_from_json(const nlohmann::json& j) {
  FieldOfView f;
  f.center_row = j.at("center_row").get<double>();
  f.center_col = j.at("center_col").get<double>();
  f.radius = j.at("radius").get<double>();
  f.disc_row = j.at("disc_row").get<double>();
  f.disc_col = j.at("disc_col").get<double>();
  f.disc_radius = j.at("disc_radius").get<double>();
  return f;
}

nlohmann::json truth_json(const PhantomSample& s) {
  nlohmann::json lesions = nlohmann::json::array();
  for (const auto& l : s.lesions) {
    lesions.push_back(
        {{"kind", to_string(l.kind)}, {"row", l.row}, {"col", l.col}, {"radius", l.radius}});
  }
  return {{"grade", s.grade}, {"lesions", lesions}, {"fov", fov_to_json(s.fov)}};
}

namespace {

std::string sample_id(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir,
                                                 const PhantomConfig& cfg,
                                                 const std::vector<std::uint64_t>& seeds) {
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const PhantomSample s = generate_phantom(cfg, seeds[i]);
    const std::string id = sample_id(i);
    const auto sample = dir / "samples" / (id + ".png");
    const auto mask = dir / "masks" / (id + ".png");
    const auto truth = dir / "truth" / (id + ".json");
    write_png_signed(sample, s.fundus);
    FeatureMap m = s.vessel_mask;
    m *= 255.0;
    write_png(mask, m);
    write_text(truth, truth_json(s).dump(2) + "\n");
    written.insert(written.end(), {sample, mask, truth});
  }
  nlohmann::json manifest = {{"format", "lesionforge-phantom"},
                             {"version", 1},
                             {"count", seeds.size()},
                             {"config", cfg},
                             {"seeds", seeds}};
  const auto path = dir / "manifest.json";
  write_text(path, manifest.dump(2) + "\n");
  written.push_back(path);
  return written;
}

std::vector<DatasetEntry> read_dataset(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_bytes(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  PhantomConfig cfg = manifest.at("config").get<PhantomConfig>();
  const auto count = manifest.at("count").get<std::size_t>();
  std::vector<DatasetEntry> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    DatasetEntry e;
    e.id = sample_id(i);
    e.fundus = load_and_preprocess(dir / "samples" / (e.id + ".png"), cfg.image_size);
    e.vessel_mask = load_mask(dir / "masks" / (e.id + ".png"), cfg.image_size);
    const auto tb = read_bytes(dir / "truth" / (e.id + ".json"));
    const auto truth = nlohmann::json::parse(tb.begin(), tb.end());
    e.grade = truth.at("grade").get<int>();
    e.fov = fov_from_json(truth.at("fov"));
    for (const auto& l : truth.at("lesions")) {
      e.lesions.push_back({l.at("row").get<double>(), l.at("col").get<double>(),
                           l.at("radius").get<double>(),
                           lesion_kind_from_string(l.at("kind").get<std::string>())});
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace lesionforge
