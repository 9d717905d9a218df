#include "lesionforge/manipulate.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

bool rect_in_fov(const Rect& r, const FieldOfView& fov) {
  return fov.contains(r.row, r.col) && fov.contains(r.row, r.right()) &&
         fov.contains(r.bottom(), r.col) && fov.contains(r.bottom(), r.right());
}

bool rect_touches_disc(const Rect& r, const FieldOfView& fov, double margin) {
  const double nr = std::clamp(fov.disc_row, static_cast<double>(r.row), static_cast<double>(r.bottom()));
  const double nc = std::clamp(fov.disc_col, static_cast<double>(r.col), static_cast<double>(r.right()));
  return std::hypot(nr - fov.disc_row, nc - fov.disc_col) < fov.disc_radius + margin;
}

bool rect_inside(const Rect& inner, const Rect& outer) {
  return inner.row >= outer.row && inner.col >= outer.col && inner.bottom() <= outer.bottom() &&
         inner.right() <= outer.right();
}

std::optional<Rect> intersect(const Rect& a, const Rect& b) {
  const int r0 = std::max(a.row, b.row), c0 = std::max(a.col, b.col);
  const int r1 = std::min(a.bottom(), b.bottom()), c1 = std::min(a.right(), b.right());
  if (r1 <= r0 || c1 <= c0) return std::nullopt;
  return Rect{r0, c0, r1 - r0, c1 - c0};
}

Rect allowed_area(const PlacementPlan& p) {
  const Rect image{0, 0, p.height, p.width};
  return p.constraint ? intersect(*p.constraint, image).value_or(Rect{0, 0, 0, 0}) : image;
}

// Why `r` cannot be added to `plan` (empty when it can).
std::string placement_problem(const PlacementPlan& plan, const Rect& r, std::size_t skip) {
  if (!rect_inside(r, Rect{0, 0, plan.height, plan.width})) return "outside the image";
  if (!rect_inside(r, allowed_area(plan))) return "outside the constraint region";
  if (!rect_in_fov(r, plan.fov)) return "outside the field of view";
  if (rect_touches_disc(r, plan.fov, plan.disc_margin)) return "inside the optic disc zone";
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    if (i != skip && overlap_fraction(r, plan.entries[i].region) > plan.max_overlap + 1e-12) {
      return "overlaps entry " + std::to_string(i);
    }
  }
  return {};
}

const Rect& source_rect(const std::vector<PathologicalDescriptor>& ds, int index) {
  if (index < 0 || index >= static_cast<int>(ds.size())) {
    throw Error("bad_index", "descriptor index " + std::to_string(index) + " out of range (" +
                                 std::to_string(ds.size()) + " descriptors)");
  }
  return ds[index].region.rect;
}

std::optional<Rect> sample_position(const PlacementPlan& plan, int h, int w, std::mt19937_64& rng,
                                    int attempts) {
  const Rect area = allowed_area(plan);
  if (area.height < h || area.width < w) return std::nullopt;
  std::uniform_int_distribution<int> rows(area.row, area.bottom() - h);
  std::uniform_int_distribution<int> cols(area.col, area.right() - w);
  for (int a = 0; a < attempts; ++a) {
    const Rect r{rows(rng), cols(rng), h, w};
    if (placement_problem(plan, r, plan.entries.size()).empty()) return r;
  }
  return std::nullopt;
}

// Places descriptor indices in order; throws listing every index that failed.
void place_all(PlacementPlan& plan, const std::vector<PathologicalDescriptor>& ds,
               const std::vector<int>& indices, std::mt19937_64& rng, int attempts) {
  std::vector<int> failed;
  for (int idx : indices) {
    const Rect& src = source_rect(ds, idx);
    if (auto r = sample_position(plan, src.height, src.width, rng, attempts)) {
      plan.entries.push_back({idx, *r});
    } else {
      failed.push_back(idx);
    }
  }
  if (!failed.empty()) {
    std::ostringstream msg;
    msg << "could not place descriptors [";
    for (std::size_t i = 0; i < failed.size(); ++i) msg << (i ? ", " : "") << failed[i];
    msg << "] within " << attempts << " attempts";
    throw Error("placement_failed", msg.str());
  }
}

}  // namespace

double overlap_fraction(const Rect& a, const Rect& b) {
  const auto i = intersect(a, b);
  if (!i) return 0.0;
  return static_cast<double>(i->area()) / static_cast<double>(std::min(a.area(), b.area()));
}

FieldOfView estimate_fov(const FeatureMap& vessel_mask, double fov_fraction,
                         double disc_radius_fraction) {
  const int h = vessel_mask.height(), w = vessel_mask.width();
  const int size = std::min(h, w);
  FieldOfView f;
  f.center_row = h / 2.0;
  f.center_col = w / 2.0;
  f.radius = fov_fraction * size;
  f.disc_radius = disc_radius_fraction * size;
  const int k = std::max(1, static_cast<int>(std::round(f.disc_radius)));
  double best = -1.0;
  f.disc_row = f.center_row;
  f.disc_col = f.center_col;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!f.contains(r + 0.5, c + 0.5)) continue;
      double s = 0.0;
      for (int dr = -k; dr <= k; ++dr) {
        for (int dc = -k; dc <= k; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && cc >= 0 && rr < h && cc < w) s += vessel_mask.at(rr, cc, 0) > 0.0 ? 1 : 0;
        }
      }
      if (s > best) {
        best = s;
        f.disc_row = r + 0.5;
        f.disc_col = c + 0.5;
      }
    }
  }
  return f;
}

nlohmann::json plan_to_json(const PlacementPlan& p) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : p.entries) entries.push_back({{"descriptor", e.descriptor}, {"rect", e.region}});
  nlohmann::json j = {{"descriptor_file", p.descriptor_file},
                      {"height", p.height},
                      {"width", p.width},
                      {"fov", fov_to_json(p.fov)},
                      {"max_overlap", p.max_overlap},
                      {"disc_margin", p.disc_margin},
                      {"constraint", nullptr},
                      {"entries", entries}};
  if (p.constraint) j["constraint"] = *p.constraint;
  return j;
}

PlacementPlan plan_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"descriptor_file", "height", "width", "fov", "max_overlap", "disc_margin",
                          "constraint", "entries"},
                      "plan");
  PlacementPlan p;
  read_opt(j, "descriptor_file", p.descriptor_file);
  p.height = j.at("height").get<int>();
  p.width = j.at("width").get<int>();
  p.fov = fov_from_json(j.at("fov"));
  read_opt(j, "max_overlap", p.max_overlap);
  read_opt(j, "disc_margin", p.disc_margin);
  if (j.contains("constraint") && !j.at("constraint").is_null()) {
    p.constraint = j.at("constraint").get<Rect>();
  }
  for (const auto& e : j.at("entries")) {
    reject_unknown_keys(e, {"descriptor", "rect"}, "plan entry");
    p.entries.push_back({e.at("descriptor").get<int>(), e.at("rect").get<Rect>()});
  }
  return p;
}

void save_plan(const PlacementPlan& p, const std::filesystem::path& path) {
  write_text(path, plan_to_json(p).dump(2) + "\n");
}

PlacementPlan load_plan(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return plan_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_plan", path.string() + ": " + e.what());
  }
}

void check_plan(const PlacementPlan& plan, const std::vector<PathologicalDescriptor>& ds) {
  if (plan.constraint && !allowed_area(plan).area()) {
    throw Error("empty_constraint", "constraint region does not intersect the image");
  }
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    const PlanEntry& e = plan.entries[i];
    const Rect& src = source_rect(ds, e.descriptor);
    if (e.region.height != src.height || e.region.width != src.width) {
      throw Error("bad_plan", "entry " + std::to_string(i) + " size differs from its descriptor");
    }
    const std::string why = placement_problem(plan, e.region, i);
    if (!why.empty()) throw Error("bad_plan", "entry " + std::to_string(i) + " is " + why);
  }
}

PlacementPlan plan_random(const std::vector<PathologicalDescriptor>& ds, const FieldOfView& fov,
                          int height, int width, std::uint64_t seed, const PlanOptions& opt,
                          int multiplicity) {
  if (height < 1 || width < 1) throw Error("bad_plan", "plan needs a positive image size");
  if (multiplicity < 0) throw Error("bad_plan", "multiplicity must be >= 0");
  PlacementPlan plan;
  plan.height = height;
  plan.width = width;
  plan.fov = fov;
  plan.max_overlap = opt.max_overlap;
  plan.disc_margin = opt.disc_margin;
  std::vector<int> order;
  for (int m = 0; m < multiplicity; ++m) {
    for (int i = 0; i < static_cast<int>(ds.size()); ++i) order.push_back(i);
  }
  std::mt19937_64 rng(seed);
  place_all(plan, ds, order, rng, opt.max_attempts);
  return plan;
}

PlacementPlan plan_random(const std::vector<PathologicalDescriptor>& ds,
                          const FeatureMap& vessel_mask, std::uint64_t seed,
                          const PlanOptions& opt) {
  if (ds.empty()) throw Error("no_descriptors", "random placement needs at least one descriptor");
  return plan_random(ds, estimate_fov(vessel_mask), vessel_mask.height(), vessel_mask.width(), seed,
                     opt);
}

PlanOp plan_op_from_json(const nlohmann::json& j) {
  const std::string op = j.at("op").get<std::string>();
  if (op == "drop") {
    reject_unknown_keys(j, {"op", "entry"}, "drop");
    return DropOp{j.at("entry").get<int>()};
  }
  if (op == "clone") {
    reject_unknown_keys(j, {"op", "entry", "rect"}, "clone");
    CloneOp c{j.at("entry").get<int>(), std::nullopt};
    if (j.contains("rect") && !j.at("rect").is_null()) c.region = j.at("rect").get<Rect>();
    return c;
  }
  if (op == "constrain") {
    reject_unknown_keys(j, {"op", "rect"}, "constrain");
    return ConstrainOp{j.at("rect").get<Rect>()};
  }
  throw Error("bad_op", "unknown plan operation '" + op + "'");
}

nlohmann::json plan_op_to_json(const PlanOp& op) {
  if (const auto* d = std::get_if<DropOp>(&op)) return {{"op", "drop"}, {"entry", d->entry}};
  if (const auto* c = std::get_if<CloneOp>(&op)) {
    nlohmann::json j = {{"op", "clone"}, {"entry", c->entry}};
    if (c->region) j["rect"] = *c->region;
    return j;
  }
  return {{"op", "constrain"}, {"rect", std::get<ConstrainOp>(op).region}};
}

PlacementPlan edit_plan(const PlacementPlan& plan, const std::vector<PathologicalDescriptor>& ds,
                        const std::vector<PlanOp>& ops, std::uint64_t seed, int max_attempts) {
  PlacementPlan out = plan;
  std::mt19937_64 rng(seed);
  for (const PlanOp& op : ops) {
    if (const auto* d = std::get_if<DropOp>(&op)) {
      if (d->entry < 0 || d->entry >= static_cast<int>(out.entries.size())) {
        throw Error("bad_index", "drop: no entry " + std::to_string(d->entry));
      }
      out.entries.erase(out.entries.begin() + d->entry);
    } else if (const auto* c = std::get_if<CloneOp>(&op)) {
      if (c->entry < 0 || c->entry >= static_cast<int>(out.entries.size())) {
        throw Error("bad_index", "clone: no entry " + std::to_string(c->entry));
      }
      const int desc = out.entries[c->entry].descriptor;
      if (c->region) {
        const Rect& src = source_rect(ds, desc);
        if (c->region->height != src.height || c->region->width != src.width) {
          throw Error("bad_plan", "clone: rect size differs from the descriptor");
        }
        const std::string why = placement_problem(out, *c->region, out.entries.size());
        if (!why.empty()) throw Error("placement_failed", "clone: rect is " + why);
        out.entries.push_back({desc, *c->region});
      } else {
        place_all(out, ds, {desc}, rng, max_attempts);
      }
    } else {
      const Rect& region = std::get<ConstrainOp>(op).region;
      const Rect current = allowed_area(out);
      const auto next = intersect(region, current);
      if (!next) {
        throw Error("empty_constraint", "constraint region has no overlap with the current one");
      }
      std::vector<int> descs;
      for (const auto& e : out.entries) descs.push_back(e.descriptor);
      out.constraint = *next;
      out.entries.clear();
      for (int idx : descs) {
        const Rect& src = source_rect(ds, idx);
        if (src.height > next->height || src.width > next->width) {
          throw Error("constraint_too_small", "constraint region is smaller than descriptor " +
                                                   std::to_string(idx));
        }
      }
      place_all(out, ds, descs, rng, max_attempts);
    }
  }
  check_plan(out, ds);
  return out;
}

}  // namespace lesionforge
