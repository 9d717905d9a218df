#include "lesionforge/descriptor.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

constexpr std::uint16_t kDescriptorVersion = 1;

void write_array(ByteWriter& w, const std::string& name, const FeatureMap& m) {
  w.u8(static_cast<std::uint8_t>(name.size()));
  w.raw(name);
  w.u32(3);
  w.u32(static_cast<std::uint32_t>(m.height()));
  w.u32(static_cast<std::uint32_t>(m.width()));
  w.u32(static_cast<std::uint32_t>(m.channels()));
  for (double v : m.values()) w.f32(static_cast<float>(v));
}

FeatureMap read_array(ByteReader& r, const std::string& expect) {
  const std::string name = r.str(r.u8());
  if (name != expect) {
    throw Error("bad_format", "expected array '" + expect + "', found '" + name + "'");
  }
  if (r.u32() != 3) throw Error("bad_format", "descriptor arrays must be rank 3");
  const std::uint32_t h = r.u32(), w = r.u32(), c = r.u32();
  if (h == 0 || w == 0 || c == 0 || static_cast<std::uint64_t>(h) * w * c * 4 > r.remaining()) {
    throw Error("truncated", "descriptor array '" + name + "' has invalid dims");
  }
  FeatureMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  for (double& v : m.values()) v = r.f32();
  return m;
}

}  // namespace

void to_json(nlohmann::json& j, const Rect& r) {
  j = {{"row", r.row}, {"col", r.col}, {"height", r.height}, {"width", r.width}};
}

void from_json(const nlohmann::json& j, Rect& r) {
  reject_unknown_keys(j, {"row", "col", "height", "width"}, "rect");
  r.row = j.at("row").get<int>();
  r.col = j.at("col").get<int>();
  r.height = j.at("height").get<int>();
  r.width = j.at("width").get<int>();
}

Rect map_rect(const Rect& r, int scale, int level_height, int level_width, bool* clamped) {
  auto floor_div = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
  auto ceil_div = [&](int a, int b) { return -floor_div(-a, b); };
  int r0 = std::clamp(floor_div(r.row, scale), 0, level_height);
  int c0 = std::clamp(floor_div(r.col, scale), 0, level_width);
  int r1 = std::clamp(ceil_div(r.bottom(), scale), 0, level_height);
  int c1 = std::clamp(ceil_div(r.right(), scale), 0, level_width);
  bool clamp = false;
  if (r1 <= r0) {
    r0 = std::min(r0, level_height - 1);
    r1 = r0 + 1;
    clamp = true;
  }
  if (c1 <= c0) {
    c0 = std::min(c0, level_width - 1);
    c1 = c0 + 1;
    clamp = true;
  }
  if (clamped != nullptr) *clamped = clamp;
  return {r0, c0, r1 - r0, c1 - c0};
}

NLOHMANN_JSON_SERIALIZE_ENUM(BinarizePolicy::Kind, {{BinarizePolicy::Kind::percentile, "percentile"},
                                                    {BinarizePolicy::Kind::absolute, "absolute"},
                                                    {BinarizePolicy::Kind::otsu, "otsu"}})

void to_json(nlohmann::json& j, const BinarizePolicy& p) {
  j = {{"kind", p.kind}, {"value", p.value}};
}

void from_json(const nlohmann::json& j, BinarizePolicy& p) {
  reject_unknown_keys(j, {"kind", "value"}, "binarize");
  if (j.contains("kind")) {
    const auto k = j.at("kind").get<std::string>();
    if (k != "percentile" && k != "absolute" && k != "otsu") {
      throw Error("bad_config", "binarize kind must be percentile, absolute or otsu");
    }
    p.kind = j.at("kind").get<BinarizePolicy::Kind>();
  }
  read_opt(j, "value", p.value);
  if (p.kind == BinarizePolicy::Kind::percentile && !(p.value > 0.0 && p.value <= 100.0)) {
    throw Error("bad_config", "binarize percentile must lie in (0, 100]");
  }
}

FeatureMap projection_magnitude(const FeatureMap& a) {
  FeatureMap m(a.height(), a.width(), 1);
  for (int r = 0; r < a.height(); ++r) {
    for (int c = 0; c < a.width(); ++c) {
      double v = 0.0;
      for (int ch = 0; ch < a.channels(); ++ch) v = std::max(v, std::abs(a.at(r, c, ch)));
      m.at(r, c, 0) = v;
    }
  }
  return m;
}

double binarize_threshold(const FeatureMap& magnitude, const BinarizePolicy& policy) {
  std::vector<double> positive;
  for (double v : magnitude.values()) {
    if (v > 0.0) positive.push_back(v);
  }
  if (positive.empty()) return std::numeric_limits<double>::infinity();
  switch (policy.kind) {
    case BinarizePolicy::Kind::absolute:
      return policy.value;
    case BinarizePolicy::Kind::percentile: {
      std::sort(positive.begin(), positive.end());
      // nearest rank
      const double rank = std::ceil(policy.value / 100.0 * static_cast<double>(positive.size()));
      const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, double(positive.size()))) - 1;
      return positive[idx];
    }
    case BinarizePolicy::Kind::otsu: {
      constexpr int kBins = 256;
      const double top = *std::max_element(positive.begin(), positive.end());
      std::array<double, kBins> hist{};
      auto bin = [&](double v) { return std::min(kBins - 1, static_cast<int>(v / top * kBins)); };
      for (double v : magnitude.values()) hist[bin(v)] += 1.0;
      const double total = static_cast<double>(magnitude.size());
      double sum_all = 0.0;
      for (int i = 0; i < kBins; ++i) sum_all += i * hist[i];
      double w0 = 0.0, sum0 = 0.0, best = -1.0;
      int best_bin = 1;
      for (int t = 1; t < kBins; ++t) {
        w0 += hist[t - 1];
        sum0 += (t - 1) * hist[t - 1];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double d = sum0 / w0 - (sum_all - sum0) / w1;
        const double between = w0 * w1 * d * d;
        if (between > best) {
          best = between;
          best_bin = t;
        }
      }
      return top * best_bin / kBins;
    }
  }
  return std::numeric_limits<double>::infinity();
}

FeatureMap binarize_projection(const FeatureMap& a0, const BinarizePolicy& policy) {
  const FeatureMap mag = projection_magnitude(a0);
  const double t = binarize_threshold(mag, policy);
  FeatureMap m(mag.shape());
  for (std::size_t i = 0; i < mag.size(); ++i) {
    m.values()[i] = mag.values()[i] > 0.0 && mag.values()[i] >= t ? 1.0 : 0.0;
  }
  return m;
}

std::vector<LesionRegion> connected_regions(const FeatureMap& mask, int min_area) {
  if (mask.channels() != 1) throw Error("shape_mismatch", "mask must have one channel");
  const int h = mask.height(), w = mask.width();
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<LesionRegion> out;
  std::vector<std::pair<int, int>> queue;
  int next = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (mask.at(r, c, 0) == 0.0 || label[r * w + c] >= 0) continue;
      int r0 = r, r1 = r, c0 = c, c1 = c, area = 0;
      queue.assign(1, {r, c});
      label[r * w + c] = next;
      for (std::size_t q = 0; q < queue.size(); ++q) {
        const auto [pr, pc] = queue[q];
        ++area;
        r0 = std::min(r0, pr);
        r1 = std::max(r1, pr);
        c0 = std::min(c0, pc);
        c1 = std::max(c1, pc);
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = pr + dr, nc = pc + dc;
            if (nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
            if (mask.at(nr, nc, 0) == 0.0 || label[nr * w + nc] >= 0) continue;
            label[nr * w + nc] = next;
            queue.emplace_back(nr, nc);
          }
        }
      }
      ++next;
      if (area >= min_area) out.push_back({{r0, c0, r1 - r0 + 1, c1 - c0 + 1}, area});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const LesionRegion& a, const LesionRegion& b) {
    return std::tie(a.rect.row, a.rect.col) < std::tie(b.rect.row, b.rect.col);
  });
  return out;
}

std::vector<LesionRegion> strongest_regions(const std::vector<LesionRegion>& regions,
                                            const FeatureMap& magnitude, const FeatureMap& mask,
                                            std::size_t n) {
  if (magnitude.channels() != 1 || magnitude.shape() != mask.shape()) {
    throw Error("shape_mismatch", "magnitude and mask must be matching single-channel maps");
  }
  std::vector<std::pair<double, std::size_t>> mass;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const Rect& r = regions[i].rect;
    double s = 0.0;
    for (int y = r.row; y < r.bottom(); ++y)
      for (int x = r.col; x < r.right(); ++x) s += magnitude.at(y, x, 0) * mask.at(y, x, 0);
    mass.emplace_back(s, i);
  }
  std::stable_sort(mass.begin(), mass.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<LesionRegion> out;
  for (std::size_t i = 0; i < std::min(n, mass.size()); ++i) out.push_back(regions[mass[i].second]);
  return out;
}

bool PathologicalDescriptor::clamped() const {
  return std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.clamped; });
}

std::vector<int> stack_scales(const ConvStack& stack) {
  std::vector<int> s{1};
  int scale = 1;
  int pending_pool = 1;
  for (const auto& u : stack.units()) {
    scale *= pending_pool * u.bank.stride;
    s.push_back(scale);
    pending_pool = u.pool > 0 ? u.pool : 1;
  }
  return s;
}

FeatureMap downsample_mask(const FeatureMap& m0, int scale, int height, int width) {
  FeatureMap m(height, width, 1);
  for (int r = 0; r < m0.height(); ++r) {
    for (int c = 0; c < m0.width(); ++c) {
      if (m0.at(r, c, 0) == 0.0) continue;
      const int lr = r / scale, lc = c / scale;
      if (lr < height && lc < width) m.at(lr, lc, 0) = 1.0;
    }
  }
  return m;
}

std::vector<PathologicalDescriptor> build_descriptors(const ConvStack& stack,
                                                      const StackTrace& trace,
                                                      const ProjectionStack& proj,
                                                      const FeatureMap& m0,
                                                      const std::vector<LesionRegion>& regions,
                                                      const std::vector<std::size_t>& levels,
                                                      const std::string& image_id) {
  const FeatureMap& input = trace.levels.at(0);
  if (m0.height() != input.height() || m0.width() != input.width() || m0.channels() != 1) {
    throw Error("shape_mismatch", "mask " + m0.shape().str() + " does not match input " +
                                      input.shape().str());
  }
  const auto scales = stack_scales(stack);
  std::vector<FeatureMap> masks(trace.levels.size());
  for (std::size_t l : levels) {
    if (l >= trace.levels.size() || l >= proj.levels.size()) {
      throw Error("stack_mismatch", "level " + std::to_string(l) + " missing from stack");
    }
    if (!(proj.levels[l].shape() == trace.levels[l].shape())) {
      throw Error("stack_mismatch", "projection and feature shapes differ at level " +
                                        std::to_string(l));
    }
    masks[l] = downsample_mask(m0, scales[l], trace.levels[l].height(), trace.levels[l].width());
  }
  std::vector<PathologicalDescriptor> out;
  out.reserve(regions.size());
  for (const auto& region : regions) {
    const Rect& rc = region.rect;
    if (rc.row < 0 || rc.col < 0 || rc.height < 1 || rc.width < 1 || rc.bottom() > m0.height() ||
        rc.right() > m0.width()) {
      throw Error("region_out_of_bounds", "lesion region lies outside the image");
    }
    PathologicalDescriptor d;
    d.source_image_id = image_id;
    d.region = region;
    for (std::size_t l : levels) {
      const FeatureMap& f = trace.levels[l];
      DescriptorLayer layer;
      layer.level = static_cast<std::uint32_t>(l);
      layer.scale = static_cast<std::uint32_t>(scales[l]);
      const Rect m = map_rect(rc, scales[l], f.height(), f.width(), &layer.clamped);
      layer.mask = masks[l].crop(m.row, m.col, m.height, m.width);
      layer.activation = proj.levels[l].crop(m.row, m.col, m.height, m.width);
      layer.feature = f.crop(m.row, m.col, m.height, m.width);
      round_to_float(layer.activation.values());
      round_to_float(layer.feature.values());
      d.layers.push_back(std::move(layer));
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<PathologicalDescriptor> build_descriptors(const DetectorNet& net,
                                                      const FeatureStack& stack,
                                                      const ProjectionStack& proj,
                                                      const FeatureMap& m0,
                                                      const std::vector<LesionRegion>& regions,
                                                      const std::string& image_id) {
  return build_descriptors(net.body(), stack.trace, proj, m0, regions, net.descriptor_levels(),
                           image_id);
}

std::vector<std::uint8_t> encode_descriptors(const std::vector<PathologicalDescriptor>& ds) {
  ByteWriter w;
  w.raw(std::string("PDSC"));
  w.u16(kDescriptorVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  for (const auto& d : ds) {
    w.u32(static_cast<std::uint32_t>(d.source_image_id.size()));
    w.raw(d.source_image_id);
    const Rect& r = d.region.rect;
    for (int v : {r.row, r.col, r.height, r.width}) w.u32(static_cast<std::uint32_t>(v));
    w.u32(static_cast<std::uint32_t>(d.region.area));
    w.u8(d.clamped() ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(d.layers.size()));
    for (const auto& l : d.layers) {
      w.u32(l.level);
      w.u32(l.scale);
      w.u8(l.clamped ? 1 : 0);
      write_array(w, "M", l.mask);
      write_array(w, "A", l.activation);
      write_array(w, "F", l.feature);
    }
  }
  seal_with_crc(w);
  return std::move(w.bytes());
}

std::vector<PathologicalDescriptor> decode_descriptors(std::span<const std::uint8_t> bytes) {
  const auto body = open_sealed(bytes, "descriptor file");
  ByteReader r(body);
  if (r.str(4) != "PDSC") throw Error("bad_magic", "not a descriptor file");
  const std::uint16_t version = r.u16();
  if (version != kDescriptorVersion) {
    throw Error("version_mismatch", "descriptor file version " + std::to_string(version) +
                                        ", expected " + std::to_string(kDescriptorVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<PathologicalDescriptor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    PathologicalDescriptor d;
    d.source_image_id = r.str(r.u32());
    Rect& rc = d.region.rect;
    rc.row = static_cast<int>(r.u32());
    rc.col = static_cast<int>(r.u32());
    rc.height = static_cast<int>(r.u32());
    rc.width = static_cast<int>(r.u32());
    d.region.area = static_cast<int>(r.u32());
    r.u8();
    const std::uint32_t layers = r.u32();
    for (std::uint32_t k = 0; k < layers; ++k) {
      DescriptorLayer l;
      l.level = r.u32();
      l.scale = r.u32();
      l.clamped = r.u8() != 0;
      l.mask = read_array(r, "M");
      l.activation = read_array(r, "A");
      l.feature = read_array(r, "F");
      if (l.mask.channels() != 1 || l.mask.height() != l.feature.height() ||
          l.mask.width() != l.feature.width() || !(l.activation.shape() == l.feature.shape())) {
        throw Error("bad_format", "descriptor layer patches disagree in shape");
      }
      d.layers.push_back(std::move(l));
    }
    out.push_back(std::move(d));
  }
  if (r.remaining() != 0) throw Error("trailing_bytes", "descriptor file has trailing data");
  return out;
}

void save_descriptors(const std::vector<PathologicalDescriptor>& ds,
                      const std::filesystem::path& path) {
  write_bytes(path, encode_descriptors(ds));
}

std::vector<PathologicalDescriptor> load_descriptors(const std::filesystem::path& path) {
  return decode_descriptors(read_bytes(path));
}

}  // namespace lesionforge
