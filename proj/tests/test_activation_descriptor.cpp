#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <queue>

#include "lesionforge/activation.hpp"
#include "lesionforge/descriptor.hpp"
#include "lesionforge/io.hpp"
#include "suites.hpp"

using namespace lesionforge;
using lftest::grid;

namespace {

ConvStack random_stack(std::mt19937_64& rng, bool nonnegative) {
  std::vector<ConvUnit> units;
  const int ch[] = {2, 3, 4};
  for (int i = 0; i < 2; ++i) {
    ConvUnit u;
    u.bank = lftest::random_bank(rng, 3, 3, ch[i], ch[i + 1]);
    if (nonnegative) {
      for (double& w : u.bank.weights) w = std::abs(w);
      for (double& b : u.bank.bias) b = std::abs(b);
    }
    u.pool = i == 0 ? 2 : 0;
    units.push_back(u);
  }
  return ConvStack(units, 0.01);
}

// Independent 8-connected labelling by breadth-first flood fill.
std::vector<LesionRegion> flood_fill_regions(const FeatureMap& m, int min_area) {
  const int h = m.height(), w = m.width();
  std::vector<int> seen(h * w, 0);
  std::vector<LesionRegion> out;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (m.at(r, c, 0) == 0.0 || seen[r * w + c]) continue;
      int r0 = r, r1 = r, c0 = c, c1 = c, area = 0;
      std::queue<std::pair<int, int>> q;
      q.push({r, c});
      seen[r * w + c] = 1;
      while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop();
        ++area;
        r0 = std::min(r0, y), r1 = std::max(r1, y), c0 = std::min(c0, x), c1 = std::max(c1, x);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
            if (m.at(ny, nx, 0) == 0.0 || seen[ny * w + nx]) continue;
            seen[ny * w + nx] = 1;
            q.push({ny, nx});
          }
      }
      if (area >= min_area) out.push_back({{r0, c0, r1 - r0 + 1, c1 - c0 + 1}, area});
    }
  std::sort(out.begin(), out.end(), [](const LesionRegion& a, const LesionRegion& b) {
    return std::pair(a.rect.row, a.rect.col) < std::pair(b.rect.row, b.rect.col);
  });
  return out;
}

}  // namespace

TEST_CASE("hand two-layer net: projection, regions and descriptor shapes") {
  const lftest::SuiteResult r = lftest::hand_oracle();
  INFO(lftest::failure_text(r));
  CHECK(r.cases >= 20);
  CHECK(r.passed());
}

TEST_CASE("zero keys give zero projections") {
  std::mt19937_64 rng(1);
  const ConvStack stack = random_stack(rng, false);
  const StackTrace t = stack.forward(lftest::random_map(rng, 6, 6, 2));
  const auto proj = project(stack, t, {});
  REQUIRE(proj.levels.size() == 3);
  for (const auto& a : proj.levels) CHECK(a.max_abs() == 0.0);
}

TEST_CASE("single linear layer projects as the transposed conv") {
  std::mt19937_64 rng(2);
  ConvUnit u;
  u.bank = lftest::random_bank(rng, 3, 3, 2, 3);
  u.activate = false;
  const ConvStack stack({u}, 0.01);
  const StackTrace t = stack.forward(lftest::random_map(rng, 5, 5, 2));
  const auto proj = project(stack, t, {0, 2});
  const FeatureMap seed = masked_seed(t.levels[1], {0, 2});
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) CHECK(seed.at(r, c, 1) == 0.0);
  CHECK(proj.level(0) == transposed_conv2d(seed, u.bank));
  CHECK(proj.level(1) == seed);
}

TEST_CASE("projections above the input are nonnegative") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const ConvStack stack = random_stack(rng, false);
    const StackTrace t = stack.forward(lftest::random_map(rng, 8, 8, 2));
    const auto proj = project(stack, t, {0, 1, 2, 3});
    for (std::size_t l = 1; l < proj.levels.size(); ++l)
      for (double v : proj.level(l).values()) CHECK(v >= 0.0);
    CHECK(proj.level(0).shape() == Shape{8, 8, 2});
  }
}

TEST_CASE("projection is additive when every reverse map is nonnegative") {
  std::mt19937_64 rng(4);
  const ConvStack stack = random_stack(rng, true);
  FeatureMap x = lftest::random_map(rng, 8, 8, 2);
  for (double& v : x.values()) v = std::abs(v);
  const StackTrace t = stack.forward(x);
  const auto a = project(stack, t, {0});
  const auto b = project(stack, t, {3});
  const auto ab = project(stack, t, {0, 3});
  for (std::size_t l = 0; l < ab.levels.size(); ++l) {
    FeatureMap sum = a.level(l);
    sum += b.level(l);
    for (std::size_t i = 0; i < sum.size(); ++i)
      CHECK(ab.level(l).values()[i] == doctest::Approx(sum.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("detector projection starts at the bottleneck") {
  DetectorConfig c;
  c.image_size = 16;
  c.block_channels = {3, 4};
  c.convs_per_block = 1;
  c.bottleneck_dim = 6;
  const DetectorNet net = DetectorNet::build(c, 5);
  std::mt19937_64 rng(6);
  const FeatureStack st = forward_with_stack(net, lftest::random_map(rng, 16, 16, 3));
  KeyFeatureSet keys;
  keys.indices = {1, 4};
  const ProjectionStack proj = project(net, st, keys);
  const auto shapes = net.level_shapes();
  REQUIRE(proj.levels.size() == shapes.size());
  for (std::size_t l = 0; l < shapes.size(); ++l) CHECK(proj.level(l).shape() == shapes[l]);
  keys.indices = {7};
  CHECK_THROWS_AS(project(net, st, keys), Error);
}

TEST_CASE("binarization policies") {
  CHECK(binarize_projection(FeatureMap(4, 4, 2), BinarizePolicy{}).sum() == 0.0);
  const FeatureMap a = grid(2, 2, {0.1, 0.9, 0.0, 0.5});
  CHECK(binarize_projection(a, {BinarizePolicy::Kind::absolute, 0.5}) == grid(2, 2, {0, 1, 0, 1}));

  std::mt19937_64 rng(7);
  FeatureMap p = lftest::random_map(rng, 10, 10, 3);
  for (double& v : p.values()) v = std::max(0.0, v);
  FeatureMap scaled = p;
  scaled *= 37.5;
  const FeatureMap m1 = binarize_projection(p, BinarizePolicy{});
  CHECK(m1 == binarize_projection(scaled, BinarizePolicy{}));
  CHECK(m1.sum() > 0.0);
  CHECK(m1.sum() <= 10.0);
  CHECK(binarize_projection(p, {BinarizePolicy::Kind::otsu, 0.0}).sum() > 0.0);
}

TEST_CASE("connected regions match a flood-fill oracle") {
  CHECK(connected_regions(FeatureMap(6, 6, 1), 1).empty());

  FeatureMap two(6, 6, 1);
  for (int r : {0, 1})
    for (int c : {1, 2}) two.at(r, c, 0) = 1.0;
  for (int r : {3, 4})
    for (int c : {3, 4}) two.at(r, c, 0) = 1.0;
  const auto got = connected_regions(two, 1);
  REQUIRE(got.size() == 2);
  CHECK(got[0] == LesionRegion{{0, 1, 2, 2}, 4});
  CHECK(got[1] == LesionRegion{{3, 3, 2, 2}, 4});

  const auto full = connected_regions(FeatureMap(6, 6, 1, 1.0), 1);
  REQUIRE(full.size() == 1);
  CHECK(full[0] == LesionRegion{{0, 0, 6, 6}, 36});

  std::mt19937_64 rng(8);
  std::bernoulli_distribution on(0.3);
  for (int trial = 0; trial < 30; ++trial) {
    FeatureMap m(12, 12, 1);
    for (double& v : m.values()) v = on(rng) ? 1.0 : 0.0;
    const int min_area = trial % 3 + 1;
    CHECK(connected_regions(m, min_area) == flood_fill_regions(m, min_area));
  }
}

TEST_CASE("rectangle mapping between levels") {
  CHECK(map_rect({4, 4, 4, 4}, 2, 8, 8) == Rect{2, 2, 2, 2});
  CHECK(map_rect({3, 3, 3, 3}, 2, 4, 4) == Rect{1, 1, 2, 2});
  bool clamped = false;
  const Rect r = map_rect({10, 10, 5, 5}, 8, 2, 2, &clamped);
  CHECK(r.height >= 1);
  CHECK(r.width >= 1);
  CHECK(r.bottom() <= 2);
}

TEST_CASE("full-image region crops whole maps") {
  std::mt19937_64 rng(9);
  const ConvStack stack = random_stack(rng, false);
  const StackTrace t = stack.forward(lftest::random_map(rng, 8, 8, 2));
  const ProjectionStack proj = project(stack, t, {0, 1, 2, 3});
  const FeatureMap m0(8, 8, 1, 1.0);
  const auto ds = build_descriptors(stack, t, proj, m0, {{{0, 0, 8, 8}, 64}}, {0, 1, 2}, "full");
  REQUIRE(ds.size() == 1);
  auto as_float = [](FeatureMap m) {
    for (double& v : m.values()) v = static_cast<float>(v);
    return m;
  };
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(ds[0].layers[l].feature == as_float(t.levels[l]));
    CHECK(ds[0].layers[l].activation == as_float(proj.level(l)));
    for (double v : ds[0].layers[l].mask.values()) CHECK(v == 1.0);
  }
}

TEST_CASE("detector descriptors: one per region, binary masks, level geometry") {
  DetectorConfig c;
  c.image_size = 16;
  c.block_channels = {3, 4};
  c.convs_per_block = 1;
  c.bottleneck_dim = 6;
  const DetectorNet net = DetectorNet::build(c, 10);
  std::mt19937_64 rng(11);
  const FeatureStack st = forward_with_stack(net, lftest::random_map(rng, 16, 16, 3));
  KeyFeatureSet keys;
  keys.indices = {0, 2, 5};
  const ProjectionStack proj = project(net, st, keys);
  FeatureMap m0(16, 16, 1);
  for (int r = 2; r < 5; ++r)
    for (int col = 3; col < 7; ++col) m0.at(r, col, 0) = 1.0;
  m0.at(12, 12, 0) = m0.at(13, 13, 0) = 1.0;
  const auto regions = connected_regions(m0, 1);
  const auto ds = build_descriptors(net, st, proj, m0, regions, "img");
  REQUIRE(ds.size() == regions.size());
  const auto scales = net.level_scales();
  const auto shapes = net.level_shapes();
  for (std::size_t d = 0; d < ds.size(); ++d) {
    CHECK(ds[d].region == regions[d]);
    CHECK(ds[d].layers.size() == net.descriptor_levels().size());
    for (const auto& layer : ds[d].layers) {
      const Rect want = map_rect(regions[d].rect, scales[layer.level], shapes[layer.level].height,
                                 shapes[layer.level].width);
      CHECK(layer.mask.height() == want.height);
      CHECK(layer.mask.width() == want.width);
      CHECK(layer.feature.channels() == shapes[layer.level].channels);
      for (double v : layer.mask.values()) CHECK((v == 0.0 || v == 1.0));
    }
  }
}

TEST_CASE("strongest regions are ordered by activation mass") {
  FeatureMap mag(4, 4, 1);
  FeatureMap mask(4, 4, 1);
  mag.at(0, 0, 0) = 1.0;
  mag.at(3, 3, 0) = 5.0;
  mask.at(0, 0, 0) = mask.at(3, 3, 0) = 1.0;
  const std::vector<LesionRegion> r{{{0, 0, 1, 1}, 1}, {{3, 3, 1, 1}, 1}};
  const auto top = strongest_regions(r, mag, mask, 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0] == r[1]);
  CHECK(strongest_regions(r, mag, mask, 5).size() == 2);
}

TEST_CASE("descriptor file round trip and integrity") {
  std::mt19937_64 rng(12);
  const ConvStack stack = random_stack(rng, false);
  const StackTrace t = stack.forward(lftest::random_map(rng, 8, 8, 2));
  const ProjectionStack proj = project(stack, t, {1, 2});
  FeatureMap m0(8, 8, 1);
  m0.at(1, 1, 0) = m0.at(1, 2, 0) = m0.at(6, 6, 0) = 1.0;
  const auto ds = build_descriptors(stack, t, proj, m0, connected_regions(m0, 1), {0, 1, 2}, "rt");

  const auto path = std::filesystem::temp_directory_path() / "lesionforge_test.pdsc";
  save_descriptors(ds, path);
  CHECK(load_descriptors(path) == ds);
  CHECK(encode_descriptors(load_descriptors(path)) == read_bytes(path));

  CHECK(decode_descriptors(encode_descriptors({})).empty());

  const auto bytes = encode_descriptors(ds);
  for (std::size_t pos : {std::size_t{0}, std::size_t{7}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] ^= 0x01;
    CHECK_THROWS_AS(decode_descriptors(bad), Error);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK_THROWS_AS(decode_descriptors(truncated), Error);
}
