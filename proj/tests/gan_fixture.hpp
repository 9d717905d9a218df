#pragma once

#include <random>

#include "lesionforge/activation.hpp"
#include "lesionforge/descriptor.hpp"
#include "lesionforge/losses.hpp"
#include "lesionforge/synthgan.hpp"
#include "test_support.hpp"

namespace lftest {

using namespace lesionforge;

// 4x4 micro networks sharing one detector, one descriptor and one plan.
struct MicroGan {
  DetectorNet det;
  GanModel model;
  DetailExtractor ex;
  std::vector<PathologicalDescriptor> ds;
  PlacementPlan plan;
  TrainingPair pair;
  FeatureMap noise;

  explicit MicroGan(std::uint64_t seed = 5) {
    std::mt19937_64 rng(seed);
    DetectorConfig dc;
    dc.image_size = 4;
    dc.block_channels = {2};
    dc.convs_per_block = 1;
    dc.bottleneck_dim = 3;
    det = DetectorNet::build(dc, seed);

    GeneratorConfig gc;
    gc.image_size = 4;
    gc.base_channels = 2;
    gc.depth = 2;
    gc.noise_dim = 1;
    DiscriminatorConfig dsc;
    dsc.channels = {2, 2};
    ExtractorConfig ec;
    ec.block_channels = {2, 3};
    ec.convs_per_block = 1;
    ec.layer_block = 2;
    ec.layer_conv = 1;
    ec.feature_gain = 1.0;
    model = GanModel::build(gc, dsc, ec, seed + 1);
    ex = DetailExtractor::build(ec);

    const FeatureMap ref = random_map(rng, 4, 4, 3, 0.5);
    const FeatureStack st = forward_with_stack(det, ref);
    KeyFeatureSet keys;
    keys.indices = {0, 1, 2};
    const ProjectionStack pr = project(det, st, keys);
    FeatureMap m0(4, 4, 1);
    m0.at(0, 0, 0) = m0.at(0, 1, 0) = m0.at(1, 0, 0) = m0.at(1, 1, 0) = 1.0;
    ds = build_descriptors(det, st, pr, m0, {{{0, 0, 2, 2}, 4}}, "micro");

    plan.height = plan.width = 4;
    plan.fov.center_row = plan.fov.center_col = 2.0;
    plan.fov.radius = 3.0;
    plan.fov.disc_row = plan.fov.disc_col = -100.0;
    plan.fov.disc_radius = 1.0;
    plan.entries = {{0, {2, 1, 2, 2}}};

    pair.image = random_map(rng, 4, 4, 3, 0.5);
    pair.mask = FeatureMap(4, 4, 1);
    for (int i = 0; i < 4; ++i) pair.mask.at(i, 1, 0) = 1.0;
    noise = random_map(rng, 4, 4, 1, 0.3);
  }
};

}  // namespace lftest
