#pragma once

// Property suites shared by the unit tests and the acceptance binary.

#include <Eigen/Eigenvalues>

#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include "gan_fixture.hpp"

namespace lftest {

struct SuiteResult {
  int cases = 0;
  int failures = 0;
  double max_error = 0.0;
  double seconds = 0.0;
  std::vector<std::string> notes;  // one per failure

  bool passed() const { return failures == 0; }
  void record(bool ok, double err, const std::string& what) {
    ++cases;
    max_error = std::max(max_error, err);
    if (!ok) {
      ++failures;
      notes.push_back(what);
    }
  }
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// <conv(x), y> against <x, conv^T(y)> over random shapes up to 8x8x4.
inline SuiteResult adjoint_suite(int cases, std::uint64_t seed, double tol = 1e-6) {
  Stopwatch sw;
  SuiteResult r;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> side(1, 8), chan(1, 4), ksz(1, 3), stride(1, 2), pad(0, 1);
  while (r.cases < cases) {
    const int h = side(rng), w = side(rng), cin = chan(rng), cout = chan(rng);
    const int kh = ksz(rng), kw = ksz(rng), s = stride(rng);
    const auto p = pad(rng) == 0 ? Padding::same : Padding::valid;
    if (p == Padding::same && (kh % 2 == 0 || kw % 2 == 0)) continue;  // same needs odd kernels
    if (p == Padding::valid && (h < kh || w < kw)) continue;
    KernelBank k = random_bank(rng, kh, kw, cin, cout, s, p);
    std::fill(k.bias.begin(), k.bias.end(), 0.0);
    const FeatureMap x = random_map(rng, h, w, cin);
    const Shape os = conv_output_shape(x.shape(), k);
    const FeatureMap y = random_map(rng, os.height, os.width, os.channels);
    const double a = dot(conv2d(x, k), y);
    const double b = dot(x, transposed_conv2d(y, k, h, w));
    const double err = relative_error(a, b, 1e-12);
    std::ostringstream what;
    what << "case " << r.cases << ": " << h << "x" << w << "x" << cin << " k" << kh << "x" << kw
         << " s" << s << " error " << err;
    r.record(err <= tol, err, what.str());
  }
  r.seconds = sw.seconds();
  return r;
}

// Generator gradients of L_G with each loss family switched on in turn, plus
// discriminator gradients of L_D, against central differences.
inline SuiteResult gradient_suite(int per_config, std::uint64_t seed, double tol = 1e-3) {
  Stopwatch sw;
  SuiteResult r;
  MicroGan m(seed);
  const LossNormalization norm = LossNormalization::mean;
  std::mt19937_64 rng(seed + 100);

  struct Config {
    std::string name;
    LossWeights w;
  };
  auto only = [](double dd, double tv, double dp, double mv) {
    LossWeights w;
    w.w_dd = dd;
    w.w_tv = tv;
    w.w_dp = dp;
    w.w_mv = mv;
    return w;
  };
  const std::vector<Config> configs{{"adv", only(0, 0, 0, 0)},    {"adv+dd", only(1, 0, 0, 0)},
                                    {"adv+tv", only(0, 100, 0, 0)}, {"adv+dp", only(0, 0, 10, 0)},
                                    {"adv+mv", only(0, 0, 0, 500)}, {"L_G", LossWeights{}}};

  Generator& g = m.model.generator;
  const Discriminator& d = m.model.discriminator;
  auto sample = [&](ParamList& params) {
    std::uniform_int_distribution<std::size_t> bank(0, params.size() - 1);
    const std::size_t b = bank(rng);
    std::uniform_int_distribution<std::size_t> idx(0, params[b].size() - 1);
    return std::pair(b, idx(rng));
  };

  for (const Config& c : configs) {
    const PathologicalSetup setup = prepare_pathological(m.det, m.ds, m.plan, c.w, norm);
    auto loss = [&] {
      const FeatureMap x_hat = g.generate(m.pair.mask, m.noise);
      return generator_objective(d, m.ex, m.det, setup, c.w, norm, m.pair, x_hat, nullptr).l_g;
    };
    const GeneratorTrace t = g.forward(m.pair.mask, m.noise);
    FeatureMap grad_out;
    generator_objective(d, m.ex, m.det, setup, c.w, norm, m.pair, t.output, &grad_out);
    std::vector<KernelBank> grads = g.zero_grads();
    g.backward(t, grad_out, grads);
    ParamList params = g.parameters();
    ParamList gp = Generator::parameters(grads);
    for (int i = 0; i < per_config; ++i) {
      const auto [b, k] = sample(params);
      const double fd = central_difference(loss, params[b][k], 1e-5);
      const double err = relative_error(gp[b][k], fd, 1e-6);
      std::ostringstream what;
      what << c.name << " generator bank " << b << " index " << k << ": analytic " << gp[b][k]
           << " numeric " << fd;
      r.record(err <= tol, err, what.str());
    }
  }

  Discriminator& dm = m.model.discriminator;
  const FeatureMap fake = g.generate(m.pair.mask, m.noise);
  auto d_loss = [&] {
    const auto real_out = dm.forward(m.pair.image, m.pair.mask);
    const auto fake_out = dm.forward(fake, m.pair.mask);
    return -adversarial_losses(real_out.prob, fake_out.prob).l_adv;
  };
  std::vector<KernelBank> dg = dm.body().zero_grads();
  const auto real_out = dm.forward(m.pair.image, m.pair.mask);
  const auto fake_out = dm.forward(fake, m.pair.mask);
  dm.backward(real_out, grad_neg_log_p(real_out), &dg);
  dm.backward(fake_out, grad_neg_log_1mp(fake_out), &dg);
  ParamList dparams = dm.parameters();
  ParamList dgp;
  for (auto& b : dg) append_bank_parameters(b, dgp);
  for (int i = 0; i < per_config; ++i) {
    const auto [b, k] = sample(dparams);
    const double fd = central_difference(d_loss, dparams[b][k], 1e-5);
    const double err = relative_error(dgp[b][k], fd, 1e-6);
    std::ostringstream what;
    what << "L_D discriminator bank " << b << " index " << k << ": analytic " << dgp[b][k]
         << " numeric " << fd;
    r.record(err <= tol, err, what.str());
  }
  r.seconds = sw.seconds();
  return r;
}

// Replaces the descriptor's feature patches with the features `image` has at
// `rho`, so the Gram references match that image exactly there.
inline PathologicalDescriptor inject_features(const DetectorNet& det, const PathologicalDescriptor& d,
                                              const FeatureMap& image, const Rect& rho) {
  PathologicalDescriptor out = d;
  const FeatureStack st = forward_with_stack(det, image);
  const auto scales = det.level_scales();
  for (auto& layer : out.layers) {
    const FeatureMap& f = st.level(layer.level);
    const Rect at = level_patch(rho, scales[layer.level], layer.feature.height(),
                                layer.feature.width(), f.height(), f.width());
    layer.feature = f.crop(at.row, at.col, at.height, at.width);
  }
  return out;
}

inline SuiteResult identity_suite(std::uint64_t seed) {
  Stopwatch sw;
  SuiteResult r;
  MicroGan m(seed);
  std::mt19937_64 rng(seed + 7);
  const LossWeights w;
  for (auto norm : {LossNormalization::sum, LossNormalization::mean}) {
    for (int i = 0; i < 5; ++i) {
      const FeatureMap x = random_map(rng, 4, 4, 3, 0.5);
      const double dd = retina_detail_loss(m.ex, x, x, w, norm).dd;
      r.record(dd == 0.0, dd, "L_dd(x, x) = " + std::to_string(dd));
    }
  }
  for (double c : {-1.0, 0.0, 0.37}) {
    const double tv = total_variation(FeatureMap(8, 8, 3, c));
    r.record(tv == 0.0, tv, "L_tv(constant) = " + std::to_string(tv));
  }
  for (int i = 0; i < 5; ++i) {
    const FeatureMap x_hat = random_map(rng, 4, 4, 3, 0.5);
    const Rect rho = m.plan.entries[0].region;
    const std::vector<PathologicalDescriptor> ds{inject_features(m.det, m.ds[0], x_hat, rho)};
    for (auto norm : {LossNormalization::sum, LossNormalization::mean}) {
      const auto setup = prepare_pathological(m.det, ds, m.plan, w, norm);
      const double dp = pathological_loss(m.det, setup, x_hat, w).dp;
      r.record(dp == 0.0, dp, "L_dp with injected features = " + std::to_string(dp));
    }
  }
  PlacementPlan empty = m.plan;
  empty.entries.clear();
  for (int i = 0; i < 5; ++i) {
    const auto setup = prepare_pathological(m.det, {}, empty, w, LossNormalization::mean);
    const double patho = pathological_loss(m.det, setup, random_map(rng, 4, 4, 3, 0.5), w).patho;
    r.record(patho == 0.0, patho, "L_patho with no descriptors = " + std::to_string(patho));
  }
  std::uniform_int_distribution<int> side(1, 6), chan(1, 8);
  for (int i = 0; i < 100; ++i) {
    const FeatureMap f = random_map(rng, side(rng), side(rng), chan(rng));
    const Eigen::MatrixXd g = gram(f);
    const double asym = (g - g.transpose()).cwiseAbs().maxCoeff();
    const double lo = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g).eigenvalues().minCoeff();
    const double floor = -1e-6 * std::max(1.0, g.trace());
    r.record(asym == 0.0 && lo >= floor, std::max(asym, -lo),
             "gram patch " + std::to_string(i) + ": asymmetry " + std::to_string(asym) +
                 ", smallest eigenvalue " + std::to_string(lo));
  }
  r.seconds = sw.seconds();
  return r;
}

// Two units on a 6x6 single-channel input, weights set by hand:
//   unit 1: 3x3 all-ones conv, leaky ReLU, 2x2 max pool
//   unit 2: 1x1 conv with weight 2, leaky ReLU
inline ConvStack hand_stack() {
  ConvUnit u1;
  u1.bank = KernelBank::zeros(3, 3, 1, 1);
  for (double& v : u1.bank.weights) v = 1.0;
  u1.pool = 2;
  ConvUnit u2;
  u2.bank = KernelBank::zeros(1, 1, 1, 1);
  u2.bank.weights[0] = 2.0;
  return ConvStack({u1, u2}, 0.01);
}

inline FeatureMap grid(int h, int w, std::initializer_list<double> v) {
  FeatureMap m(h, w, 1);
  std::copy(v.begin(), v.end(), m.values().begin());
  return m;
}

// project -> binarize -> connected_regions -> build_descriptors on the hand
// stack, compared with values worked out by hand. Returns the mismatches.
inline SuiteResult hand_oracle() {
  Stopwatch sw;
  SuiteResult r;
  auto expect = [&r](bool ok, const std::string& what) { r.record(ok, ok ? 0.0 : 1.0, what); };

  const ConvStack stack = hand_stack();
  FeatureMap x(6, 6, 1);
  x.at(0, 0, 0) = 1.0;
  x.at(5, 5, 0) = 2.0;
  const StackTrace trace = stack.forward(x);

  // level 1: 1 on rows/cols 0-1, 2 on rows/cols 4-5. Each pool window is
  // constant, so its argmax is the window's first element: (0,0) and (4,4).
  // level 2 = 2 * pooled: 2 at (0,0), 4 at (2,2).
  ProjectionStack proj;
  proj.levels = stack.project(trace, 2, masked_seed(trace.levels[2], {0}));
  if (proj.levels.size() != 3) {
    expect(false, "projection has " + std::to_string(proj.levels.size()) + " levels, want 3");
    return r;
  }
  FeatureMap a2(3, 3, 1);
  a2.at(0, 0, 0) = 2.0;
  a2.at(2, 2, 0) = 4.0;
  expect(proj.level(2) == a2, "A_2");
  FeatureMap a1(6, 6, 1);
  a1.at(0, 0, 0) = 4.0;
  a1.at(4, 4, 0) = 8.0;
  expect(proj.level(1) == a1, "A_1");
  // the transposed all-ones conv spreads each impulse over its clipped 3x3
  // neighborhood
  FeatureMap a0(6, 6, 1);
  for (int row = 0; row <= 1; ++row)
    for (int c = 0; c <= 1; ++c) a0.at(row, c, 0) = 4.0;
  for (int row = 3; row <= 5; ++row)
    for (int c = 3; c <= 5; ++c) a0.at(row, c, 0) = 8.0;
  expect(proj.level(0) == a0, "A_0");

  const FeatureMap m0 = binarize_projection(proj.level(0), {BinarizePolicy::Kind::absolute, 0.5});
  FeatureMap want_mask = a0;
  for (double& v : want_mask.values()) v = v > 0.0 ? 1.0 : 0.0;
  expect(m0 == want_mask, "M_0");

  const std::vector<LesionRegion> regions = connected_regions(m0, 1);
  const std::vector<LesionRegion> want_regions{{{0, 0, 2, 2}, 4}, {{3, 3, 3, 3}, 9}};
  expect(regions == want_regions, "two regions (0,0,2,2) and (3,3,3,3)");
  if (regions != want_regions) return r;

  const auto ds = build_descriptors(stack, trace, proj, m0, regions, {0, 1, 2}, "hand");
  expect(ds.size() == 2, "one descriptor per region");
  if (ds.size() != 2) return r;
  // level scales 1, 1, 2: (3,3,3,3) maps to rows floor(3/2)..ceil(6/2) at level 2
  const Shape shapes[2][3] = {{{2, 2, 1}, {2, 2, 1}, {1, 1, 1}}, {{3, 3, 1}, {3, 3, 1}, {2, 2, 1}}};
  for (int d = 0; d < 2; ++d) {
    if (ds[d].layers.size() != 3) {
      expect(false, "descriptor " + std::to_string(d) + " layer count");
      continue;
    }
    for (int l = 0; l < 3; ++l) {
      const auto& layer = ds[d].layers[l];
      const std::string tag = "descriptor " + std::to_string(d) + " level " + std::to_string(l);
      expect(layer.level == static_cast<std::uint32_t>(l), tag + " index");
      expect(layer.mask.shape() == shapes[d][l], tag + " M shape " + layer.mask.shape().str());
      expect(layer.activation.shape() == shapes[d][l], tag + " A shape");
      expect(layer.feature.shape() == shapes[d][l], tag + " F shape");
      expect(!layer.clamped, tag + " unclamped");
    }
  }
  expect(ds[1].layers[2].mask == grid(2, 2, {1, 1, 1, 1}), "M at level 2");
  expect(ds[1].layers[2].activation == grid(2, 2, {0, 0, 0, 4}), "A at level 2");
  expect(ds[1].layers[2].feature == grid(2, 2, {0, 0, 0, 4}), "F at level 2");
  expect(ds[0].layers[0].feature == grid(2, 2, {1, 0, 0, 0}), "F at level 0");
  expect(ds[0].layers[0].activation == grid(2, 2, {4, 4, 4, 4}), "A at level 0");
  r.seconds = sw.seconds();
  return r;
}

// The first few failure notes, one per line.
inline std::string failure_text(const SuiteResult& r, std::size_t limit = 20) {
  std::string out;
  for (std::size_t i = 0; i < r.notes.size() && i < limit; ++i) out += r.notes[i] + "\n";
  return out;
}

inline std::string describe(const SuiteResult& r) {
  std::ostringstream s;
  s << r.cases << " cases, " << r.failures << " failed, max error " << r.max_error << ", "
    << r.seconds << " s";
  return s.str();
}

}  // namespace lftest
