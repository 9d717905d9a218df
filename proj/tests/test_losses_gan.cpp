#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "suites.hpp"

using namespace lesionforge;
using lftest::MicroGan;

TEST_CASE("generator output is bounded and deterministic") {
  MicroGan m(1);
  const FeatureMap a = m.model.generator.generate(m.pair.mask, m.noise);
  CHECK(a.shape() == Shape{4, 4, 3});
  CHECK(a.max_abs() <= 1.0);
  CHECK(a == m.model.generator.generate(m.pair.mask, m.noise));

  GeneratorConfig gc;
  const Generator g = Generator::build(gc, 3);
  std::mt19937_64 rng(4);
  PhantomConfig pc;
  pc.grade = 0;
  const PhantomSample s = generate_phantom(pc, 5);
  const FeatureMap x = synthesize(g, s.vessel_mask, 0.1, rng);
  CHECK(x.shape() == Shape{64, 64, 3});
  CHECK(x.max_abs() <= 1.0);
}

TEST_CASE("zero-weight generator outputs tanh of the output bias") {
  MicroGan m(2);
  Generator& g = m.model.generator;
  for (KernelBank& b : g.banks()) {
    std::fill(b.weights.begin(), b.weights.end(), 0.0);
    std::fill(b.bias.begin(), b.bias.end(), 0.0);
  }
  KernelBank& out = g.banks().back();
  out.bias[0] = 0.3;
  out.bias[1] = -1.2;
  out.bias[2] = 0.0;
  const FeatureMap x = g.generate(m.pair.mask, m.noise);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      CHECK(x.at(r, c, 0) == doctest::Approx(std::tanh(0.3)));
      CHECK(x.at(r, c, 1) == doctest::Approx(std::tanh(-1.2)));
      CHECK(x.at(r, c, 2) == 0.0);
    }
}

TEST_CASE("adversarial losses at fixed probabilities") {
  const AdversarialLosses half = adversarial_losses(0.5, 0.5);
  CHECK(half.l_adv == doctest::Approx(2.0 * std::log(0.5)));
  CHECK(half.l_adv_g == doctest::Approx(-std::log(0.5)));

  const AdversarialLosses best_d = adversarial_losses(1.0, 0.0);
  CHECK(best_d.l_adv <= 0.0);
  CHECK(best_d.l_adv > -1e-6);
  const AdversarialLosses best_g = adversarial_losses(0.5, 1.0);
  CHECK(best_g.l_adv_g >= 0.0);
  CHECK(best_g.l_adv_g < 1e-6);
  // clamping keeps the logs finite at the other extreme
  CHECK(std::isfinite(adversarial_losses(0.0, 1.0).l_adv));
}

TEST_CASE("total variation by hand") {
  CHECK(total_variation(FeatureMap(5, 5, 3, 0.4)) == 0.0);
  const FeatureMap x = lftest::grid(2, 2, {0, 1, 0, 1});
  CHECK(total_variation(x) == 2.0);
  FeatureMap g;
  total_variation(x, &g);
  // d|x01 - x00|/dx00 = -1 per row
  CHECK(g.at(0, 0, 0) == -1.0);
  CHECK(g.at(0, 1, 0) == 1.0);
}

TEST_CASE("detail loss vanishes on identical images only") {
  MicroGan m(3);
  std::mt19937_64 rng(4);
  const FeatureMap x = lftest::random_map(rng, 4, 4, 3, 0.5);
  const FeatureMap y = lftest::random_map(rng, 4, 4, 3, 0.5);
  const LossWeights w;
  CHECK(retina_detail_loss(m.ex, x, x, w).dd == 0.0);
  const RetinaLoss r = retina_detail_loss(m.ex, x, y, w);
  CHECK(r.dd > 0.0);
  CHECK(r.retina == doctest::Approx(w.w_dd * r.dd + w.w_tv * r.tv));
}

TEST_CASE("gram matrix by hand") {
  FeatureMap f(1, 2, 2);
  f.at(0, 0, 0) = 1.0;
  f.at(0, 1, 0) = 0.0;
  f.at(0, 0, 1) = 0.0;
  f.at(0, 1, 1) = 2.0;
  const Eigen::MatrixXd g = gram(f);
  CHECK(g(0, 0) == 1.0);
  CHECK(g(0, 1) == 0.0);
  CHECK(g(1, 0) == 0.0);
  CHECK(g(1, 1) == 4.0);
  CHECK(gram(FeatureMap(3, 3, 4)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pathological divergence on a hand 1x1x2 patch") {
  // level 1 copies input channels 0 and 1 (identity centre taps, no bias)
  DetectorConfig dc;
  dc.image_size = 4;
  dc.block_channels = {2};
  dc.convs_per_block = 1;
  dc.bottleneck_dim = 3;
  DetectorNet det = DetectorNet::build(dc, 6);
  KernelBank& k = det.body().units()[0].bank;
  std::fill(k.weights.begin(), k.weights.end(), 0.0);
  std::fill(k.bias.begin(), k.bias.end(), 0.0);
  k.weight(1, 1, 0, 0) = 1.0;
  k.weight(1, 1, 1, 1) = 1.0;

  FeatureMap x_hat(4, 4, 3, 0.0);
  x_hat.at(1, 2, 0) = 1.0;
  x_hat.at(1, 2, 1) = 2.0;

  FeatureMap ref(1, 1, 2);
  ref.at(0, 0, 0) = 0.5;
  ref.at(0, 0, 1) = 1.0;
  GramTerm t;
  t.level = 1;
  t.at = {1, 2, 1, 1};
  t.mask = FeatureMap(1, 1, 2, 1.0);
  t.ref = gram(ref);
  t.coef = 1.0;

  PathologicalSetup s;
  s.terms = {t};
  s.entry_count = 1;
  s.layers_per_entry = 1;
  s.redistribution = FeatureMap(4, 4, 1);
  s.dilated = FeatureMap(4, 4, 1);
  s.norm = LossNormalization::sum;

  LossWeights w;
  w.w_dp = 2.0;
  // gram(1, 2) = [[1, 2], [2, 4]]; reference [[0.25, 0.5], [0.5, 1]]
  PathoLoss p = pathological_loss(det, s, x_hat, w);
  CHECK(p.dp == doctest::Approx(0.75 + 1.5 + 1.5 + 3.0));
  CHECK(p.mv == 0.0);
  CHECK(p.patho == doctest::Approx(2.0 * 6.75));

  // a soft mask of (1, 0.5) turns the patch into (1, 1)
  s.terms[0].mask.at(0, 0, 1) = 0.5;
  p = pathological_loss(det, s, x_hat, w);
  CHECK(p.dp == doctest::Approx(0.75 + 0.5 + 0.5 + 0.0));
}

TEST_CASE("loss identities") {
  const lftest::SuiteResult r = lftest::identity_suite(8);
  INFO(lftest::failure_text(r));
  CHECK(r.cases >= 120);
  CHECK(r.passed());
}

TEST_CASE("generator and discriminator gradients match central differences") {
  const lftest::SuiteResult r = lftest::gradient_suite(10, 9);
  INFO(lftest::failure_text(r));
  CHECK(r.cases >= 50);
  CHECK(r.passed());
}

TEST_CASE("soft masks and dilation") {
  const FeatureMap a = normalize_abs(lftest::grid(2, 2, {-2, 1, 0, 4}));
  CHECK(a == lftest::grid(2, 2, {0.5, 0.25, 0, 1}));
  CHECK(normalize_abs(FeatureMap(2, 2, 1)).max_abs() == 0.0);

  const FeatureMap d = dilate_gaussian({{Rect{4, 4, 2, 2}, FeatureMap(2, 2, 1, 1.0)}}, 10, 10);
  CHECK(d.at(4, 4, 0) == 1.0);
  CHECK(d.at(5, 5, 0) == 1.0);
  CHECK(d.at(3, 4, 0) > 0.0);
  CHECK(d.at(3, 4, 0) < 1.0);
  CHECK(d.at(0, 0, 0) == 0.0);
  for (double v : d.values()) CHECK((v == 0.0 || v >= 0.01));
}

TEST_CASE("pathological setup follows the plan") {
  MicroGan m(10);
  const auto s = prepare_pathological(m.det, m.ds, m.plan, LossWeights{}, LossNormalization::mean);
  CHECK(s.entry_count == 1);
  CHECK(s.terms.size() == m.ds[0].layers.size());
  // the level-0 mask of the descriptor lands at the planned rectangle
  const Rect& rho = m.plan.entries[0].region;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const bool inside = r >= rho.row && r < rho.bottom() && c >= rho.col && c < rho.right();
      if (!inside) CHECK(s.redistribution.at(r, c, 0) == 0.0);
    }
  PlacementPlan wrong = m.plan;
  wrong.height = wrong.width = 8;
  CHECK_THROWS_AS(prepare_pathological(m.det, m.ds, wrong, LossWeights{}, LossNormalization::mean),
                  Error);
}

TEST_CASE("default weights and schedule") {
  const LossWeights w;
  CHECK(w.w_dd == 1.0);
  CHECK(w.w_tv == 100.0);
  CHECK(w.w_dp == 10.0);
  CHECK(w.w_mv == 5.0 * w.w_tv);
  CHECK(w.w_gram == 1e6);
  const GanTrainConfig c;
  CHECK(c.g_learning_rate == 2e-4);
  CHECK(c.d_learning_rate == 1e-4);
  CHECK(c.g_updates == 2);
  CHECK(c.d_updates == 1);
  CHECK(c.train_noise == 0.001);
  CHECK(c.test_noise == 0.1);
  LossWeights bad;
  bad.w_tv = -1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("update schedule touches only the scheduled network") {
  MicroGan m(11);
  const auto setup = prepare_pathological(m.det, m.ds, m.plan, LossWeights{}, LossNormalization::mean);
  GanTrainConfig c;
  c.augment = false;

  GanModel only_d = m.model;
  c.g_updates = 0;
  c.d_updates = 1;
  GanTrainer(only_d, m.det, setup, LossWeights{}, c, 1).step(m.pair);
  CHECK(only_d.generator.banks()[0].weights == m.model.generator.banks()[0].weights);
  CHECK_FALSE(only_d.discriminator.body().units()[0].bank.weights ==
              m.model.discriminator.body().units()[0].bank.weights);

  GanModel only_g = m.model;
  c.g_updates = 2;
  c.d_updates = 0;
  GanTrainer(only_g, m.det, setup, LossWeights{}, c, 1).step(m.pair);
  CHECK_FALSE(only_g.generator.banks()[0].weights == m.model.generator.banks()[0].weights);
  CHECK(only_g.discriminator.body().units()[0].bank.weights ==
        m.model.discriminator.body().units()[0].bank.weights);
}

TEST_CASE("GAN training is deterministic and checkpoints round trip") {
  MicroGan m(12);
  const auto setup = prepare_pathological(m.det, m.ds, m.plan, LossWeights{}, LossNormalization::mean);
  GanTrainConfig c;
  c.steps = 6;
  GanModel a = m.model;
  GanModel b = m.model;
  const auto la = train_gan(a, {m.pair}, m.det, setup, LossWeights{}, c, 13);
  const auto lb = train_gan(b, {m.pair}, m.det, setup, LossWeights{}, c, 13);
  REQUIRE(la.size() == 6);
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(gan_log_row(la[i]) == gan_log_row(lb[i]));
  CHECK(a.generator.banks()[1].weights == b.generator.banks()[1].weights);
  CHECK(a.steps_trained == 6);

  a.round_to_float();
  const auto path = std::filesystem::temp_directory_path() / "lesionforge_test.sgan";
  a.save(path);
  const GanModel back = GanModel::load(path);
  CHECK(back.generator.generate(m.pair.mask, m.noise) == a.generator.generate(m.pair.mask, m.noise));
  CHECK(back.steps_trained == 6);
}

TEST_CASE("300 steps on one phantom pair lower the generator loss") {
  PhantomConfig pc;
  pc.grade = 0;
  const PhantomSample s = generate_phantom(pc, 21);
  DetectorConfig dc;
  const DetectorNet det = DetectorNet::build(dc, 22);
  GanModel model = GanModel::build({}, {}, {}, 23);
  PlacementPlan empty;
  empty.height = empty.width = 64;
  const LossWeights w;
  GanTrainConfig c;
  c.steps = 300;
  const auto setup = prepare_pathological(det, {}, empty, w, c.normalization);
  const auto log = train_gan(model, {{s.fundus, s.vessel_mask}}, det, setup, w, c, 24);
  REQUIRE(log.size() == 300);
  auto window = [&](std::size_t end) {
    double sum = 0.0;
    for (std::size_t i = end - 5; i < end; ++i) sum += log[i].l_g;
    return sum / 5.0;
  };
  const double start = window(5);
  CHECK(log.back().l_g < start);
  CHECK(window(300) < start);
}
