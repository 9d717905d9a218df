#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gan_fixture.hpp"
#include "lesionforge/evaluate.hpp"

using namespace lesionforge;
using lftest::MicroGan;

namespace {

// Textbook formula, valid without ties.
double spearman_no_ties(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double rx = 1.0, ry = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (x[j] < x[i]) rx += 1.0;
      if (y[j] < y[i]) ry += 1.0;
    }
    d2 += (rx - ry) * (rx - ry);
  }
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
}

}  // namespace

TEST_CASE("average ranks share ties") {
  CHECK(average_ranks({1, 2, 2, 3}) == std::vector<double>{1, 2.5, 2.5, 4});
  CHECK(average_ranks({5, 5, 5}) == std::vector<double>{2, 2, 2});
  CHECK(average_ranks({3, 1, 2}) == std::vector<double>{3, 1, 2});
}

TEST_CASE("spearman against the rank-difference formula") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const int n = 3 + t % 9;
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = u(rng);
      y[i] = 0.5 * x[i] + u(rng);
    }
    CHECK(spearman(x, y) == doctest::Approx(spearman_no_ties(x, y)));
  }
  CHECK(spearman({0, 1, 2, 4}, {0.1, 0.2, 0.3, 5.0}) == doctest::Approx(1.0));
  CHECK(spearman({0, 1, 2, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(spearman({1, 2, 3}, {7, 7, 7}), Error);
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), Error);
}

TEST_CASE("severity curve sizes, determinism and row independence") {
  MicroGan a(3), b(4);
  std::vector<FeatureMap> masks;
  for (int i = 0; i < 10; ++i) {
    FeatureMap m(4, 4, 1);
    m.at(i % 4, (i / 4) % 4, 0) = 1.0;
    masks.push_back(m);
  }
  const std::vector<CountedGenerator> gens{{0, &a.model.generator}, {2, &b.model.generator}};
  const SeverityCurve c = severity_curve(gens, a.det, masks, 20, 0.1, 7);
  REQUIRE(c.rows.size() == 2);
  for (const auto& r : c.rows) {
    CHECK(r.scores.size() == 200);
    CHECK(r.mean >= 0.0);
    CHECK(r.mean <= 4.0);
    const double mean = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / 200.0;
    CHECK(r.mean == doctest::Approx(mean));
  }
  const SeverityCurve again = severity_curve(gens, a.det, masks, 20, 0.1, 7);
  CHECK(again.rows[1].scores == c.rows[1].scores);

  const SeverityCurve alone = severity_curve({{2, &b.model.generator}}, a.det, masks, 20, 0.1, 7);
  CHECK(alone.rows[0].scores == c.rows[1].scores);
  CHECK(std::isnan(alone.spearman));

  CHECK_THROWS_AS(severity_curve(gens, a.det, {}, 20, 0.1, 7), Error);
  CHECK_THROWS_AS(severity_curve({{1, nullptr}}, a.det, masks, 1, 0.1, 7), Error);

  const std::string csv = curve_csv(c);
  CHECK(csv.rfind("count,n,mean_severity,stddev\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("image grid tiles with a gutter") {
  const FeatureMap one(2, 2, 1, 0.5);
  const FeatureMap two(2, 2, 1, 0.25);
  const FeatureMap g = image_grid({one, two, one}, 2);
  CHECK(g.shape() == Shape{5, 5, 1});
  CHECK(g.at(0, 0, 0) == 0.5);
  CHECK(g.at(0, 3, 0) == 0.25);
  CHECK(g.at(0, 2, 0) == -1.0);
  CHECK(g.at(3, 1, 0) == 0.5);
  CHECK(g.at(4, 4, 0) == -1.0);
  CHECK(image_grid({one}, 4).shape() == Shape{2, 2, 1});
  CHECK_THROWS_AS(image_grid({one, FeatureMap(3, 2, 1)}, 2), Error);
}

TEST_CASE("sweep and curve configs round trip and reject unknown keys") {
  SweepConfig s;
  s.values = {0.0, 10.0};
  s.parameter = SweepParameter::w_dd;
  const SweepConfig back = nlohmann::json(s).get<SweepConfig>();
  CHECK(back.values == s.values);
  CHECK(back.parameter == SweepParameter::w_dd);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"valuez":[1]})").get<SweepConfig>(), Error);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"parameter":"w_tv"})").get<SweepConfig>(), Error);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"values":[-1]})").get<SweepConfig>(), Error);

  CurveTraining c;
  c.steps = 7;
  c.scale_w_dp = false;
  const CurveTraining cb = nlohmann::json(c).get<CurveTraining>();
  CHECK(cb.steps == 7);
  CHECK_FALSE(cb.scale_w_dp);
  CHECK(cb.counts == std::vector<int>{0, 1, 2, 4});
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"stepz":1})").get<CurveTraining>(), Error);
}

TEST_CASE("single-value sweep runs and flags failures") {
  MicroGan m(8);
  GanTrainConfig t;
  t.steps = 3;
  SweepConfig s;
  s.values = {1.0};
  s.samples_per_mask = 2;
  s.samples_kept = 1;
  const auto rows = ablation_sweep(m.model, {m.pair}, {m.pair}, m.det, m.ds, m.plan, s, t, 9);
  REQUIRE(rows.size() == 1);
  CHECK_FALSE(rows[0].flagged);
  CHECK(rows[0].seed == 9);
  CHECK(rows[0].samples.size() == 1);
  CHECK(rows[0].config_hash.size() == 64);
  CHECK(rows[0].mean_severity >= 0.0);
  CHECK(rows[0].mean_severity <= 4.0);

  s.values = {0.0, 2.0};
  const auto two = ablation_sweep(m.model, {m.pair}, {m.pair}, m.det, m.ds, m.plan, s, t, 9);
  REQUIRE(two.size() == 2);
  CHECK(two[0].config_hash != two[1].config_hash);
  const std::string csv = sweep_csv(two, SweepParameter::w_dp);
  CHECK(csv.find("w_dp") != std::string::npos);

  // a plan that does not fit the detector is flagged, not thrown
  PlacementPlan wrong = m.plan;
  wrong.height = wrong.width = 8;
  const auto bad = ablation_sweep(m.model, {m.pair}, {m.pair}, m.det, m.ds, wrong, s, t, 9);
  REQUIRE(bad.size() == 2);
  CHECK(bad[0].flagged);
  CHECK_FALSE(bad[0].error.empty());
}

TEST_CASE("count generators place every descriptor count times") {
  MicroGan m(10);
  CurveTraining c;
  c.counts = {0, 1, 2};
  c.steps = 2;
  GanTrainConfig t;
  const auto out = train_count_generators(m.model, {m.pair}, m.det, m.ds, m.plan.fov, c, t, 11);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].count == c.counts[i]);
    CHECK(out[i].plan.entries.size() == static_cast<std::size_t>(c.counts[i]) * m.ds.size());
  }
}
