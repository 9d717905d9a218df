#include "doctest.h"

#include <cmath>
#include <random>

#include "lesionforge/forest.hpp"

using namespace lesionforge;

namespace {

struct Data {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
};

// Label is decided by feature `informative`; every other feature is constant.
Data only_feature(int dim, int informative, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Data d;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(dim, 0.25);
    row[informative] = u(rng);
    d.y.push_back(row[informative] > 0.1 ? 1 : 0);
    d.x.push_back(std::move(row));
  }
  return d;
}

TreeNode leaf(std::vector<double> dist) {
  TreeNode t;
  t.distribution = std::move(dist);
  return t;
}

TreeNode split(int feature, double threshold, int left, int right) {
  TreeNode t;
  t.feature = feature;
  t.threshold = threshold;
  t.left = left;
  t.right = right;
  return t;
}

}  // namespace

TEST_CASE("separable one-dimensional data is learned exactly") {
  const Data d = only_feature(1, 0, 200, 1);
  ForestConfig cfg;
  cfg.n_trees = 20;
  const ForestModel f = fit_forest(d.x, d.y, cfg, 2);
  CHECK(f.accuracy(d.x, d.y) == 1.0);
}

TEST_CASE("noise labels give out-of-bag accuracy near chance") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  Data d;
  const int count = 400;
  for (int i = 0; i < count; ++i) {
    d.x.push_back({n(rng), n(rng), n(rng), n(rng)});
    d.y.push_back(coin(rng) ? 1 : 0);
  }
  ForestConfig cfg;
  cfg.n_trees = 50;
  const ForestModel f = fit_forest(d.x, d.y, cfg, 4);
  const double sigma = std::sqrt(0.25 / count);
  CHECK(std::abs(f.oob_accuracy - 0.5) <= 3.0 * sigma);
}

TEST_CASE("forest fitting is deterministic") {
  const Data d = only_feature(6, 2, 100, 5);
  ForestConfig cfg;
  cfg.n_trees = 10;
  const ForestModel a = fit_forest(d.x, d.y, cfg, 6);
  const ForestModel b = fit_forest(d.x, d.y, cfg, 6);
  REQUIRE(a.trees.size() == b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    REQUIRE(a.trees[t].nodes.size() == b.trees[t].nodes.size());
    for (std::size_t i = 0; i < a.trees[t].nodes.size(); ++i) {
      CHECK(a.trees[t].nodes[i].feature == b.trees[t].nodes[i].feature);
      CHECK(a.trees[t].nodes[i].threshold == b.trees[t].nodes[i].threshold);
    }
  }
  CHECK(a.oob_accuracy == b.oob_accuracy);
}

TEST_CASE("every split lands on the only informative feature") {
  const Data d = only_feature(8, 3, 150, 7);
  ForestConfig cfg;
  cfg.n_trees = 15;
  cfg.max_features = 8;
  const ForestModel f = fit_forest(d.x, d.y, cfg, 8);
  const std::vector<FeatureCount> r = rank_features(f);
  REQUIRE(r.size() == 8);
  CHECK(r[0].index == 3);
  int internal = 0;
  for (const auto& t : f.trees) internal += t.internal_nodes();
  int total = 0;
  for (const auto& c : r) total += c.count;
  CHECK(r[0].count == internal);
  CHECK(total == internal);
  CHECK(internal > 0);
}

TEST_CASE("hand-built two-tree forest") {
  ForestModel f;
  f.feature_dim = 3;
  f.classes = 2;
  f.feature_map = {0, 1, 2};
  DecisionTree t1;
  t1.nodes = {split(2, 0.0, 1, 2), leaf({1.0, 0.0}), leaf({0.0, 1.0})};
  DecisionTree t2;
  t2.nodes = {split(2, 1.0, 1, 2), split(0, 0.5, 3, 4), leaf({0.0, 1.0}), leaf({0.8, 0.2}),
              leaf({0.2, 0.8})};
  f.trees = {t1, t2};

  const std::vector<double> p = f.predict_proba({0.0, 9.0, 0.5});
  // t1 -> right leaf (0, 1); t2 -> left, then x0 = 0 -> (0.8, 0.2)
  CHECK(p[0] == doctest::Approx(0.4));
  CHECK(p[1] == doctest::Approx(0.6));
  CHECK(f.predict({0.0, 9.0, 0.5}) == 1);
  CHECK(f.predict({0.0, 9.0, -1.0}) == 0);

  const std::vector<FeatureCount> r = rank_features(f);
  CHECK(r[0].index == 2);
  CHECK(r[0].count == 2);
  CHECK(r[1].index == 0);
  CHECK(r[1].count == 1);
  CHECK(r[2].index == 1);
  CHECK(r[2].count == 0);
}

TEST_CASE("full tolerance selects a single feature") {
  const Data d = only_feature(8, 5, 120, 9);
  ForestConfig cfg;
  cfg.n_trees = 10;
  const ForestModel f = fit_forest(d.x, d.y, cfg, 10);
  const KeyFeatureSet k = select_key_features(f, d.x, d.y, d.x, d.y, 1.0, cfg, 11);
  CHECK(k.indices.size() == 1);
  CHECK(k.satisfied);
}

TEST_CASE("key feature selection finds the informative feature") {
  const Data d = only_feature(8, 5, 160, 12);
  ForestConfig cfg;
  cfg.n_trees = 20;
  const ForestModel f = fit_forest(d.x, d.y, cfg, 13);
  const KeyFeatureSet k = select_key_features(f, d.x, d.y, d.x, d.y, 0.0, cfg, 14);
  REQUIRE(k.indices.size() == 1);
  CHECK(k.indices[0] == 5);
  CHECK(k.accuracy_subset >= k.accuracy_full);
  const KeyFeatureSet back = key_features_from_json(key_features_json(k));
  CHECK(back.indices == k.indices);
  CHECK(back.accuracy_full == k.accuracy_full);
}
