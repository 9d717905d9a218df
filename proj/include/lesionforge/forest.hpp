#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

namespace lesionforge {

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 12;
  int min_samples_split = 2;
  bool bootstrap = true;
  // features tried per split; 0 selects floor(sqrt(feature_dim))
  int max_features = 0;
};

void to_json(nlohmann::json& j, const ForestConfig& c);
void from_json(const nlohmann::json& j, ForestConfig& c);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::vector<double> distribution;  // leaves only
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<double> predict_proba(const std::vector<double>& x) const;
  int internal_nodes() const;
};

struct ForestModel {
  std::vector<DecisionTree> trees;
  int feature_dim = 0;
  int classes = 0;
  // original feature index for each column the trees were trained on
  std::vector<int> feature_map;
  double oob_accuracy = 0.0;

  std::vector<double> predict_proba(const std::vector<double>& x) const;
  int predict(const std::vector<double>& x) const;
  double accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const;
};

ForestModel fit_forest(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                       const ForestConfig& cfg, std::uint64_t seed);

struct FeatureCount {
  int index = 0;
  int count = 0;
};

// Descending split-usage count, ties by ascending index; covers every feature.
std::vector<FeatureCount> rank_features(const ForestModel& forest);

struct KeyFeatureSet {
  std::vector<int> indices;
  double accuracy_full = 0.0;
  double accuracy_subset = 0.0;
  double tolerance = 0.0;
  bool satisfied = true;
  std::vector<double> prefix_accuracy;  // accuracy of the retrained forest for k = 1, 2, ...
};

nlohmann::json key_features_json(const KeyFeatureSet& k);
KeyFeatureSet key_features_from_json(const nlohmann::json& j);

// Smallest ranking prefix whose retrained forest is within `tolerance` of the
// full forest on (eval_x, eval_y).
KeyFeatureSet select_key_features(const ForestModel& forest,
                                  const std::vector<std::vector<double>>& train_x,
                                  const std::vector<int>& train_y,
                                  const std::vector<std::vector<double>>& eval_x,
                                  const std::vector<int>& eval_y, double tolerance,
                                  const ForestConfig& cfg, std::uint64_t seed, int max_k = 0);

}  // namespace lesionforge
