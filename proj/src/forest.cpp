#include "lesionforge/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lesionforge/jsonutil.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

namespace {

struct Builder {
  const std::vector<std::vector<double>>& x;
  const std::vector<int>& y;
  int classes;
  int max_features;
  const ForestConfig& cfg;
  std::mt19937_64& rng;
  DecisionTree tree;

  std::vector<double> distribution(const std::vector<int>& idx) const {
    std::vector<double> d(classes, 0.0);
    for (int i : idx) d[y[i]] += 1.0;
    for (double& v : d) v /= static_cast<double>(idx.size());
    return d;
  }

  int build(std::vector<int> idx, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    std::vector<int> counts(classes, 0);
    for (int i : idx) ++counts[y[i]];
    const bool pure = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) <= 1;
    if (pure || depth >= cfg.max_depth || static_cast<int>(idx.size()) < cfg.min_samples_split) {
      tree.nodes[id].distribution = distribution(idx);
      return id;
    }

    const int dim = static_cast<int>(x[0].size());
    std::vector<int> features(dim);
    std::iota(features.begin(), features.end(), 0);
    // partial Fisher-Yates: the first max_features entries are the sample
    for (int f = 0; f < max_features; ++f) {
      std::uniform_int_distribution<int> pick(f, dim - 1);
      std::swap(features[f], features[pick(rng)]);
    }

    const double n = static_cast<double>(idx.size());
    double best_score = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    double parent_sq = 0.0;
    for (int c : counts) parent_sq += static_cast<double>(c) * c;
    const double parent_gini = 1.0 - parent_sq / (n * n);

    std::vector<std::pair<double, int>> column(idx.size());
    std::vector<int> left(classes);
    for (int fi = 0; fi < max_features; ++fi) {
      const int f = features[fi];
      for (std::size_t k = 0; k < idx.size(); ++k) column[k] = {x[idx[k]][f], y[idx[k]]};
      std::sort(column.begin(), column.end());
      std::fill(left.begin(), left.end(), 0);
      double left_sq = 0.0;
      double right_sq = parent_sq;
      for (std::size_t k = 0; k + 1 < column.size(); ++k) {
        const int c = column[k].second;
        const double lc = left[c];
        const double rc = counts[c] - lc;
        left_sq += 2.0 * lc + 1.0;
        right_sq -= 2.0 * rc - 1.0;
        ++left[c];
        if (column[k].first == column[k + 1].first) continue;
        const double nl = static_cast<double>(k + 1);
        const double nr = n - nl;
        const double gini = (nl - left_sq / nl) / n + (nr - right_sq / nr) / n;
        const double gain = parent_gini - gini;
        if (gain > best_score + 1e-12) {
          best_score = gain;
          best_feature = f;
          best_threshold = 0.5 * (column[k].first + column[k + 1].first);
        }
      }
    }
    if (best_feature < 0) {
      tree.nodes[id].distribution = distribution(idx);
      return id;
    }
    std::vector<int> li, ri;
    for (int i : idx) (x[i][best_feature] <= best_threshold ? li : ri).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    tree.nodes[id].feature = best_feature;
    tree.nodes[id].threshold = best_threshold;
    const int l = build(std::move(li), depth + 1);
    const int r = build(std::move(ri), depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

std::vector<std::vector<double>> select_columns(const std::vector<std::vector<double>>& x,
                                                const std::vector<int>& cols) {
  std::vector<std::vector<double>> out(x.size(), std::vector<double>(cols.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) out[i][c] = x[i][cols[c]];
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const ForestConfig& c) {
  j = {{"n_trees", c.n_trees},
       {"max_depth", c.max_depth},
       {"min_samples_split", c.min_samples_split},
       {"bootstrap", c.bootstrap},
       {"max_features", c.max_features}};
}

void from_json(const nlohmann::json& j, ForestConfig& c) {
  reject_unknown_keys(j, {"n_trees", "max_depth", "min_samples_split", "bootstrap", "max_features"},
                      "forest");
  read_opt(j, "n_trees", c.n_trees);
  read_opt(j, "max_depth", c.max_depth);
  read_opt(j, "min_samples_split", c.min_samples_split);
  read_opt(j, "bootstrap", c.bootstrap);
  read_opt(j, "max_features", c.max_features);
}

std::vector<double> DecisionTree::predict_proba(const std::vector<double>& x) const {
  int n = 0;
  while (nodes[n].feature >= 0) {
    n = x[nodes[n].feature] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
  }
  return nodes[n].distribution;
}

int DecisionTree::internal_nodes() const {
  return static_cast<int>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& t) { return t.feature >= 0; }));
}

std::vector<double> ForestModel::predict_proba(const std::vector<double>& x) const {
  std::vector<double> local(feature_map.size());
  for (std::size_t c = 0; c < feature_map.size(); ++c) local[c] = x.at(feature_map[c]);
  std::vector<double> p(classes, 0.0);
  for (const auto& t : trees) {
    const auto d = t.predict_proba(local);
    for (int c = 0; c < classes; ++c) p[c] += d[c];
  }
  for (double& v : p) v /= static_cast<double>(trees.size());
  return p;
}

int ForestModel::predict(const std::vector<double>& x) const {
  const auto p = predict_proba(x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double ForestModel::accuracy(const std::vector<std::vector<double>>& x,
                             const std::vector<int>& y) const {
  if (x.empty()) return 0.0;
  int hit = 0;
  for (std::size_t i = 0; i < x.size(); ++i) hit += predict(x[i]) == y[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(x.size());
}

ForestModel fit_forest(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                       const ForestConfig& cfg, std::uint64_t seed) {
  if (x.empty() || x.size() != y.size()) {
    throw Error("bad_dataset", "forest needs matching, nonempty vectors and labels");
  }
  const std::size_t dim = x[0].size();
  if (dim == 0) throw Error("bad_dataset", "feature vectors are empty");
  for (const auto& v : x) {
    if (v.size() != dim) throw Error("bad_dataset", "feature vectors differ in dimension");
  }
  if (cfg.n_trees < 1 || cfg.max_depth < 1 || cfg.min_samples_split < 2 || cfg.max_features < 0) {
    throw Error("bad_config", "invalid forest configuration");
  }
  int classes = 0;
  for (int label : y) {
    if (label < 0) throw Error("bad_dataset", "labels must be nonnegative");
    classes = std::max(classes, label + 1);
  }
  std::vector<int> seen(classes, 0);
  for (int label : y) seen[label] = 1;
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
    throw Error("degenerate_labels", "random forest needs at least two classes");
  }

  ForestModel model;
  model.feature_dim = static_cast<int>(dim);
  model.classes = classes;
  model.feature_map.resize(dim);
  std::iota(model.feature_map.begin(), model.feature_map.end(), 0);
  const int mf = cfg.max_features > 0
                     ? std::min<int>(cfg.max_features, static_cast<int>(dim))
                     : std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(dim)))));

  const std::size_t n = x.size();
  std::vector<std::vector<double>> oob_votes(n, std::vector<double>(classes, 0.0));
  std::vector<int> oob_hits(n, 0);
  std::mt19937_64 master(seed);
  for (int t = 0; t < cfg.n_trees; ++t) {
    std::mt19937_64 rng(master());
    std::vector<int> sample(n);
    std::vector<char> in_bag(n, cfg.bootstrap ? 0 : 1);
    if (cfg.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (auto& s : sample) {
        s = static_cast<int>(pick(rng));
        in_bag[s] = 1;
      }
    } else {
      std::iota(sample.begin(), sample.end(), 0);
    }
    Builder b{x, y, classes, mf, cfg, rng, {}};
    b.build(std::move(sample), 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (in_bag[i]) continue;
      const auto d = b.tree.predict_proba(x[i]);
      for (int c = 0; c < classes; ++c) oob_votes[i][c] += d[c];
      ++oob_hits[i];
    }
    model.trees.push_back(std::move(b.tree));
  }
  int scored = 0, correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (oob_hits[i] == 0) continue;
    ++scored;
    const int pred = static_cast<int>(std::max_element(oob_votes[i].begin(), oob_votes[i].end()) -
                                      oob_votes[i].begin());
    correct += pred == y[i] ? 1 : 0;
  }
  model.oob_accuracy = scored > 0 ? static_cast<double>(correct) / scored : 0.0;
  return model;
}

std::vector<FeatureCount> rank_features(const ForestModel& forest) {
  std::vector<FeatureCount> r(forest.feature_dim);
  for (int i = 0; i < forest.feature_dim; ++i) r[i].index = i;
  for (const auto& t : forest.trees) {
    for (const auto& node : t.nodes) {
      if (node.feature >= 0) ++r[forest.feature_map[node.feature]].count;
    }
  }
  std::stable_sort(r.begin(), r.end(), [](const FeatureCount& a, const FeatureCount& b) {
    return a.count != b.count ? a.count > b.count : a.index < b.index;
  });
  return r;
}

nlohmann::json key_features_json(const KeyFeatureSet& k) {
  return {{"indices", k.indices},
          {"accuracy_full", k.accuracy_full},
          {"accuracy_subset", k.accuracy_subset},
          {"tolerance", k.tolerance},
          {"satisfied", k.satisfied},
          {"prefix_accuracy", k.prefix_accuracy}};
}

KeyFeatureSet key_features_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"indices", "accuracy_full", "accuracy_subset", "tolerance", "satisfied",
                          "prefix_accuracy", "ranking"},
                      "key_features");
  KeyFeatureSet k;
  k.indices = j.at("indices").get<std::vector<int>>();
  read_opt(j, "accuracy_full", k.accuracy_full);
  read_opt(j, "accuracy_subset", k.accuracy_subset);
  read_opt(j, "tolerance", k.tolerance);
  read_opt(j, "satisfied", k.satisfied);
  read_opt(j, "prefix_accuracy", k.prefix_accuracy);
  std::vector<int> sorted = k.indices;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.empty() || std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() ||
      sorted.front() < 0) {
    throw Error("bad_key_features", "key feature indices must be unique and nonnegative");
  }
  k.indices = sorted;
  return k;
}

KeyFeatureSet select_key_features(const ForestModel& forest,
                                  const std::vector<std::vector<double>>& train_x,
                                  const std::vector<int>& train_y,
                                  const std::vector<std::vector<double>>& eval_x,
                                  const std::vector<int>& eval_y, double tolerance,
                                  const ForestConfig& cfg, std::uint64_t seed, int max_k) {
  if (eval_x.empty() || eval_x.size() != eval_y.size()) {
    throw Error("bad_dataset", "key feature selection needs a nonempty evaluation split");
  }
  KeyFeatureSet out;
  out.tolerance = tolerance;
  out.accuracy_full = forest.accuracy(eval_x, eval_y);
  const auto ranking = rank_features(forest);
  const int limit = max_k > 0 ? std::min(max_k, forest.feature_dim) : forest.feature_dim;
  std::vector<int> prefix;
  for (int k = 1; k <= limit; ++k) {
    prefix.push_back(ranking[k - 1].index);
    ForestModel sub = fit_forest(select_columns(train_x, prefix), train_y, cfg, seed);
    sub.feature_map = prefix;
    sub.feature_dim = forest.feature_dim;
    const double acc = sub.accuracy(eval_x, eval_y);
    out.prefix_accuracy.push_back(acc);
    if (acc >= out.accuracy_full - tolerance) {
      out.indices = prefix;
      out.accuracy_subset = acc;
      std::sort(out.indices.begin(), out.indices.end());
      return out;
    }
  }
  out.satisfied = false;
  out.indices.resize(forest.feature_dim);
  std::iota(out.indices.begin(), out.indices.end(), 0);
  out.accuracy_subset = out.accuracy_full;
  return out;
}

}  // namespace lesionforge
