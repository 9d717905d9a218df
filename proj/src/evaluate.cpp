#include "lesionforge/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::int64_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(k),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(k) >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw Error("bad_input", "spearman needs two equally long series of length >= 2");
  }
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("constant_series", "spearman of a constant series");
  return sxy / std::sqrt(sxx * syy);
}

SeverityCurve severity_curve(const std::vector<CountedGenerator>& generators,
                             const DetectorNet& detector, const std::vector<FeatureMap>& masks,
                             int n_per_mask, double noise_stddev, std::uint64_t seed) {
  if (masks.empty() || n_per_mask < 1) throw Error("bad_input", "severity curve needs masks and n_per_mask >= 1");
  SeverityCurve curve;
  for (const auto& cg : generators) {
    if (cg.generator == nullptr) throw Error("missing_checkpoint", "no generator for count " + std::to_string(cg.count));
    CurveRow row;
    row.count = cg.count;
    std::mt19937_64 rng(derive_seed(seed, 1, cg.count));
    for (const auto& m : masks) {
      for (int i = 0; i < n_per_mask; ++i) {
        row.scores.push_back(severity(detector, synthesize(*cg.generator, m, noise_stddev, rng)).score);
      }
    }
    const double n = static_cast<double>(row.scores.size());
    row.mean = std::accumulate(row.scores.begin(), row.scores.end(), 0.0) / n;
    double ss = 0.0;
    for (double s : row.scores) ss += (s - row.mean) * (s - row.mean);
    row.stddev = row.scores.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    curve.rows.push_back(std::move(row));
  }
  std::vector<double> c, m;
  for (const auto& r : curve.rows) {
    c.push_back(r.count);
    m.push_back(r.mean);
  }
  try {
    curve.spearman = spearman(c, m);
  } catch (const Error&) {
    curve.spearman = std::numeric_limits<double>::quiet_NaN();
  }
  return curve;
}

std::string curve_csv(const SeverityCurve& curve) {
  std::ostringstream os;
  os << "count,n,mean_severity,stddev\n";
  for (const auto& r : curve.rows) {
    os << r.count << ',' << r.scores.size() << ',' << fmt(r.mean) << ',' << fmt(r.stddev) << '\n';
  }
  return os.str();
}

GanModel train_base_generator(const GanModel& init, const std::vector<TrainingPair>& pairs,
                              const DetectorNet& detector, const LossWeights& weights,
                              const GanTrainConfig& train, std::uint64_t seed,
                              const std::function<void(const GanStepLog&)>& progress) {
  LossWeights w = weights;
  w.w_dp = 0.0;
  w.w_mv = 0.0;
  PlacementPlan empty;
  empty.height = empty.width = init.generator_config.image_size;
  GanModel model = init;
  const auto setup = prepare_pathological(detector, {}, empty, w, train.normalization);
  train_gan(model, pairs, detector, setup, w, train, seed, progress);
  return model;
}

void to_json(nlohmann::json& j, const CurveTraining& c) {
  j = {{"counts", c.counts},
       {"steps", c.steps},
       {"weights", c.weights},
       {"scale_w_dp", c.scale_w_dp},
       {"max_overlap", c.placement.max_overlap},
       {"disc_margin", c.placement.disc_margin},
       {"max_attempts", c.placement.max_attempts}};
}

void from_json(const nlohmann::json& j, CurveTraining& c) {
  reject_unknown_keys(j, {"counts", "steps", "weights", "scale_w_dp", "max_overlap", "disc_margin",
                          "max_attempts"},
                      "curve");
  read_opt(j, "counts", c.counts);
  read_opt(j, "steps", c.steps);
  read_opt(j, "weights", c.weights);
  read_opt(j, "scale_w_dp", c.scale_w_dp);
  read_opt(j, "max_overlap", c.placement.max_overlap);
  read_opt(j, "disc_margin", c.placement.disc_margin);
  read_opt(j, "max_attempts", c.placement.max_attempts);
  if (c.counts.empty() || c.steps < 0) throw Error("bad_config", "curve needs counts and steps >= 0");
  for (int k : c.counts) {
    if (k < 0) throw Error("bad_config", "lesion counts must be nonnegative");
  }
}

std::vector<CountModel> train_count_generators(
    const GanModel& base, const std::vector<TrainingPair>& pairs, const DetectorNet& detector,
    const std::vector<PathologicalDescriptor>& descriptors, const FieldOfView& fov,
    const CurveTraining& cfg, const GanTrainConfig& train, std::uint64_t seed,
    const std::function<void(int, const GanStepLog&)>& progress) {
  const int n = base.generator_config.image_size;
  GanTrainConfig tc = train;
  tc.steps = cfg.steps;
  std::vector<CountModel> out;
  for (int count : cfg.counts) {
    CountModel cm{count,
                  plan_random(descriptors, fov, n, n, derive_seed(seed, 2, count), cfg.placement, count),
                  base};
    LossWeights w = cfg.weights;
    if (cfg.scale_w_dp) w.w_dp *= count;
    const auto setup = prepare_pathological(detector, descriptors, cm.plan, w, tc.normalization);
    std::function<void(const GanStepLog&)> cb;
    if (progress) cb = [&](const GanStepLog& l) { progress(count, l); };
    train_gan(cm.model, pairs, detector, setup, w, tc, derive_seed(seed, 3, count), cb);
    out.push_back(std::move(cm));
  }
  return out;
}

void to_json(nlohmann::json& j, const SweepConfig& c) {
  j = {{"parameter", c.parameter},
       {"values", c.values},
       {"weights", c.weights},
       {"samples_per_mask", c.samples_per_mask},
       {"samples_kept", c.samples_kept}};
}

void from_json(const nlohmann::json& j, SweepConfig& c) {
  reject_unknown_keys(j, {"parameter", "values", "weights", "samples_per_mask", "samples_kept"}, "sweep");
  if (j.contains("parameter")) {
    const auto& p = j.at("parameter");
    if (!p.is_string() || (p != "w_dp" && p != "w_dd")) {
      throw Error("bad_config", "sweep parameter must be \"w_dp\" or \"w_dd\"");
    }
    c.parameter = p.get<SweepParameter>();
  }
  read_opt(j, "values", c.values);
  read_opt(j, "weights", c.weights);
  read_opt(j, "samples_per_mask", c.samples_per_mask);
  read_opt(j, "samples_kept", c.samples_kept);
  if (c.values.empty() || c.samples_per_mask < 1 || c.samples_kept < 0) {
    throw Error("bad_config", "sweep needs values and samples_per_mask >= 1");
  }
  for (double v : c.values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error("bad_config", "sweep values must be finite and nonnegative");
  }
}

std::vector<SweepRow> ablation_sweep(const GanModel& start, const std::vector<TrainingPair>& train,
                                     const std::vector<TrainingPair>& eval,
                                     const DetectorNet& detector,
                                     const std::vector<PathologicalDescriptor>& descriptors,
                                     const PlacementPlan& plan, const SweepConfig& cfg,
                                     const GanTrainConfig& train_cfg, std::uint64_t seed) {
  if (eval.empty()) throw Error("bad_input", "ablation sweep needs evaluation pairs");
  std::vector<SweepRow> rows;
  for (double value : cfg.values) {
    SweepRow row;
    row.value = value;
    row.seed = seed;
    LossWeights w = cfg.weights;
    (cfg.parameter == SweepParameter::w_dp ? w.w_dp : w.w_dd) = value;
    const nlohmann::json echo = {{"weights", w}, {"train", train_cfg}, {"seed", seed}};
    const std::string text = echo.dump();
    row.config_hash = sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    try {
      w.validate();
      GanModel model = start;
      const auto setup = prepare_pathological(detector, descriptors, plan, w, train_cfg.normalization);
      train_gan(model, train, detector, setup, w, train_cfg, seed);
      const DetailExtractor ex = DetailExtractor::build(model.extractor_config);
      std::mt19937_64 rng(derive_seed(seed, 4, 0));
      double sev = 0.0, dd = 0.0;
      std::size_t n = 0;
      for (const auto& p : eval) {
        for (int i = 0; i < cfg.samples_per_mask; ++i) {
          FeatureMap x = synthesize(model.generator, p.mask, train_cfg.test_noise, rng);
          sev += severity(detector, x).score;
          dd += retina_detail_loss(ex, p.image, x, w, train_cfg.normalization).dd;
          ++n;
          if (row.samples.size() < static_cast<std::size_t>(cfg.samples_kept)) row.samples.push_back(std::move(x));
        }
      }
      row.mean_severity = sev / static_cast<double>(n);
      row.l_dd = dd / static_cast<double>(n);
      if (!std::isfinite(row.mean_severity) || !std::isfinite(row.l_dd)) {
        row.flagged = true;
        row.error = "non-finite metric";
      }
    } catch (const std::exception& e) {
      row.flagged = true;
      row.error = e.what();
      row.mean_severity = row.l_dd = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, SweepParameter parameter) {
  std::ostringstream os;
  os << (parameter == SweepParameter::w_dp ? "w_dp" : "w_dd")
     << ",mean_severity,l_dd,flagged,seed,config_hash\n";
  for (const auto& r : rows) {
    os << fmt(r.value) << ',' << fmt(r.mean_severity) << ',' << fmt(r.l_dd) << ',' << (r.flagged ? 1 : 0)
       << ',' << r.seed << ',' << r.config_hash << '\n';
  }
  return os.str();
}

FeatureMap image_grid(const std::vector<FeatureMap>& images, int columns) {
  if (images.empty() || columns < 1) throw Error("bad_input", "image grid needs images and columns >= 1");
  const Shape s = images.front().shape();
  for (const auto& im : images) {
    if (im.shape() != s) throw Error("shape_mismatch", "grid images must share one shape");
  }
  const int cols = std::min<int>(columns, static_cast<int>(images.size()));
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  FeatureMap g(rows * (s.height + 1) - 1, cols * (s.width + 1) - 1, s.channels, -1.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        for (int ch = 0; ch < s.channels; ++ch)
          g.at(r * (s.height + 1) + y, c * (s.width + 1) + x, ch) = images[i].at(y, x, ch);
  }
  return g;
}

}  // namespace lesionforge
