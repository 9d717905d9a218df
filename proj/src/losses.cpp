#include "lesionforge/losses.hpp"

#include <algorithm>
#include <cmath>

#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix(
    const FeatureMap& f) {
  return {f.data(), static_cast<Eigen::Index>(f.shape().pixels()), f.channels()};
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {w_dd, w_tv, w_dp, w_mv, w_gram}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw Error("bad_config", "loss weights must be finite and nonnegative");
    }
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"w_dd", w.w_dd}, {"w_tv", w.w_tv}, {"w_dp", w.w_dp}, {"w_mv", w.w_mv}, {"w_gram", w.w_gram}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  reject_unknown_keys(j, {"w_dd", "w_tv", "w_dp", "w_mv", "w_gram"}, "weights");
  read_opt(j, "w_dd", w.w_dd);
  read_opt(j, "w_tv", w.w_tv);
  read_opt(j, "w_dp", w.w_dp);
  read_opt(j, "w_mv", w.w_mv);
  read_opt(j, "w_gram", w.w_gram);
  w.validate();
}

void to_json(nlohmann::json& j, const LossNormalization& n) {
  j = n == LossNormalization::sum ? "sum" : "mean";
}

void from_json(const nlohmann::json& j, LossNormalization& n) {
  const auto s = j.get<std::string>();
  if (s == "sum") n = LossNormalization::sum;
  else if (s == "mean") n = LossNormalization::mean;
  else throw Error("bad_config", "loss normalization must be 'sum' or 'mean'");
}

AdversarialLosses adversarial_losses(double p_real, double p_fake) {
  const double r = std::clamp(p_real, kProbClamp, 1.0 - kProbClamp);
  const double f = std::clamp(p_fake, kProbClamp, 1.0 - kProbClamp);
  return {std::log(r) + std::log(1.0 - f), -std::log(f)};
}

double grad_neg_log_p(const DiscriminatorOutput& d) {
  return d.clamped ? 0.0 : d.prob - 1.0;
}

double grad_neg_log_1mp(const DiscriminatorOutput& d) { return d.clamped ? 0.0 : d.prob; }

double total_variation(const FeatureMap& x, FeatureMap* grad) {
  if (grad != nullptr) *grad = FeatureMap(x.shape());
  double tv = 0.0;
  const int h = x.height(), w = x.width(), ch = x.channels();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < ch; ++k) {
        const double v = x.at(r, c, k);
        if (c + 1 < w) {
          const double d = x.at(r, c + 1, k) - v;
          tv += std::abs(d);
          if (grad != nullptr) {
            grad->at(r, c + 1, k) += sgn(d);
            grad->at(r, c, k) -= sgn(d);
          }
        }
        if (r + 1 < h) {
          const double d = x.at(r + 1, c, k) - v;
          tv += std::abs(d);
          if (grad != nullptr) {
            grad->at(r + 1, c, k) += sgn(d);
            grad->at(r, c, k) -= sgn(d);
          }
        }
      }
    }
  }
  return tv;
}

RetinaLoss retina_detail_loss_features(const DetailExtractor& ex, const FeatureMap& x_features,
                              const FeatureMap& x_hat, const LossWeights& w,
                              LossNormalization norm, FeatureMap* grad) {
  const StackTrace t = ex.run(x_hat);
  const FeatureMap& fh = ex.features(t);
  if (!(fh.shape() == x_features.shape())) {
    throw Error("shape_mismatch", "real and synthetic images differ in shape");
  }
  const bool mean = norm == LossNormalization::mean;
  const double dd_scale = mean ? 1.0 / static_cast<double>(fh.size()) : 1.0;
  const double tv_scale = mean ? 1.0 / static_cast<double>(x_hat.size()) : 1.0;
  RetinaLoss out;
  FeatureMap gf(fh.shape());
  for (std::size_t i = 0; i < fh.size(); ++i) {
    const double d = fh.values()[i] - x_features.values()[i];
    out.dd += std::abs(d);
    gf.values()[i] = sgn(d) * dd_scale * w.w_dd;
  }
  out.dd *= dd_scale;
  FeatureMap gtv;
  out.tv = total_variation(x_hat, grad != nullptr ? &gtv : nullptr) * tv_scale;
  out.retina = w.w_dd * out.dd + w.w_tv * out.tv;
  if (grad != nullptr) {
    *grad = w.w_dd > 0.0 ? ex.backward(t, gf) : FeatureMap(x_hat.shape());
    gtv *= w.w_tv * tv_scale;
    *grad += gtv;
  }
  return out;
}

RetinaLoss retina_detail_loss(const DetailExtractor& ex, const FeatureMap& x,
                              const FeatureMap& x_hat, const LossWeights& w,
                              LossNormalization norm) {
  if (!(x.shape() == x_hat.shape())) {
    throw Error("shape_mismatch", "real and synthetic images differ in shape");
  }
  const StackTrace t = ex.run(x);
  return retina_detail_loss_features(ex, ex.features(t), x_hat, w, norm, nullptr);
}

Eigen::MatrixXd gram(const FeatureMap& f) {
  const auto m = as_matrix(f);
  // lower triangle only, mirrored, so the result is exactly symmetric
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(m.cols(), m.cols());
  g.selfadjointView<Eigen::Lower>().rankUpdate(m.transpose());
  return g.selfadjointView<Eigen::Lower>();
}

FeatureMap normalize_abs(const FeatureMap& a) {
  FeatureMap out(a.shape());
  const double top = a.max_abs();
  if (top == 0.0) return out;
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = std::abs(a.values()[i]) / top;
  return out;
}

Rect level_patch(const Rect& rho, int scale, int patch_h, int patch_w, int level_h, int level_w) {
  if (patch_h > level_h || patch_w > level_w) {
    throw Error("shape_mismatch", "descriptor patch is larger than the level it targets");
  }
  const int r = std::clamp(rho.row / scale, 0, level_h - patch_h);
  const int c = std::clamp(rho.col / scale, 0, level_w - patch_w);
  return {r, c, patch_h, patch_w};
}

FeatureMap dilate_gaussian(const std::vector<std::pair<Rect, FeatureMap>>& placed, int height,
                           int width) {
  FeatureMap out(height, width, 1);
  for (const auto& [rect, mask] : placed) {
    const double sigma = std::max(1.0, std::min(rect.height, rect.width) / 4.0);
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * rad + 1);
    double ks = 0.0;
    for (int i = -rad; i <= rad; ++i) ks += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= ks;
    FeatureMap hard(height, width, 1);
    for (int r = 0; r < rect.height; ++r) {
      for (int c = 0; c < rect.width; ++c) {
        const int rr = rect.row + r, cc = rect.col + c;
        if (rr >= 0 && cc >= 0 && rr < height && cc < width && mask.at(r, c, 0) > 0.0) {
          hard.at(rr, cc, 0) = 1.0;
        }
      }
    }
    FeatureMap tmp(height, width, 1), soft(height, width, 1);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        double s = 0.0;
        for (int i = -rad; i <= rad; ++i) {
          if (c + i >= 0 && c + i < width) s += k[i + rad] * hard.at(r, c + i, 0);
        }
        tmp.at(r, c, 0) = s;
      }
    }
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        double s = 0.0;
        for (int i = -rad; i <= rad; ++i) {
          if (r + i >= 0 && r + i < height) s += k[i + rad] * tmp.at(r + i, c, 0);
        }
        soft.at(r, c, 0) = s;
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out.values()[i] = std::max({out.values()[i], hard.values()[i], soft.values()[i]});
    }
  }
  for (double& v : out.values()) {
    if (v < 0.01) v = 0.0;
  }
  return out;
}

PathologicalSetup prepare_pathological(const DetectorNet& det,
                                       const std::vector<PathologicalDescriptor>& ds,
                                       const PlacementPlan& plan, const LossWeights& w,
                                       LossNormalization norm) {
  const int n = det.config().image_size;
  if (plan.height != n || plan.width != n) {
    throw Error("shape_mismatch", "plan size " + std::to_string(plan.height) + "x" +
                                      std::to_string(plan.width) + " does not match the detector");
  }
  check_plan(plan, ds);
  const auto shapes = det.level_shapes();
  const auto scales = det.level_scales();
  PathologicalSetup s;
  s.norm = norm;
  s.entry_count = plan.entries.size();
  s.redistribution = FeatureMap(n, n, 1);
  std::vector<std::pair<Rect, FeatureMap>> placed;
  for (const auto& e : plan.entries) {
    const PathologicalDescriptor& d = ds[e.descriptor];
    if (d.layers.empty()) throw Error("bad_descriptor", "descriptor has no layers");
    if (s.layers_per_entry == 0) s.layers_per_entry = d.layers.size();
    const Rect& rho = e.region;
    FeatureMap m0(rho.height, rho.width, 1, 1.0);
    for (const auto& layer : d.layers) {
      if (layer.level >= shapes.size()) {
        throw Error("shape_mismatch", "descriptor level " + std::to_string(layer.level) +
                                          " does not exist in the detector");
      }
      const Shape& ls = shapes[layer.level];
      if (layer.feature.channels() != ls.channels ||
          static_cast<int>(layer.scale) != scales[layer.level]) {
        throw Error("shape_mismatch", "descriptor level " + std::to_string(layer.level) +
                                          " does not match the detector geometry");
      }
      if (layer.level == 0) m0 = layer.mask;
      GramTerm t;
      t.level = layer.level;
      t.at = level_patch(rho, scales[layer.level], layer.feature.height(), layer.feature.width(),
                         ls.height, ls.width);
      const FeatureMap a = normalize_abs(layer.activation);
      t.mask = FeatureMap(layer.feature.shape());
      for (int r = 0; r < t.mask.height(); ++r) {
        for (int c = 0; c < t.mask.width(); ++c) {
          for (int k = 0; k < t.mask.channels(); ++k) {
            t.mask.at(r, c, k) = layer.mask.at(r, c, 0) * a.at(r, c, k);
          }
        }
      }
      const int kdim = ls.channels;
      const double pixels = static_cast<double>(t.at.area());
      t.gram_scale = norm == LossNormalization::mean ? 1.0 / pixels : 1.0;
      t.coef = w.w_gram / static_cast<double>(rho.area());
      if (norm == LossNormalization::mean) t.coef /= static_cast<double>(kdim) * kdim;
      FeatureMap p = layer.feature;
      for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] *= t.mask.values()[i];
      t.ref = gram(p) * t.gram_scale;
      s.terms.push_back(std::move(t));
    }
    if (d.layers.size() != s.layers_per_entry) {
      throw Error("bad_descriptor", "descriptors disagree in layer count");
    }
    if (!(m0.height() == rho.height && m0.width() == rho.width)) {
      throw Error("shape_mismatch", "level-0 mask does not match the placement size");
    }
    placed.emplace_back(rho, m0);
    for (int r = 0; r < rho.height; ++r) {
      for (int c = 0; c < rho.width; ++c) {
        if (m0.at(r, c, 0) > 0.0) s.redistribution.at(rho.row + r, rho.col + c, 0) = 1.0;
      }
    }
  }
  s.dilated = dilate_gaussian(placed, n, n);
  return s;
}

PathoLoss pathological_loss(const DetectorNet& det, const PathologicalSetup& setup,
                            const FeatureMap& x_hat, const LossWeights& w, FeatureMap* grad) {
  const FeatureStack fs = forward_with_stack(det, x_hat);
  PathoLoss out;
  out.severity = severity_from_logits(fs.logits).score;
  const bool mean = setup.norm == LossNormalization::mean;
  const std::size_t count = setup.terms.size();
  const double avg = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;

  std::vector<FeatureMap> level_grads;
  if (grad != nullptr && count > 0 && w.w_dp > 0.0) level_grads.resize(fs.trace.levels.size());
  for (const GramTerm& t : setup.terms) {
    const FeatureMap& f = fs.level(t.level);
    FeatureMap p = f.crop(t.at.row, t.at.col, t.at.height, t.at.width);
    for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] *= t.mask.values()[i];
    const Eigen::MatrixXd diff = gram(p) * t.gram_scale - t.ref;
    out.dp += avg * t.coef * diff.cwiseAbs().sum();
    if (level_grads.empty()) continue;
    const Eigen::MatrixXd sign = diff.unaryExpr([](double v) { return sgn(v); });
    FeatureMap gp(p.shape());
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gm(
        gp.data(), static_cast<Eigen::Index>(gp.shape().pixels()), gp.channels());
    gm = (2.0 * w.w_dp * avg * t.coef * t.gram_scale) * (as_matrix(p) * sign);
    for (std::size_t i = 0; i < gp.size(); ++i) gp.values()[i] *= t.mask.values()[i];
    FeatureMap& lg = level_grads[t.level];
    if (lg.empty()) lg = FeatureMap(f.shape());
    lg.add_patch(gp, t.at.row, t.at.col);
  }

  FeatureMap masked = x_hat;
  const FeatureMap& m = setup.dilated;
  for (int r = 0; r < masked.height(); ++r) {
    for (int c = 0; c < masked.width(); ++c) {
      for (int k = 0; k < masked.channels(); ++k) masked.at(r, c, k) *= m.at(r, c, 0);
    }
  }
  const double mv_scale = mean ? 1.0 / static_cast<double>(x_hat.size()) : 1.0;
  FeatureMap gmv;
  out.mv = total_variation(masked, grad != nullptr ? &gmv : nullptr) * mv_scale;
  out.patho = w.w_dp * out.dp + w.w_mv * out.mv;

  if (grad != nullptr) {
    *grad = level_grads.empty() ? FeatureMap(x_hat.shape())
                                : detector_backward(det, fs, {}, level_grads, nullptr);
    for (int r = 0; r < gmv.height(); ++r) {
      for (int c = 0; c < gmv.width(); ++c) {
        for (int k = 0; k < gmv.channels(); ++k) {
          grad->at(r, c, k) += w.w_mv * mv_scale * gmv.at(r, c, k) * m.at(r, c, 0);
        }
      }
    }
  }
  return out;
}

}  // namespace lesionforge
