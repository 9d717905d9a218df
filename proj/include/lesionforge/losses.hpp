#pragma once

#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "lesionforge/descriptor.hpp"
#include "lesionforge/detector.hpp"
#include "lesionforge/gan_nets.hpp"
#include "lesionforge/manipulate.hpp"

namespace lesionforge {

struct LossWeights {
  double w_dd = 1.0;
  double w_tv = 100.0;
  double w_dp = 10.0;
  double w_mv = 500.0;
  double w_gram = 1e6;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// `sum` evaluates the norms and the Gram matrix as plain sums. `mean` divides
// every L1 norm by its element count and averages the Gram matrix over pixels.
enum class LossNormalization { sum, mean };

void to_json(nlohmann::json& j, const LossNormalization& n);
void from_json(const nlohmann::json& j, LossNormalization& n);

struct AdversarialLosses {
  double l_adv = 0.0;    // log D(x,y) + log(1 - D(x^,y)), maximized by D
  double l_adv_g = 0.0;  // -log D(x^,y), minimized by G
};

AdversarialLosses adversarial_losses(double p_real, double p_fake);
// d(-log p)/d(logit) and d(-log(1-p))/d(logit) for a clamped sigmoid.
double grad_neg_log_p(const DiscriminatorOutput& d);
double grad_neg_log_1mp(const DiscriminatorOutput& d);

// Sum of absolute forward differences along both axes, all channels.
double total_variation(const FeatureMap& x, FeatureMap* grad = nullptr);

struct RetinaLoss {
  double retina = 0.0;
  double dd = 0.0;
  double tv = 0.0;
};

// grad (optional) receives d(L_retina)/d(x_hat). `x_features` are the
// extractor features of the real image.
RetinaLoss retina_detail_loss_features(const DetailExtractor& ex, const FeatureMap& x_features,
                              const FeatureMap& x_hat, const LossWeights& w,
                              LossNormalization norm, FeatureMap* grad = nullptr);
RetinaLoss retina_detail_loss(const DetailExtractor& ex, const FeatureMap& x,
                              const FeatureMap& x_hat, const LossWeights& w,
                              LossNormalization norm = LossNormalization::sum);

// G_ij = sum over pixels of F_i F_j.
Eigen::MatrixXd gram(const FeatureMap& f);

// One (descriptor placement, layer) term of the pathological divergence.
struct GramTerm {
  std::size_t level = 0;
  Rect at;              // patch position at the level
  FeatureMap mask;      // M_ld, same shape as the patch
  Eigen::MatrixXd ref;  // G(M_ld * F_lr(d)), normalized per the setup
  double coef = 0.0;    // w_gram / (W_rho H_rho), divided by K^2 in mean mode
  double gram_scale = 1.0;
};

struct PathologicalSetup {
  std::vector<GramTerm> terms;
  std::size_t entry_count = 0;
  std::size_t layers_per_entry = 0;
  FeatureMap redistribution;  // M_rd, H x W x 1
  FeatureMap dilated;         // M_grd, H x W x 1
  LossNormalization norm = LossNormalization::sum;
};

// |A| scaled by its maximum; an all-zero patch gives zeros.
FeatureMap normalize_abs(const FeatureMap& a);

// Patch position of rect `rho` at a level: start floor(rho/scale), size of the
// descriptor's patch, shifted inward to fit the level.
Rect level_patch(const Rect& rho, int scale, int patch_h, int patch_w, int level_h, int level_w);

// Union of per-entry Gaussian-softened lesion masks (sigma = max(1, min side / 4),
// truncated at 3 sigma) with the hard masks; values below 0.01 are cleared.
FeatureMap dilate_gaussian(const std::vector<std::pair<Rect, FeatureMap>>& placed, int height,
                           int width);

PathologicalSetup prepare_pathological(const DetectorNet& det,
                                       const std::vector<PathologicalDescriptor>& ds,
                                       const PlacementPlan& plan, const LossWeights& w,
                                       LossNormalization norm);

struct PathoLoss {
  double patho = 0.0;
  double dp = 0.0;
  double mv = 0.0;
  double severity = 0.0;  // detector score of x_hat, a by-product of the forward pass
};

// grad (optional) receives d(L_patho)/d(x_hat).
PathoLoss pathological_loss(const DetectorNet& det, const PathologicalSetup& setup,
                            const FeatureMap& x_hat, const LossWeights& w,
                            FeatureMap* grad = nullptr);

}  // namespace lesionforge
