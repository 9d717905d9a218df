#include "lesionforge/gan_nets.hpp"

#include <algorithm>
#include <cmath>

#include "lesionforge/jsonutil.hpp"

namespace lesionforge {

namespace {

int stage_channels(const GeneratorConfig& c, int k) {
  return c.base_channels * std::min(1 << k, 4);
}

FeatureMap tanh_map(const FeatureMap& x) {
  FeatureMap out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = std::tanh(x.values()[i]);
  return out;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (base_channels < 1 || depth < 0 || noise_dim < 0) {
    throw Error("bad_config", "generator needs base_channels >= 1, depth >= 0, noise_dim >= 0");
  }
  if (image_size < 1 || image_size % (1 << depth) != 0) {
    throw Error("bad_config", "generator image_size must be divisible by 2^depth");
  }
  if (!(slope >= 0.0 && slope < 1.0)) throw Error("bad_config", "slope must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"image_size", c.image_size}, {"base_channels", c.base_channels}, {"depth", c.depth},
       {"noise_dim", c.noise_dim},   {"slope", c.slope}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  reject_unknown_keys(j, {"image_size", "base_channels", "depth", "noise_dim", "slope"},
                      "generator");
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "base_channels", c.base_channels);
  read_opt(j, "depth", c.depth);
  read_opt(j, "noise_dim", c.noise_dim);
  read_opt(j, "slope", c.slope);
}

Generator Generator::build(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Generator g;
  g.cfg_ = cfg;
  g.banks_.push_back(KernelBank::zeros(3, 3, 1 + cfg.noise_dim, stage_channels(cfg, 0)));
  for (int k = 1; k <= cfg.depth; ++k) {
    g.banks_.push_back(
        KernelBank::zeros(3, 3, stage_channels(cfg, k - 1), stage_channels(cfg, k), 2));
  }
  int prev = stage_channels(cfg, cfg.depth);
  for (int k = cfg.depth - 1; k >= 0; --k) {
    g.banks_.push_back(
        KernelBank::zeros(3, 3, prev + stage_channels(cfg, k), stage_channels(cfg, k)));
    prev = stage_channels(cfg, k);
  }
  g.banks_.push_back(KernelBank::zeros(3, 3, prev, 3));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i + 1 < g.banks_.size(); ++i) init_bank_he(g.banks_[i], rng);
  init_bank_he(g.banks_.back(), rng, 1.0);
  return g;
}

GeneratorTrace Generator::forward(const FeatureMap& mask, const FeatureMap& noise) const {
  const int n = cfg_.image_size;
  if (mask.height() != n || mask.width() != n || mask.channels() != 1) {
    throw Error("shape_mismatch", "generator expects a " + std::to_string(n) + "x" +
                                      std::to_string(n) + "x1 mask, got " + mask.shape().str());
  }
  if (noise.height() != n || noise.width() != n || noise.channels() != cfg_.noise_dim) {
    throw Error("shape_mismatch", "noise shape " + noise.shape().str() + " does not match");
  }
  GeneratorTrace t;
  t.input = cfg_.noise_dim > 0 ? FeatureMap::concat_channels(mask, noise) : mask;
  const int d = cfg_.depth;
  t.enc.push_back(leaky_relu(conv2d(t.input, banks_[0]), cfg_.slope));
  for (int k = 1; k <= d; ++k) {
    t.enc.push_back(leaky_relu(conv2d(t.enc[k - 1], banks_[k]), cfg_.slope));
  }
  const FeatureMap* prev = &t.enc[d];
  for (int s = 0; s < d; ++s) {
    const int k = d - 1 - s;
    t.dec_in.push_back(FeatureMap::concat_channels(upsample_nearest(*prev, 2), t.enc[k]));
    t.dec.push_back(leaky_relu(conv2d(t.dec_in[s], banks_[d + 1 + s]), cfg_.slope));
    prev = &t.dec[s];
  }
  t.output = tanh_map(conv2d(*prev, banks_.back()));
  return t;
}

void Generator::backward(const GeneratorTrace& t, const FeatureMap& grad_output,
                         std::vector<KernelBank>& grads) const {
  if (!(grad_output.shape() == t.output.shape())) {
    throw Error("shape_mismatch", "generator output gradient has the wrong shape");
  }
  const int d = cfg_.depth;
  FeatureMap g(grad_output.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double y = t.output.values()[i];
    g.values()[i] = grad_output.values()[i] * (1.0 - y * y);
  }
  const FeatureMap& last = d > 0 ? t.dec.back() : t.enc[0];
  g = conv2d_backward(last, g, banks_.back(), &grads.back());

  std::vector<FeatureMap> enc_grad(d + 1);
  for (int k = 0; k <= d; ++k) enc_grad[k] = FeatureMap(t.enc[k].shape());
  for (int s = d - 1; s >= 0; --s) {
    const int k = d - 1 - s;
    g = leaky_relu_backward(t.dec[s], g, cfg_.slope);
    g = conv2d_backward(t.dec_in[s], g, banks_[d + 1 + s], &grads[d + 1 + s]);
    FeatureMap g_up, g_skip;
    g.split_channels(t.dec_in[s].channels() - t.enc[k].channels(), g_up, g_skip);
    enc_grad[k] += g_skip;
    g = upsample_nearest_backward(g_up, 2);
  }
  if (d > 0) enc_grad[d] += g;
  else enc_grad[0] += g;
  for (int k = d; k >= 1; --k) {
    FeatureMap gk = leaky_relu_backward(t.enc[k], enc_grad[k], cfg_.slope);
    enc_grad[k - 1] += conv2d_backward(t.enc[k - 1], gk, banks_[k], &grads[k]);
  }
  FeatureMap g0 = leaky_relu_backward(t.enc[0], enc_grad[0], cfg_.slope);
  conv2d_backward(t.input, g0, banks_[0], &grads[0]);
}

std::vector<KernelBank> Generator::zero_grads() const {
  std::vector<KernelBank> g;
  for (const auto& b : banks_) g.push_back(b.zeros_like());
  return g;
}

ParamList Generator::parameters() { return parameters(banks_); }

ParamList Generator::parameters(std::vector<KernelBank>& banks) {
  ParamList p;
  for (auto& b : banks) append_bank_parameters(b, p);
  return p;
}

FeatureMap sample_noise(int height, int width, int channels, double stddev, std::mt19937_64& rng) {
  FeatureMap z(height, width, channels);
  if (channels == 0) return z;
  std::normal_distribution<double> n(0.0, stddev);
  for (double& v : z.values()) v = n(rng);
  return z;
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"channels", c.channels}, {"slope", c.slope}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  reject_unknown_keys(j, {"channels", "slope"}, "discriminator");
  read_opt(j, "channels", c.channels);
  read_opt(j, "slope", c.slope);
}

Discriminator Discriminator::build(const DiscriminatorConfig& cfg, int image_channels,
                                   std::uint64_t seed) {
  if (!(cfg.slope >= 0.0 && cfg.slope < 1.0)) {
    throw Error("bad_config", "slope must lie in [0, 1)");
  }
  std::vector<ConvUnit> units;
  int in = image_channels + 1;
  for (int c : cfg.channels) {
    if (c < 1) throw Error("bad_config", "discriminator channels must be positive");
    units.push_back({KernelBank::zeros(3, 3, in, c, 2), true, 0});
    in = c;
  }
  units.push_back({KernelBank::zeros(3, 3, in, 1, 2), false, 0});
  Discriminator d;
  d.cfg_ = cfg;
  d.image_channels_ = image_channels;
  d.body_ = ConvStack(std::move(units), cfg.slope);
  std::mt19937_64 rng(seed);
  d.body_.init_he(rng);
  init_bank_he(d.body_.units().back().bank, rng, 1.0);
  return d;
}

DiscriminatorOutput Discriminator::forward(const FeatureMap& image, const FeatureMap& mask) const {
  if (image.channels() != image_channels_ || mask.channels() != 1) {
    throw Error("shape_mismatch", "discriminator expects an image and a one-channel mask");
  }
  DiscriminatorOutput out;
  out.trace = body_.forward(FeatureMap::concat_channels(image, mask));
  const FeatureMap& top = out.trace.levels.back();
  out.logit = top.sum() / static_cast<double>(top.size());
  const double p = 1.0 / (1.0 + std::exp(-out.logit));
  out.clamped = p < kProbClamp || p > 1.0 - kProbClamp;
  out.prob = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return out;
}

FeatureMap Discriminator::backward(const DiscriminatorOutput& out, double grad_logit,
                                   std::vector<KernelBank>* grads) const {
  std::vector<FeatureMap> level_grads(out.trace.levels.size());
  const FeatureMap& top = out.trace.levels.back();
  level_grads.back() = FeatureMap(top.shape(), grad_logit / static_cast<double>(top.size()));
  FeatureMap g = body_.backward(out.trace, level_grads, grads);
  FeatureMap gi, gm;
  g.split_channels(image_channels_, gi, gm);
  return gi;
}

ParamList Discriminator::parameters() {
  ParamList p;
  body_.append_parameters(p);
  return p;
}

void to_json(nlohmann::json& j, const ExtractorConfig& c) {
  j = {{"block_channels", c.block_channels},
       {"convs_per_block", c.convs_per_block},
       {"layer_block", c.layer_block},
       {"layer_conv", c.layer_conv},
       {"seed", c.seed},
       {"feature_gain", c.feature_gain}};
}

void from_json(const nlohmann::json& j, ExtractorConfig& c) {
  reject_unknown_keys(
      j, {"block_channels", "convs_per_block", "layer_block", "layer_conv", "seed", "feature_gain"},
      "extractor");
  read_opt(j, "block_channels", c.block_channels);
  read_opt(j, "convs_per_block", c.convs_per_block);
  read_opt(j, "layer_block", c.layer_block);
  read_opt(j, "layer_conv", c.layer_conv);
  read_opt(j, "seed", c.seed);
  read_opt(j, "feature_gain", c.feature_gain);
}

DetailExtractor DetailExtractor::build(const ExtractorConfig& cfg) {
  const int blocks = static_cast<int>(cfg.block_channels.size());
  if (cfg.convs_per_block < 1 || cfg.layer_block < 1 || cfg.layer_block > blocks ||
      cfg.layer_conv < 1 || cfg.layer_conv > cfg.convs_per_block || !(cfg.feature_gain > 0.0)) {
    throw Error("bad_config", "extractor layer does not exist in the configured stack");
  }
  std::vector<ConvUnit> units;
  int in = 3;
  for (int b = 0; b < blocks; ++b) {
    for (int c = 0; c < cfg.convs_per_block; ++c) {
      const bool last = c + 1 == cfg.convs_per_block && b + 1 < blocks;
      units.push_back({KernelBank::zeros(3, 3, in, cfg.block_channels[b]), true, last ? 2 : 0});
      in = cfg.block_channels[b];
    }
  }
  DetailExtractor e;
  e.cfg_ = cfg;
  e.body_ = ConvStack(std::move(units), 0.0);
  std::mt19937_64 rng(cfg.seed);
  e.body_.init_he(rng);
  e.layer_ = static_cast<std::size_t>((cfg.layer_block - 1) * cfg.convs_per_block + cfg.layer_conv);
  KernelBank& last = e.body_.units()[e.layer_ - 1].bank;
  for (double& v : last.weights) v *= cfg.feature_gain;
  for (double& v : last.bias) v *= cfg.feature_gain;
  return e;
}

StackTrace DetailExtractor::run(const FeatureMap& image) const {
  return body_.forward(image, static_cast<int>(layer_));
}

FeatureMap DetailExtractor::backward(const StackTrace& t, const FeatureMap& grad_features) const {
  std::vector<FeatureMap> level_grads(t.levels.size());
  level_grads[layer_] = grad_features;
  return body_.backward(t, level_grads, nullptr);
}

}  // namespace lesionforge
