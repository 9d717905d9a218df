#include "lesionforge/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"
#include "lesionforge/phantom.hpp"

namespace lesionforge {

namespace {

constexpr std::uint16_t kDetectorVersion = 1;

NamedArray bank_array(const std::string& name, const KernelBank& k) {
  return {name + ".weights",
          {static_cast<std::uint32_t>(k.kernel_h), static_cast<std::uint32_t>(k.kernel_w),
           static_cast<std::uint32_t>(k.in_channels), static_cast<std::uint32_t>(k.out_channels)},
          k.weights};
}

NamedArray bias_array(const std::string& name, const KernelBank& k) {
  return {name + ".bias", {static_cast<std::uint32_t>(k.out_channels)}, k.bias};
}

void load_bank(const TensorArchive& a, const std::string& name, KernelBank& k) {
  const NamedArray& w = a.find(name + ".weights");
  const NamedArray& b = a.find(name + ".bias");
  const std::vector<std::uint32_t> expect{
      static_cast<std::uint32_t>(k.kernel_h), static_cast<std::uint32_t>(k.kernel_w),
      static_cast<std::uint32_t>(k.in_channels), static_cast<std::uint32_t>(k.out_channels)};
  if (w.dims != expect || b.values.size() != k.bias.size()) {
    throw Error("checkpoint_mismatch", "array '" + name + "' does not match the configuration");
  }
  k.weights = w.values;
  k.bias = b.values;
}

}  // namespace

void DetectorConfig::validate() const {
  if (block_channels.empty() || convs_per_block < 1 || bottleneck_dim < 1 || grades < 2) {
    throw Error("bad_config", "detector needs at least one block, conv and two grades");
  }
  const int down = 1 << block_channels.size();
  if (image_size < down || image_size % down != 0) {
    throw Error("bad_config", "detector image_size must be divisible by 2^blocks");
  }
  if (!(slope >= 0.0 && slope < 1.0)) throw Error("bad_config", "slope must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"image_size", c.image_size},         {"block_channels", c.block_channels},
       {"convs_per_block", c.convs_per_block}, {"bottleneck_dim", c.bottleneck_dim},
       {"slope", c.slope},                   {"grades", c.grades}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  reject_unknown_keys(j, {"image_size", "block_channels", "convs_per_block", "bottleneck_dim",
                          "slope", "grades"},
                      "detector");
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "block_channels", c.block_channels);
  read_opt(j, "convs_per_block", c.convs_per_block);
  read_opt(j, "bottleneck_dim", c.bottleneck_dim);
  read_opt(j, "slope", c.slope);
  read_opt(j, "grades", c.grades);
}

NLOHMANN_JSON_SERIALIZE_ENUM(DetectorOptimizer, {{DetectorOptimizer::nadam, "nadam"},
                                                 {DetectorOptimizer::nesterov_sgd, "nesterov_sgd"}})

void to_json(nlohmann::json& j, const DetectorTrainConfig& c) {
  j = {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"optimizer", c.optimizer},
       {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
       {"weight_decay", c.weight_decay}, {"augment", c.augment},
       {"final_lr_fraction", c.final_lr_fraction}};
}

void from_json(const nlohmann::json& j, DetectorTrainConfig& c) {
  reject_unknown_keys(
      j,
      {"epochs", "batch_size", "optimizer", "learning_rate", "momentum", "weight_decay", "augment",
       "final_lr_fraction"},
      "detector_train");
  if (j.contains("optimizer")) {
    const auto name = j.at("optimizer").get<std::string>();
    if (name != "nadam" && name != "nesterov_sgd") {
      throw Error("bad_config", "detector optimizer must be 'nadam' or 'nesterov_sgd'");
    }
    c.optimizer = j.at("optimizer").get<DetectorOptimizer>();
  }
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "augment", c.augment);
  read_opt(j, "final_lr_fraction", c.final_lr_fraction);
}

DetectorNet DetectorNet::build(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<ConvUnit> units;
  int channels = 3;
  for (int out : cfg.block_channels) {
    for (int c = 0; c < cfg.convs_per_block; ++c) {
      ConvUnit u;
      u.bank = KernelBank::zeros(3, 3, channels, out);
      u.pool = c + 1 == cfg.convs_per_block ? 2 : 0;
      units.push_back(std::move(u));
      channels = out;
    }
  }
  const int remaining = cfg.image_size >> cfg.block_channels.size();
  ConvUnit bottleneck;
  bottleneck.bank =
      KernelBank::zeros(remaining, remaining, channels, cfg.bottleneck_dim, 1, Padding::valid);
  units.push_back(std::move(bottleneck));

  DetectorNet net;
  net.cfg_ = cfg;
  net.body_ = ConvStack(std::move(units), cfg.slope);
  net.head_ = KernelBank::zeros(1, 1, cfg.bottleneck_dim, cfg.grades);
  std::mt19937_64 rng(seed);
  net.body_.init_he(rng);
  init_bank_he(net.head_, rng, 1.0);
  return net;
}

std::vector<Shape> DetectorNet::level_shapes() const {
  std::vector<Shape> shapes{{cfg_.image_size, cfg_.image_size, 3}};
  Shape in = shapes[0];
  for (const auto& u : body_.units()) {
    Shape out = conv_output_shape(in, u.bank);
    shapes.push_back(out);
    in = out;
    if (u.pool > 0) in = Shape{out.height / u.pool, out.width / u.pool, out.channels};
  }
  return shapes;
}

std::vector<int> DetectorNet::level_scales() const {
  std::vector<int> scales;
  for (const Shape& s : level_shapes()) scales.push_back(cfg_.image_size / s.height);
  return scales;
}

std::vector<std::size_t> DetectorNet::descriptor_levels() const {
  std::vector<std::size_t> levels;
  const auto shapes = level_shapes();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (shapes[l].height > 1 || shapes[l].width > 1) levels.push_back(l);
  }
  return levels;
}

ParamList DetectorNet::parameters() {
  ParamList p;
  body_.append_parameters(p);
  append_bank_parameters(head_, p);
  return p;
}

void DetectorNet::round_to_float() {
  for (auto& s : parameters()) lesionforge::round_to_float(s);
}

void DetectorNet::save(const std::filesystem::path& path) const {
  TensorArchive a;
  a.magic = "DRDN";
  a.version = kDetectorVersion;
  a.metadata = nlohmann::json{{"config", cfg_}}.dump();
  for (std::size_t i = 0; i < body_.units().size(); ++i) {
    const std::string name = "unit" + std::to_string(i + 1);
    a.arrays.push_back(bank_array(name, body_.units()[i].bank));
    a.arrays.push_back(bias_array(name, body_.units()[i].bank));
  }
  a.arrays.push_back(bank_array("head", head_));
  a.arrays.push_back(bias_array("head", head_));
  save_archive(path, a);
}

DetectorNet DetectorNet::load(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path, "DRDN", kDetectorVersion);
  const auto meta = nlohmann::json::parse(a.metadata);
  DetectorNet net = build(meta.at("config").get<DetectorConfig>(), 0);
  for (std::size_t i = 0; i < net.body_.units().size(); ++i) {
    load_bank(a, "unit" + std::to_string(i + 1), net.body_.units()[i].bank);
  }
  load_bank(a, "head", net.head_);
  return net;
}

FeatureStack forward_with_stack(const DetectorNet& net, const FeatureMap& image) {
  const int n = net.config().image_size;
  if (image.height() != n || image.width() != n || image.channels() != 3) {
    throw Error("shape_mismatch", "detector expects " + std::to_string(n) + "x" +
                                      std::to_string(n) + "x3, got " + image.shape().str());
  }
  FeatureStack s;
  s.trace = net.body().forward(image);
  const FeatureMap& top = s.trace.levels.back();
  s.bottleneck.assign(top.storage().begin(), top.storage().end());
  const FeatureMap logits = conv2d(top, net.head());
  s.logits.assign(logits.storage().begin(), logits.storage().end());
  return s;
}

SeverityResult severity_from_probs(std::vector<double> probs) {
  SeverityResult r;
  r.grade = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  for (std::size_t g = 0; g < probs.size(); ++g) r.score += static_cast<double>(g) * probs[g];
  r.probs = std::move(probs);
  return r;
}

SeverityResult severity_from_logits(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= z;
  return severity_from_probs(std::move(p));
}

SeverityResult severity(const DetectorNet& net, const FeatureMap& image) {
  return severity_from_logits(forward_with_stack(net, image).logits);
}

DetectorGradients::DetectorGradients(const DetectorNet& net)
    : body(net.body().zero_grads()), head(net.head().zeros_like()) {}

ParamList DetectorGradients::parameters() {
  ParamList p;
  for (auto& b : body) append_bank_parameters(b, p);
  append_bank_parameters(head, p);
  return p;
}

FeatureMap detector_backward(const DetectorNet& net, const FeatureStack& stack,
                             const std::vector<double>& logit_grad,
                             const std::vector<FeatureMap>& level_grads, DetectorGradients* grads) {
  std::vector<FeatureMap> injected = level_grads;
  injected.resize(stack.trace.levels.size());
  if (!logit_grad.empty()) {
    const FeatureMap& top = stack.trace.levels.back();
    FeatureMap g(Shape{1, 1, static_cast<int>(logit_grad.size())}, logit_grad);
    FeatureMap gtop = conv2d_backward(top, g, net.head(), grads ? &grads->head : nullptr);
    if (injected.back().empty()) {
      injected.back() = std::move(gtop);
    } else {
      injected.back() += gtop;
    }
  }
  return net.body().backward(stack.trace, injected, grads ? &grads->body : nullptr);
}

double cross_entropy(const std::vector<double>& logits, int label, std::vector<double>* grad) {
  if (label < 0 || label >= static_cast<int>(logits.size())) {
    throw Error("bad_label", "grade label " + std::to_string(label) + " out of range");
  }
  const SeverityResult s = severity_from_logits(logits);
  if (grad != nullptr) {
    *grad = s.probs;
    (*grad)[label] -= 1.0;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return -(logits[label] - m - std::log(z));
}

double mean_cross_entropy(const DetectorNet& net, const std::vector<LabeledImage>& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : data) {
    total += cross_entropy(forward_with_stack(net, d.image).logits, d.grade, nullptr);
  }
  return total / static_cast<double>(data.size());
}

double grade_accuracy(const DetectorNet& net, const std::vector<LabeledImage>& data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& d : data) hits += severity(net, d.image).grade == d.grade;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

DetectorTrainReport train_detector(DetectorNet& net, const std::vector<LabeledImage>& train,
                                   const std::vector<LabeledImage>& validation,
                                   const DetectorTrainConfig& cfg, std::uint64_t seed,
                                   const std::function<void(const DetectorEpoch&)>& progress) {
  if (train.empty()) throw Error("empty_dataset", "detector training needs at least one sample");
  if (cfg.epochs < 0 || cfg.batch_size < 1) {
    throw Error("bad_config", "epochs must be >= 0 and batch_size >= 1");
  }
  if (!(cfg.learning_rate > 0.0) || !(cfg.final_lr_fraction > 0.0 && cfg.final_lr_fraction <= 1.0)) {
    throw Error("bad_config", "learning_rate must be > 0 and final_lr_fraction in (0, 1]");
  }
  for (const auto& d : train) {
    if (d.grade < 0 || d.grade >= net.config().grades) {
      throw Error("bad_label", "training label out of range");
    }
  }
  std::mt19937_64 rng(seed);
  NesterovSgd sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  Adam nadam(cfg.learning_rate, cfg.momentum, 0.999, 1e-8, true);
  DetectorGradients grads(net);
  const ParamList params = net.parameters();
  const ParamList gparams = grads.parameters();

  DetectorTrainReport report;
  report.initial_train_loss = mean_cross_entropy(net, train);
  report.initial_validation_loss = mean_cross_entropy(net, validation);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double progress_frac =
        cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 1.0;
    const double lr = cfg.learning_rate *
                      (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 *
                                                   (1.0 + std::cos(std::numbers::pi * progress_frac)));
    sgd.set_learning_rate(lr);
    nadam.set_learning_rate(lr);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero(gparams);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledImage& d = train[order[i]];
        FeatureMap img = d.image;
        if (cfg.augment) {
          const int turns = static_cast<int>(rng() % 4);
          const bool fh = (rng() & 1U) != 0;
          const bool fv = (rng() & 1U) != 0;
          img = rotate_flip(img, turns, fh, fv);
        }
        const FeatureStack s = forward_with_stack(net, img);
        std::vector<double> g;
        batch_loss += cross_entropy(s.logits, d.grade, &g);
        detector_backward(net, s, g, {}, &grads);
      }
      ++step;
      if (!std::isfinite(batch_loss)) {
        throw Error("diverged", "detector loss became non-finite at step " + std::to_string(step) +
                                    " (epoch " + std::to_string(epoch) + ")");
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (const auto& g : gparams) {
        for (double& v : g) v *= inv;
      }
      if (cfg.optimizer == DetectorOptimizer::nesterov_sgd) {
        sgd.step(params, gparams);
      } else {
        if (cfg.weight_decay > 0.0) {
          for (std::size_t a = 0; a < params.size(); ++a) {
            for (std::size_t k = 0; k < params[a].size(); ++k) {
              gparams[a][k] += cfg.weight_decay * params[a][k];
            }
          }
        }
        nadam.step(params, gparams);
      }
      epoch_loss += batch_loss;
    }
    DetectorEpoch e;
    e.epoch = epoch;
    e.train_loss = epoch_loss / static_cast<double>(train.size());
    e.validation_loss = mean_cross_entropy(net, validation);
    e.validation_accuracy = grade_accuracy(net, validation);
    report.epochs.push_back(e);
    if (progress) progress(e);
  }
  net.round_to_float();
  return report;
}

}  // namespace lesionforge
