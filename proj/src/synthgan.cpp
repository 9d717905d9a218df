#include "lesionforge/synthgan.hpp"

#include <cmath>
#include <sstream>

#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"
#include "lesionforge/phantom.hpp"

namespace lesionforge {

namespace {

constexpr std::uint16_t kGanVersion = 1;

void add_bank(TensorArchive& a, const std::string& name, const KernelBank& k) {
  a.arrays.push_back({name + ".weights",
                      {static_cast<std::uint32_t>(k.kernel_h), static_cast<std::uint32_t>(k.kernel_w),
                       static_cast<std::uint32_t>(k.in_channels),
                       static_cast<std::uint32_t>(k.out_channels)},
                      k.weights});
  a.arrays.push_back({name + ".bias", {static_cast<std::uint32_t>(k.out_channels)}, k.bias});
}

void read_bank(const TensorArchive& a, const std::string& name, KernelBank& k) {
  const NamedArray& w = a.find(name + ".weights");
  const NamedArray& b = a.find(name + ".bias");
  if (w.values.size() != k.weights.size() || b.values.size() != k.bias.size()) {
    throw Error("checkpoint_mismatch", "array '" + name + "' does not match the configuration");
  }
  k.weights = w.values;
  k.bias = b.values;
}

bool finite(const GanStepLog& s) {
  for (double v : {s.l_adv, s.l_adv_g, s.l_dd, s.l_tv, s.l_dp, s.l_mv, s.l_g}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

void to_json(nlohmann::json& j, const GanTrainConfig& c) {
  j = {{"steps", c.steps},
       {"g_learning_rate", c.g_learning_rate},
       {"d_learning_rate", c.d_learning_rate},
       {"beta1", c.beta1},
       {"g_updates", c.g_updates},
       {"d_updates", c.d_updates},
       {"train_noise", c.train_noise},
       {"test_noise", c.test_noise},
       {"augment", c.augment},
       {"normalization", c.normalization}};
}

void from_json(const nlohmann::json& j, GanTrainConfig& c) {
  reject_unknown_keys(j, {"steps", "g_learning_rate", "d_learning_rate", "beta1", "g_updates",
                          "d_updates", "train_noise", "test_noise", "augment", "normalization"},
                      "gan_train");
  read_opt(j, "steps", c.steps);
  read_opt(j, "g_learning_rate", c.g_learning_rate);
  read_opt(j, "d_learning_rate", c.d_learning_rate);
  read_opt(j, "beta1", c.beta1);
  read_opt(j, "g_updates", c.g_updates);
  read_opt(j, "d_updates", c.d_updates);
  read_opt(j, "train_noise", c.train_noise);
  read_opt(j, "test_noise", c.test_noise);
  read_opt(j, "augment", c.augment);
  if (j.contains("normalization")) c.normalization = j.at("normalization").get<LossNormalization>();
  if (c.steps < 0 || c.g_updates < 0 || c.d_updates < 0 || !(c.g_learning_rate > 0.0) ||
      !(c.d_learning_rate > 0.0) || !(c.train_noise >= 0.0) || !(c.test_noise >= 0.0)) {
    throw Error("bad_config", "invalid GAN training configuration");
  }
}

GanModel GanModel::build(const GeneratorConfig& g, const DiscriminatorConfig& d,
                         const ExtractorConfig& e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::uint64_t gs = rng(), ds = rng();
  GanModel m{g, d, e, Generator::build(g, gs), Discriminator::build(d, 3, ds), 0};
  DetailExtractor::build(e);  // validates the extractor configuration
  m.round_to_float();
  return m;
}

void GanModel::round_to_float() {
  for (auto& s : generator.parameters()) lesionforge::round_to_float(s);
  for (auto& s : discriminator.parameters()) lesionforge::round_to_float(s);
}

void GanModel::save(const std::filesystem::path& path) const {
  TensorArchive a;
  a.magic = "SGAN";
  a.version = kGanVersion;
  a.metadata = nlohmann::json{{"generator", generator_config},
                              {"discriminator", discriminator_config},
                              {"extractor", extractor_config},
                              {"steps_trained", steps_trained}}
                   .dump();
  const auto& gb = generator.banks();
  for (std::size_t i = 0; i < gb.size(); ++i) add_bank(a, "gen" + std::to_string(i), gb[i]);
  const auto& du = discriminator.body().units();
  for (std::size_t i = 0; i < du.size(); ++i) add_bank(a, "disc" + std::to_string(i), du[i].bank);
  save_archive(path, a);
}

GanModel GanModel::load(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path, "SGAN", kGanVersion);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(a.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_format", std::string("GAN checkpoint metadata: ") + e.what());
  }
  GanModel m = build(meta.at("generator").get<GeneratorConfig>(),
                     meta.at("discriminator").get<DiscriminatorConfig>(),
                     meta.at("extractor").get<ExtractorConfig>(), 0);
  m.steps_trained = meta.at("steps_trained").get<long>();
  auto& gb = m.generator.banks();
  for (std::size_t i = 0; i < gb.size(); ++i) read_bank(a, "gen" + std::to_string(i), gb[i]);
  auto& du = m.discriminator.body().units();
  for (std::size_t i = 0; i < du.size(); ++i) read_bank(a, "disc" + std::to_string(i), du[i].bank);
  return m;
}

std::string gan_log_header() { return "step,l_adv,l_adv_g,l_dd,l_tv,l_dp,l_mv,l_g,severity"; }

std::string gan_log_row(const GanStepLog& s) {
  std::ostringstream o;
  o.precision(9);
  o << s.step << ',' << s.l_adv << ',' << s.l_adv_g << ',' << s.l_dd << ',' << s.l_tv << ','
    << s.l_dp << ',' << s.l_mv << ',' << s.l_g << ',' << s.severity;
  return o.str();
}

GeneratorObjective generator_objective(const Discriminator& d, const DetailExtractor& ex,
                                       const DetectorNet& det, const PathologicalSetup& setup,
                                       const LossWeights& w, LossNormalization norm,
                                       const TrainingPair& pair, const FeatureMap& x_hat,
                                       FeatureMap* grad) {
  GeneratorObjective o;
  const DiscriminatorOutput fake = d.forward(x_hat, pair.mask);
  o.adv.l_adv_g = -std::log(fake.prob);
  const StackTrace real_trace = ex.run(pair.image);
  FeatureMap g_retina, g_patho;
  o.retina = retina_detail_loss_features(ex, ex.features(real_trace), x_hat, w, norm,
                                grad != nullptr ? &g_retina : nullptr);
  o.patho = pathological_loss(det, setup, x_hat, w, grad != nullptr ? &g_patho : nullptr);
  o.l_g = o.adv.l_adv_g + o.retina.retina + o.patho.patho;
  if (grad != nullptr) {
    *grad = d.backward(fake, grad_neg_log_p(fake), nullptr);
    *grad += g_retina;
    *grad += g_patho;
  }
  return o;
}

GanTrainer::GanTrainer(GanModel& model, const DetectorNet& detector, PathologicalSetup setup,
                       const LossWeights& weights, const GanTrainConfig& cfg, std::uint64_t seed)
    : model_(model),
      detector_(detector),
      extractor_(DetailExtractor::build(model.extractor_config)),
      setup_(std::move(setup)),
      weights_(weights),
      cfg_(cfg),
      rng_(seed),
      g_opt_(cfg.g_learning_rate, cfg.beta1),
      d_opt_(cfg.d_learning_rate, cfg.beta1),
      g_grads_(model.generator.zero_grads()),
      d_grads_(model.discriminator.body().zero_grads()) {
  weights_.validate();
  if (setup_.norm != cfg_.normalization) {
    throw Error("bad_config", "pathological setup and training use different normalizations");
  }
  const int n = model.generator_config.image_size;
  if (detector.config().image_size != n) {
    throw Error("shape_mismatch", "detector and generator image sizes differ");
  }
}

GanStepLog GanTrainer::step(const TrainingPair& input) {
  ++step_;
  TrainingPair pair = input;
  if (cfg_.augment) {
    const int turns = static_cast<int>(rng_() % 4);
    const bool fh = (rng_() & 1U) != 0;
    const bool fv = (rng_() & 1U) != 0;
    pair.image = rotate_flip(pair.image, turns, fh, fv);
    pair.mask = rotate_flip(pair.mask, turns, fh, fv);
  }
  const int n = model_.generator_config.image_size;
  const int zd = model_.generator_config.noise_dim;
  GanStepLog log;
  log.step = step_;
  Generator& g = model_.generator;
  Discriminator& d = model_.discriminator;
  const ParamList gp = g.parameters();
  const ParamList ggp = Generator::parameters(g_grads_);

  for (int u = 0; u < cfg_.g_updates; ++u) {
    const GeneratorTrace t = g.forward(pair.mask, sample_noise(n, n, zd, cfg_.train_noise, rng_));
    FeatureMap grad_out;
    const GeneratorObjective o = generator_objective(d, extractor_, detector_, setup_, weights_,
                                                     cfg_.normalization, pair, t.output, &grad_out);
    log.l_adv_g = o.adv.l_adv_g;
    log.l_dd = o.retina.dd;
    log.l_tv = o.retina.tv;
    log.l_dp = o.patho.dp;
    log.l_mv = o.patho.mv;
    log.l_g = o.l_g;
    log.severity = o.patho.severity;
    if (!std::isfinite(o.l_g) || !grad_out.all_finite()) break;
    zero(ggp);
    g.backward(t, grad_out, g_grads_);
    g_opt_.step(gp, ggp);
  }

  if (cfg_.d_updates > 0) {
    ConvStack& body = d.body();
    std::vector<std::span<double>> dp;
    body.append_parameters(dp);
    ParamList dgp;
    for (auto& b : d_grads_) append_bank_parameters(b, dgp);
    for (int u = 0; u < cfg_.d_updates; ++u) {
      const FeatureMap fake = g.generate(pair.mask, sample_noise(n, n, zd, cfg_.train_noise, rng_));
      zero(dgp);
      const DiscriminatorOutput real_out = d.forward(pair.image, pair.mask);
      const DiscriminatorOutput fake_out = d.forward(fake, pair.mask);
      log.l_adv = adversarial_losses(real_out.prob, fake_out.prob).l_adv;
      if (!std::isfinite(log.l_adv)) break;
      // the discriminator maximizes L_adv, i.e. minimizes -L_adv
      d.backward(real_out, grad_neg_log_p(real_out), &d_grads_);
      d.backward(fake_out, grad_neg_log_1mp(fake_out), &d_grads_);
      d_opt_.step(dp, dgp);
    }
  }
  if (!finite(log)) {
    throw Error("diverged", "GAN loss became non-finite at step " + std::to_string(step_) +
                                "; last finite losses: " + gan_log_row(last_finite_));
  }
  last_finite_ = log;
  ++model_.steps_trained;
  return log;
}

std::vector<GanStepLog> train_gan(GanModel& model, const std::vector<TrainingPair>& pairs,
                                  const DetectorNet& detector, const PathologicalSetup& setup,
                                  const LossWeights& weights, const GanTrainConfig& cfg,
                                  std::uint64_t seed,
                                  const std::function<void(const GanStepLog&)>& progress) {
  if (pairs.empty()) throw Error("empty_dataset", "GAN training needs at least one pair");
  GanTrainer trainer(model, detector, setup, weights, cfg, seed);
  std::vector<GanStepLog> logs;
  for (int s = 0; s < cfg.steps; ++s) {
    const std::size_t idx = pairs.size() == 1 ? 0 : trainer.rng()() % pairs.size();
    logs.push_back(trainer.step(pairs[idx]));
    if (progress) progress(logs.back());
  }
  model.round_to_float();
  return logs;
}

FeatureMap synthesize(const Generator& g, const FeatureMap& mask, double noise_stddev,
                      std::mt19937_64& rng) {
  const int n = g.config().image_size;
  return g.generate(mask, sample_noise(n, n, g.config().noise_dim, noise_stddev, rng));
}

}  // namespace lesionforge
