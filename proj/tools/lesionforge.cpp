#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lesionforge/activation.hpp"
#include "lesionforge/descriptor.hpp"
#include "lesionforge/detector.hpp"
#include "lesionforge/evaluate.hpp"
#include "lesionforge/forest.hpp"
#include "lesionforge/io.hpp"
#include "lesionforge/jsonutil.hpp"
#include "lesionforge/manipulate.hpp"
#include "lesionforge/phantom.hpp"
#include "lesionforge/synthgan.hpp"

#ifndef LESIONFORGE_VERSION
#define LESIONFORGE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lesionforge;

namespace {

// ---------------------------------------------------------------- config

struct DatasetSection {
  int train = 300;
  int validation = 200;
  PhantomConfig phantom;
};

struct FeaturesSection {
  ForestConfig forest;
  double tolerance = 0.02;
  int max_k = 16;
};

struct DescriptorsSection {
  BinarizePolicy binarize;
  int min_area = 4;
  int max_regions = 3;
  int source_grade = 3;  // first validation image of this grade is the source
};

struct PlanSection {
  PlanOptions placement;
  int multiplicity = 1;
};

struct GanSection {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  ExtractorConfig extractor;
  GanTrainConfig train;
  LossWeights weights;
  std::vector<int> train_grades{0};
  int synth_masks = 5;
  int synth_per_mask = 4;
};

struct CurveSection {
  int base_steps = 400;
  CurveTraining training;
  int masks = 5;
  int n_per_mask = 10;
};

struct AblateSection {
  int base_steps = 400;
  int steps = 150;
  SweepConfig sweep;
  int eval_pairs = 5;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  DatasetSection dataset;
  DetectorConfig detector;
  DetectorTrainConfig detector_train;
  FeaturesSection features;
  DescriptorsSection descriptors;
  PlanSection plan;
  GanSection gan;
  CurveSection curve;
  AblateSection ablate;
};

void to_json(json& j, const RunConfig& c) {
  j = json::object();
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["dataset"] = {{"train", c.dataset.train}, {"validation", c.dataset.validation}, {"phantom", c.dataset.phantom}};
  j["detector"] = c.detector;
  j["detector_train"] = c.detector_train;
  j["features"] = {{"forest", c.features.forest}, {"tolerance", c.features.tolerance}, {"max_k", c.features.max_k}};
  j["descriptors"] = {{"binarize", c.descriptors.binarize},
                      {"min_area", c.descriptors.min_area},
                      {"max_regions", c.descriptors.max_regions},
                      {"source_grade", c.descriptors.source_grade}};
  j["plan"] = {{"max_overlap", c.plan.placement.max_overlap},
               {"disc_margin", c.plan.placement.disc_margin},
               {"max_attempts", c.plan.placement.max_attempts},
               {"multiplicity", c.plan.multiplicity}};
  j["gan"] = {{"generator", c.gan.generator},   {"discriminator", c.gan.discriminator},
              {"extractor", c.gan.extractor},   {"train", c.gan.train},
              {"weights", c.gan.weights},       {"train_grades", c.gan.train_grades},
              {"synth_masks", c.gan.synth_masks}, {"synth_per_mask", c.gan.synth_per_mask}};
  j["curve"] = {{"base_steps", c.curve.base_steps},
                {"training", c.curve.training},
                {"masks", c.curve.masks},
                {"n_per_mask", c.curve.n_per_mask}};
  j["ablate"] = {{"base_steps", c.ablate.base_steps},
                 {"steps", c.ablate.steps},
                 {"sweep", c.ablate.sweep},
                 {"eval_pairs", c.ablate.eval_pairs}};
}

void from_json(const json& j, RunConfig& c) {
  reject_unknown_keys(j, {"seed", "dataset", "detector", "detector_train", "features", "descriptors", "plan",
                          "gan", "curve", "ablate"},
                      "config");
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("dataset")) {
    const auto& s = j.at("dataset");
    reject_unknown_keys(s, {"train", "validation", "phantom"}, "dataset");
    read_opt(s, "train", c.dataset.train);
    read_opt(s, "validation", c.dataset.validation);
    read_opt(s, "phantom", c.dataset.phantom);
  }
  read_opt(j, "detector", c.detector);
  read_opt(j, "detector_train", c.detector_train);
  if (j.contains("features")) {
    const auto& s = j.at("features");
    reject_unknown_keys(s, {"forest", "tolerance", "max_k"}, "features");
    read_opt(s, "forest", c.features.forest);
    read_opt(s, "tolerance", c.features.tolerance);
    read_opt(s, "max_k", c.features.max_k);
  }
  if (j.contains("descriptors")) {
    const auto& s = j.at("descriptors");
    reject_unknown_keys(s, {"binarize", "min_area", "max_regions", "source_grade"}, "descriptors");
    read_opt(s, "binarize", c.descriptors.binarize);
    read_opt(s, "min_area", c.descriptors.min_area);
    read_opt(s, "max_regions", c.descriptors.max_regions);
    read_opt(s, "source_grade", c.descriptors.source_grade);
  }
  if (j.contains("plan")) {
    const auto& s = j.at("plan");
    reject_unknown_keys(s, {"max_overlap", "disc_margin", "max_attempts", "multiplicity"}, "plan");
    read_opt(s, "max_overlap", c.plan.placement.max_overlap);
    read_opt(s, "disc_margin", c.plan.placement.disc_margin);
    read_opt(s, "max_attempts", c.plan.placement.max_attempts);
    read_opt(s, "multiplicity", c.plan.multiplicity);
  }
  if (j.contains("gan")) {
    const auto& s = j.at("gan");
    reject_unknown_keys(s, {"generator", "discriminator", "extractor", "train", "weights", "train_grades",
                            "synth_masks", "synth_per_mask"},
                        "gan");
    read_opt(s, "generator", c.gan.generator);
    read_opt(s, "discriminator", c.gan.discriminator);
    read_opt(s, "extractor", c.gan.extractor);
    read_opt(s, "train", c.gan.train);
    read_opt(s, "weights", c.gan.weights);
    read_opt(s, "train_grades", c.gan.train_grades);
    read_opt(s, "synth_masks", c.gan.synth_masks);
    read_opt(s, "synth_per_mask", c.gan.synth_per_mask);
  }
  if (j.contains("curve")) {
    const auto& s = j.at("curve");
    reject_unknown_keys(s, {"base_steps", "training", "masks", "n_per_mask"}, "curve");
    read_opt(s, "base_steps", c.curve.base_steps);
    read_opt(s, "training", c.curve.training);
    read_opt(s, "masks", c.curve.masks);
    read_opt(s, "n_per_mask", c.curve.n_per_mask);
  }
  if (j.contains("ablate")) {
    const auto& s = j.at("ablate");
    reject_unknown_keys(s, {"base_steps", "steps", "sweep", "eval_pairs"}, "ablate");
    read_opt(s, "base_steps", c.ablate.base_steps);
    read_opt(s, "steps", c.ablate.steps);
    read_opt(s, "sweep", c.ablate.sweep);
    read_opt(s, "eval_pairs", c.ablate.eval_pairs);
  }
  auto positive = [](int v, const char* what) {
    if (v < 1) throw Error("bad_config", std::string(what) + " must be >= 1");
  };
  positive(c.dataset.train, "dataset.train");
  positive(c.dataset.validation, "dataset.validation");
  positive(c.descriptors.max_regions, "descriptors.max_regions");
  positive(c.gan.synth_masks, "gan.synth_masks");
  positive(c.gan.synth_per_mask, "gan.synth_per_mask");
  positive(c.curve.masks, "curve.masks");
  positive(c.curve.n_per_mask, "curve.n_per_mask");
  positive(c.ablate.eval_pairs, "ablate.eval_pairs");
  if (c.plan.multiplicity < 0 || c.curve.base_steps < 0 || c.ablate.base_steps < 0 || c.ablate.steps < 0 ||
      c.descriptors.min_area < 1 || c.features.max_k < 0 || !(c.features.tolerance >= 0.0)) {
    throw Error("bad_config", "negative count, step or tolerance setting");
  }
  c.dataset.phantom.validate();
  c.detector.validate();
  c.gan.generator.validate();
  c.gan.weights.validate();
  if (c.gan.generator.image_size != c.detector.image_size || c.dataset.phantom.image_size != c.detector.image_size) {
    throw Error("bad_config", "dataset, detector and generator image sizes must agree");
  }
}

// `a.b.c=value`; the path must already exist in the full configuration.
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error("bad_override", "override '" + assignment + "' is not key=value");
  }
  std::string pointer;
  std::string key = assignment.substr(0, eq);
  for (std::size_t p = 0; p <= key.size();) {
    const auto dot = std::min(key.find('.', p), key.size());
    pointer += "/" + key.substr(p, dot - p);
    p = dot + 1;
  }
  const json::json_pointer ptr(pointer);
  if (!doc.contains(ptr)) throw Error("unknown_key", "unknown configuration key '" + key + "'");
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  doc[ptr] = value;
}

// ---------------------------------------------------------------- run context

struct MissingInputs : Error {
  std::vector<std::string> paths;
  explicit MissingInputs(std::vector<std::string> p)
      : Error("missing_inputs", "missing inputs"), paths(std::move(p)) {}
};

// Stream ids keep every stage's randomness independent of which stages ran.
enum class Stream : std::uint64_t {
  train_split = 1,
  validation_split,
  detector_init,
  detector_train,
  forest,
  plan,
  gan_init,
  gan_train,
  synth,
  curve,
  ablate,
};

struct Context {
  fs::path out;
  RunConfig cfg;
  json cfg_json;
  std::uint64_t seed = 0;
  std::string seed_source;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  fs::path at(const std::string& rel) const { return out / rel; }

  void require(const std::vector<std::string>& rels) {
    std::vector<std::string> missing;
    for (const auto& r : rels) {
      if (!fs::exists(at(r))) missing.push_back(r);
    }
    if (!missing.empty()) throw MissingInputs(missing);
    inputs.insert(inputs.end(), rels.begin(), rels.end());
  }
  void produced(const std::vector<std::string>& rels) { outputs.insert(outputs.end(), rels.begin(), rels.end()); }

  std::uint64_t stream(Stream s) const {
    const auto id = static_cast<std::uint64_t>(s);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), 0x6c66u};
    std::uint32_t v[2];
    seq.generate(v, v + 2);
    return (static_cast<std::uint64_t>(v[0]) << 32) | v[1];
  }
};


json hash_map(const Context& ctx, const std::vector<std::string>& rels) {
  json m = json::object();
  for (const auto& r : rels) {
    const fs::path p = ctx.at(r);
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) m[fs::relative(f, ctx.out).generic_string()] = sha256_file(f);
    } else {
      m[r] = sha256_file(p);
    }
  }
  return m;
}

void record(const Context& ctx, const std::string& command) {
  const fs::path path = ctx.at("run.json");
  json run;
  if (fs::exists(path)) {
    const auto b = read_bytes(path);
    run = json::parse(b.begin(), b.end(), nullptr, false);
    if (run.is_discarded() || !run.is_object()) run = json::object();
  }
  run["tool"] = "lesionforge";
  run["versions"] = {{"lesionforge", LESIONFORGE_VERSION}, {"pdsc", 1}, {"drdn", 1}, {"sgan", 1}};
  run["commands"][command] = {{"config", ctx.cfg_json},
                              {"seed", ctx.seed},
                              {"seed_source", ctx.seed_source},
                              {"inputs", hash_map(ctx, ctx.inputs)},
                              {"outputs", hash_map(ctx, ctx.outputs)}};
  write_text(path, run.dump(2) + "\n");
}

json read_json_file(const fs::path& p) {
  const auto b = read_bytes(p);
  json j = json::parse(b.begin(), b.end(), nullptr, false);
  if (j.is_discarded()) throw Error("bad_json", "cannot parse " + p.string());
  return j;
}

void write_json_file(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- shared loaders

const char* kTrainDir = "dataset/train";
const char* kValidationDir = "dataset/validation";
const char* kDetector = "detector.drdn";
const char* kKeyFeatures = "key_features.json";
const char* kDescriptors = "descriptors.pdsc";
const char* kPlan = "plan.json";
const char* kGan = "gan.sgan";

std::string manifest(const char* dir) { return std::string(dir) + "/manifest.json"; }

std::vector<LabeledImage> labeled(const std::vector<DatasetEntry>& es) {
  std::vector<LabeledImage> out;
  for (const auto& e : es) out.push_back({e.fundus, e.grade});
  return out;
}

std::vector<TrainingPair> gan_pairs(const std::vector<DatasetEntry>& es, const std::vector<int>& grades) {
  std::vector<TrainingPair> out;
  for (const auto& e : es) {
    if (grades.empty() || std::find(grades.begin(), grades.end(), e.grade) != grades.end()) {
      out.push_back({e.fundus, e.vessel_mask});
    }
  }
  if (out.empty()) throw Error("empty_dataset", "no training images carry the configured gan.train_grades");
  return out;
}

const DatasetEntry& source_entry(const Context& ctx, const std::vector<DatasetEntry>& validation) {
  for (const auto& e : validation) {
    if (e.grade == ctx.cfg.descriptors.source_grade) return e;
  }
  throw Error("no_source", "no validation image has grade " + std::to_string(ctx.cfg.descriptors.source_grade));
}

KeyFeatureSet load_keys(const Context& ctx) { return key_features_from_json(read_json_file(ctx.at(kKeyFeatures))); }

FieldOfView plan_fov(const std::vector<DatasetEntry>& train) { return estimate_fov(train.front().vessel_mask); }

void log(const std::string& s) { std::cerr << s << std::endl; }

// ---------------------------------------------------------------- commands

void cmd_phantom_gen(Context& ctx) {
  auto seeds = [&](Stream s, int n) {
    std::mt19937_64 rng(ctx.stream(s));
    std::vector<std::uint64_t> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng();
    return v;
  };
  for (const auto& [dir, s, n] : {std::tuple{kTrainDir, Stream::train_split, ctx.cfg.dataset.train},
                                  std::tuple{kValidationDir, Stream::validation_split, ctx.cfg.dataset.validation}}) {
    fs::remove_all(ctx.at(dir));
    write_dataset(ctx.at(dir), ctx.cfg.dataset.phantom, seeds(s, n));
    ctx.produced({dir});
  }
}

void cmd_detector_train(Context& ctx) {
  ctx.require({manifest(kTrainDir), manifest(kValidationDir)});
  const auto train = read_dataset(ctx.at(kTrainDir));
  const auto validation = read_dataset(ctx.at(kValidationDir));
  DetectorNet net = DetectorNet::build(ctx.cfg.detector, ctx.stream(Stream::detector_init));
  std::string csv = "epoch,train_loss,validation_loss,validation_accuracy\n";
  train_detector(net, labeled(train), labeled(validation), ctx.cfg.detector_train, ctx.stream(Stream::detector_train),
                 [&](const DetectorEpoch& e) {
                   std::ostringstream row;
                   row << std::setprecision(9) << e.epoch << ',' << e.train_loss << ',' << e.validation_loss << ','
                       << e.validation_accuracy;
                   csv += row.str() + "\n";
                   log("detector epoch " + row.str());
                 });
  net.save(ctx.at(kDetector));
  write_text(ctx.at("detector_log.csv"), csv);
  ctx.produced({kDetector, "detector_log.csv"});
}

void cmd_detector_eval(Context& ctx) {
  ctx.require({kDetector, manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto validation = read_dataset(ctx.at(kValidationDir));
  const int g = net.config().grades;
  std::vector<std::vector<int>> confusion(g, std::vector<int>(g, 0));
  std::vector<double> score_sum(g, 0.0);
  std::vector<int> per_grade(g, 0);
  for (const auto& e : validation) {
    const auto s = severity(net, e.fundus);
    if (e.grade >= 0 && e.grade < g) {
      ++confusion[e.grade][s.grade];
      score_sum[e.grade] += s.score;
      ++per_grade[e.grade];
    }
  }
  json mean = json::array();
  for (int i = 0; i < g; ++i) mean.push_back(per_grade[i] ? score_sum[i] / per_grade[i] : 0.0);
  const auto data = labeled(validation);
  write_json_file(ctx.at("detector_eval.json"), {{"accuracy", grade_accuracy(net, data)},
                                                 {"cross_entropy", mean_cross_entropy(net, data)},
                                                 {"confusion", confusion},
                                                 {"mean_severity_by_grade", mean}});
  ctx.produced({"detector_eval.json"});
}

void cmd_features_select(Context& ctx) {
  ctx.require({kDetector, manifest(kTrainDir), manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  auto bottlenecks = [&](const std::vector<DatasetEntry>& es, std::vector<std::vector<double>>& x,
                         std::vector<int>& y) {
    for (const auto& e : es) {
      x.push_back(forward_with_stack(net, e.fundus).bottleneck);
      y.push_back(e.grade);
    }
  };
  std::vector<std::vector<double>> tx, ex;
  std::vector<int> ty, ey;
  bottlenecks(read_dataset(ctx.at(kTrainDir)), tx, ty);
  bottlenecks(read_dataset(ctx.at(kValidationDir)), ex, ey);
  const auto& fc = ctx.cfg.features;
  std::mt19937_64 rng(ctx.stream(Stream::forest));
  const auto forest = fit_forest(tx, ty, fc.forest, rng());
  const auto keys = select_key_features(forest, tx, ty, ex, ey, fc.tolerance, fc.forest, rng(), fc.max_k);
  write_json_file(ctx.at(kKeyFeatures), key_features_json(keys));
  std::string csv = "feature,count\n";
  for (const auto& f : rank_features(forest)) csv += std::to_string(f.index) + "," + std::to_string(f.count) + "\n";
  write_text(ctx.at("feature_ranking.csv"), csv);
  ctx.produced({kKeyFeatures, "feature_ranking.csv"});
  log("key features: " + json(keys.indices).dump() + " subset accuracy " + std::to_string(keys.accuracy_subset) +
      " full " + std::to_string(keys.accuracy_full) +
      " oob " + std::to_string(forest.oob_accuracy));
}

struct Projected {
  std::string id;
  FeatureStack stack;
  ProjectionStack proj;
  FeatureMap m0;
};

Projected project_source(Context& ctx, const DetectorNet& net) {
  const auto validation = read_dataset(ctx.at(kValidationDir));
  const auto& src = source_entry(ctx, validation);
  Projected p{src.id, forward_with_stack(net, src.fundus), {}, {}};
  p.proj = project(net, p.stack, load_keys(ctx));
  p.m0 = binarize_projection(p.proj.level(0), ctx.cfg.descriptors.binarize);
  return p;
}

void cmd_activate_project(Context& ctx) {
  ctx.require({kDetector, kKeyFeatures, manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto p = project_source(ctx, net);
  fs::remove_all(ctx.at("activation"));
  fs::create_directories(ctx.at("activation"));
  for (std::size_t l : net.descriptor_levels()) {
    char name[64];
    std::snprintf(name, sizeof name, "activation/level_%02zu.png", l);
    write_heatmap_png(ctx.at(name), p.proj.level(l));
  }
  FeatureMap m = p.m0;
  m *= 255.0;
  write_png(ctx.at("activation/mask.png"), m);
  write_json_file(ctx.at("activation/source.json"), {{"image_id", p.id}});
  ctx.produced({"activation"});
}

void cmd_descriptors_extract(Context& ctx) {
  ctx.require({kDetector, kKeyFeatures, manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto p = project_source(ctx, net);
  const auto& dc = ctx.cfg.descriptors;
  const auto regions = strongest_regions(connected_regions(p.m0, dc.min_area), projection_magnitude(p.proj.level(0)),
                                         p.m0, static_cast<std::size_t>(dc.max_regions));
  if (regions.empty()) throw Error("no_regions", "the binarized projection of " + p.id + " has no regions");
  const auto ds = build_descriptors(net, p.stack, p.proj, p.m0, regions, "validation/" + p.id);
  save_descriptors(ds, ctx.at(kDescriptors));
  json summary = json::array();
  for (const auto& d : ds) {
    summary.push_back({{"source", d.source_image_id},
                       {"rect", d.region.rect},
                       {"area", d.region.area},
                       {"layers", d.layers.size()},
                       {"clamped", d.clamped()}});
  }
  write_json_file(ctx.at("descriptors.json"), summary);
  ctx.produced({kDescriptors, "descriptors.json"});
}

void cmd_plan_make(Context& ctx) {
  ctx.require({kDescriptors, manifest(kTrainDir)});
  const auto ds = load_descriptors(ctx.at(kDescriptors));
  const auto train = read_dataset(ctx.at(kTrainDir));
  const int n = ctx.cfg.detector.image_size;
  PlacementPlan plan = plan_random(ds, plan_fov(train), n, n, ctx.stream(Stream::plan), ctx.cfg.plan.placement,
                                   ctx.cfg.plan.multiplicity);
  plan.descriptor_file = kDescriptors;
  save_plan(plan, ctx.at(kPlan));
  ctx.produced({kPlan});
}

void cmd_plan_edit(Context& ctx, const std::string& ops_file) {
  ctx.require({kDescriptors, kPlan});
  const json ops_json = read_json_file(ops_file);
  if (!ops_json.is_array()) throw Error("bad_ops", "the edit file must hold a JSON array of operations");
  std::vector<PlanOp> ops;
  for (const auto& o : ops_json) ops.push_back(plan_op_from_json(o));
  const auto ds = load_descriptors(ctx.at(kDescriptors));
  const auto plan = edit_plan(load_plan(ctx.at(kPlan)), ds, ops, ctx.stream(Stream::plan) + 1,
                              ctx.cfg.plan.placement.max_attempts);
  save_plan(plan, ctx.at(kPlan));
  ctx.produced({kPlan});
}

GanModel fresh_gan(const Context& ctx) {
  const auto& g = ctx.cfg.gan;
  return GanModel::build(g.generator, g.discriminator, g.extractor, ctx.stream(Stream::gan_init));
}

void cmd_gan_train(Context& ctx, bool base_only) {
  std::vector<std::string> need{kDetector, manifest(kTrainDir)};
  if (!base_only) need.insert(need.end(), {kDescriptors, kPlan});
  ctx.require(need);
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto pairs = gan_pairs(read_dataset(ctx.at(kTrainDir)), ctx.cfg.gan.train_grades);
  const auto& gc = ctx.cfg.gan;
  GanModel model = fresh_gan(ctx);
  std::string csv = gan_log_header() + "\n";
  auto progress = [&](const GanStepLog& l) {
    csv += gan_log_row(l) + "\n";
    if (l.step % 50 == 0) log("gan " + gan_log_row(l));
  };
  if (base_only) {
    model = train_base_generator(model, pairs, net, gc.weights, gc.train, ctx.stream(Stream::gan_train), progress);
  } else {
    const auto ds = load_descriptors(ctx.at(kDescriptors));
    const auto plan = load_plan(ctx.at(kPlan));
    const auto setup = prepare_pathological(net, ds, plan, gc.weights, gc.train.normalization);
    train_gan(model, pairs, net, setup, gc.weights, gc.train, ctx.stream(Stream::gan_train), progress);
  }
  model.save(ctx.at(kGan));
  write_text(ctx.at("gan_log.csv"), csv);
  ctx.produced({kGan, "gan_log.csv"});
}

void cmd_gan_synth(Context& ctx) {
  ctx.require({kGan, kDetector, manifest(kValidationDir)});
  const auto model = GanModel::load(ctx.at(kGan));
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto validation = read_dataset(ctx.at(kValidationDir));
  const auto& gc = ctx.cfg.gan;
  fs::remove_all(ctx.at("synth"));
  fs::create_directories(ctx.at("synth"));
  std::mt19937_64 rng(ctx.stream(Stream::synth));
  std::string csv = "mask,sample,severity,grade\n";
  std::vector<FeatureMap> grid;
  const int masks = std::min<int>(gc.synth_masks, static_cast<int>(validation.size()));
  for (int m = 0; m < masks; ++m) {
    for (int i = 0; i < gc.synth_per_mask; ++i) {
      FeatureMap x = synthesize(model.generator, validation[m].vessel_mask, gc.train.test_noise, rng);
      const auto s = severity(net, x);
      const std::string name = validation[m].id + "_" + std::to_string(i);
      write_png_signed(ctx.at("synth/" + name + ".png"), x);
      std::ostringstream row;
      row << std::setprecision(9) << validation[m].id << ',' << i << ',' << s.score << ',' << s.grade;
      csv += row.str() + "\n";
      grid.push_back(std::move(x));
    }
  }
  write_text(ctx.at("synth/severity.csv"), csv);
  write_png_signed(ctx.at("synth/grid.png"), image_grid(grid, gc.synth_per_mask));
  ctx.produced({"synth"});
}

void cmd_eval_curve(Context& ctx) {
  ctx.require({kDetector, kDescriptors, manifest(kTrainDir), manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto ds = load_descriptors(ctx.at(kDescriptors));
  const auto train = read_dataset(ctx.at(kTrainDir));
  const auto validation = read_dataset(ctx.at(kValidationDir));
  const auto pairs = gan_pairs(train, ctx.cfg.gan.train_grades);
  const auto& cc = ctx.cfg.curve;
  const auto& gc = ctx.cfg.gan;
  std::mt19937_64 rng(ctx.stream(Stream::curve));
  GanTrainConfig base_cfg = gc.train;
  base_cfg.steps = cc.base_steps;
  const GanModel base = train_base_generator(fresh_gan(ctx), pairs, net, gc.weights, base_cfg, rng(),
                                             [](const GanStepLog& l) {
                                               if (l.step % 100 == 0) log("curve base " + gan_log_row(l));
                                             });
  const auto models = train_count_generators(base, pairs, net, ds, plan_fov(train), cc.training, gc.train, rng(),
                                             [](int count, const GanStepLog& l) {
                                               if (l.step % 50 == 0) {
                                                 log("curve count " + std::to_string(count) + " " + gan_log_row(l));
                                               }
                                             });
  std::vector<FeatureMap> masks;
  for (int i = 0; i < std::min<int>(cc.masks, static_cast<int>(validation.size())); ++i) {
    masks.push_back(validation[i].vessel_mask);
  }
  std::vector<CountedGenerator> gens;
  for (const auto& m : models) gens.push_back({m.count, &m.model.generator});
  const auto curve = severity_curve(gens, net, masks, cc.n_per_mask, gc.train.test_noise, rng());
  fs::remove_all(ctx.at("curve"));
  fs::create_directories(ctx.at("curve"));
  write_text(ctx.at("curve/curve.csv"), curve_csv(curve));
  json rows = json::array();
  std::vector<FeatureMap> grid;
  std::mt19937_64 grid_rng(ctx.stream(Stream::curve) + 1);
  for (std::size_t i = 0; i < curve.rows.size(); ++i) {
    const auto& r = curve.rows[i];
    rows.push_back({{"count", r.count}, {"mean", r.mean}, {"stddev", r.stddev}, {"n", r.scores.size()}});
    save_plan(models[i].plan, ctx.at("curve/plan_" + std::to_string(r.count) + ".json"));
    for (const auto& m : masks) grid.push_back(synthesize(models[i].model.generator, m, gc.train.test_noise, grid_rng));
  }
  write_png_signed(ctx.at("curve/grid.png"), image_grid(grid, static_cast<int>(masks.size())));
  write_json_file(ctx.at("curve/curve.json"),
                  {{"rows", rows}, {"spearman", std::isfinite(curve.spearman) ? json(curve.spearman) : json(nullptr)}});
  ctx.produced({"curve"});
  log("curve spearman " + std::to_string(curve.spearman));
}

void cmd_eval_ablate(Context& ctx) {
  ctx.require({kDetector, kDescriptors, kPlan, manifest(kTrainDir), manifest(kValidationDir)});
  const auto net = DetectorNet::load(ctx.at(kDetector));
  const auto ds = load_descriptors(ctx.at(kDescriptors));
  const auto plan = load_plan(ctx.at(kPlan));
  const auto pairs = gan_pairs(read_dataset(ctx.at(kTrainDir)), ctx.cfg.gan.train_grades);
  const auto eval_all = gan_pairs(read_dataset(ctx.at(kValidationDir)), ctx.cfg.gan.train_grades);
  const auto& ac = ctx.cfg.ablate;
  const auto& gc = ctx.cfg.gan;
  const std::vector<TrainingPair> eval(eval_all.begin(),
                                       eval_all.begin() + std::min<std::size_t>(ac.eval_pairs, eval_all.size()));
  std::mt19937_64 rng(ctx.stream(Stream::ablate));
  GanTrainConfig base_cfg = gc.train;
  base_cfg.steps = ac.base_steps;
  const GanModel base = train_base_generator(fresh_gan(ctx), pairs, net, ac.sweep.weights, base_cfg, rng());
  GanTrainConfig run_cfg = gc.train;
  run_cfg.steps = ac.steps;
  const auto rows = ablation_sweep(base, pairs, eval, net, ds, plan, ac.sweep, run_cfg, rng());
  fs::remove_all(ctx.at("ablate"));
  fs::create_directories(ctx.at("ablate"));
  write_text(ctx.at("ablate/sweep.csv"), sweep_csv(rows, ac.sweep.parameter));
  json out = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    out.push_back({{"value", r.value},
                   {"mean_severity", num(r.mean_severity)},
                   {"l_dd", num(r.l_dd)},
                   {"flagged", r.flagged},
                   {"error", r.error},
                   {"seed", r.seed},
                   {"config_hash", r.config_hash}});
    if (!r.samples.empty()) {
      write_png_signed(ctx.at("ablate/samples_" + std::to_string(i) + ".png"),
                       image_grid(r.samples, static_cast<int>(r.samples.size())));
    }
  }
  write_json_file(ctx.at("ablate/sweep.json"), {{"parameter", ac.sweep.parameter}, {"rows", out}});
  ctx.produced({"ablate"});
}

// ---------------------------------------------------------------- main

std::uint64_t parse_seed(const std::string& s, const char* where) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 0);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("bad_seed", std::string(where) + " is not an unsigned integer: '" + s + "'");
  }
}

int emit_error(const std::string& command, const Error& e) {
  json rec = {{"error", {{"code", e.code()}, {"message", e.what()}, {"command", command}}}};
  if (const auto* m = dynamic_cast<const MissingInputs*>(&e)) rec["error"]["missing"] = m->paths;
  std::cout << rec.dump() << std::endl;
  return e.code() == "bad_config" || e.code() == "unknown_key" || e.code() == "bad_override" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lesion descriptors and vessel-conditioned fundus synthesis on desk-scale phantoms"};
  app.require_subcommand(1);
  std::string config_path, out_dir, ops_file;
  std::vector<std::string> overrides;
  std::optional<std::string> seed_flag;
  bool base_only = false;
  app.add_option("-c,--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("-o,--out", out_dir, "run directory; every artifact path is relative to it");
  app.add_option("--set", overrides, "override one configuration key, e.g. --set gan.train.steps=50");
  app.add_option("--seed", seed_flag, "global seed (else config 'seed', else LESIONFORGE_SEED, else 0)");
  app.fallthrough();

  std::map<std::string, std::function<void(Context&)>> actions;
  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help,
                  std::function<void(Context&)> fn) {
    auto* sub = parent->add_subcommand(name, help);
    actions[parent == &app ? name : parent->get_name() + " " + name] = std::move(fn);
    return sub;
  };
  auto group = [&](const std::string& name, const std::string& help) {
    auto* g = app.add_subcommand(name, help);
    g->require_subcommand(1);
    return g;
  };

  auto* phantom = group("phantom", "phantom datasets");
  leaf(phantom, "gen", "write the train and validation phantom splits", cmd_phantom_gen);
  auto* detector = group("detector", "severity detector");
  leaf(detector, "train", "train the detector on the train split", cmd_detector_train);
  leaf(detector, "eval", "score the validation split", cmd_detector_eval);
  auto* features = group("features", "bottleneck features");
  leaf(features, "select", "rank bottleneck features with a random forest and pick the key subset",
       cmd_features_select);
  auto* activate = group("activate", "activation network");
  leaf(activate, "project", "project the key features of the source image back to every level",
       cmd_activate_project);
  auto* descriptors = group("descriptors", "pathological descriptors");
  leaf(descriptors, "extract", "binarize the projection and store per-lesion descriptors",
       cmd_descriptors_extract);
  auto* plan = group("plan", "lesion placement plans");
  leaf(plan, "make", "place every descriptor at random valid positions", cmd_plan_make);
  auto* edit = leaf(plan, "edit", "apply drop/clone/constrain operations to the plan",
                    [&](Context& c) { cmd_plan_edit(c, ops_file); });
  edit->add_option("--ops", ops_file, "JSON array of operations")->required()->check(CLI::ExistingFile);
  auto* gan = group("gan", "synthesis network");
  auto* gan_train = leaf(gan, "train", "train the generator and discriminator",
                         [&](Context& c) { cmd_gan_train(c, base_only); });
  gan_train->add_flag("--base", base_only, "train without descriptors or plan (no pathological loss)");
  leaf(gan, "synth", "synthesize images from validation vessel masks", cmd_gan_synth);
  auto* eval = group("eval", "experiments");
  leaf(eval, "curve", "severity against cloned lesion count", cmd_eval_curve);
  leaf(eval, "ablate", "loss weight sweep", cmd_eval_ablate);
  leaf(&app, "smoke", "phantom gen, detector train, features select, descriptors extract, plan make, gan "
                      "train, gan synth",
       [](Context& c) {
         cmd_phantom_gen(c);
         cmd_detector_train(c);
         cmd_features_select(c);
         cmd_descriptors_extract(c);
         cmd_plan_make(c);
         cmd_gan_train(c, false);
         cmd_gan_synth(c);
       });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command;
  for (auto* s : app.get_subcommands()) {
    command = s->get_name();
    for (auto* t : s->get_subcommands()) command += " " + t->get_name();
  }
  try {
    if (out_dir.empty()) throw Error("bad_config", "--out is required");
    RunConfig cfg;
    if (!config_path.empty()) cfg = read_json_file(config_path).get<RunConfig>();
    json doc = cfg;
    for (const auto& o : overrides) apply_override(doc, o);
    Context ctx;
    ctx.cfg = doc.get<RunConfig>();
    ctx.cfg_json = ctx.cfg;
    if (seed_flag) {
      ctx.seed = parse_seed(*seed_flag, "--seed");
      ctx.seed_source = "flag";
    } else if (ctx.cfg.seed) {
      ctx.seed = *ctx.cfg.seed;
      ctx.seed_source = "config";
    } else if (const char* env = std::getenv("LESIONFORGE_SEED"); env != nullptr && *env != '\0') {
      ctx.seed = parse_seed(env, "LESIONFORGE_SEED");
      ctx.seed_source = "env";
    } else {
      ctx.seed_source = "default";
    }
    ctx.out = out_dir;
    fs::create_directories(ctx.out);
    actions.at(command)(ctx);
    record(ctx, command);
  } catch (const Error& e) {
    return emit_error(command, e);
  } catch (const json::exception& e) {
    return emit_error(command, Error("bad_config", e.what()));
  } catch (const std::exception& e) {
    return emit_error(command, Error("internal", e.what()));
  }
  return 0;
}
