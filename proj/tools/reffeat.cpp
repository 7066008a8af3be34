// Command-line front end: train, extract, match, ensemble, eval-mma,
// eval-vpr and check-equivariance.
#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "reffeat/concurrency.hpp"
#include "reffeat/error.hpp"
#include "reffeat/eval.hpp"
#include "reffeat/io.hpp"
#include "reffeat/matching.hpp"
#include "reffeat/network.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/steerable.hpp"
#include "reffeat/training.hpp"

using namespace reffeat;

namespace {

struct Common {
  std::string config;
  int jobs = default_jobs();
  uint64_t seed = 0;
  bool quiet = false;
};

struct RansacFlags {
  double threshold = 3.0;
  int iters = 2000;
  double confidence = 0.995;

  void add(CLI::App* app) {
    app->add_option("--ransac-threshold", threshold, "RANSAC inlier threshold (px)");
    app->add_option("--ransac-iters", iters, "RANSAC iteration cap");
    app->add_option("--ransac-confidence", confidence, "RANSAC confidence for the adaptive cap");
  }
  RansacOptions options(uint64_t seed) const { return {threshold, iters, confidence, seed}; }
};

struct KeypointFlags {
  int max_keypoints = 1000;
  int nms_radius = 1;

  void add(CLI::App* app) {
    app->add_option("--max-keypoints", max_keypoints, "keypoints kept per image");
    app->add_option("--nms-radius", nms_radius, "non-maximum suppression radius (px)");
  }
  KeypointOptions options() const { return {max_keypoints, nms_radius}; }
};

void require(const std::string& value, const char* name) {
  if (value.empty()) throw ConfigError(std::string("missing required option --") + name);
}

// Values from the JSON config fill every option not given on the command
// line. Keys are long option names without the leading dashes.
void apply_config(CLI::App& app, CLI::App* sub, const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) opt = app.get_option_no_throw("--" + key);
    if (!opt || key == "config") throw ConfigError("unknown config key '" + key + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    auto text = [&](const nlohmann::json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
      if (v.is_number()) return v.dump();
      throw ConfigError("config key '" + key + "' has an unsupported value " + v.dump());
    };
    try {
      if (value.is_array()) {
        for (const auto& v : value) opt->add_result(text(v));
      } else {
        opt->add_result(text(value));
      }
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

RefNet load_model(const std::string& path, std::optional<int> group_order = std::nullopt) {
  require(path, "model");
  return load_checkpoint(path, group_order);
}

Tensor load_resized(const std::string& path, int64_t resize) {
  Tensor t = load_image(path);
  if (resize > 0) t = ops::resize_bilinear(t, resize, resize);
  return t;
}

void say(const Common& c, const std::string& msg) {
  if (!c.quiet) std::clog << msg << '\n';
}

// ---- train -----------------------------------------------------------------
struct TrainCmd {
  std::string training;  // TrainConfig JSON file
  std::string out;
  std::string loss_csv;
  int64_t steps = 200;
  int group_order = 0;
  std::string variant;

  void add(CLI::App* app) {
    app->add_option("--training", training, "training config JSON file");
    app->add_option("--out", out, "checkpoint output path");
    app->add_option("--loss-csv", loss_csv, "per-step loss CSV output");
    app->add_option("--steps", steps, "optimisation steps");
    app->add_option("--group-order", group_order, "cyclic group order n (toy backbone)");
    app->add_option("--variant", variant, "pooled, unpooled, post_pool_cnn or standard_cnn");
  }

  void run(const Common& c, bool seed_given) const {
    require(out, "out");
    TrainConfig cfg;
    if (!training.empty()) {
      try {
        cfg = TrainConfig::from_json(nlohmann::json::parse(read_text_file(training)));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("training config " + training + ": " + e.what());
      }
    }
    if (group_order > 0 || !variant.empty()) {
      cfg.model = RefConfig::toy(group_order > 0 ? group_order : cfg.model.group_order,
                                 variant.empty() ? cfg.model.variant : parse_variant(variant));
    }
    if (seed_given) cfg.seed = c.seed;
    cfg.validate();
    const TrainResult result = train(cfg, steps, [&](const LossReport& r) {
      if (!c.quiet && (r.step % 20 == 0)) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "step %lld total %.5f (cosim %.5f peaky %.5f ap %.5f)",
                      static_cast<long long>(r.step), r.total, r.repeatability_cosim, r.peakiness, r.ap_loss);
        std::clog << buf << '\n';
      }
    });
    save_checkpoint(result.model, out);
    if (!loss_csv.empty()) write_loss_csv(loss_csv, result.reports);
    say(c, "wrote " + out);
  }
};

// ---- extract ---------------------------------------------------------------
struct ExtractCmd {
  std::string model, image, out, encoding = "base64";
  int64_t resize = 0;
  bool unpooled = false;
  KeypointFlags kp;

  void add(CLI::App* app) {
    app->add_option("--model", model, "checkpoint");
    app->add_option("--image", image, "input image (PNG, PPM or PGM)");
    app->add_option("--out", out, "keypoint/descriptor JSON output");
    app->add_option("--encoding", encoding, "base64 or sidecar");
    app->add_option("--resize", resize, "resize to N x N first (0 keeps the size)");
    app->add_flag("--unpooled", unpooled, "store the unpooled (orientation-resolved) descriptors");
    kp.add(app);
  }

  void run(const Common& c) const {
    require(image, "image");
    require(out, "out");
    if (encoding != "base64" && encoding != "sidecar") throw ConfigError("--encoding must be base64 or sidecar");
    RefNet net = load_model(model);
    if (unpooled) net.set_variant(Variant::unpooled);
    const RefOutput o = net.forward(load_resized(image, resize));
    const DescriptorSet set = unpooled ? extract_unpooled(o, kp.options()) : extract_keypoints(o, kp.options());
    write_descriptor_file(out, set, image, encoding == "base64" ? BlobMode::base64 : BlobMode::sidecar);
    say(c, std::to_string(set.size()) + " keypoints -> " + out);
  }
};

// ---- match -----------------------------------------------------------------
struct MatchCmd {
  std::string model, image_a, image_b, desc_a, desc_b, out;
  int64_t resize = 300;
  bool ransac = false;
  int rotation_prior = -1;
  KeypointFlags kp;
  RansacFlags rf;

  void add(CLI::App* app) {
    app->add_option("--model", model, "checkpoint (with --image-a/--image-b)");
    app->add_option("--image-a", image_a, "first image");
    app->add_option("--image-b", image_b, "second image");
    app->add_option("--desc-a", desc_a, "descriptor file from extract (instead of images)");
    app->add_option("--desc-b", desc_b, "descriptor file from extract");
    app->add_option("--out", out, "correspondence JSON output");
    app->add_option("--resize", resize, "resize images to N x N (0 keeps the size)");
    app->add_flag("--ransac", ransac, "keep only RANSAC inliers");
    app->add_option("--rotation-prior", rotation_prior, "known rotation index p; matches unpooled descriptors");
    kp.add(app);
    rf.add(app);
  }

  void run(const Common& c) const {
    require(out, "out");
    CorrespondenceFile file;
    file.model = "ref";
    DescriptorSet a, b;
    if (!desc_a.empty() || !desc_b.empty()) {
      require(desc_a, "desc-a");
      require(desc_b, "desc-b");
      DescriptorFile fa = read_descriptor_file(desc_a), fb = read_descriptor_file(desc_b);
      file.image_a = fa.image;
      file.image_b = fb.image;
      a = std::move(fa.set);
      b = std::move(fb.set);
      file.frame_width = file.frame_height = static_cast<int>(resize);
    } else {
      require(image_a, "image-a");
      require(image_b, "image-b");
      RefNet net = load_model(model);
      if (rotation_prior >= 0) net.set_variant(Variant::unpooled);
      const Tensor ta = load_resized(image_a, resize), tb = load_resized(image_b, resize);
      const RefOutput oa = net.forward(ta), ob = net.forward(tb);
      if (rotation_prior >= 0) {
        a = extract_unpooled(oa, kp.options());
        b = extract_unpooled(ob, kp.options());
      } else {
        a = extract_keypoints(oa, kp.options());
        b = extract_keypoints(ob, kp.options());
      }
      file.image_a = image_a;
      file.image_b = image_b;
      file.frame_width = static_cast<int>(ta.dim(3));
      file.frame_height = static_cast<int>(ta.dim(2));
    }
    if (rotation_prior >= 0) {
      // the group order comes from the checkpoint
      const int n = load_model(model).config().group_order;
      file.matches = rotation_prior_match(a, b, rotation_prior, GroupSpec(n));
    } else {
      file.matches = mutual_nn_match(a, b);
    }
    if (ransac) {
      ransac_filter(file.matches, rf.options(c.seed));
      file.matches = file.matches.inlier_subset();
    }
    write_correspondences(out, file);
    say(c, std::to_string(file.matches.size()) + " matches -> " + out);
  }

};

// ---- ensemble --------------------------------------------------------------
struct EnsembleCmd {
  std::string a, b, out;
  double keep = 0.5;
  bool no_ransac = false;
  RansacFlags rf;

  void add(CLI::App* app) {
    app->add_option("--a", a, "first correspondence file");
    app->add_option("--b", b, "second correspondence file");
    app->add_option("--out", out, "ensembled correspondence output");
    app->add_option("--keep", keep, "fraction of the pooled matches kept by similarity");
    app->add_flag("--no-ransac", no_ransac, "skip RANSAC filtering of the ensemble");
    rf.add(app);
  }

  void run(const Common& c) const {
    require(a, "a");
    require(b, "b");
    require(out, "out");
    const CorrespondenceFile fa = read_correspondences(a), fb = read_correspondences(b);
    if (fa.frame_width != fb.frame_width || fa.frame_height != fb.frame_height) {
      throw DataError("correspondence files use different coordinate frames");
    }
    CorrespondenceFile outf;
    outf.image_a = fa.image_a;
    outf.image_b = fa.image_b;
    outf.model = fa.model + "+" + fb.model;
    outf.frame_width = fa.frame_width;
    outf.frame_height = fa.frame_height;
    outf.matches = ensemble_correspondences(fa.matches, fb.matches, keep);
    if (!no_ransac) {
      ransac_filter(outf.matches, rf.options(c.seed));
      outf.matches = outf.matches.inlier_subset();
    }
    write_correspondences(out, outf);
    say(c, std::to_string(outf.matches.size()) + " matches -> " + out);
  }
};

ReportFormat parse_format(const std::string& f) {
  if (f == "json") return ReportFormat::json;
  if (f == "csv") return ReportFormat::csv;
  throw ConfigError("--format must be json or csv");
}

// ---- eval-mma --------------------------------------------------------------
struct EvalMmaCmd {
  std::string model, dataset, out, format = "json";
  std::vector<double> angles = default_angles();
  std::vector<double> thresholds = default_thresholds();
  int64_t resize = 300;
  bool ransac = false;
  KeypointFlags kp;
  RansacFlags rf;

  void add(CLI::App* app) {
    app->add_option("--model", model, "checkpoint");
    app->add_option("--dataset", dataset, "HPatches-layout root folder");
    app->add_option("--out", out, "report output");
    app->add_option("--format", format, "json or csv");
    app->add_option("--angles", angles, "rotation angles in degrees")->delimiter(',');
    app->add_option("--thresholds", thresholds, "pixel thresholds")->delimiter(',');
    app->add_option("--resize", resize, "resize to N x N (0 keeps the size)");
    app->add_flag("--ransac", ransac, "score RANSAC inliers only");
    kp.add(app);
    rf.add(app);
  }

  void run(const Common& c) const {
    require(dataset, "dataset");
    require(out, "out");
    const ReportFormat fmt = parse_format(format);
    const RefNet net = load_model(model);
    MmaConfig cfg;
    cfg.angles = angles;
    cfg.thresholds = thresholds;
    cfg.resize = resize;
    cfg.ransac = ransac;
    cfg.ransac_options = rf.options(c.seed);
    cfg.keypoints = kp.options();
    cfg.jobs = c.jobs;
    const auto data = load_hpatches(dataset);
    say(c, std::to_string(data.size()) + " pairs x " + std::to_string(angles.size()) + " angles");
    emit_report(run_rotated_mma(net, data, cfg), out, fmt);
    say(c, "wrote " + out);
  }
};

// ---- eval-vpr --------------------------------------------------------------
struct EvalVprCmd {
  std::string model, dataset, out, format = "json";
  int64_t tolerance = 2;
  int64_t resize = 0;
  KeypointFlags kp;
  RansacFlags rf;

  void add(CLI::App* app) {
    app->add_option("--model", model, "checkpoint");
    app->add_option("--dataset", dataset, "folder with queries/ and references/<variant>/");
    app->add_option("--out", out, "report output");
    app->add_option("--format", format, "json or csv");
    app->add_option("--tolerance", tolerance, "index tolerance for a correct retrieval");
    app->add_option("--resize", resize, "resize to N x N (0 keeps the size)");
    kp.add(app);
    rf.add(app);
  }

  void run(const Common& c) const {
    require(dataset, "dataset");
    require(out, "out");
    const ReportFormat fmt = parse_format(format);
    const RefNet net = load_model(model);
    VprDatabase db = load_vpr(dataset);
    db.tolerance = tolerance;
    VprConfig cfg{kp.options(), rf.options(c.seed), resize, c.jobs};
    const VprReport report = run_vpr(net, db, cfg);
    emit_report(report, out, fmt);
    for (const auto& [name, v] : report.variants) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%-16s recall %.4f", name.c_str(), v.recall);
      say(c, buf);
    }
  }
};

// ---- check-equivariance ----------------------------------------------------
struct CheckEqCmd {
  std::string model, target = "descriptors";
  int trials = 4;
  int64_t size = 32;
  int smoothing = 0;
  int border = -1;

  void add(CLI::App* app) {
    app->add_option("--model", model, "checkpoint");
    app->add_option("--target", target, "backbone or descriptors");
    app->add_option("--trials", trials, "random inputs per group element");
    app->add_option("--size", size, "square input side");
    app->add_option("--smoothing", smoothing, "[1 2 1] blur passes on the random inputs");
    app->add_option("--border", border, "excluded border in px (default: receptive field radius)");
  }

  void run(const Common& c) const {
    if (target != "backbone" && target != "descriptors") throw ConfigError("--target must be backbone or descriptors");
    const RefNet net = load_model(model);
    const RefConfig& cfg = net.config();
    EquivarianceOptions opt;
    opt.size = size;
    opt.smoothing_passes = smoothing;
    opt.seed = c.seed;
    opt.border = border >= 0 ? border : (cfg.receptive_field() - 1) / 2;
    Fragment f;
    if (target == "backbone") {
      f = [&](const FeatureField& x) { return net.backbone(x.tensor); };
    } else {
      f = [&](const FeatureField& x) { return net.descriptor_features(x.tensor); };
    }
    const FieldType in{GroupSpec(cfg.group_order), FieldKind::trivial, 3};
    const EquivarianceReport r = check_equivariance(f, in, trials, opt);
    std::printf("# C%d %s, variant %s, %d trials, %lldx%lld, border %d\n", cfg.group_order, target.c_str(),
                variant_name(cfg.variant).c_str(), trials, static_cast<long long>(size), static_cast<long long>(size),
                opt.border);
    std::printf("%4s %8s %14s %14s\n", "p", "angle", "max_abs", "relative");
    for (size_t p = 0; p < r.max_abs_deviation.size(); ++p) {
      std::printf("%4zu %8.2f %14.6e %14.6e\n", p, 360.0 * double(p) / cfg.group_order, r.max_abs_deviation[p],
                  r.relative_deviation[p]);
    }
  }
};

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValueError*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const DegenerateError*>(&e) || dynamic_cast<const NoModelError*>(&e)) {
    return 2;
  }
  return 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rotation-equivariant local features: training, matching and evaluation"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "JSON file of option values (flags override it)");
  app.add_option("--jobs", common.jobs, "worker threads")->check(CLI::PositiveNumber);
  CLI::Option* seed_opt = app.add_option("--seed", common.seed, "random seed (RANSAC, training, checks)");
  app.add_flag("--quiet", common.quiet, "suppress progress messages");

  TrainCmd train_cmd;
  ExtractCmd extract_cmd;
  MatchCmd match_cmd;
  EnsembleCmd ensemble_cmd;
  EvalMmaCmd mma_cmd;
  EvalVprCmd vpr_cmd;
  CheckEqCmd eq_cmd;
  CLI::App* train_app = app.add_subcommand("train", "train a model on synthetic pairs");
  CLI::App* extract_app = app.add_subcommand("extract", "image -> keypoints and descriptors");
  CLI::App* match_app = app.add_subcommand("match", "two images or descriptor files -> correspondences");
  CLI::App* ensemble_app = app.add_subcommand("ensemble", "combine two correspondence files");
  CLI::App* mma_app = app.add_subcommand("eval-mma", "rotated-pair mean matching accuracy");
  CLI::App* vpr_app = app.add_subcommand("eval-vpr", "place-recognition recall");
  CLI::App* eq_app = app.add_subcommand("check-equivariance", "per-rotation equivariance deviation table");
  train_cmd.add(train_app);
  extract_cmd.add(extract_app);
  match_cmd.add(match_app);
  ensemble_cmd.add(ensemble_app);
  mma_cmd.add(mma_app);
  vpr_cmd.add(vpr_app);
  eq_cmd.add(eq_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!common.config.empty()) apply_config(app, sub, common.config);
    const bool seed_given = seed_opt->count() > 0;
    if (sub == train_app) train_cmd.run(common, seed_given);
    else if (sub == extract_app) extract_cmd.run(common);
    else if (sub == match_app) match_cmd.run(common);
    else if (sub == ensemble_app) ensemble_cmd.run(common);
    else if (sub == mma_app) mma_cmd.run(common);
    else if (sub == vpr_app) vpr_cmd.run(common);
    else eq_cmd.run(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}
