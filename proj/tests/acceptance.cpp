// Acceptance run: one PASS/FAIL line per criterion. With --criterion N only
// that criterion runs, which is how ctest registers them.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "reffeat/eval.hpp"
#include "reffeat/geometry.hpp"
#include "reffeat/io.hpp"
#include "reffeat/matching.hpp"
#include "reffeat/network.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/steerable.hpp"
#include "reffeat/training.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace reffeat;
using namespace reffeat::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

FieldType trivial(int n, int mult) { return {GroupSpec(n), FieldKind::trivial, mult}; }
FieldType regular(int n, int mult) { return {GroupSpec(n), FieldKind::regular, mult}; }

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "reffeat_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

double worst_relative(const EquivarianceReport& r) {
  double w = 0;
  for (double d : r.relative_deviation) w = std::max(w, d);
  return w;
}

// Held-out synthetic pairs: mild scale and shift, no rotation. The seeds are
// disjoint from the ones training draws.
std::vector<TrainPair> heldout_pairs(int count) {
  PairOptions o;
  o.fixed_rotation_deg = 0;
  o.min_scale = 0.9;
  o.max_scale = 1.1;
  o.max_translation_px = 3;
  o.jitter = 0.05;
  std::vector<TrainPair> out;
  for (int i = 0; i < count; ++i) {
    const Tensor tex = synthetic_texture(64, derive_seed(777, 5, uint64_t(i)));
    out.push_back(generate_pair(tex, derive_seed(777, 6, uint64_t(i)), o));
  }
  return out;
}

Outcome equivariance_c4() {
  EquivarianceOptions opt;
  opt.size = 32;
  opt.border = 5;
  const RefNet net(RefConfig::toy(4), 101);
  const auto t0 = std::chrono::steady_clock::now();
  const EquivarianceReport r =
      check_equivariance([&](const FeatureField& x) { return net.backbone(x); }, trivial(4, 3), 20, opt);
  const double secs = seconds_since(t0);
  return {r.worst() <= 1e-4 && r.trials >= 20 && secs < 30.0,
          "toy C4 backbone, " + std::to_string(r.trials) + " inputs 3x32x32, max deviation " + fmt(r.worst()) +
              " (<= 1e-4), " + fmt(secs) + " s (< 30 s)"};
}

Outcome pooling_invariance() {
  bool ok = true;
  std::string detail;
  for (int n : {4, 8, 16}) {
    const RefNet net(RefConfig::toy(n), 102);
    const FeatureField f = net.backbone(synthetic_texture(32, 103));
    const Tensor base = group_pool(f).tensor;
    int equal = 0;
    for (int p = 0; p < n; ++p) equal += bitwise_equal(group_pool(shift_orientations(f, p)).tensor, base);
    ok = ok && equal == n;
    detail += (detail.empty() ? "" : ", ") + ("C" + std::to_string(n) + " " + std::to_string(equal) + "/" +
                                              std::to_string(n) + " shifts bitwise equal");
  }
  return {ok, detail};
}

// Measured once with bilinearly rotated filters (seeded as below) and pinned.
struct Pinned {
  int n;
  double layer;
  double backbone;
};
constexpr Pinned kPinned[] = {{8, 0.3558, 0.9876}, {16, 0.3558, 0.5139}};

Outcome approximate_equivariance() {
  bool ok = true;
  std::string detail;
  EquivarianceOptions o;
  o.size = 32;
  o.border = 4;
  o.smoothing_passes = 4;
  for (const Pinned& pin : kPinned) {
    Rng rng(3);
    const SteerableKernel k(trivial(pin.n, 3), regular(pin.n, 4), random_uniform({4, 3, 3, 3}, rng));
    const double layer = worst_relative(
        check_equivariance([&](const FeatureField& x) { return gconv_forward(x, k, {}); }, trivial(pin.n, 3), 3, o));
    const RefNet net(RefConfig::toy(pin.n), 1);
    const double backbone = worst_relative(
        check_equivariance([&](const FeatureField& x) { return net.backbone(x); }, trivial(pin.n, 3), 3, o));
    ok = ok && layer <= 1.5 * pin.layer && backbone <= 1.5 * pin.backbone;
    detail += (detail.empty() ? "" : "; ") + ("C" + std::to_string(pin.n) + " layer " + fmt(layer) + " (pinned " +
                                              fmt(pin.layer) + "), backbone " + fmt(backbone) + " (pinned " +
                                              fmt(pin.backbone) + ")");
  }
  return {ok, detail + "; limit 1.5x pinned"};
}

Outcome post_pool_ablation() {
  EquivarianceOptions opt;
  opt.size = 32;
  opt.border = 5;
  auto deviation_at_1 = [&](const RefNet& m) {
    return check_equivariance(
               [&](const FeatureField& x) {
                 return FeatureField{ops::l2_normalize_channel(m.descriptor_features(x.tensor).tensor),
                                     trivial(4, int(m.config().descriptor_dim()))};
               },
               trivial(4, 3), 3, opt)
        .max_abs_deviation[1];
  };
  const double pure = deviation_at_1(RefNet(RefConfig::toy(4), 21));
  const double post = deviation_at_1(RefNet(RefConfig::toy(4, Variant::post_pool_cnn), 21));
  // a floor keeps an exactly equivariant pure variant from making any ratio pass
  return {post >= 10.0 * std::max(pure, 1e-6),
          "p=1 descriptor deviation: pooled " + fmt(pure) + ", post-pool " + fmt(post) + " (>= 10x)"};
}

int correct_within(const MatchSet& m, const Homography& gt, double px) {
  int c = 0;
  for (const auto& x : m.matches) {
    const auto q = gt.try_apply({x.xa, x.ya});
    if (q && std::hypot(q->x - x.xb, q->y - x.yb) <= px) ++c;
  }
  return c;
}

Outcome rotation_prior() {
  TrainConfig cfg;
  cfg.model = RefConfig::toy(8);
  RefNet model = train(cfg, 200).model;
  model.set_variant(Variant::unpooled);
  const auto pairs = heldout_pairs(20);
  std::vector<double> prior(8, 0.0);
  double pooled = 0;
  for (const auto& p : pairs) {
    const Tensor b = ops::rotate_bilinear(p.image_b, 45);
    const Homography gt = rotation_homography(45, 64, 64).after(p.gt);
    const RefOutput oa = model.forward(p.image_a), ob = model.forward(b);
    pooled += correct_within(mutual_nn_match(extract_keypoints(oa, {}), extract_keypoints(ob, {})), gt, 3);
    const DescriptorSet ua = extract_unpooled(oa, {}), ub = extract_unpooled(ob, {});
    for (int q = 0; q < 8; ++q) prior[size_t(q)] += correct_within(rotation_prior_match(ua, ub, q, GroupSpec(8)), gt, 3);
  }
  const double n = double(pairs.size());
  int best = 0;
  for (int q = 1; q < 8; ++q)
    if (prior[size_t(q)] > prior[size_t(best)]) best = q;
  return {prior[1] > pooled, "45 deg, 20 pairs, correct matches at 3 px per pair: prior p=1 " + fmt(prior[1] / n) +
                                 ", pooled " + fmt(pooled / n) + " (best prior p=" + std::to_string(best) + ": " +
                                 fmt(prior[size_t(best)] / n) + ")"};
}

Outcome gradients() {
  int checks = 0, failed = 0;
  double worst = 0;
  std::string where;
  auto take = [&](const std::string& name, const GradCheck& g) {
    if (g.checked == 0) return;
    ++checks;
    const bool bad = g.failures > 0 || g.worst_relative > 1e-3;
    failed += bad;
    if (g.worst_relative > worst) worst = g.worst_relative;
    if (bad) where += " " + name + " [" + g.worst_at + "]";
  };
  int ops_count = 0, loss_count = 0;
  for (const auto& c : op_gradient_checks()) {
    ++ops_count;
    take(c.name + " (directions)", c.directional);
    if (c.elementwise.failures > 0) {
      ++failed;
      where += " " + c.name + " [" + c.elementwise.worst_at + "]";
    }
  }
  for (const auto& c : loss_gradient_checks()) {
    ++loss_count;
    take(c.name, c.directional);
  }
  return {failed == 0 && loss_count >= 3, std::to_string(ops_count) + " ops and " + std::to_string(loss_count) +
                                             " loss cases, " + std::to_string(checks) +
                                             " directional checks, worst relative " + fmt(worst) + " (<= 1e-3)" +
                                             (where.empty() ? "" : ", failing:" + where)};
}

Outcome ransac_oracle() {
  bool ok = true;
  double worst_err = 0, worst_secs = 0;
  int fewest = 60, most_outliers = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    Eigen::Matrix3d m;
    m << 1 + uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -20, 20),  //
        uniform(rng, -0.2, 0.2), 1 + uniform(rng, -0.2, 0.2), uniform(rng, -20, 20),   //
        uniform(rng, -4e-4, 4e-4), uniform(rng, -4e-4, 4e-4), 1;
    const Homography truth(m);
    std::vector<PointPair> pairs;
    for (int i = 0; i < 60; ++i) {
      const Point2 a{uniform(rng, 0, 300), uniform(rng, 0, 300)};
      pairs.push_back({a, truth.apply(a)});
    }
    for (int i = 0; i < 40; ++i)
      pairs.push_back({{uniform(rng, 0, 300), uniform(rng, 0, 300)}, {uniform(rng, 0, 300), uniform(rng, 0, 300)}});
    RansacOptions o;
    o.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const RansacResult r = ransac_homography(pairs, o);
    const double secs = seconds_since(t0);
    const RansacResult again = ransac_homography(pairs, o);
    int planted = 0;
    for (int i = 0; i < 60; ++i) planted += r.inliers[size_t(i)] ? 1 : 0;
    int outliers = 0;
    for (int i = 60; i < 100; ++i) outliers += r.inliers[size_t(i)] ? 1 : 0;
    double err = 0;
    const Homography inv = r.model.inverse();
    for (int y = 7; y < 300; y += 13)
      for (int x = 3; x < 300; x += 13) {
        const Point2 a{double(x), double(y)};
        err = std::max(err, symmetric_transfer_error(r.model, inv, {a, truth.apply(a)}));
      }
    ok = ok && planted >= 58 && err <= 0.5 && secs < 1.0 && again.inliers == r.inliers &&
         again.model.matrix() == r.model.matrix();
    fewest = std::min(fewest, planted);
    most_outliers = std::max(most_outliers, outliers);
    worst_err = std::max(worst_err, err);
    worst_secs = std::max(worst_secs, secs);
  }
  return {ok, "10 instances of 60+40: fewest planted recovered " + std::to_string(fewest) +
                  "/60 (>= 58), most outliers admitted " + std::to_string(most_outliers) + ", grid error " +
                  fmt(worst_err) + " px (<= 0.5), slowest " + fmt(worst_secs) + " s (< 1 s), repeatable per seed"};
}

Outcome mma_oracle() {
  int mismatches = 0, non_monotone = 0, evaluations = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(9000 + seed);
    Eigen::Matrix3d m;
    m << 1 + uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), uniform(rng, -10, 10),  //
        uniform(rng, -0.1, 0.1), 1 + uniform(rng, -0.1, 0.1), uniform(rng, -10, 10),   //
        uniform(rng, -1e-4, 1e-4), uniform(rng, -1e-4, 1e-4), 1;
    const Homography gt(m);
    MatchSet matches;
    const size_t count = 1 + uniform_index(rng, 80);
    for (size_t i = 0; i < count; ++i) {
      Correspondence c;
      c.xa = uniform(rng, 0, 100);
      c.ya = uniform(rng, 0, 100);
      const Point2 q = gt.apply({c.xa, c.ya});
      const double e = uniform(rng, 0, 12), t = uniform(rng, 0, 6.283185307179586);
      c.xb = q.x + e * std::cos(t);
      c.yb = q.y + e * std::sin(t);
      matches.matches.push_back(c);
    }
    double previous = 0;
    for (double thr = 0.5; thr <= 12; thr += 0.5) {
      const double got = mma(matches, gt, thr);
      ++evaluations;
      mismatches += got != brute_mma(matches, gt.matrix(), thr);
      non_monotone += got < previous;
      previous = got;
    }
  }
  return {mismatches == 0 && non_monotone == 0,
          "100 fixtures, " + std::to_string(evaluations) + " thresholds: " + std::to_string(mismatches) +
              " differ from the per-match recomputation, " + std::to_string(non_monotone) + " decreases"};
}

Outcome end_to_end_rotation() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ScenePair> held;
  for (const auto& p : heldout_pairs(20)) {
    ScenePair s;
    s.gt = p.gt;
    s.scene = "held" + std::to_string(held.size());
    s.tensor_a = p.image_a;
    s.tensor_b = p.image_b;
    held.push_back(s);
  }
  MmaConfig mc;
  mc.angles = {0, 90};
  mc.thresholds = {3};
  mc.resize = 0;
  auto score = [&](Variant v) {
    TrainConfig cfg;
    cfg.model = RefConfig::toy(4, v);
    const MmaReport r = run_rotated_mma(train(cfg, 200).model, held, mc);
    const auto& grid = r.mma.begin()->second;
    return std::pair{grid[0][0], grid[1][0]};
  };
  const auto [c4_0, c4_90] = score(Variant::pooled);
  const auto [cnn_0, cnn_90] = score(Variant::standard_cnn);
  const double secs = seconds_since(t0);
  return {std::abs(c4_0 - c4_90) <= 0.1 && cnn_0 - cnn_90 >= 0.3 && secs < 600,
          "MMA@3px at 0/90 deg: C4 " + fmt(c4_0) + "/" + fmt(c4_90) + " (gap <= 0.1), standard CNN " + fmt(cnn_0) +
              "/" + fmt(cnn_90) + " (drop >= 0.3), " + fmt(secs) + " s (< 600 s)"};
}

Outcome protocol_fidelity() {
  const fs::path root = scratch("protocol");
  write_synthetic_hpatches(root, 116, 64, 17);
  const auto dataset = load_hpatches(root);
  const auto items = enumerate_protocol(dataset, default_angles());
  std::map<double, int> per_angle;
  for (const auto& it : items) per_angle[it.angle]++;
  bool uniform_count = per_angle.size() == 24;
  for (const auto& [angle, count] : per_angle) uniform_count = uniform_count && count == 580;

  // The harness itself reports the same count; a tiny resize keeps the run short.
  MmaConfig mc;
  mc.thresholds = {3};
  mc.resize = 16;
  const MmaReport r = run_rotated_mma(RefNet(RefConfig::toy(4), 1), dataset, mc);
  bool ok = dataset.size() == 580 && uniform_count && items.size() == 13920 && r.pairs_enumerated == 13920 &&
            int64_t(r.pairs.size()) + r.pairs_skipped == 13920;
  std::string detail = "synthetic 116-scene layout: " + std::to_string(dataset.size()) + " pairs, " +
                       std::to_string(items.size()) + " enumerated, harness reports " +
                       std::to_string(r.pairs_enumerated) + " (580 per angle x 24 angles = 13920)";
  if (const char* real = std::getenv("HPATCHES_DIR"); real && *real) {
    const auto hp = load_hpatches(real);
    const size_t total = enumerate_protocol(hp, default_angles()).size();
    ok = ok && hp.size() == 580 && total == 13920;
    detail += "; HPatches at " + std::string(real) + ": " + std::to_string(hp.size()) + " pairs, " +
              std::to_string(total) + " enumerated";
  } else {
    detail += "; HPATCHES_DIR not set, real dataset not checked";
  }
  return {ok, detail};
}

Outcome determinism() {
  const fs::path dir = scratch("determinism");
  TrainConfig cfg;
  cfg.model = RefConfig::toy(4);
  cfg.seed = 11;
  const std::vector<uint8_t> first = checkpoint_bytes(train(cfg, 10).model);
  const std::vector<uint8_t> second = checkpoint_bytes(train(cfg, 10).model);
  save_checkpoint(RefNet(RefConfig::toy(4), 12), dir / "m.bin");
  const RefNet model = load_checkpoint(dir / "m.bin");

  write_synthetic_hpatches(dir / "hp", 2, 64, 13);
  const auto dataset = load_hpatches(dir / "hp");
  MmaConfig mc;
  mc.angles = {0, 45, 90};
  mc.thresholds = {1, 3, 5};
  mc.resize = 0;
  mc.ransac = true;
  emit_report(run_rotated_mma(model, dataset, mc), dir / "r1.json", ReportFormat::json);
  emit_report(run_rotated_mma(model, dataset, mc), dir / "r2.json", ReportFormat::json);
  mc.jobs = 2;
  emit_report(run_rotated_mma(model, dataset, mc), dir / "r3.json", ReportFormat::json);
  const std::string r1 = read_text_file(dir / "r1.json");
  const bool reports = r1 == read_text_file(dir / "r2.json") && r1 == read_text_file(dir / "r3.json");
  return {first == second && reports, std::string("checkpoints after 10 steps ") +
                                          (first == second ? "identical" : "differ") + " (" +
                                          std::to_string(first.size()) + " bytes); MMA reports across runs and " +
                                          "worker counts " + (reports ? "identical" : "differ")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "C4 backbone equivariance", equivariance_c4},
      {2, "group pooling invariance", pooling_invariance},
      {3, "C8/C16 approximate equivariance", approximate_equivariance},
      {4, "post-pool ablation loses equivariance", post_pool_ablation},
      {5, "rotation prior beats pooled matching at 45 deg", rotation_prior},
      {6, "finite-difference gradients", gradients},
      {7, "RANSAC planted inliers", ransac_oracle},
      {8, "MMA oracle and monotonicity", mma_oracle},
      {9, "end-to-end rotation robustness", end_to_end_rotation},
      {10, "protocol enumeration", protocol_fidelity},
      {11, "determinism", determinism},
  };
  int failures = 0;
  for (const auto& c : all) {
    if (only != 0 && c.id != only) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << c.id << ' ' << (o.pass ? "PASS" : "FAIL") << ": " << c.name << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
