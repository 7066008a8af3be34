#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "reffeat/error.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/training.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace reffeat;
using namespace reffeat::testing;

namespace {

// Bilinear read of channel c at a real position; outside reads as zero.
double sample(const Tensor& img, int64_t c, double x, double y) {
  const int64_t H = img.dim(2), W = img.dim(3);
  const auto x0 = int64_t(std::floor(x)), y0 = int64_t(std::floor(y));
  const double fx = x - double(x0), fy = y - double(y0);
  double v = 0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int64_t xi = x0 + dx, yi = y0 + dy;
      if (xi < 0 || yi < 0 || xi >= W || yi >= H) continue;
      v += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * img.at(0, c, yi, xi);
    }
  return v;
}

TrainConfig small_config() {
  TrainConfig c;
  c.model = RefConfig::toy(4);
  c.image_size = 64;
  c.loss.ap_queries = 16;
  c.seed = 5;
  return c;
}

double mean(const std::vector<LossReport>& r, size_t from, size_t to) {
  double s = 0;
  for (size_t i = from; i < to; ++i) s += r[i].total;
  return s / double(to - from);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("identity pair copies the image with a full mask") {
  const Tensor tex = synthetic_texture(64, 1);
  const TrainPair p = generate_pair(tex, 2, PairOptions::identity());
  CHECK(std::ranges::equal(p.image_b.data(), p.image_a.data()));
  CHECK(std::all_of(p.mask.begin(), p.mask.end(), [](uint8_t m) { return m == 1; }));
}

TEST_CASE("a quarter-turn pair is the rotated image with the rotation as gt") {
  const Tensor tex = synthetic_texture(64, 3);
  PairOptions o = PairOptions::identity();
  o.fixed_rotation_deg = 90.0;
  const TrainPair p = generate_pair(tex, 4, o);
  CHECK(p.gt.matrix().isApprox(rotation_homography(90, 64, 64).matrix(), 1e-12));
  CHECK(std::ranges::equal(p.image_b.data(), quarter_turn(tex, 1).data()));
  CHECK(std::all_of(p.mask.begin(), p.mask.end(), [](uint8_t m) { return m == 1; }));
}

TEST_CASE("random pairs are consistent with their homography") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    const Tensor tex = synthetic_texture(64, 10 + seed);
    const PairOptions o;
    const TrainPair p = generate_pair(tex, seed, o);
    double err = 0;
    int64_t count = 0;
    for (int64_t y = 0; y < 64; ++y)
      for (int64_t x = 0; x < 64; ++x) {
        if (!p.mask[size_t(y * 64 + x)]) continue;
        const Point2 q = p.gt.apply({double(x), double(y)});
        CHECK((q.x >= 0 && q.y >= 0 && q.x <= 63 && q.y <= 63));
        for (int64_t c = 0; c < 3; ++c) err += std::abs(sample(p.image_b, c, q.x, q.y) - p.image_a.at(0, c, y, x));
        count += 3;
      }
    CAPTURE(seed);
    REQUIRE(count > 0);
    CHECK(err / double(count) <= jitter_amplitude(o));
  }
}

TEST_CASE("small training sources are rejected") {
  CHECK_THROWS_AS(generate_pair(Tensor({1, 3, 32, 32}), 1), ShapeError);
}

TEST_CASE("cosine loss vanishes for aligned and constant maps") {
  Tape tape;
  const LossOptions o;
  const Tensor rep = ops::rotate_bilinear(rand_tensor({1, 1, 64, 64}, 1, 0.1, 1), 0);
  const Homography gt = rotation_homography(90, 64, 64);
  const Var a = tape.constant(rep), b = tape.constant(quarter_turn(rep, 1));
  CHECK(loss_repeatability_cosim(a, b, gt, o).value()[0] <= 1e-3);

  const Var ca = tape.constant(Tensor({1, 1, 32, 32}, 0.3f)), cb = tape.constant(Tensor({1, 1, 32, 32}, 0.8f));
  CHECK(std::abs(loss_repeatability_cosim(ca, cb, Homography(), o).value()[0]) <= 1e-6);

  CHECK_THROWS(loss_repeatability_cosim(ca, cb, Homography::translation(1000, 0), o));
}

TEST_CASE("peakiness examples") {
  Tape tape;
  CHECK(loss_peakiness(tape.constant(Tensor({1, 1, 16, 16}, 0.4f)), 16, 8).value()[0] == doctest::Approx(1.0));
  Tensor one_hot({1, 1, 16, 16}, 0.0f);
  one_hot[37] = 1.0f;
  CHECK(loss_peakiness(tape.constant(one_hot), 16, 8).value()[0] ==
        doctest::Approx(1.0 - (1.0 - 1.0 / 256.0)).epsilon(1e-6));
}

TEST_CASE("AP loss is near zero for an exact warped copy") {
  Tape tape;
  LossOptions o;
  o.ap_reliability = false;
  o.ap_positive_radius = 0.5;  // white-noise descriptors: only the exact pixel is a true match
  const Tensor d = ops::l2_normalize_channel(rand_tensor({1, 32, 32, 32}, 2));
  const Homography gt = rotation_homography(90, 32, 32);
  const std::vector<uint8_t> mask(32 * 32, 1);
  Rng rng(3);
  const auto queries = sample_queries(mask, 32, 32, rng);
  const Var loss = loss_average_precision(tape.constant(d), tape.constant(quarter_turn(d, 1)), gt, queries, o);
  CHECK(loss.value()[0] <= 0.05);
  const Var wrong = loss_average_precision(tape.constant(d), tape.constant(quarter_turn(d, 2)), gt, queries, o);
  CHECK(wrong.value()[0] >= 0.9);
  CHECK_THROWS(loss_average_precision(tape.constant(d), tape.constant(d), gt, {}, o));
}

TEST_CASE("soft AP is close to exact AP on small lists") {
  const std::vector<std::vector<double>> lists{
      {0.95, 0.6, 0.2, -0.3, -0.8},
      {0.9, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3, -0.5},
      {0.8, -0.2, 0.55, 0.1, -0.65, 0.35, -0.9, 0.0, 0.7, -0.45},
  };
  const std::vector<std::vector<uint8_t>> positives{
      {1, 0, 1, 0, 0},
      {1, 1, 0, 1, 0, 0, 1, 0},
      {1, 0, 0, 1, 0, 1, 0, 0, 1, 0},
  };
  for (size_t i = 0; i < lists.size(); ++i) {
    CAPTURE(i);
    CHECK(std::abs(soft_average_precision(lists[i], positives[i], 25) -
                   exact_average_precision(lists[i], positives[i])) <= 0.05);
  }
}

TEST_CASE("soft AP of random rankings approaches the positive fraction") {
  Rng rng(11);
  double total = 0;
  for (int q = 0; q < 100; ++q) {
    std::vector<double> sims(40);
    std::vector<uint8_t> pos(40);
    for (size_t i = 0; i < 40; ++i) {
      sims[i] = uniform(rng, -1, 1);
      pos[i] = i < 20 ? 1 : 0;
    }
    total += soft_average_precision(sims, pos, 25);
  }
  CHECK(std::abs(total / 100 - 0.5) <= 0.1);
}

TEST_CASE("all three losses match finite differences") {
  for (const auto& c : loss_gradient_checks()) {
    CAPTURE(c.name);
    CAPTURE(c.directional.worst_at);
    CHECK(c.directional.checked == 6);
    CHECK(c.directional.failures == 0);
    CHECK(c.directional.worst_relative <= 1e-3);
  }
}

TEST_CASE("training config JSON round trip and validation") {
  TrainConfig c = small_config();
  c.weight_ap = 0.5;
  c.pairs.jitter = 0.0;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["learning_rat"] = 0.1;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
  TrainConfig bad = small_config();
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training is deterministic and prefetch does not change it") {
  TrainConfig c = small_config();
  const TrainResult a = train(c, 3);
  const TrainResult b = train(c, 3);
  c.prefetch = 0;
  const TrainResult inline_run = train(c, 3);
  REQUIRE(a.reports.size() == 3);
  CHECK(loss_csv(a.reports) == loss_csv(b.reports));
  CHECK(loss_csv(a.reports) == loss_csv(inline_run.reports));
  CHECK(checkpoint_bytes(a.model) == checkpoint_bytes(b.model));
  CHECK(checkpoint_bytes(a.model) == checkpoint_bytes(inline_run.model));
  for (const auto& r : a.reports) {
    CHECK(std::isfinite(r.total));
    CHECK(r.total == doctest::Approx(r.repeatability_cosim + r.peakiness + r.ap_loss).epsilon(1e-6));
  }
  CHECK(loss_csv(a.reports).rfind("step,", 0) == 0);
}

TEST_CASE("a diverging run aborts with the offending term") {
  TrainConfig c = small_config();
  c.learning_rate = 1e30;
  c.momentum = 0.0;
  try {
    train(c, 20);
    FAIL("expected InvariantError");
  } catch (const InvariantError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK((msg.find("repeatability cosine") != std::string::npos || msg.find("peakiness") != std::string::npos ||
           msg.find("average precision") != std::string::npos));
  }
}

TEST_CASE("training keeps the C4 backbone equivariant and lowers the loss") {
  const TrainConfig c = small_config();
  const TrainResult r = train(c, 60);
  REQUIRE(r.reports.size() == 60);
  CHECK(mean(r.reports, 45, 60) < mean(r.reports, 0, 15));

  EquivarianceOptions o;
  o.size = 32;
  const FieldType in{GroupSpec(4), FieldKind::trivial, 3};
  const auto rep = check_equivariance([&](const FeatureField& x) { return r.model.backbone(x); }, in, 3, o);
  CHECK(rep.worst() <= 1e-4);
}

}  // TEST_SUITE
