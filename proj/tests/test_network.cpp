#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "reffeat/error.hpp"
#include "reffeat/network.hpp"
#include "reffeat/ops.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace reffeat;
using namespace reffeat::testing;
namespace fs = std::filesystem;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "reffeat_unit";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<uint8_t> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::vector<uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("ref-network") {

TEST_CASE("default configuration has the documented shape") {
  const RefConfig c;
  CHECK(c.group_order == 8);
  CHECK(c.channels == std::vector<int>{32, 64, 128, 256, 512});
  CHECK(c.descriptor_dim() == 64);
  const RefNet net(c, 1);
  const RefOutput out = net.forward(rand_tensor({1, 3, 16, 16}, 2, 0, 1));
  CHECK(out.descriptors.shape() == Shape{1, 64, 16, 16});
  CHECK(out.reliability.shape() == Shape{1, 1, 16, 16});
  CHECK(out.repeatability.shape() == Shape{1, 1, 16, 16});
}

TEST_CASE("heads have valid ranges and descriptors are unit vectors") {
  const RefNet net(RefConfig::toy(4), 3);
  const RefOutput out = net.forward(rand_tensor({2, 3, 20, 24}, 4, 0, 1));
  for (float r : out.reliability.data()) CHECK((r > 0.0f && r < 1.0f));
  for (float r : out.repeatability.data()) CHECK(r >= 0.0f);
  const int64_t D = out.descriptors.dim(1), HW = 20 * 24;
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < HW; ++i) {
      double s = 0;
      for (int64_t c = 0; c < D; ++c) s += std::pow(double(out.descriptors[(b * D + c) * HW + i]), 2);
      const bool zero = out.zero_descriptor[static_cast<size_t>(b * HW + i)] != 0;
      CHECK((zero ? s == 0.0 : std::abs(std::sqrt(s) - 1.0) <= 1e-5));
    }
}

TEST_CASE("images below the receptive field are rejected") {
  const RefNet net(RefConfig::toy(4), 3);
  CHECK(net.config().receptive_field() == 11);
  CHECK_THROWS_AS(net.forward(Tensor({1, 3, 10, 10})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor({1, 1, 16, 16})), ShapeError);
}

TEST_CASE("C4 outputs follow quarter turns of the input") {
  const RefNet net(RefConfig::toy(4), 5);
  const Tensor img = rand_tensor({1, 3, 24, 24}, 6, 0, 1);
  const RefOutput base = net.forward(img);
  for (int q = 1; q < 4; ++q) {
    const RefOutput rot = net.forward(quarter_turn(img, q));
    CAPTURE(q);
    CHECK(max_abs_diff(rot.descriptors, quarter_turn(base.descriptors, q)) <= 1e-4);
    CHECK(max_abs_diff(rot.reliability, quarter_turn(base.reliability, q)) <= 1e-5);
    CHECK(max_abs_diff(rot.repeatability, quarter_turn(base.repeatability, q)) <= 1e-5);
  }
}

TEST_CASE("unpooled output transforms by the regular representation") {
  RefNet net(RefConfig::toy(4, Variant::unpooled), 7);
  const Tensor img = rand_tensor({1, 3, 20, 20}, 8, 0, 1);
  const RefOutput base = net.forward(img);
  REQUIRE(base.unpooled.has_value());
  CHECK(base.unpooled->dim(1) == net.config().unpooled_dim());
  for (int p = 1; p < 4; ++p) {
    const RefOutput rot = net.forward(quarter_turn(img, p));
    CHECK(max_abs_diff(*rot.unpooled, cyclic_shift(quarter_turn(*base.unpooled, p), 4, p)) <= 1e-4);
  }
}

TEST_CASE("pooled and unpooled variants share parameters") {
  RefNet net(RefConfig::toy(4), 9);
  const Tensor img = rand_tensor({1, 3, 16, 16}, 10, 0, 1);
  const RefOutput pooled = net.forward(img);
  CHECK_FALSE(pooled.unpooled.has_value());
  net.set_variant(Variant::unpooled);
  const RefOutput unpooled = net.forward(img);
  CHECK(max_abs_diff(pooled.descriptors, unpooled.descriptors) == 0.0);
  CHECK_THROWS_AS(net.set_variant(Variant::post_pool_cnn), ConfigError);
}

TEST_CASE("graph forward in evaluation mode equals inference") {
  RefNet net(RefConfig::toy(4), 11);
  const Tensor img = rand_tensor({1, 3, 16, 16}, 12, 0, 1);
  Tape tape;
  const auto params = net.bind(tape);
  const RefNet::Graph g = net.forward_graph(tape, tape.constant(img), params, false);
  const RefOutput out = net.forward(img);
  CHECK(max_abs_diff(g.descriptors.value(), out.descriptors) <= 1e-5);
  CHECK(max_abs_diff(g.reliability.value(), out.reliability) <= 1e-5);
  CHECK(max_abs_diff(g.repeatability.value(), out.repeatability) <= 1e-5);
}

TEST_CASE("same seed gives the same parameters") {
  const RefNet a(RefConfig::toy(8), 42), b(RefConfig::toy(8), 42), c(RefConfig::toy(8), 43);
  CHECK(checkpoint_bytes(a) == checkpoint_bytes(b));
  CHECK(checkpoint_bytes(a) != checkpoint_bytes(c));
}

TEST_CASE("config JSON round trip and validation") {
  RefConfig c = RefConfig::toy(8, Variant::post_pool_cnn);
  const RefConfig back = RefConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto j = c.to_json();
  j["unexpected"] = 1;
  CHECK_THROWS_AS(RefConfig::from_json(j), ConfigError);

  RefConfig bad;
  bad.channels = {32, 60};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RefConfig{};
  bad.head_kernel = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  RefNet net(RefConfig::toy(4, Variant::post_pool_cnn), 13);
  net.set_step(17);
  const fs::path p = temp_path("roundtrip.bin");
  save_checkpoint(net, p);
  const RefNet back = load_checkpoint(p);
  CHECK(back.step() == 17);
  CHECK(back.config().to_json() == net.config().to_json());
  CHECK(checkpoint_bytes(back) == checkpoint_bytes(net));
  CHECK(read_all(p) == checkpoint_bytes(net));
  const Tensor img = rand_tensor({1, 3, 16, 16}, 14, 0, 1);
  CHECK(max_abs_diff(back.forward(img).descriptors, net.forward(img).descriptors) == 0.0);
}

TEST_CASE("corrupted checkpoints are rejected with clear errors") {
  const RefNet net(RefConfig::toy(4), 15);
  const auto good = checkpoint_bytes(net);
  const fs::path p = temp_path("corrupt.bin");

  auto bad = good;
  bad[0] = 'X';
  write_all(p, bad);
  std::string msg = error_of([&] { load_checkpoint(p); });
  CHECK(msg.find("REFNETv1") != std::string::npos);
  CHECK_THROWS_AS(load_checkpoint(p), DataError);

  write_all(p, std::vector<uint8_t>(good.begin(), good.end() - 100));
  msg = error_of([&] { load_checkpoint(p); });
  CHECK(msg.find("truncated") != std::string::npos);
  CHECK_THROWS_AS(load_checkpoint(p), DataError);

  std::string text(good.begin(), good.end());
  const auto pos = text.find("\"format_version\":1");
  REQUIRE(pos != std::string::npos);
  text[pos + 17] = '7';
  write_all(p, std::vector<uint8_t>(text.begin(), text.end()));
  msg = error_of([&] { load_checkpoint(p); });
  CHECK(msg.find("version 7") != std::string::npos);

  write_all(p, good);
  msg = error_of([&] { load_checkpoint(p, 8); });
  CHECK(msg.find("C4") != std::string::npos);
  CHECK(msg.find("C8") != std::string::npos);
  CHECK_THROWS_AS(load_checkpoint(p, 8), ConfigError);
  CHECK_NOTHROW(load_checkpoint(p, 4));

  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.bin")), DataError);
}

}  // TEST_SUITE
