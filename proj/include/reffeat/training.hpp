#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reffeat/autodiff.hpp"
#include "reffeat/geometry.hpp"
#include "reffeat/network.hpp"
#include "reffeat/random.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

// Multi-octave value noise with a few composited discs and rectangles,
// (1, 3, size, size) in [0, 1].
Tensor synthetic_texture(int64_t size, uint64_t seed);

struct PairOptions {
  double max_rotation_deg = 360.0;  // rotation drawn from [0, max)
  double min_scale = 0.85;
  double max_scale = 1.15;
  double max_translation_px = 4.0;
  double jitter = 0.1;  // brightness in [-j, j], contrast in [1-j, 1+j]
  std::optional<double> fixed_rotation_deg;

  nlohmann::json to_json() const;
  static PairOptions from_json(const nlohmann::json& j);
  static PairOptions identity();
};

struct TrainPair {
  Tensor image_a;  // (1, 3, H, W)
  Tensor image_b;
  Homography gt;   // a -> b
  std::vector<uint8_t> mask;  // H*W flags over a: gt lands inside b
};

// Largest per-pixel change the photometric jitter can introduce.
inline double jitter_amplitude(const PairOptions& o) { return 2.0 * o.jitter; }

TrainPair generate_pair(const Tensor& source, uint64_t seed, const PairOptions& options = {});

// Pixels u of an h x w frame whose image gt(u) lies in the w_b x h_b frame.
std::vector<uint8_t> overlap_mask(const Homography& gt, int64_t h, int64_t w, int64_t h_b, int64_t w_b);

struct LossOptions {
  int cosim_window = 16;
  int cosim_stride = 8;
  int peaky_window = 16;
  int peaky_stride = 8;
  int ap_bins = 25;
  double ap_positive_radius = 2.0;
  double ap_negative_radius = 8.0;
  int ap_queries = 64;
  bool ap_reliability = true;  // weight AP by the reliability map
  double ap_kappa = 0.5;       // AP threshold of the reliability weighting

  nlohmann::json to_json() const;
  static LossOptions from_json(const nlohmann::json& j);
};

// 1 - mean cosine similarity between windows of rep_a and rep_b warped into
// a's frame by gt. Windows without overlap are skipped; none left throws.
Var loss_repeatability_cosim(const Var& rep_a, const Var& rep_b, const Homography& gt, const LossOptions& options);

// 1 - mean over windows of (max - mean).
Var loss_peakiness(const Var& rep, int window, int stride);

// Soft-binned average precision of one ranked list: similarities in
// [-1, 1], positive flags, triangular bins over [-1, 1]. When grad is given
// it receives dAP/dsim.
double soft_average_precision(std::span<const double> sims, std::span<const uint8_t> positive, int bins,
                              std::vector<double>* grad = nullptr);

struct QueryPixel {
  int64_t x = 0;
  int64_t y = 0;
};

// Random pixels of the mask (with replacement), count = options.ap_queries.
std::vector<QueryPixel> sample_queries(const std::vector<uint8_t>& mask, int64_t width, int count, Rng& rng);

// 1 - mean AP over the queries. For every query in a, b pixels within the
// positive radius of gt(query) are positives and those beyond the negative
// radius are negatives. reliability_a (1, 1, H, W), when given, turns the
// per-query term into 1 - (AP * r + kappa * (1 - r)).
Var loss_average_precision(const Var& desc_a, const Var& desc_b, const Homography& gt,
                           const std::vector<QueryPixel>& queries, const LossOptions& options,
                           const std::optional<Var>& reliability_a = std::nullopt);

struct TrainConfig {
  RefConfig model = RefConfig::toy(4);
  int64_t image_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double weight_cosim = 1.0;
  double weight_peakiness = 1.0;
  double weight_ap = 1.0;
  LossOptions loss;
  PairOptions pairs;
  int prefetch = 2;  // pairs generated ahead on a worker thread; 0 = inline
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossReport {
  int64_t step = 0;
  double repeatability_cosim = 0.0;
  double peakiness = 0.0;
  double ap_loss = 0.0;
  double total = 0.0;
};

// Total loss of one pair on a fresh tape; exposed for tests.
struct StepLosses {
  Var cosim, peakiness, ap, total;
};
StepLosses pair_losses(Tape& tape, RefNet& model, const std::vector<Var>& params, const TrainPair& pair,
                       const TrainConfig& config, uint64_t query_seed, bool training);

// Deterministic pair for training step `step`.
TrainPair training_pair(const TrainConfig& config, int64_t step);

struct TrainResult {
  RefNet model;
  std::vector<LossReport> reports;
};

// SGD with momentum over generated pairs. Throws InvariantError naming the
// loss term when a loss becomes non-finite.
TrainResult train(const TrainConfig& config, int64_t steps,
                  const std::function<void(const LossReport&)>& on_step = nullptr);

std::string loss_csv(const std::vector<LossReport>& reports);
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& reports);

}  // namespace reffeat
