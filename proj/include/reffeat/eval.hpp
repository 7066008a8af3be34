#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reffeat/geometry.hpp"
#include "reffeat/matching.hpp"
#include "reffeat/network.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

// Fraction of matches whose a-point, mapped by gt, lands within
// threshold_px of its b-point. An empty set scores 0.
double mma(const MatchSet& matches, const Homography& gt, double threshold_px);

enum class Variation { illumination, viewpoint, synthetic };
std::string variation_name(Variation v);
Variation parse_variation(const std::string& name);

struct ScenePair {
  std::filesystem::path image_a;
  std::filesystem::path image_b;
  Homography gt;  // original resolution, a -> b
  std::string scene;
  Variation variation = Variation::synthetic;
  // In-memory images take precedence over the paths when set.
  std::optional<Tensor> tensor_a;
  std::optional<Tensor> tensor_b;
};

// Scene folders (sorted by name) holding 1.ppm..6.ppm and H_1_2..H_1_6.
// "i_" and "v_" name prefixes mark illumination and viewpoint scenes.
// Missing homographies throw DataError; images are read later.
std::vector<ScenePair> load_hpatches(const std::filesystem::path& root);

// Writes `scenes` scene folders in the layout above: alternating i_/v_
// prefixes, synthetic textures of side `size`, random mild homographies.
void write_synthetic_hpatches(const std::filesystem::path& root, int scenes, int64_t size, uint64_t seed);

std::vector<double> default_angles();      // 0, 15, ..., 345
std::vector<double> default_thresholds();  // 1, 2, ..., 10

struct MmaConfig {
  std::vector<double> angles = default_angles();
  std::vector<double> thresholds = default_thresholds();
  int64_t resize = 300;  // 0 keeps the original resolution
  bool ransac = false;
  RansacOptions ransac_options;
  KeypointOptions keypoints;
  int jobs = 1;

  nlohmann::json protocol_json() const;  // everything that affects results
};

// (pair, angle) work items of the protocol, in report order.
struct ProtocolItem {
  size_t pair;
  double angle;
};
std::vector<ProtocolItem> enumerate_protocol(const std::vector<ScenePair>& dataset, const std::vector<double>& angles);

struct PairRecord {
  std::string scene;
  std::string variation;
  double angle = 0.0;
  int64_t matches = 0;
  int64_t inliers = 0;
  std::vector<double> mma;  // per threshold
};

struct MmaReport {
  std::vector<double> angles;
  std::vector<double> thresholds;
  // variation -> [angle][threshold] mean over pairs
  std::map<std::string, std::vector<std::vector<double>>> mma;
  std::map<std::string, std::vector<int64_t>> pair_counts;  // variation -> per angle
  std::vector<PairRecord> pairs;
  // both counted in (pair, angle) units
  int64_t pairs_enumerated = 0;
  int64_t pairs_skipped = 0;
  std::vector<std::string> warnings;
  int64_t resize = 0;
  bool ransac = false;
  uint64_t seed = 0;
  std::string config_hash;
};

// Matches for one (a, b, angle) item, already resized: b is rotated by the
// angle, gt composed with the same rotation. Returns the matches (inlier
// subset when RANSAC is on) and the composed gt.
struct AngleResult {
  MatchSet matches;
  Homography gt;
  int64_t raw_matches = 0;
};
AngleResult match_rotated(const RefNet& model, const DescriptorSet& desc_a, const Tensor& image_b,
                          const Homography& gt, double angle, const MmaConfig& config);

MmaReport run_rotated_mma(const RefNet& model, const std::vector<ScenePair>& dataset, const MmaConfig& config);

// Query images 0..Q-1 and, per rotation variant, reference images keyed by
// index. On disk: root/queries/<index>.<ext> and
// root/references/<variant>/<index>.<ext>.
struct VprImage {
  int64_t index = 0;
  std::filesystem::path path;
  std::optional<Tensor> tensor;
};
struct VprDatabase {
  std::vector<VprImage> queries;
  std::map<std::string, std::vector<VprImage>> references;
  int64_t tolerance = 2;
};
VprDatabase load_vpr(const std::filesystem::path& root);

struct VprConfig {
  KeypointOptions keypoints;
  RansacOptions ransac_options;
  int64_t resize = 0;
  int jobs = 1;

  nlohmann::json protocol_json() const;
};

struct VprQueryLog {
  int64_t query = 0;
  int64_t retrieved = -1;
  int64_t inliers = 0;
  bool correct = false;
};
struct VprVariantResult {
  double recall = 0.0;
  std::vector<VprQueryLog> log;
};
struct VprReport {
  std::map<std::string, VprVariantResult> variants;
  int64_t tolerance = 2;
  uint64_t seed = 0;
  std::string config_hash;
};

VprReport run_vpr(const RefNet& model, const VprDatabase& db, const VprConfig& config);

// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON text, as hex.
std::string config_hash(const nlohmann::json& protocol);

nlohmann::json mma_report_to_json(const MmaReport& report);
MmaReport mma_report_from_json(const nlohmann::json& j);
// Columns: angle, threshold, mma, variation, ransac, n_pairs.
std::string mma_report_csv(const MmaReport& report);
nlohmann::json vpr_report_to_json(const VprReport& report);
std::string vpr_report_csv(const VprReport& report);

enum class ReportFormat { json, csv };
void emit_report(const MmaReport& report, const std::filesystem::path& path, ReportFormat format);
void emit_report(const VprReport& report, const std::filesystem::path& path, ReportFormat format);

}  // namespace reffeat
