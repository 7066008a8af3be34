#include "reffeat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>

#include "reffeat/concurrency.hpp"
#include "reffeat/error.hpp"
#include "reffeat/io.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/random.hpp"
#include "reffeat/training.hpp"

namespace reffeat {

double mma(const MatchSet& matches, const Homography& gt, double threshold_px) {
  if (matches.empty()) return 0.0;
  int64_t good = 0;
  for (const auto& m : matches.matches) {
    const auto p = gt.try_apply({m.xa, m.ya});
    if (p && std::hypot(p->x - m.xb, p->y - m.yb) <= threshold_px) ++good;
  }
  return double(good) / double(matches.size());
}

std::string variation_name(Variation v) {
  switch (v) {
    case Variation::illumination: return "illumination";
    case Variation::viewpoint: return "viewpoint";
    case Variation::synthetic: return "synthetic";
  }
  return "synthetic";
}

Variation parse_variation(const std::string& name) {
  if (name == "illumination") return Variation::illumination;
  if (name == "viewpoint") return Variation::viewpoint;
  if (name == "synthetic") return Variation::synthetic;
  throw DataError("unknown variation tag '" + name + "'");
}

std::vector<ScenePair> load_hpatches(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<std::filesystem::path> scenes;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) scenes.push_back(entry.path());
  }
  std::sort(scenes.begin(), scenes.end());
  std::vector<ScenePair> pairs;
  for (const auto& dir : scenes) {
    const std::string name = dir.filename().string();
    Variation var = Variation::synthetic;
    if (name.rfind("i_", 0) == 0) var = Variation::illumination;
    if (name.rfind("v_", 0) == 0) var = Variation::viewpoint;
    for (int k = 2; k <= 6; ++k) {
      ScenePair p;
      p.image_a = dir / "1.ppm";
      p.image_b = dir / (std::to_string(k) + ".ppm");
      p.gt = read_homography(dir / ("H_1_" + std::to_string(k)));
      p.scene = name;
      p.variation = var;
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

void write_synthetic_hpatches(const std::filesystem::path& root, int scenes, int64_t size, uint64_t seed) {
  std::filesystem::create_directories(root);
  for (int s = 0; s < scenes; ++s) {
    const bool illum = s % 2 == 0;
    char name[32];
    std::snprintf(name, sizeof name, "%s_synth%03d", illum ? "i" : "v", s);
    const auto dir = root / name;
    std::filesystem::create_directories(dir);
    const Tensor base = synthetic_texture(size, derive_seed(seed, 10, uint64_t(s)));
    save_image(dir / "1.ppm", base);
    for (int k = 2; k <= 6; ++k) {
      PairOptions opt;
      Rng rng(derive_seed(seed, 11, uint64_t(s * 8 + k)));
      if (illum) {
        opt = PairOptions::identity();
        opt.jitter = 0.2;
      } else {
        opt.fixed_rotation_deg = uniform(rng, -10.0, 10.0);
        opt.min_scale = 0.9;
        opt.max_scale = 1.1;
        opt.max_translation_px = 3.0;
        opt.jitter = 0.05;
      }
      const TrainPair pair = generate_pair(base, derive_seed(seed, 12, uint64_t(s * 8 + k)), opt);
      save_image(dir / (std::to_string(k) + ".ppm"), pair.image_b);
      write_homography(dir / ("H_1_" + std::to_string(k)), pair.gt);
    }
  }
}

std::vector<double> default_angles() {
  std::vector<double> a;
  for (int d = 0; d < 360; d += 15) a.push_back(d);
  return a;
}

std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int d = 1; d <= 10; ++d) t.push_back(d);
  return t;
}

namespace {

nlohmann::json keypoint_json(const KeypointOptions& k) {
  return {{"max_keypoints", k.max_keypoints}, {"nms_radius", k.nms_radius}};
}

nlohmann::json ransac_json(const RansacOptions& r) {
  return {{"threshold_px", r.threshold_px}, {"max_iters", r.max_iters}, {"confidence", r.confidence}, {"seed", r.seed}};
}

Tensor image_of(const std::optional<Tensor>& tensor, const std::filesystem::path& path) {
  return tensor ? *tensor : load_image(path);
}

bool is_zero_turn(double angle) { return std::fmod(angle, 360.0) == 0.0; }

}  // namespace

nlohmann::json MmaConfig::protocol_json() const {
  return {{"angles", angles},
          {"thresholds", thresholds},
          {"resize", resize},
          {"ransac", ransac},
          {"ransac_options", ransac_json(ransac_options)},
          {"keypoints", keypoint_json(keypoints)}};
}

nlohmann::json VprConfig::protocol_json() const {
  return {{"resize", resize}, {"ransac_options", ransac_json(ransac_options)}, {"keypoints", keypoint_json(keypoints)}};
}

std::string config_hash(const nlohmann::json& protocol) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : protocol.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ProtocolItem> enumerate_protocol(const std::vector<ScenePair>& dataset, const std::vector<double>& angles) {
  std::vector<ProtocolItem> items;
  items.reserve(dataset.size() * angles.size());
  for (size_t p = 0; p < dataset.size(); ++p) {
    for (double a : angles) items.push_back({p, a});
  }
  return items;
}

AngleResult match_rotated(const RefNet& model, const DescriptorSet& desc_a, const Tensor& image_b,
                          const Homography& gt, double angle, const MmaConfig& config) {
  AngleResult r;
  const int64_t H = image_b.dim(2), W = image_b.dim(3);
  Tensor rotated = is_zero_turn(angle) ? image_b : ops::rotate_bilinear(image_b, angle);
  r.gt = is_zero_turn(angle) ? gt : rotation_homography(angle, int(W), int(H)).after(gt);
  const DescriptorSet desc_b = extract_keypoints(model.forward(rotated), config.keypoints);
  r.matches = mutual_nn_match(desc_a, desc_b);
  r.raw_matches = static_cast<int64_t>(r.matches.size());
  if (config.ransac) {
    ransac_filter(r.matches, config.ransac_options);
    r.matches = r.matches.inlier_subset();
  }
  return r;
}

MmaReport run_rotated_mma(const RefNet& model, const std::vector<ScenePair>& dataset, const MmaConfig& config) {
  if (dataset.empty()) throw ConfigError("MMA dataset is empty");
  if (config.angles.empty() || config.thresholds.empty()) throw ConfigError("angle and threshold grids must be non-empty");
  MmaReport report;
  report.angles = config.angles;
  report.thresholds = config.thresholds;
  report.resize = config.resize;
  report.ransac = config.ransac;
  report.seed = config.ransac_options.seed;
  report.config_hash = config_hash(config.protocol_json());
  report.pairs_enumerated = static_cast<int64_t>(enumerate_protocol(dataset, config.angles).size());

  const size_t NA = config.angles.size();
  std::vector<std::vector<PairRecord>> records(dataset.size());
  std::vector<std::string> failures(dataset.size());
  parallel_for(dataset.size(), config.jobs, [&](size_t i) {
    const ScenePair& sp = dataset[i];
    Tensor a, b;
    try {
      a = image_of(sp.tensor_a, sp.image_a);
      b = image_of(sp.tensor_b, sp.image_b);
    } catch (const DataError& e) {
      failures[i] = e.what();
      return;
    }
    Homography gt = sp.gt;
    if (config.resize > 0) {
      const double R = double(config.resize);
      gt = rescale_homography(gt, R / double(a.dim(3)), R / double(a.dim(2)), R / double(b.dim(3)), R / double(b.dim(2)));
      a = ops::resize_bilinear(a, config.resize, config.resize);
      b = ops::resize_bilinear(b, config.resize, config.resize);
    }
    const DescriptorSet desc_a = extract_keypoints(model.forward(a), config.keypoints);
    for (size_t k = 0; k < NA; ++k) {
      const AngleResult r = match_rotated(model, desc_a, b, gt, config.angles[k], config);
      PairRecord rec{sp.scene, variation_name(sp.variation), config.angles[k], r.raw_matches,
                     static_cast<int64_t>(r.matches.size()), {}};
      for (double t : config.thresholds) rec.mma.push_back(mma(r.matches, r.gt, t));
      records[i].push_back(std::move(rec));
    }
  });

  for (size_t i = 0; i < dataset.size(); ++i) {
    if (!failures[i].empty()) {
      report.pairs_skipped += static_cast<int64_t>(config.angles.size());
      const std::string msg = "skipped pair " + std::to_string(i) + " (" + dataset[i].scene + "): " + failures[i];
      std::clog << "warning: " << msg << '\n';
      report.warnings.push_back(msg);
      continue;
    }
    for (auto& rec : records[i]) report.pairs.push_back(std::move(rec));
  }
  const size_t NT = config.thresholds.size();
  for (const auto& rec : report.pairs) {
    auto& grid = report.mma[rec.variation];
    auto& counts = report.pair_counts[rec.variation];
    if (grid.empty()) {
      grid.assign(NA, std::vector<double>(NT, 0.0));
      counts.assign(NA, 0);
    }
    const auto k = static_cast<size_t>(std::find(config.angles.begin(), config.angles.end(), rec.angle) - config.angles.begin());
    for (size_t t = 0; t < NT; ++t) grid[k][t] += rec.mma[t];
    ++counts[k];
  }
  for (auto& [var, grid] : report.mma) {
    for (size_t k = 0; k < NA; ++k) {
      const int64_t n = report.pair_counts[var][k];
      if (n == 0) continue;
      for (double& v : grid[k]) v /= double(n);
    }
  }
  return report;
}

VprDatabase load_vpr(const std::filesystem::path& root) {
  auto scan = [](const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("missing VPR folder " + dir.string());
    std::vector<VprImage> images;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext != ".ppm" && ext != ".png" && ext != ".pgm") continue;
      const std::string stem = entry.path().stem().string();
      size_t used = 0;
      int64_t index = 0;
      try {
        index = std::stoll(stem, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != stem.size()) throw DataError("VPR image name is not an integer index: " + entry.path().string());
      images.push_back({index, entry.path(), std::nullopt});
    }
    std::sort(images.begin(), images.end(), [](const VprImage& a, const VprImage& b) { return a.index < b.index; });
    if (images.empty()) throw DataError("no images in " + dir.string());
    return images;
  };
  VprDatabase db;
  db.queries = scan(root / "queries");
  const auto refs = root / "references";
  if (!std::filesystem::is_directory(refs)) throw DataError("missing VPR folder " + refs.string());
  std::vector<std::filesystem::path> variants;
  for (const auto& entry : std::filesystem::directory_iterator(refs)) {
    if (entry.is_directory()) variants.push_back(entry.path());
  }
  std::sort(variants.begin(), variants.end());
  for (const auto& v : variants) db.references[v.filename().string()] = scan(v);
  if (db.references.empty()) throw DataError("no reference variants under " + refs.string());
  return db;
}

VprReport run_vpr(const RefNet& model, const VprDatabase& db, const VprConfig& config) {
  if (db.queries.empty() || db.references.empty()) throw ConfigError("VPR database needs queries and references");
  VprReport report;
  report.tolerance = db.tolerance;
  report.seed = config.ransac_options.seed;
  report.config_hash = config_hash(config.protocol_json());
  auto describe = [&](const VprImage& im) {
    Tensor t = image_of(im.tensor, im.path);
    if (config.resize > 0) t = ops::resize_bilinear(t, config.resize, config.resize);
    return extract_keypoints(model.forward(t), config.keypoints);
  };
  std::vector<DescriptorSet> qdesc(db.queries.size());
  parallel_for(db.queries.size(), config.jobs, [&](size_t i) { qdesc[i] = describe(db.queries[i]); });
  for (const auto& [variant, refs] : db.references) {
    std::vector<DescriptorSet> rdesc(refs.size());
    parallel_for(refs.size(), config.jobs, [&](size_t i) { rdesc[i] = describe(refs[i]); });
    const size_t R = refs.size();
    std::vector<int64_t> inliers(qdesc.size() * R, 0);
    parallel_for(inliers.size(), config.jobs, [&](size_t job) {
      MatchSet m = mutual_nn_match(qdesc[job / R], rdesc[job % R]);
      const auto result = ransac_filter(m, config.ransac_options);
      inliers[job] = result ? result->inlier_count : 0;
    });
    VprVariantResult res;
    int64_t correct = 0;
    for (size_t q = 0; q < qdesc.size(); ++q) {
      size_t best = 0;
      for (size_t r = 1; r < R; ++r) {
        if (inliers[q * R + r] > inliers[q * R + best]) best = r;
      }
      VprQueryLog log;
      log.query = db.queries[q].index;
      log.retrieved = refs[best].index;
      log.inliers = inliers[q * R + best];
      log.correct = std::abs(log.retrieved - log.query) <= db.tolerance;
      correct += log.correct ? 1 : 0;
      res.log.push_back(log);
    }
    res.recall = double(correct) / double(qdesc.size());
    report.variants[variant] = std::move(res);
  }
  return report;
}

nlohmann::json mma_report_to_json(const MmaReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"scene", p.scene},
                     {"variation", p.variation},
                     {"angle", p.angle},
                     {"matches", p.matches},
                     {"inliers", p.inliers},
                     {"mma", p.mma}});
  }
  return {{"angles", r.angles},
          {"thresholds", r.thresholds},
          {"mma", r.mma},
          {"pair_counts", r.pair_counts},
          {"pairs", std::move(pairs)},
          {"pairs_enumerated", r.pairs_enumerated},
          {"pairs_skipped", r.pairs_skipped},
          {"warnings", r.warnings},
          {"metadata",
           {{"resize", r.resize},
            {"ransac", r.ransac},
            {"seed", r.seed},
            {"config_hash", r.config_hash},
            {"weighting", "pairs"},
            {"empty_match_mma", 0.0}}}};
}

MmaReport mma_report_from_json(const nlohmann::json& j) {
  MmaReport r;
  try {
    r.angles = j.at("angles").get<std::vector<double>>();
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
    r.mma = j.at("mma").get<std::map<std::string, std::vector<std::vector<double>>>>();
    r.pair_counts = j.at("pair_counts").get<std::map<std::string, std::vector<int64_t>>>();
    for (const auto& p : j.at("pairs")) {
      r.pairs.push_back({p.at("scene").get<std::string>(), p.at("variation").get<std::string>(),
                         p.at("angle").get<double>(), p.at("matches").get<int64_t>(), p.at("inliers").get<int64_t>(),
                         p.at("mma").get<std::vector<double>>()});
    }
    r.pairs_enumerated = j.at("pairs_enumerated").get<int64_t>();
    r.pairs_skipped = j.at("pairs_skipped").get<int64_t>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    const auto& m = j.at("metadata");
    r.resize = m.at("resize").get<int64_t>();
    r.ransac = m.at("ransac").get<bool>();
    r.seed = m.at("seed").get<uint64_t>();
    r.config_hash = m.at("config_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed MMA report: ") + e.what());
  }
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path.string());
  out << text;
  if (!out) throw DataError("failed writing report " + path.string());
}

}  // namespace

std::string mma_report_csv(const MmaReport& r) {
  std::string out = "angle,threshold,mma,variation,ransac,n_pairs\n";
  for (const auto& [var, grid] : r.mma) {
    for (size_t k = 0; k < r.angles.size(); ++k) {
      for (size_t t = 0; t < r.thresholds.size(); ++t) {
        out += fmt(r.angles[k]) + ',' + fmt(r.thresholds[t]) + ',' + fmt(grid[k][t]) + ',' + var + ',' +
               (r.ransac ? "1" : "0") + ',' + std::to_string(r.pair_counts.at(var)[k]) + '\n';
      }
    }
  }
  return out;
}

nlohmann::json vpr_report_to_json(const VprReport& r) {
  nlohmann::json variants = nlohmann::json::object();
  for (const auto& [name, res] : r.variants) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& l : res.log) {
      log.push_back({{"query", l.query}, {"retrieved", l.retrieved}, {"inliers", l.inliers}, {"correct", l.correct}});
    }
    variants[name] = {{"recall", res.recall}, {"log", std::move(log)}};
  }
  return {{"variants", std::move(variants)},
          {"metadata", {{"tolerance", r.tolerance}, {"seed", r.seed}, {"config_hash", r.config_hash}}}};
}

std::string vpr_report_csv(const VprReport& r) {
  std::string out = "variant,query,retrieved,inliers,correct,recall\n";
  for (const auto& [name, res] : r.variants) {
    for (const auto& l : res.log) {
      out += name + ',' + std::to_string(l.query) + ',' + std::to_string(l.retrieved) + ',' + std::to_string(l.inliers) +
             ',' + (l.correct ? "1" : "0") + ',' + fmt(res.recall) + '\n';
    }
  }
  return out;
}

void emit_report(const MmaReport& report, const std::filesystem::path& path, ReportFormat format) {
  write_text(path, format == ReportFormat::json ? mma_report_to_json(report).dump(1) + "\n" : mma_report_csv(report));
}

void emit_report(const VprReport& report, const std::filesystem::path& path, ReportFormat format) {
  write_text(path, format == ReportFormat::json ? vpr_report_to_json(report).dump(1) + "\n" : vpr_report_csv(report));
}

}  // namespace reffeat
