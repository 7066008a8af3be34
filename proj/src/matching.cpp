#include "reffeat/matching.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include <Eigen/Core>

#include "reffeat/error.hpp"

namespace reffeat {

std::vector<PointPair> MatchSet::point_pairs() const {
  std::vector<PointPair> pairs;
  pairs.reserve(matches.size());
  for (const auto& m : matches) pairs.push_back({{m.xa, m.ya}, {m.xb, m.yb}});
  return pairs;
}

MatchSet MatchSet::inlier_subset() const {
  if (!inliers) return *this;
  MatchSet out;
  for (size_t i = 0; i < matches.size(); ++i) {
    if ((*inliers)[i]) out.matches.push_back(matches[i]);
  }
  return out;
}

std::vector<Keypoint> select_keypoints(std::span<const float> scores, int64_t height, int64_t width,
                                       const KeypointOptions& options, std::span<const uint8_t> excluded) {
  if (options.max_keypoints < 1) throw ValueError("max_keypoints must be >= 1");
  if (options.nms_radius < 1) throw ValueError("nms_radius must be >= 1");
  if (static_cast<int64_t>(scores.size()) != height * width) throw ShapeError("score map size does not match H x W");
  if (!excluded.empty() && excluded.size() != scores.size()) throw ShapeError("exclusion mask size does not match H x W");
  const int64_t r = options.nms_radius;
  std::vector<Keypoint> kept;
  for (int64_t y = r; y < height - r; ++y) {
    for (int64_t x = r; x < width - r; ++x) {
      const int64_t i = y * width + x;
      const float s = scores[static_cast<size_t>(i)];
      if (!(s > 0.0f)) continue;
      if (!excluded.empty() && excluded[static_cast<size_t>(i)]) continue;
      bool wins = true;
      for (int64_t dy = -r; dy <= r && wins; ++dy) {
        for (int64_t dx = -r; dx <= r; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const float t = scores[static_cast<size_t>((y + dy) * width + x + dx)];
          // Equal neighbours earlier in (y, x) order take precedence.
          if (t > s || (t == s && (dy < 0 || (dy == 0 && dx < 0)))) {
            wins = false;
            break;
          }
        }
      }
      if (wins) kept.push_back({double(x), double(y), s});
    }
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
  if (kept.size() > static_cast<size_t>(options.max_keypoints)) kept.resize(static_cast<size_t>(options.max_keypoints));
  return kept;
}

DescriptorSet gather_descriptors(const Tensor& descriptors, const std::vector<Keypoint>& keypoints, int64_t b,
                                 std::string source) {
  require_4d(descriptors, "descriptor map");
  const int64_t D = descriptors.dim(1), H = descriptors.dim(2), W = descriptors.dim(3);
  if (b < 0 || b >= descriptors.dim(0)) throw ShapeError("batch index out of range");
  DescriptorSet set;
  set.dim = D;
  set.source = std::move(source);
  set.keypoints = keypoints;
  set.descriptors.resize(keypoints.size() * static_cast<size_t>(D));
  for (size_t k = 0; k < keypoints.size(); ++k) {
    const auto x = static_cast<int64_t>(keypoints[k].x);
    const auto y = static_cast<int64_t>(keypoints[k].y);
    if (x < 0 || y < 0 || x >= W || y >= H) throw ShapeError("keypoint outside the descriptor map");
    for (int64_t c = 0; c < D; ++c) set.descriptors[k * static_cast<size_t>(D) + static_cast<size_t>(c)] = descriptors.at(b, c, y, x);
  }
  return set;
}

namespace {

std::vector<Keypoint> keypoints_of(const RefOutput& output, const KeypointOptions& options, int64_t b) {
  const Tensor& rep = output.repeatability;
  const Tensor& rel = output.reliability;
  require_4d(rep, "repeatability map");
  if (!rep.same_shape(rel)) throw ShapeError("repeatability and reliability maps differ in shape");
  const int64_t H = rep.dim(2), W = rep.dim(3);
  std::vector<float> score(static_cast<size_t>(H * W));
  for (int64_t i = 0; i < H * W; ++i) score[static_cast<size_t>(i)] = rep[b * H * W + i] * rel[b * H * W + i];
  std::span<const uint8_t> excluded;
  if (!output.zero_descriptor.empty()) excluded = std::span(output.zero_descriptor).subspan(static_cast<size_t>(b * H * W), static_cast<size_t>(H * W));
  return select_keypoints(score, H, W, options, excluded);
}

}  // namespace

DescriptorSet extract_keypoints(const RefOutput& output, const KeypointOptions& options, int64_t b,
                                std::string source) {
  return gather_descriptors(output.descriptors, keypoints_of(output, options, b), b, std::move(source));
}

DescriptorSet extract_unpooled(const RefOutput& output, const KeypointOptions& options, int64_t b,
                               std::string source) {
  if (!output.unpooled) throw ValueError("model output has no unpooled features (variant must be 'unpooled')");
  return gather_descriptors(*output.unpooled, keypoints_of(output, options, b), b, std::move(source));
}

MatchSet mutual_nn_match(const DescriptorSet& a, const DescriptorSet& b) {
  if (a.dim != b.dim) {
    throw ShapeError("descriptor dimension mismatch: " + std::to_string(a.dim) + " vs " + std::to_string(b.dim));
  }
  MatchSet out;
  if (a.size() == 0 || b.size() == 0) return out;
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> A(a.descriptors.data(), static_cast<Eigen::Index>(a.size()), a.dim);
  const Eigen::Map<const RowMat> B(b.descriptors.data(), static_cast<Eigen::Index>(b.size()), b.dim);
  const RowMat S = A * B.transpose();
  const auto na = static_cast<Eigen::Index>(a.size()), nb = static_cast<Eigen::Index>(b.size());
  std::vector<Eigen::Index> best_b(static_cast<size_t>(na)), best_a(static_cast<size_t>(nb), 0);
  std::vector<float> best_a_val(static_cast<size_t>(nb), -std::numeric_limits<float>::infinity());
  for (Eigen::Index i = 0; i < na; ++i) {
    Eigen::Index arg = 0;
    float v = S(i, 0);
    for (Eigen::Index j = 0; j < nb; ++j) {
      const float s = S(i, j);
      if (s > v) {
        v = s;
        arg = j;
      }
      if (s > best_a_val[static_cast<size_t>(j)]) {
        best_a_val[static_cast<size_t>(j)] = s;
        best_a[static_cast<size_t>(j)] = i;
      }
    }
    best_b[static_cast<size_t>(i)] = arg;
  }
  for (Eigen::Index i = 0; i < na; ++i) {
    const Eigen::Index j = best_b[static_cast<size_t>(i)];
    if (best_a[static_cast<size_t>(j)] != i) continue;
    double dot = 0.0;
    const auto ra = a.row(static_cast<size_t>(i));
    const auto rb = b.row(static_cast<size_t>(j));
    for (int64_t c = 0; c < a.dim; ++c) dot += double(ra[static_cast<size_t>(c)]) * rb[static_cast<size_t>(c)];
    const auto& ka = a.keypoints[static_cast<size_t>(i)];
    const auto& kb = b.keypoints[static_cast<size_t>(j)];
    out.matches.push_back({i, j, ka.x, ka.y, kb.x, kb.y, dot, a.source});
  }
  return out;
}

MatchSet ensemble_correspondences(const MatchSet& m1, const MatchSet& m2, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ValueError("keep_fraction must be in (0, 1]");
  struct Entry {
    const Correspondence* c;
    size_t index;
  };
  auto better = [](const Entry& x, const Entry& y) {
    if (x.c->similarity != y.c->similarity) return x.c->similarity > y.c->similarity;
    if (x.c->source != y.c->source) return x.c->source < y.c->source;
    return x.index < y.index;
  };
  std::map<std::tuple<double, double, double, double>, Entry> unique;
  for (const MatchSet* set : {&m1, &m2}) {
    for (size_t i = 0; i < set->matches.size(); ++i) {
      const Correspondence& c = set->matches[i];
      const Entry e{&c, i};
      auto [it, inserted] = unique.try_emplace({c.xa, c.ya, c.xb, c.yb}, e);
      if (!inserted && better(e, it->second)) it->second = e;
    }
  }
  std::vector<Entry> pool;
  pool.reserve(unique.size());
  for (const auto& kv : unique) pool.push_back(kv.second);
  std::sort(pool.begin(), pool.end(), better);
  const auto keep = static_cast<size_t>(std::ceil(keep_fraction * double(pool.size()) - 1e-9));
  MatchSet out;
  for (size_t i = 0; i < std::min(keep, pool.size()); ++i) out.matches.push_back(*pool[i].c);
  return out;
}

MatchSet rotation_prior_match(const DescriptorSet& a_unpooled, const DescriptorSet& b_unpooled, int prior_p,
                              const GroupSpec& group) {
  const int n = group.order();
  if (a_unpooled.dim % n != 0 || b_unpooled.dim % n != 0) {
    throw ShapeError("unpooled descriptor dimension " + std::to_string(b_unpooled.dim) + " is not divisible by " +
                     std::to_string(n));
  }
  if (prior_p < 0 || prior_p >= n) throw ValueError("rotation prior p must be in [0, " + std::to_string(n) + ")");
  DescriptorSet shifted = b_unpooled;
  const size_t D = static_cast<size_t>(b_unpooled.dim);
  const size_t un = static_cast<size_t>(n);
  for (size_t k = 0; k < shifted.size(); ++k) {
    const auto src = b_unpooled.row(k);
    float* dst = shifted.descriptors.data() + k * D;
    double norm = 0.0;
    for (size_t f = 0; f < D / un; ++f) {
      for (size_t r = 0; r < un; ++r) {
        // undo the shift new[r] = old[r - p]
        const float v = src[f * un + (r + static_cast<size_t>(prior_p)) % un];
        dst[f * un + r] = v;
        norm += double(v) * v;
      }
    }
    if (norm > 0.0) {
      const double inv = 1.0 / std::sqrt(norm);
      for (size_t c = 0; c < D; ++c) dst[c] = static_cast<float>(dst[c] * inv);
    }
  }
  return mutual_nn_match(a_unpooled, shifted);
}

std::optional<RansacResult> ransac_filter(MatchSet& matches, const RansacOptions& options) {
  try {
    RansacResult r = ransac_homography(matches.point_pairs(), options);
    matches.inliers = r.inliers;
    return r;
  } catch (const NoModelError&) {
    matches.inliers = std::vector<uint8_t>(matches.size(), 0);
    return std::nullopt;
  }
}

nlohmann::json correspondence_to_json(const CorrespondenceFile& file) {
  nlohmann::json matches = nlohmann::json::array();
  for (size_t i = 0; i < file.matches.matches.size(); ++i) {
    const auto& m = file.matches.matches[i];
    nlohmann::json e = {{"xa", m.xa}, {"ya", m.ya}, {"xb", m.xb}, {"yb", m.yb}, {"similarity", m.similarity}};
    if (!m.source.empty() && m.source != file.model) e["source"] = m.source;
    if (file.matches.inliers) e["inlier"] = bool((*file.matches.inliers)[i]);
    matches.push_back(std::move(e));
  }
  return {{"image_a", file.image_a},
          {"image_b", file.image_b},
          {"model", file.model},
          {"frame", {{"width", file.frame_width}, {"height", file.frame_height}}},
          {"matches", std::move(matches)}};
}

CorrespondenceFile correspondence_from_json(const nlohmann::json& j) {
  CorrespondenceFile f;
  try {
    f.image_a = j.at("image_a").get<std::string>();
    f.image_b = j.at("image_b").get<std::string>();
    f.model = j.at("model").get<std::string>();
    if (j.contains("frame")) {
      f.frame_width = j.at("frame").at("width").get<int>();
      f.frame_height = j.at("frame").at("height").get<int>();
    }
    bool any_inlier_flag = false;
    std::vector<uint8_t> mask;
    for (const auto& e : j.at("matches")) {
      Correspondence c;
      c.xa = e.at("xa").get<double>();
      c.ya = e.at("ya").get<double>();
      c.xb = e.at("xb").get<double>();
      c.yb = e.at("yb").get<double>();
      c.similarity = e.at("similarity").get<double>();
      c.source = e.contains("source") ? e.at("source").get<std::string>() : f.model;
      if (e.contains("inlier")) any_inlier_flag = true;
      mask.push_back(e.value("inlier", true) ? 1 : 0);
      f.matches.matches.push_back(std::move(c));
    }
    if (any_inlier_flag) f.matches.inliers = std::move(mask);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed correspondence file: ") + e.what());
  }
  return f;
}

void write_correspondences(const std::filesystem::path& path, const CorrespondenceFile& file) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write correspondence file " + path.string());
  out << correspondence_to_json(file).dump(1) << '\n';
}

CorrespondenceFile read_correspondences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open correspondence file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  try {
    return correspondence_from_json(j);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace reffeat
