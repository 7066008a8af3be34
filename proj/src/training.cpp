#include "reffeat/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "reffeat/concurrency.hpp"
#include "reffeat/error.hpp"
#include "reffeat/ops.hpp"

namespace reffeat {

namespace {

// Bilinear upsampling of a (g+1) x (g+1) lattice of random values.
std::vector<double> value_noise(int64_t size, int grid, Rng& rng) {
  const auto g = static_cast<size_t>(grid) + 1;
  std::vector<double> lattice(g * g);
  for (double& v : lattice) v = uniform01(rng);
  std::vector<double> out(static_cast<size_t>(size * size));
  const double step = double(grid) / double(size);
  for (int64_t y = 0; y < size; ++y) {
    const double fy = (double(y) + 0.5) * step;
    const auto y0 = std::min(static_cast<size_t>(fy), g - 2);
    const double ty = fy - double(y0);
    for (int64_t x = 0; x < size; ++x) {
      const double fx = (double(x) + 0.5) * step;
      const auto x0 = std::min(static_cast<size_t>(fx), g - 2);
      const double tx = fx - double(x0);
      const double top = lattice[y0 * g + x0] * (1 - tx) + lattice[y0 * g + x0 + 1] * tx;
      const double bot = lattice[(y0 + 1) * g + x0] * (1 - tx) + lattice[(y0 + 1) * g + x0 + 1] * tx;
      out[static_cast<size_t>(y * size + x)] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

std::vector<double> octave_noise(int64_t size, Rng& rng) {
  std::vector<double> acc(static_cast<size_t>(size * size), 0.0);
  double amp = 1.0;
  for (int grid = 4; grid <= std::max<int64_t>(4, size / 2); grid *= 2) {
    const auto layer = value_noise(size, grid, rng);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += amp * layer[i];
    amp *= 0.6;
  }
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  const double range = std::max(*hi - *lo, 1e-12);
  const double base = *lo;
  for (double& v : acc) v = (v - base) / range;
  return acc;
}

}  // namespace

Tensor synthetic_texture(int64_t size, uint64_t seed) {
  if (size < 8) throw ValueError("synthetic textures need at least 8 px");
  Rng rng(seed);
  const auto shared = octave_noise(size, rng);
  Tensor img({1, 3, size, size});
  const int64_t hw = size * size;
  for (int64_t c = 0; c < 3; ++c) {
    const auto own = octave_noise(size, rng);
    for (int64_t i = 0; i < hw; ++i) {
      img[c * hw + i] = static_cast<float>(0.6 * shared[static_cast<size_t>(i)] + 0.4 * own[static_cast<size_t>(i)]);
    }
  }
  const int shapes = 6 + static_cast<int>(uniform_index(rng, 5));
  for (int s = 0; s < shapes; ++s) {
    const bool disc = uniform01(rng) < 0.5;
    const double cx = uniform(rng, 0, double(size)), cy = uniform(rng, 0, double(size));
    const double r = uniform(rng, double(size) / 16.0, double(size) / 5.0);
    const double rx = disc ? r : uniform(rng, double(size) / 16.0, double(size) / 5.0);
    float colour[3];
    for (float& c : colour) c = static_cast<float>(uniform01(rng));
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        const double dx = double(x) - cx, dy = double(y) - cy;
        const bool inside = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= rx && std::abs(dy) <= r;
        if (!inside) continue;
        for (int64_t c = 0; c < 3; ++c) img[c * hw + y * size + x] = colour[c];
      }
    }
  }
  return img;
}

nlohmann::json PairOptions::to_json() const {
  nlohmann::json j = {{"max_rotation_deg", max_rotation_deg}, {"min_scale", min_scale},
                      {"max_scale", max_scale},               {"max_translation_px", max_translation_px},
                      {"jitter", jitter}};
  j["fixed_rotation_deg"] = fixed_rotation_deg ? nlohmann::json(*fixed_rotation_deg) : nlohmann::json(nullptr);
  return j;
}

PairOptions PairOptions::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("pairs config must be an object");
  PairOptions o;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "max_rotation_deg") o.max_rotation_deg = value.get<double>();
      else if (key == "min_scale") o.min_scale = value.get<double>();
      else if (key == "max_scale") o.max_scale = value.get<double>();
      else if (key == "max_translation_px") o.max_translation_px = value.get<double>();
      else if (key == "jitter") o.jitter = value.get<double>();
      else if (key == "fixed_rotation_deg") {
        if (value.is_null()) o.fixed_rotation_deg.reset();
        else o.fixed_rotation_deg = value.get<double>();
      } else throw ConfigError("unknown pairs config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("pairs config key '" + key + "': " + e.what());
    }
  }
  if (o.min_scale <= 0 || o.max_scale < o.min_scale) throw ConfigError("pairs: need 0 < min_scale <= max_scale");
  if (o.jitter < 0 || o.jitter >= 1) throw ConfigError("pairs: jitter must be in [0, 1)");
  return o;
}

PairOptions PairOptions::identity() {
  PairOptions o;
  o.max_rotation_deg = 0.0;
  o.min_scale = o.max_scale = 1.0;
  o.max_translation_px = 0.0;
  o.jitter = 0.0;
  o.fixed_rotation_deg = 0.0;
  return o;
}

std::vector<uint8_t> overlap_mask(const Homography& gt, int64_t h, int64_t w, int64_t h_b, int64_t w_b) {
  std::vector<uint8_t> mask(static_cast<size_t>(h * w), 0);
  const double slack = 1e-9;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const auto p = gt.try_apply({double(x), double(y)});
      if (!p) continue;
      if (p->x >= -slack && p->y >= -slack && p->x <= double(w_b - 1) + slack && p->y <= double(h_b - 1) + slack) {
        mask[static_cast<size_t>(y * w + x)] = 1;
      }
    }
  }
  return mask;
}

TrainPair generate_pair(const Tensor& source, uint64_t seed, const PairOptions& options) {
  require_4d(source, "generate_pair source");
  const int64_t H = source.dim(2), W = source.dim(3);
  if (H < 64 || W < 64) throw ShapeError("training sources must be at least 64 x 64, got " + shape_to_string(source.shape()));
  Rng rng(seed);
  const double angle = options.fixed_rotation_deg ? *options.fixed_rotation_deg : uniform(rng, 0.0, options.max_rotation_deg);
  const double scale = uniform(rng, options.min_scale, options.max_scale);
  const double tx = uniform(rng, -options.max_translation_px, options.max_translation_px);
  const double ty = uniform(rng, -options.max_translation_px, options.max_translation_px);
  const double contrast = uniform(rng, 1.0 - options.jitter, 1.0 + options.jitter);
  const double brightness = uniform(rng, -options.jitter, options.jitter);

  const double cx = double(W - 1) / 2.0, cy = double(H - 1) / 2.0;
  const Homography scale_c =
      Homography::translation(cx, cy).after(Homography::scaling(scale, scale)).after(Homography::translation(-cx, -cy));
  const Homography gt = Homography::translation(tx, ty).after(rotation_homography(angle, int(W), int(H))).after(scale_c);

  if (source.dim(0) != 1) throw ShapeError("generate_pair expects a single image");
  TrainPair pair;
  pair.image_a = source;
  pair.image_b = ops::warp_homography(source, gt.to_mat3(), H, W);
  if (options.jitter > 0.0) {
    for (float& v : pair.image_b.data()) {
      v = static_cast<float>(std::clamp(double(v) * contrast + brightness, 0.0, 1.0));
    }
  }
  pair.gt = gt;
  pair.mask = overlap_mask(gt, H, W, H, W);
  return pair;
}

namespace {

struct Window {
  int64_t y0, x0, size_y, size_x;
};

std::vector<Window> windows(int64_t h, int64_t w, int win, int stride) {
  if (win < 1 || stride < 1) throw ValueError("window size and stride must be >= 1");
  const int64_t wy = std::min<int64_t>(win, h), wx = std::min<int64_t>(win, w);
  std::vector<Window> out;
  for (int64_t y = 0; y + wy <= h; y += stride) {
    for (int64_t x = 0; x + wx <= w; x += stride) out.push_back({y, x, wy, wx});
  }
  return out;
}

void require_map(const Tensor& t, const char* what) {
  require_4d(t, what);
  if (t.dim(1) != 1) throw ShapeError(std::string(what) + " must have one channel, got " + shape_to_string(t.shape()));
}

}  // namespace

Var loss_repeatability_cosim(const Var& rep_a, const Var& rep_b, const Homography& gt, const LossOptions& options) {
  const Tensor& a = rep_a.value();
  require_map(a, "repeatability map a");
  require_map(rep_b.value(), "repeatability map b");
  if (a.dim(0) != 1 || rep_b.value().dim(0) != 1) throw ShapeError("cosine loss expects single maps");
  const int64_t H = a.dim(2), W = a.dim(3);
  const int64_t Hb = rep_b.value().dim(2), Wb = rep_b.value().dim(3);
  auto plan = std::make_shared<const ops::BilinearPlan>(ops::make_warp_plan(gt.inverse().to_mat3(), Hb, Wb, H, W));
  const Var warped = ad::resample(rep_b, plan);
  const auto mask = overlap_mask(gt, H, W, Hb, Wb);

  struct WinStat {
    Window w;
    double dot, na, nb;
  };
  std::vector<WinStat> stats;
  const Tensor& b = warped.value();
  for (const Window& w : windows(H, W, options.cosim_window, options.cosim_stride)) {
    double dot = 0, na = 0, nb = 0;
    int64_t valid = 0;
    for (int64_t y = w.y0; y < w.y0 + w.size_y; ++y) {
      for (int64_t x = w.x0; x < w.x0 + w.size_x; ++x) {
        const int64_t i = y * W + x;
        if (!mask[static_cast<size_t>(i)]) continue;
        ++valid;
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
      }
    }
    if (valid > 0) stats.push_back({w, dot, std::sqrt(na), std::sqrt(nb)});
  }
  if (stats.empty()) throw ValueError("repeatability cosine loss: the two maps do not overlap");
  double mean_cos = 0.0;
  for (const auto& s : stats) {
    if (s.na > 0 && s.nb > 0) mean_cos += s.dot / (s.na * s.nb);
  }
  mean_cos /= double(stats.size());
  Tape& tape = *rep_a.tape();
  const int ia = rep_a.id(), ib = warped.id();
  return tape.record(Tensor(Shape{}, static_cast<float>(1.0 - mean_cos)), {rep_a, warped},
                     [=, stats = std::move(stats)](Tape& t, const Tensor& g) {
                       const Tensor& av = t.value(ia);
                       const Tensor& bv = t.value(ib);
                       Tensor ga(av.shape()), gb(bv.shape());
                       const double scale = -double(g[0]) / double(stats.size());
                       for (const auto& s : stats) {
                         if (!(s.na > 0 && s.nb > 0)) continue;
                         const double cos = s.dot / (s.na * s.nb);
                         for (int64_t y = s.w.y0; y < s.w.y0 + s.w.size_y; ++y) {
                           for (int64_t x = s.w.x0; x < s.w.x0 + s.w.size_x; ++x) {
                             const int64_t i = y * W + x;
                             if (!mask[static_cast<size_t>(i)]) continue;
                             ga[i] += static_cast<float>(scale * (bv[i] / (s.na * s.nb) - cos * av[i] / (s.na * s.na)));
                             gb[i] += static_cast<float>(scale * (av[i] / (s.na * s.nb) - cos * bv[i] / (s.nb * s.nb)));
                           }
                         }
                       }
                       t.accumulate(ia, std::move(ga));
                       t.accumulate(ib, std::move(gb));
                     });
}

Var loss_peakiness(const Var& rep, int window, int stride) {
  const Tensor& r = rep.value();
  require_map(r, "repeatability map");
  const int64_t B = r.dim(0), H = r.dim(2), W = r.dim(3);
  const auto wins = windows(H, W, window, stride);
  if (wins.empty()) throw ValueError("peakiness loss: no windows fit");
  std::vector<int64_t> argmax;
  double acc = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    for (const Window& w : wins) {
      double sum = 0.0;
      int64_t best = -1;
      float mx = -std::numeric_limits<float>::infinity();
      for (int64_t y = w.y0; y < w.y0 + w.size_y; ++y) {
        for (int64_t x = w.x0; x < w.x0 + w.size_x; ++x) {
          const int64_t i = (b * H + y) * W + x;
          sum += r[i];
          if (r[i] > mx) {
            mx = r[i];
            best = i;
          }
        }
      }
      acc += double(mx) - sum / double(w.size_y * w.size_x);
      argmax.push_back(best);
    }
  }
  const double count = double(B) * double(wins.size());
  const int id = rep.id();
  return rep.tape()->record(Tensor(Shape{}, static_cast<float>(1.0 - acc / count)), {rep},
                            [=, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
                              Tensor gr(t.value(id).shape());
                              const double s = double(g[0]) / count;
                              size_t k = 0;
                              for (int64_t b = 0; b < B; ++b) {
                                for (const Window& w : wins) {
                                  const double area = double(w.size_y * w.size_x);
                                  for (int64_t y = w.y0; y < w.y0 + w.size_y; ++y) {
                                    for (int64_t x = w.x0; x < w.x0 + w.size_x; ++x) {
                                      gr[(b * H + y) * W + x] += static_cast<float>(s / area);
                                    }
                                  }
                                  gr[argmax[k++]] -= static_cast<float>(s);
                                }
                              }
                              t.accumulate(id, std::move(gr));
                            });
}

double soft_average_precision(std::span<const double> sims, std::span<const uint8_t> positive, int bins,
                              std::vector<double>* grad) {
  if (bins < 2) throw ValueError("soft AP needs at least 2 bins");
  if (sims.size() != positive.size()) throw ShapeError("soft AP: similarity and label counts differ");
  const auto K = static_cast<size_t>(bins);
  const double delta = 2.0 / double(bins - 1);
  // Bin k is centred at 1 - k * delta, so cumulative sums run from the most
  // similar bin downwards.
  std::vector<double> p(K, 0.0), a(K, 0.0);
  std::vector<size_t> lower(sims.size());
  std::vector<double> frac(sims.size());
  double np = 0.0;
  for (size_t i = 0; i < sims.size(); ++i) {
    const double s = std::clamp(sims[i], -1.0, 1.0);
    const double t = (1.0 - s) / delta;
    const size_t k0 = std::min(static_cast<size_t>(t), K - 2);
    const double f = t - double(k0);
    lower[i] = k0;
    frac[i] = f;
    a[k0] += 1.0 - f;
    a[k0 + 1] += f;
    if (positive[i]) {
      p[k0] += 1.0 - f;
      p[k0 + 1] += f;
      np += 1.0;
    }
  }
  if (grad) grad->assign(sims.size(), 0.0);
  if (np == 0.0) return 0.0;
  std::vector<double> P(K), A(K);
  double cp = 0.0, ca = 0.0, ap = 0.0;
  for (size_t k = 0; k < K; ++k) {
    cp += p[k];
    ca += a[k];
    P[k] = cp;
    A[k] = ca;
    if (ca > 0.0) ap += p[k] * cp / ca;
  }
  ap /= np;
  if (!grad) return ap;
  std::vector<double> gp(K, 0.0), ga(K, 0.0);
  double tail_p = 0.0, tail_a = 0.0;
  for (size_t k = K; k-- > 0;) {
    if (A[k] > 0.0) {
      tail_p += p[k] / A[k];
      tail_a -= p[k] * P[k] / (A[k] * A[k]);
      gp[k] = (P[k] / A[k] + tail_p) / np;
    } else {
      gp[k] = tail_p / np;
    }
    ga[k] = tail_a / np;
  }
  for (size_t i = 0; i < sims.size(); ++i) {
    if (sims[i] < -1.0 || sims[i] > 1.0) continue;
    const size_t k0 = lower[i];
    const double g0 = ga[k0] + (positive[i] ? gp[k0] : 0.0);
    const double g1 = ga[k0 + 1] + (positive[i] ? gp[k0 + 1] : 0.0);
    // delta_k0 = 1 - f and delta_k0+1 = f, with df/ds = -1/delta
    (*grad)[i] = (g0 - g1) / delta;
  }
  return ap;
}

std::vector<QueryPixel> sample_queries(const std::vector<uint8_t>& mask, int64_t width, int count, Rng& rng) {
  std::vector<int64_t> valid;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) valid.push_back(static_cast<int64_t>(i));
  }
  std::vector<QueryPixel> out;
  if (valid.empty()) return out;
  for (int q = 0; q < count; ++q) {
    const int64_t i = valid[static_cast<size_t>(uniform_index(rng, valid.size()))];
    out.push_back({i % width, i / width});
  }
  return out;
}

Var loss_average_precision(const Var& desc_a, const Var& desc_b, const Homography& gt,
                           const std::vector<QueryPixel>& queries, const LossOptions& options,
                           const std::optional<Var>& reliability_a) {
  const Tensor& da = desc_a.value();
  const Tensor& db = desc_b.value();
  require_4d(da, "descriptors a");
  require_4d(db, "descriptors b");
  if (da.dim(0) != 1 || db.dim(0) != 1 || da.dim(1) != db.dim(1)) {
    throw ShapeError("AP loss expects single descriptor maps of equal depth, got " + shape_to_string(da.shape()) +
                     " and " + shape_to_string(db.shape()));
  }
  const int64_t D = da.dim(1), H = da.dim(2), W = da.dim(3), Hb = db.dim(2), Wb = db.dim(3), HWb = Hb * Wb;
  if (reliability_a) {
    require_map(reliability_a->value(), "reliability map");
    if (reliability_a->value().dim(2) != H || reliability_a->value().dim(3) != W) {
      throw ShapeError("reliability map does not match the descriptor map");
    }
  }
  // b descriptors as rows for contiguous dot products
  std::vector<float> rows(static_cast<size_t>(HWb * D));
  for (int64_t c = 0; c < D; ++c) {
    for (int64_t i = 0; i < HWb; ++i) rows[static_cast<size_t>(i * D + c)] = db[c * HWb + i];
  }
  struct Query {
    int64_t pixel;
    double ap;
    std::vector<int32_t> candidates;
    std::vector<double> dsim;
  };
  std::vector<Query> used;
  const double r_pos2 = options.ap_positive_radius * options.ap_positive_radius;
  const double r_neg2 = options.ap_negative_radius * options.ap_negative_radius;
  std::vector<double> q(static_cast<size_t>(D));
  for (const QueryPixel& qp : queries) {
    if (qp.x < 0 || qp.y < 0 || qp.x >= W || qp.y >= H) continue;
    const auto g = gt.try_apply({double(qp.x), double(qp.y)});
    if (!g || g->x < 0 || g->y < 0 || g->x > double(Wb - 1) || g->y > double(Hb - 1)) continue;
    const int64_t pix = qp.y * W + qp.x;
    for (int64_t c = 0; c < D; ++c) q[static_cast<size_t>(c)] = da[c * H * W + pix];
    Query entry{pix, 0.0, {}, {}};
    std::vector<double> sims;
    std::vector<uint8_t> pos;
    for (int64_t y = 0; y < Hb; ++y) {
      for (int64_t x = 0; x < Wb; ++x) {
        const double d2 = (double(x) - g->x) * (double(x) - g->x) + (double(y) - g->y) * (double(y) - g->y);
        const bool is_pos = d2 <= r_pos2;
        if (!is_pos && d2 <= r_neg2) continue;
        const int64_t j = y * Wb + x;
        const float* row = rows.data() + j * D;
        double s = 0.0;
        for (int64_t c = 0; c < D; ++c) s += q[static_cast<size_t>(c)] * row[c];
        entry.candidates.push_back(static_cast<int32_t>(j));
        sims.push_back(s);
        pos.push_back(is_pos ? 1 : 0);
      }
    }
    entry.ap = soft_average_precision(sims, pos, options.ap_bins, &entry.dsim);
    used.push_back(std::move(entry));
  }
  if (used.empty()) throw ValueError("AP loss: no query has a valid ground-truth correspondent");
  const double nq = double(used.size());
  const double kappa = options.ap_kappa;
  double loss = 0.0;
  std::vector<double> rel(used.size(), 1.0);
  for (size_t k = 0; k < used.size(); ++k) {
    if (reliability_a) {
      rel[k] = reliability_a->value()[used[k].pixel];
      loss += 1.0 - (used[k].ap * rel[k] + kappa * (1.0 - rel[k]));
    } else {
      loss += 1.0 - used[k].ap;
    }
  }
  loss /= nq;
  std::vector<Var> inputs{desc_a, desc_b};
  if (reliability_a) inputs.push_back(*reliability_a);
  const int ia = desc_a.id(), ib = desc_b.id();
  const int ir = reliability_a ? reliability_a->id() : -1;
  const int64_t HW = H * W;
  return desc_a.tape()->record(
      Tensor(Shape{}, static_cast<float>(loss)), inputs,
      [=, used = std::move(used), rel = std::move(rel)](Tape& t, const Tensor& g) {
        const Tensor& va = t.value(ia);
        const Tensor& vb = t.value(ib);
        std::vector<double> gqa(static_cast<size_t>(D * HW), 0.0), gqb(static_cast<size_t>(D * HWb), 0.0);
        Tensor gr;
        if (ir >= 0) gr = Tensor(t.value(ir).shape());
        for (size_t k = 0; k < used.size(); ++k) {
          const Query& e = used[k];
          const double dap = -double(g[0]) * rel[k] / nq;
          if (ir >= 0) gr[e.pixel] += static_cast<float>(-double(g[0]) * (e.ap - kappa) / nq);
          for (size_t m = 0; m < e.candidates.size(); ++m) {
            const double w = dap * e.dsim[m];
            if (w == 0.0) continue;
            const int64_t j = e.candidates[m];
            for (int64_t c = 0; c < D; ++c) {
              gqa[static_cast<size_t>(c * HW + e.pixel)] += w * vb[c * HWb + j];
              gqb[static_cast<size_t>(c * HWb + j)] += w * va[c * HW + e.pixel];
            }
          }
        }
        Tensor ga(va.shape()), gb(vb.shape());
        for (size_t i = 0; i < gqa.size(); ++i) ga[static_cast<int64_t>(i)] = static_cast<float>(gqa[i]);
        for (size_t i = 0; i < gqb.size(); ++i) gb[static_cast<int64_t>(i)] = static_cast<float>(gqb[i]);
        t.accumulate(ia, std::move(ga));
        t.accumulate(ib, std::move(gb));
        if (ir >= 0) t.accumulate(ir, std::move(gr));
      });
}

nlohmann::json LossOptions::to_json() const {
  return {{"cosim_window", cosim_window},
          {"cosim_stride", cosim_stride},
          {"peaky_window", peaky_window},
          {"peaky_stride", peaky_stride},
          {"ap_bins", ap_bins},
          {"ap_positive_radius", ap_positive_radius},
          {"ap_negative_radius", ap_negative_radius},
          {"ap_queries", ap_queries},
          {"ap_reliability", ap_reliability},
          {"ap_kappa", ap_kappa}};
}

LossOptions LossOptions::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("loss config must be an object");
  LossOptions o;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "cosim_window") o.cosim_window = value.get<int>();
      else if (key == "cosim_stride") o.cosim_stride = value.get<int>();
      else if (key == "peaky_window") o.peaky_window = value.get<int>();
      else if (key == "peaky_stride") o.peaky_stride = value.get<int>();
      else if (key == "ap_bins") o.ap_bins = value.get<int>();
      else if (key == "ap_positive_radius") o.ap_positive_radius = value.get<double>();
      else if (key == "ap_negative_radius") o.ap_negative_radius = value.get<double>();
      else if (key == "ap_queries") o.ap_queries = value.get<int>();
      else if (key == "ap_reliability") o.ap_reliability = value.get<bool>();
      else if (key == "ap_kappa") o.ap_kappa = value.get<double>();
      else throw ConfigError("unknown loss config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("loss config key '" + key + "': " + e.what());
    }
  }
  if (o.cosim_window < 1 || o.cosim_stride < 1 || o.peaky_window < 1 || o.peaky_stride < 1) {
    throw ConfigError("loss windows and strides must be >= 1");
  }
  if (o.ap_bins < 2) throw ConfigError("ap_bins must be >= 2");
  if (o.ap_queries < 1) throw ConfigError("ap_queries must be >= 1");
  if (o.ap_positive_radius < 0 || o.ap_negative_radius < o.ap_positive_radius) {
    throw ConfigError("need 0 <= ap_positive_radius <= ap_negative_radius");
  }
  return o;
}

void TrainConfig::validate() const {
  model.validate();
  if (image_size < 64) throw ConfigError("image_size must be >= 64");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (weight_cosim < 0 || weight_peakiness < 0 || weight_ap < 0) throw ConfigError("loss weights must be >= 0");
  if (prefetch < 0) throw ConfigError("prefetch must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"image_size", image_size},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"weight_cosim", weight_cosim},
          {"weight_peakiness", weight_peakiness},
          {"weight_ap", weight_ap},
          {"loss", loss.to_json()},
          {"pairs", pairs.to_json()},
          {"prefetch", prefetch},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "model") c.model = RefConfig::from_json(value);
      else if (key == "image_size") c.image_size = value.get<int64_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "weight_cosim") c.weight_cosim = value.get<double>();
      else if (key == "weight_peakiness") c.weight_peakiness = value.get<double>();
      else if (key == "weight_ap") c.weight_ap = value.get<double>();
      else if (key == "loss") c.loss = LossOptions::from_json(value);
      else if (key == "pairs") c.pairs = PairOptions::from_json(value);
      else if (key == "prefetch") c.prefetch = value.get<int>();
      else if (key == "seed") c.seed = value.get<uint64_t>();
      else throw ConfigError("unknown training config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("training config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainPair training_pair(const TrainConfig& config, int64_t step) {
  const Tensor texture = synthetic_texture(config.image_size, derive_seed(config.seed, 1, static_cast<uint64_t>(step)));
  return generate_pair(texture, derive_seed(config.seed, 2, static_cast<uint64_t>(step)), config.pairs);
}

StepLosses pair_losses(Tape& tape, RefNet& model, const std::vector<Var>& params, const TrainPair& pair,
                       const TrainConfig& config, uint64_t query_seed, bool training) {
  Tensor both({2, 3, pair.image_a.dim(2), pair.image_a.dim(3)});
  const int64_t per = pair.image_a.numel();
  std::copy_n(pair.image_a.ptr(), per, both.ptr());
  std::copy_n(pair.image_b.ptr(), per, both.ptr() + per);
  const Var images = tape.constant(std::move(both));
  const RefNet::Graph g = model.forward_graph(tape, images, params, training);
  const Var rep_a = ad::select_batch(g.repeatability, 0), rep_b = ad::select_batch(g.repeatability, 1);
  const Var desc_a = ad::select_batch(g.descriptors, 0), desc_b = ad::select_batch(g.descriptors, 1);
  StepLosses out;
  out.cosim = loss_repeatability_cosim(rep_a, rep_b, pair.gt, config.loss);
  const Var pa = loss_peakiness(rep_a, config.loss.peaky_window, config.loss.peaky_stride);
  const Var pb = loss_peakiness(rep_b, config.loss.peaky_window, config.loss.peaky_stride);
  out.peakiness = ad::scale(ad::add(pa, pb), 0.5);
  Rng rng(query_seed);
  const auto queries = sample_queries(pair.mask, pair.image_a.dim(3), config.loss.ap_queries, rng);
  std::optional<Var> rel;
  if (config.loss.ap_reliability) rel = ad::select_batch(g.reliability, 0);
  out.ap = loss_average_precision(desc_a, desc_b, pair.gt, queries, config.loss, rel);
  out.total = ad::weighted_sum({out.cosim, out.peakiness, out.ap},
                               {config.weight_cosim, config.weight_peakiness, config.weight_ap});
  return out;
}

TrainResult train(const TrainConfig& config, int64_t steps, const std::function<void(const LossReport&)>& on_step) {
  config.validate();
  if (steps < 1) throw ConfigError("steps must be >= 1");
  TrainResult result{RefNet(config.model, derive_seed(config.seed, 0)), {}};
  RefNet& model = result.model;
  std::vector<std::vector<double>> velocity;
  for (const auto& p : model.parameters()) velocity.emplace_back(p.trainable ? p.value.numel() : 0, 0.0);

  BoundedQueue<TrainPair> queue(static_cast<size_t>(std::max(1, config.prefetch)));
  std::exception_ptr producer_error;
  std::jthread producer;
  if (config.prefetch > 0) {
    producer = std::jthread([&] {
      try {
        for (int64_t s = 0; s < steps; ++s) {
          if (!queue.push(training_pair(config, s))) return;
        }
      } catch (...) {
        producer_error = std::current_exception();
      }
      queue.close();
    });
  }
  struct CloseOnExit {
    BoundedQueue<TrainPair>& q;
    ~CloseOnExit() { q.close(); }
  } closer{queue};

  for (int64_t s = 0; s < steps; ++s) {
    TrainPair pair;
    if (config.prefetch > 0) {
      auto item = queue.pop();
      if (!item) {
        if (producer_error) std::rethrow_exception(producer_error);
        throw InvariantError("training pair producer stopped early");
      }
      pair = std::move(*item);
    } else {
      pair = training_pair(config, s);
    }
    Tape tape;
    const auto params = model.bind(tape);
    const StepLosses losses = pair_losses(tape, model, params, pair, config, derive_seed(config.seed, 3, uint64_t(s)), true);
    LossReport report{s, losses.cosim.value()[0], losses.peakiness.value()[0], losses.ap.value()[0],
                      losses.total.value()[0]};
    const std::pair<const char*, double> terms[] = {{"repeatability cosine", report.repeatability_cosim},
                                                    {"peakiness", report.peakiness},
                                                    {"average precision", report.ap_loss}};
    for (const auto& [name, value] : terms) {
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite " << name << " loss (" << value << ") at training step " << s;
        throw InvariantError(os.str());
      }
    }
    tape.backward(losses.total);
    auto& named = model.parameters();
    for (size_t i = 0; i < named.size(); ++i) {
      if (!named[i].trainable) continue;
      const Tensor& grad = params[i].grad();
      auto& v = velocity[i];
      float* w = named[i].value.ptr();
      for (size_t k = 0; k < v.size(); ++k) {
        const double gk = grad.empty() ? 0.0 : double(grad[static_cast<int64_t>(k)]);
        v[k] = config.momentum * v[k] + gk + config.weight_decay * w[k];
        w[k] = static_cast<float>(double(w[k]) - config.learning_rate * v[k]);
      }
    }
    model.set_step(s + 1);
    result.reports.push_back(report);
    if (on_step) on_step(report);
  }
  return result;
}

std::string loss_csv(const std::vector<LossReport>& reports) {
  std::string out = "step,repeatability_cosim,peakiness,ap_loss,total\n";
  char line[160];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.step),
                  r.repeatability_cosim, r.peakiness, r.ap_loss, r.total);
    out += line;
  }
  return out;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& reports) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write loss CSV " + path.string());
  out << loss_csv(reports);
}

}  // namespace reffeat
