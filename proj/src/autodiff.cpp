#include "reffeat/autodiff.hpp"

#include <cmath>

#include "reffeat/error.hpp"

namespace reffeat {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw InvariantError("op mixes values from different tapes");
    needs = needs || requires_grad(v.id());
  }
  needs = needs && recording_;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(int id, const Tensor& g) {
  Node& node = nodes_[static_cast<size_t>(id)];
  if (!node.requires_grad) return;
  if (g.numel() != node.value.numel()) {
    throw ShapeError("gradient " + shape_to_string(g.shape()) + " does not match value " +
                     shape_to_string(node.value.shape()));
  }
  if (node.grad.empty() && node.value.numel() > 0) {
    node.grad = Tensor(node.value.shape(), std::vector<float>(g.data().begin(), g.data().end()));
    return;
  }
  float* dst = node.grad.ptr();
  const float* src = g.ptr();
  for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

void Tape::accumulate(int id, Tensor&& g) {
  Node& node = nodes_[static_cast<size_t>(id)];
  if (node.requires_grad && node.grad.empty() && g.numel() == node.value.numel()) {
    node.grad = g.reshaped(node.value.shape());
    return;
  }
  accumulate(id, static_cast<const Tensor&>(g));
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw InvariantError("backward called with a value from another tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(loss.value().shape()));
  }
  if (!requires_grad(loss.id())) return;
  accumulate(loss.id(), Tensor(loss.value().shape(), 1.0f));
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

void Tape::zero_grad() {
  for (Node& node : nodes_) node.grad = Tensor{};
}

namespace ad {
namespace {

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw InvariantError("use of an unset Var");
  return *v.tape();
}

template <typename F>
Tensor map_elements(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, int stride, int padding) {
  Tape& tape = tape_of(input);
  std::span<const float> b;
  if (bias) b = bias->value().data();
  Tensor out = ops::conv2d(input.value(), weight.value(), b, stride, padding);
  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const int in_id = input.id(), w_id = weight.id(), b_id = bias ? bias->id() : -1;
  return tape.record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(in_id);
    const Tensor& w = t.value(w_id);
    if (t.requires_grad(in_id)) t.accumulate(in_id, ops::conv2d_grad_input(g, w, x.shape(), stride, padding));
    if (t.requires_grad(w_id)) t.accumulate(w_id, ops::conv2d_grad_weight(g, x, w.shape(), stride, padding));
    if (b_id >= 0 && t.requires_grad(b_id)) {
      std::vector<float> gb = ops::conv2d_grad_bias(g);
      Shape s{static_cast<int64_t>(gb.size())};
      t.accumulate(b_id, Tensor(s, std::move(gb)).reshaped(t.value(b_id).shape()));
    }
  });
}

Var batchnorm(const Var& input, const Var& gamma, const Var& beta, int group, BatchNormState& state, bool training,
              float momentum, float eps) {
  Tape& tape = tape_of(input);
  const Tensor& x = input.value();
  require_4d(x, "batchnorm");
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (group < 1 || C % group != 0) {
    throw ShapeError("batchnorm: channel count " + std::to_string(C) + " not divisible by group " + std::to_string(group));
  }
  const int64_t G = C / group;
  if (gamma.value().numel() != G || beta.value().numel() != G) {
    throw ShapeError("batchnorm: gamma/beta need " + std::to_string(G) + " entries");
  }
  if (state.running_mean.size() != static_cast<size_t>(G)) {
    state.running_mean.assign(static_cast<size_t>(G), 0.0f);
    state.running_var.assign(static_cast<size_t>(G), 1.0f);
  }
  if (eps < 0.0f) throw ValueError("batchnorm eps must be non-negative");

  std::vector<double> mu(static_cast<size_t>(G)), inv_std(static_cast<size_t>(G));
  const double count = double(B * group * HW);
  for (int64_t gi = 0; gi < G; ++gi) {
    double m, v;
    if (training) {
      double s = 0.0, ss = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = gi * group; c < (gi + 1) * group; ++c) {
          const float* p = x.ptr() + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) s += p[i];
        }
      }
      m = s / count;
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = gi * group; c < (gi + 1) * group; ++c) {
          const float* p = x.ptr() + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) ss += (p[i] - m) * (p[i] - m);
        }
      }
      v = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : v;
      auto& rm = state.running_mean[static_cast<size_t>(gi)];
      auto& rv = state.running_var[static_cast<size_t>(gi)];
      rm = static_cast<float>((1.0 - momentum) * rm + momentum * m);
      rv = static_cast<float>((1.0 - momentum) * rv + momentum * unbiased);
    } else {
      m = state.running_mean[static_cast<size_t>(gi)];
      v = state.running_var[static_cast<size_t>(gi)];
      if (v < 0.0) throw ValueError("batchnorm running variance is negative");
    }
    const double denom = std::sqrt(v + eps);
    mu[static_cast<size_t>(gi)] = m;
    inv_std[static_cast<size_t>(gi)] = denom > 0.0 ? 1.0 / denom : 0.0;
  }

  Tensor out(x.shape());
  Tensor xhat(x.shape());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const auto gi = static_cast<size_t>(c / group);
      const double gm = gamma.value()[static_cast<int64_t>(gi)], bt = beta.value()[static_cast<int64_t>(gi)];
      const float* p = x.ptr() + (b * C + c) * HW;
      float* q = out.ptr() + (b * C + c) * HW;
      float* h = xhat.ptr() + (b * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        const double xh = (p[i] - mu[gi]) * inv_std[gi];
        h[i] = static_cast<float>(xh);
        q[i] = static_cast<float>(xh * gm + bt);
      }
    }
  }

  const int in_id = input.id(), g_id = gamma.id(), b_id = beta.id();
  return tape.record(std::move(out), {input, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                       const Tensor& gam = t.value(g_id);
                       std::vector<double> sum_g(static_cast<size_t>(G), 0.0), sum_gx(static_cast<size_t>(G), 0.0);
                       for (int64_t b = 0; b < B; ++b) {
                         for (int64_t c = 0; c < C; ++c) {
                           const auto gi = static_cast<size_t>(c / group);
                           const float* gp = g.ptr() + (b * C + c) * HW;
                           const float* hp = xhat.ptr() + (b * C + c) * HW;
                           for (int64_t i = 0; i < HW; ++i) {
                             sum_g[gi] += gp[i];
                             sum_gx[gi] += double(gp[i]) * hp[i];
                           }
                         }
                       }
                       if (t.requires_grad(g_id)) {
                         Tensor gg(t.value(g_id).shape());
                         for (int64_t gi = 0; gi < G; ++gi) gg[gi] = static_cast<float>(sum_gx[static_cast<size_t>(gi)]);
                         t.accumulate(g_id, std::move(gg));
                       }
                       if (t.requires_grad(b_id)) {
                         Tensor gb(t.value(b_id).shape());
                         for (int64_t gi = 0; gi < G; ++gi) gb[gi] = static_cast<float>(sum_g[static_cast<size_t>(gi)]);
                         t.accumulate(b_id, std::move(gb));
                       }
                       if (!t.requires_grad(in_id)) return;
                       Tensor gx(g.shape());
                       for (int64_t b = 0; b < B; ++b) {
                         for (int64_t c = 0; c < C; ++c) {
                           const auto gi = static_cast<size_t>(c / group);
                           const double scale = double(gam[static_cast<int64_t>(gi)]) * inv_std[gi];
                           const double mg = sum_g[gi] / count, mgx = sum_gx[gi] / count;
                           const float* gp = g.ptr() + (b * C + c) * HW;
                           const float* hp = xhat.ptr() + (b * C + c) * HW;
                           float* dst = gx.ptr() + (b * C + c) * HW;
                           for (int64_t i = 0; i < HW; ++i) {
                             dst[i] = training ? static_cast<float>(scale * (gp[i] - mg - hp[i] * mgx))
                                               : static_cast<float>(scale * gp[i]);
                           }
                         }
                       }
                       t.accumulate(in_id, std::move(gx));
                     });
}

Var relu(const Var& x) {
  Tape& tape = tape_of(x);
  const int id = x.id();
  return tape.record(ops::relu(x.value()), {x}, [id](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(id);
    Tensor gx(g.shape());
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] = v[i] > 0.0f ? g[i] : 0.0f;
    t.accumulate(id, std::move(gx));
  });
}

Var softplus(const Var& x) {
  Tape& tape = tape_of(x);
  const int id = x.id();
  return tape.record(ops::softplus(x.value()), {x}, [id](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(id);
    Tensor gx(g.shape());
    for (int64_t i = 0; i < g.numel(); ++i) gx[i] = static_cast<float>(g[i] / (1.0 + std::exp(-double(v[i]))));
    t.accumulate(id, std::move(gx));
  });
}

Var softmax_channel(const Var& x) {
  Tape& tape = tape_of(x);
  Tensor y = ops::softmax_channel(x.value());
  const int id = x.id();
  Tensor yc = y;
  return tape.record(std::move(y), {x}, [id, yc = std::move(yc)](Tape& t, const Tensor& g) {
    const int64_t B = yc.dim(0), C = yc.dim(1), HW = yc.dim(2) * yc.dim(3);
    Tensor gx(g.shape());
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t i = 0; i < HW; ++i) {
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) dot += double(yc[(b * C + c) * HW + i]) * g[(b * C + c) * HW + i];
        for (int64_t c = 0; c < C; ++c) {
          const int64_t k = (b * C + c) * HW + i;
          gx[k] = static_cast<float>(yc[k] * (g[k] - dot));
        }
      }
    }
    t.accumulate(id, std::move(gx));
  });
}

Var l2_normalize_channel(const Var& x) {
  Tape& tape = tape_of(x);
  Tensor y = ops::l2_normalize_channel(x.value());
  const int id = x.id();
  Tensor yc = y;
  return tape.record(std::move(y), {x}, [id, yc = std::move(yc)](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(id);
    const int64_t B = yc.dim(0), C = yc.dim(1), HW = yc.dim(2) * yc.dim(3);
    Tensor gx(g.shape());
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t i = 0; i < HW; ++i) {
        double ss = 0.0, dot = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const int64_t k = (b * C + c) * HW + i;
          ss += double(v[k]) * v[k];
          dot += double(yc[k]) * g[k];
        }
        if (ss == 0.0) continue;
        const double inv = 1.0 / std::sqrt(ss);
        for (int64_t c = 0; c < C; ++c) {
          const int64_t k = (b * C + c) * HW + i;
          gx[k] = static_cast<float>((g[k] - yc[k] * dot) * inv);
        }
      }
    }
    t.accumulate(id, std::move(gx));
  });
}

Var squash(const Var& x) {
  Tape& tape = tape_of(x);
  const int id = x.id();
  Tensor y = map_elements(x.value(), [](float v) { return static_cast<float>(double(v) / (1.0 + v)); });
  return tape.record(std::move(y), {x}, [id](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(id);
    Tensor gx(g.shape());
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double d = 1.0 + v[i];
      gx[i] = static_cast<float>(g[i] / (d * d));
    }
    t.accumulate(id, std::move(gx));
  });
}

Var group_pool(const Var& x, int n) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_4d(v, "group_pool");
  const int64_t B = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  if (n < 1 || C % n != 0) {
    throw ShapeError("group_pool: channel count " + std::to_string(C) + " not divisible by " + std::to_string(n));
  }
  const int64_t F = C / n;
  Tensor out({B, F, v.dim(2), v.dim(3)});
  std::vector<int32_t> arg(static_cast<size_t>(B * F * HW));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t f = 0; f < F; ++f) {
      for (int64_t i = 0; i < HW; ++i) {
        int best = 0;
        float mx = v[(b * C + f * n) * HW + i];
        for (int r = 1; r < n; ++r) {
          const float c = v[(b * C + f * n + r) * HW + i];
          if (c > mx) {
            mx = c;
            best = r;
          }
        }
        out[(b * F + f) * HW + i] = mx;
        arg[static_cast<size_t>((b * F + f) * HW + i)] = best;
      }
    }
  }
  const int id = x.id();
  return tape.record(std::move(out), {x}, [=, arg = std::move(arg)](Tape& t, const Tensor& g) {
    Tensor gx(t.value(id).shape());
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t f = 0; f < F; ++f) {
        for (int64_t i = 0; i < HW; ++i) {
          const int r = arg[static_cast<size_t>((b * F + f) * HW + i)];
          gx[(b * C + f * n + r) * HW + i] += g[(b * F + f) * HW + i];
        }
      }
    }
    t.accumulate(id, std::move(gx));
  });
}

Var shift_channel_blocks(const Var& x, int n, int p) {
  Tape& tape = tape_of(x);
  const int id = x.id();
  return tape.record(ops::shift_channel_blocks(x.value(), n, p), {x}, [=](Tape& t, const Tensor& g) {
    t.accumulate(id, ops::shift_channel_blocks(g, n, -p));
  });
}

Var resample(const Var& x, std::shared_ptr<const ops::BilinearPlan> plan) {
  Tape& tape = tape_of(x);
  const int id = x.id();
  return tape.record(ops::apply_plan(x.value(), *plan), {x}, [=](Tape& t, const Tensor& g) {
    t.accumulate(id, ops::apply_plan_adjoint(g, *plan, t.value(id).shape()));
  });
}

Var rotate_bilinear(const Var& x, double angle_deg) {
  const Tensor& v = x.value();
  require_4d(v, "rotate_bilinear");
  const int64_t h = v.dim(2), w = v.dim(3);
  auto plan = std::make_shared<const ops::BilinearPlan>(
      ops::make_warp_plan(rotation_about_center(angle_deg, double(w), double(h)), h, w, h, w));
  return resample(x, std::move(plan));
}

Var repeat_interleave(const Var& v, int n) {
  Tape& tape = tape_of(v);
  const Tensor& src = v.value();
  const int64_t m = src.numel();
  Tensor out({m * n});
  for (int64_t i = 0; i < m; ++i) {
    for (int r = 0; r < n; ++r) out[i * n + r] = src[i];
  }
  const int id = v.id();
  return tape.record(std::move(out), {v}, [=](Tape& t, const Tensor& g) {
    Tensor gv(t.value(id).shape());
    for (int64_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (int r = 0; r < n; ++r) s += g[i * n + r];
      gv[i] = static_cast<float>(s);
    }
    t.accumulate(id, std::move(gv));
  });
}

Var select_channel(const Var& x, int64_t channel) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_4d(v, "select_channel");
  const int64_t B = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  if (channel < 0 || channel >= C) throw ShapeError("select_channel: channel out of range");
  Tensor out({B, 1, v.dim(2), v.dim(3)});
  for (int64_t b = 0; b < B; ++b) {
    std::copy_n(v.ptr() + (b * C + channel) * HW, HW, out.ptr() + b * HW);
  }
  const int id = x.id();
  return tape.record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    Tensor gx(t.value(id).shape());
    for (int64_t b = 0; b < B; ++b) std::copy_n(g.ptr() + b * HW, HW, gx.ptr() + (b * C + channel) * HW);
    t.accumulate(id, std::move(gx));
  });
}

Var select_batch(const Var& x, int64_t index) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_4d(v, "select_batch");
  if (index < 0 || index >= v.dim(0)) throw ShapeError("select_batch: index out of range");
  const int64_t per = v.numel() / v.dim(0);
  Tensor out({1, v.dim(1), v.dim(2), v.dim(3)});
  std::copy_n(v.ptr() + index * per, per, out.ptr());
  const int id = x.id();
  return tape.record(std::move(out), {x}, [=](Tape& t, const Tensor& g) {
    Tensor gx(t.value(id).shape());
    std::copy_n(g.ptr(), per, gx.ptr() + index * per);
    t.accumulate(id, std::move(gx));
  });
}

Var concat_batch(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValueError("concat_batch needs at least one input");
  Tape& tape = tape_of(parts.front());
  const Tensor& first = parts.front().value();
  require_4d(first, "concat_batch");
  int64_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_4d(v, "concat_batch");
    if (v.dim(1) != first.dim(1) || v.dim(2) != first.dim(2) || v.dim(3) != first.dim(3)) {
      throw ShapeError("concat_batch: mismatched shapes " + shape_to_string(v.shape()) + " and " +
                       shape_to_string(first.shape()));
    }
    total += v.dim(0);
  }
  Tensor out({total, first.dim(1), first.dim(2), first.dim(3)});
  int64_t offset = 0;
  std::vector<std::pair<int, int64_t>> spans;
  for (const Var& p : parts) {
    std::copy_n(p.value().ptr(), p.value().numel(), out.ptr() + offset);
    spans.emplace_back(p.id(), offset);
    offset += p.value().numel();
  }
  return tape.record(std::move(out), parts, [spans](Tape& t, const Tensor& g) {
    for (const auto& [id, off] : spans) {
      if (!t.requires_grad(id)) continue;
      Tensor gx(t.value(id).shape());
      std::copy_n(g.ptr() + off, gx.numel(), gx.ptr());
      t.accumulate(id, std::move(gx));
    }
  });
}

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of(a);
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("add: shapes " + shape_to_string(a.value().shape()) + " and " + shape_to_string(b.value().shape()));
  }
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a);
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("mul: shapes " + shape_to_string(a.value().shape()) + " and " + shape_to_string(b.value().shape()));
  }
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const int ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, [=](Tape& t, const Tensor& g) {
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor ga(g.shape());
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * vb[i];
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      Tensor gb(g.shape());
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * va[i];
      t.accumulate(ib, std::move(gb));
    }
  });
}

Var scale(const Var& a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = map_elements(a.value(), [factor](float v) { return static_cast<float>(v * factor); });
  const int id = a.id();
  return tape.record(std::move(out), {a}, [=](Tape& t, const Tensor& g) {
    t.accumulate(id, map_elements(g, [factor](float v) { return static_cast<float>(v * factor); }));
  });
}

Var sum(const Var& x) {
  Tape& tape = tape_of(x);
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  const int id = x.id();
  return tape.record(Tensor(Shape{}, static_cast<float>(s)), {x}, [id](Tape& t, const Tensor& g) {
    t.accumulate(id, Tensor(t.value(id).shape(), g[0]));
  });
}

Var mean(const Var& x) {
  const int64_t n = x.value().numel();
  if (n == 0) throw ValueError("mean of an empty tensor");
  return scale(sum(x), 1.0 / double(n));
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ValueError("weighted_sum: terms/weights size mismatch");
  Tape& tape = tape_of(terms.front());
  double s = 0.0;
  std::vector<int> ids;
  for (size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw ShapeError("weighted_sum expects scalar terms");
    s += weights[i] * terms[i].value()[0];
    ids.push_back(terms[i].id());
  }
  return tape.record(Tensor(Shape{}, static_cast<float>(s)), terms, [ids, weights](Tape& t, const Tensor& g) {
    for (size_t i = 0; i < ids.size(); ++i) {
      t.accumulate(ids[i], Tensor(t.value(ids[i]).shape(), static_cast<float>(g[0] * weights[i])));
    }
  });
}

}  // namespace ad
}  // namespace reffeat
