#include "calseg/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "calseg/dropout_kl.hpp"
#include "calseg/errors.hpp"
#include "calseg/kernels.hpp"

namespace calseg {

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, nullptr, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, false, &p, {}});
  return Var{nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Graph::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, false, nullptr, needs ? std::move(backward) : BackwardFn{}});
  return Var{nodes_.size() - 1};
}

Tensor& Graph::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.grad_allocated) {
    n.grad = Tensor(n.value.shape());
    n.grad_allocated = true;
  }
  return n.grad;
}

void Graph::backward(Var root, double seed) {
  if (value(root).size() != 1) throw ShapeError("backward() needs a single-element root");
  if (!requires_grad(root)) return;
  grad(root)[0] += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.grad_allocated) continue;
    if (n.backward) {
      // The closure may push grads into parents, which never reallocates nodes_.
      BackwardFn fn = n.backward;
      fn(*this);
    }
    if (n.parameter != nullptr) {
      auto dst = n.parameter->grad.data();
      auto src = nodes_[i].grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

namespace ops {

namespace {

using namespace kernels;

Var make_conv(Graph& g, Var x, Var weight, const Var* bias) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3)) {
    throw ShapeError("conv2d: input " + shape_string(xv.shape()) + " weight " + shape_string(wv.shape()));
  }
  ConvGeometry geo{xv.dim(0), wv.dim(0), xv.dim(1), xv.dim(2), wv.dim(2)};
  Tensor out({geo.out_channels, geo.height, geo.width});
  std::span<const double> b;
  if (bias != nullptr) {
    if (g.value(*bias).size() != static_cast<std::size_t>(geo.out_channels)) throw ShapeError("conv2d: bias size");
    b = g.value(*bias).data();
  }
  parallel::conv2d_forward(geo, xv.data(), wv.data(), b, out.data());
  const Var bias_var = bias ? *bias : Var{};
  const bool has_bias = bias != nullptr;
  Var result{g.size()};
  auto backward = [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    if (gr.requires_grad(x)) parallel::conv2d_backward_input(geo, go.data(), gr.value(weight).data(), gr.grad(x).data());
    const bool need_w = gr.requires_grad(weight);
    const bool need_b = has_bias && gr.requires_grad(bias_var);
    if (need_w) {
      parallel::conv2d_backward_weight(geo, gr.value(x).data(), go.data(), gr.grad(weight).data(),
                                       need_b ? gr.grad(bias_var).data() : std::span<double>{});
    } else if (need_b) {
      auto gb = gr.grad(bias_var).data();
      const std::size_t plane = static_cast<std::size_t>(geo.height) * geo.width;
      for (int co = 0; co < geo.out_channels; ++co) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += go[co * plane + p];
        gb[co] += s;
      }
    }
  };
  if (has_bias) return g.record(std::move(out), {x, weight, *bias}, backward);
  return g.record(std::move(out), {x, weight}, backward);
}

template <class Fwd, class Bwd>
Var unary(Graph& g, Var x, Fwd fwd, Bwd bwd) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    const Tensor& in = gr.value(x);
    const Tensor& ov = gr.value(result);
    Tensor& gi = gr.grad(x);
    for (std::size_t i = 0; i < in.size(); ++i) gi[i] += go[i] * bwd(in[i], ov[i]);
  });
}

void require_scalar(const Tensor& t, const char* what) {
  if (t.size() != 1) throw ShapeError(std::string(what) + ": expected a single-element tensor");
}

}  // namespace

Var conv2d(Graph& g, Var x, Var weight, Var bias) { return make_conv(g, x, weight, &bias); }
Var conv2d(Graph& g, Var x, Var weight) { return make_conv(g, x, weight, nullptr); }

Var relu(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return v > 0 ? v : 0.0; }, [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return stable_sigmoid(v); }, [](double, double out) { return out * (1.0 - out); });
}

Var clamp(Graph& g, Var x, double lo, double hi) {
  return unary(
      g, x, [=](double v) { return std::clamp(v, lo, hi); },
      [=](double in, double) { return (in >= lo && in <= hi) ? 1.0 : 0.0; });
}

Var avg_pool2(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3 || xv.dim(1) % 2 || xv.dim(2) % 2) throw ShapeError("avg_pool2 needs even {C,H,W}");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out({c, h / 2, w / 2});
  kernels::parallel::avg_pool2_forward(c, h, w, xv.data(), out.data());
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    kernels::parallel::avg_pool2_backward(c, h, w, gr.grad(result).data(), gr.grad(x).data());
  });
}

Var upsample2(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3) throw ShapeError("upsample2 needs {C,H,W}");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  kernels::parallel::upsample2_forward(c, h, w, xv.data(), out.data());
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    kernels::parallel::upsample2_backward(c, h, w, gr.grad(result).data(), gr.grad(x).data());
  });
}

Var concat_channels(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw ShapeError("concat_channels: " + shape_string(av.shape()) + " + " + shape_string(bv.shape()));
  }
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data().begin(), av.data().end(), out.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t split = av.size();
  Var result{g.size()};
  return g.record(std::move(out), {a, b}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad(a);
      for (std::size_t i = 0; i < split; ++i) ga[i] += go[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[split + i];
    }
  });
}

Var broadcast_spatial(Graph& g, Var z, int height, int width) {
  const Tensor& zv = g.value(z);
  const int l = static_cast<int>(zv.size());
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor out({l, height, width});
  for (int c = 0; c < l; ++c) std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, zv[c]);
  Var result{g.size()};
  return g.record(std::move(out), {z}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    Tensor& gz = gr.grad(z);
    for (int c = 0; c < l; ++c) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += go[c * plane + p];
      gz[c] += s;
    }
  });
}

Var global_mean(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 3) throw ShapeError("global_mean needs {C,H,W}");
  const int c = xv.dim(0);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out({c});
  for (int k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[k * plane + p];
    out[k] = s / static_cast<double>(plane);
  }
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    Tensor& gx = gr.grad(x);
    for (int k = 0; k < c; ++k) {
      const double v = go[k] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) gx[k * plane + p] += v;
    }
  });
}

Var slice(Graph& g, Var x, int begin, int count) {
  const Tensor& xv = g.value(x);
  if (begin < 0 || count < 0 || static_cast<std::size_t>(begin + count) > xv.size()) throw ShapeError("slice out of range");
  Tensor out({count});
  std::copy_n(xv.data().begin() + begin, count, out.data().begin());
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    Tensor& gx = gr.grad(x);
    for (int i = 0; i < count; ++i) gx[static_cast<std::size_t>(begin + i)] += go[i];
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor out = g.value(x).reshaped(std::move(shape));
  Var result{g.size()};
  return g.record(std::move(out), {x}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    Tensor& gx = gr.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
  });
}

Var reparameterize(Graph& g, Var mean, Var log_variance, const Tensor& noise) {
  const Tensor& m = g.value(mean);
  const Tensor& lv = g.value(log_variance);
  require_same_shape(m.shape(), lv.shape(), "reparameterize mean/log_variance");
  if (noise.size() != m.size()) throw ShapeError("reparameterize: noise length");
  Tensor out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] + std::exp(0.5 * lv[i]) * noise[i];
  Var result{g.size()};
  return g.record(std::move(out), {mean, log_variance}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    const Tensor& lvv = gr.value(log_variance);
    if (gr.requires_grad(mean)) {
      Tensor& gm = gr.grad(mean);
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += go[i];
    }
    if (gr.requires_grad(log_variance)) {
      Tensor& gl = gr.grad(log_variance);
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += go[i] * 0.5 * std::exp(0.5 * lvv[i]) * noise[i];
    }
  });
}

Var multiplicative_noise(Graph& g, Var means, Var log_alpha, const Tensor& noise) {
  const Tensor& m = g.value(means);
  const Tensor& la = g.value(log_alpha);
  require_same_shape(m.shape(), la.shape(), "multiplicative_noise means/log_alpha");
  if (noise.size() != m.size()) throw ShapeError("multiplicative_noise: noise shape");
  Tensor out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] * (1.0 + std::exp(0.5 * la[i]) * noise[i]);
  Var result{g.size()};
  return g.record(std::move(out), {means, log_alpha}, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    const Tensor& mv = gr.value(means);
    const Tensor& lav = gr.value(log_alpha);
    if (gr.requires_grad(means)) {
      Tensor& gm = gr.grad(means);
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += go[i] * (1.0 + std::exp(0.5 * lav[i]) * noise[i]);
    }
    if (gr.requires_grad(log_alpha)) {
      Tensor& gl = gr.grad(log_alpha);
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += go[i] * mv[i] * 0.5 * std::exp(0.5 * lav[i]) * noise[i];
    }
  });
}

Var bce_with_logits_sum(Graph& g, Var logits, const Tensor& target) {
  const Tensor& lv = g.value(logits);
  if (lv.size() != target.size()) throw ShapeError("bce_with_logits_sum: logits/target size");
  double s = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    // max(l, 0) - l t + log(1 + exp(-|l|))
    const double l = lv[i];
    s += std::max(l, 0.0) - l * target[i] + std::log1p(std::exp(-std::abs(l)));
  }
  Var result{g.size()};
  return g.record(Tensor({1}, s), {logits}, [=](Graph& gr) {
    const double go = gr.grad(result)[0];
    const Tensor& l = gr.value(logits);
    Tensor& gl = gr.grad(logits);
    for (std::size_t i = 0; i < l.size(); ++i) gl[i] += go * (stable_sigmoid(l[i]) - target[i]);
  });
}

Var gaussian_kl(Graph& g, Var mean_q, Var logvar_q, Var mean_p, Var logvar_p) {
  const Tensor& mq = g.value(mean_q);
  const Tensor& lq = g.value(logvar_q);
  const Tensor& mp = g.value(mean_p);
  const Tensor& lp = g.value(logvar_p);
  if (mq.size() != lq.size() || mq.size() != mp.size() || mq.size() != lp.size()) {
    throw ShapeError("gaussian_kl: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double d = mq[i] - mp[i];
    s += 0.5 * (lp[i] - lq[i] + (std::exp(lq[i]) + d * d) * std::exp(-lp[i]) - 1.0);
  }
  Var result{g.size()};
  return g.record(Tensor({1}, s), {mean_q, logvar_q, mean_p, logvar_p}, [=](Graph& gr) {
    const double go = gr.grad(result)[0];
    const Tensor& a = gr.value(mean_q);
    const Tensor& la = gr.value(logvar_q);
    const Tensor& b = gr.value(mean_p);
    const Tensor& lb = gr.value(logvar_p);
    const std::size_t n = a.size();
    auto add = [&](Var v, auto&& f) {
      if (!gr.requires_grad(v)) return;
      Tensor& gv = gr.grad(v);
      for (std::size_t i = 0; i < n; ++i) gv[i] += go * f(i);
    };
    add(mean_q, [&](std::size_t i) { return (a[i] - b[i]) * std::exp(-lb[i]); });
    add(mean_p, [&](std::size_t i) { return -(a[i] - b[i]) * std::exp(-lb[i]); });
    add(logvar_q, [&](std::size_t i) { return 0.5 * (std::exp(la[i] - lb[i]) - 1.0); });
    add(logvar_p, [&](std::size_t i) {
      const double d = a[i] - b[i];
      return 0.5 * (1.0 - (std::exp(la[i]) + d * d) * std::exp(-lb[i]));
    });
  });
}

Var dropout_kl(Graph& g, Var log_alpha) {
  const Tensor& la = g.value(log_alpha);
  double s = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) s += dropout_kl_entry(la[i]);
  Var result{g.size()};
  return g.record(Tensor({1}, s), {log_alpha}, [=](Graph& gr) {
    const double go = gr.grad(result)[0];
    const Tensor& v = gr.value(log_alpha);
    Tensor& gl = gr.grad(log_alpha);
    for (std::size_t i = 0; i < v.size(); ++i) gl[i] += go * dropout_kl_entry_derivative(v[i]);
  });
}

Var cross_entropy_mean(Graph& g, Var probability, const Tensor& target, double eps) {
  const Tensor& pv = g.value(probability);
  if (pv.size() != target.size()) throw ShapeError("cross_entropy_mean: size mismatch");
  const double n = static_cast<double>(pv.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = std::clamp(pv[i], eps, 1.0 - eps);
    s -= target[i] * std::log(p) + (1.0 - target[i]) * std::log1p(-p);
  }
  Var result{g.size()};
  return g.record(Tensor({1}, s / n), {probability}, [=](Graph& gr) {
    const double go = gr.grad(result)[0];
    const Tensor& p = gr.value(probability);
    Tensor& gp = gr.grad(probability);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] < eps || p[i] > 1.0 - eps) continue;
      gp[i] += go * (p[i] - target[i]) / (p[i] * (1.0 - p[i])) / n;
    }
  });
}

Var average(Graph& g, std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("average of nothing");
  const Shape shape = g.value(xs[0]).shape();
  Tensor out(shape);
  for (Var x : xs) {
    require_same_shape(g.value(x).shape(), shape, "average");
    const Tensor& v = g.value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (auto& v : out.data()) v *= inv;
  std::vector<Var> inputs(xs.begin(), xs.end());
  Var result{g.size()};
  return g.record(std::move(out), xs, [=](Graph& gr) {
    const Tensor& go = gr.grad(result);
    for (Var x : inputs) {
      if (!gr.requires_grad(x)) continue;
      Tensor& gx = gr.grad(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += inv * go[i];
    }
  });
}

Var weighted_sum(Graph& g, std::span<const std::pair<double, Var>> terms) {
  double s = 0.0;
  std::vector<Var> parents;
  for (const auto& [c, v] : terms) {
    require_scalar(g.value(v), "weighted_sum");
    s += c * g.value(v)[0];
    parents.push_back(v);
  }
  std::vector<std::pair<double, Var>> copy(terms.begin(), terms.end());
  Var result{g.size()};
  return g.record(Tensor({1}, s), parents, [=](Graph& gr) {
    const double go = gr.grad(result)[0];
    for (const auto& [c, v] : copy) {
      if (gr.requires_grad(v)) gr.grad(v)[0] += c * go;
    }
  });
}

}  // namespace ops

}  // namespace calseg
