#include "mixsearch/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <memory>
#include <array>
#include <cmath>
#include <cstring>

#include "mixsearch/error.hpp"

namespace mixsearch {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Parameter::Parameter(std::string name, Tensor value_in, ParamGroup group)
    : value(std::move(value_in)), grad(value.shape()), name_(std::move(name)), group_(group) {}

ParamPtr make_param(std::string name, Tensor value, ParamGroup group) {
  return std::make_shared<Parameter>(std::move(name), std::move(value), group);
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(const ParamPtr& param) {
  if (auto it = leaves_.find(param.get()); it != leaves_.end()) return Var{this, it->second};
  Node node;
  // Parameters stay fixed while a tape is alive, so the leaf aliases them.
  node.alias = &param->value;
  const bool train = grad_enabled_ && trainable_[static_cast<int>(param->group())];
  node.requires_grad = train;
  node.param = train ? param.get() : nullptr;
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace(param.get(), id);
  return Var{this, id};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape != this) throw Error(Errc::ShapeMismatch, "input recorded on another tape");
    node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.val().shape());
  return node.grad;
}

void Tape::backward(Var out) {
  if (!(out.shape() == Shape{})) {
    throw Error(Errc::NonScalarOutput, "backward needs a (1,1,1,1) output, got " + out.shape().str());
  }
  if (!nodes_[out.id].requires_grad) return;
  grad(out.id)[0] += 1.0;
  for (int id = out.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) continue;
    if (node.backward) node.backward(*this, node.val(), node.grad);
    if (node.param != nullptr) node.param->grad.add_(node.grad);
  }
}

namespace ad {
namespace {

Tape& tape_of(Var a) { return *a.tape; }

struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> sa{};
  std::array<std::size_t, 4> sb{};
  bool same = false;
};

std::array<std::size_t, 4> strides_for(const Shape& s, const Shape& out) {
  std::array<std::size_t, 4> st{static_cast<std::size_t>(s.c) * s.h * s.w,
                                static_cast<std::size_t>(s.h) * s.w,
                                static_cast<std::size_t>(s.w), 1};
  const std::array<int, 4> ext{s.n, s.c, s.h, s.w};
  const std::array<int, 4> oext{out.n, out.c, out.h, out.w};
  for (int i = 0; i < 4; ++i) {
    if (ext[i] == 1 && oext[i] != 1) st[i] = 0;
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* what) {
  auto dim = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw Error(Errc::ShapeMismatch, std::string(what) + ": cannot broadcast " + a.str() +
                                         " with " + b.str());
  };
  Broadcast bc;
  bc.out = Shape{dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
  bc.sa = strides_for(a, bc.out);
  bc.sb = strides_for(b, bc.out);
  bc.same = (a == b);
  return bc;
}

template <typename Fn>
void for_each_bcast(const Broadcast& bc, Fn&& fn) {
  if (bc.same) {
    const std::size_t total = bc.out.numel();
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  std::size_t i = 0;
  for (int n = 0; n < bc.out.n; ++n)
    for (int c = 0; c < bc.out.c; ++c)
      for (int h = 0; h < bc.out.h; ++h)
        for (int w = 0; w < bc.out.w; ++w, ++i) {
          const std::size_t ia = n * bc.sa[0] + c * bc.sa[1] + h * bc.sa[2] + w * bc.sa[3];
          const std::size_t ib = n * bc.sb[0] + c * bc.sb[1] + h * bc.sb[2] + w * bc.sb[3];
          fn(i, ia, ib);
        }
}

// Binary op with partials da(a, b) and db(a, b) evaluated per element.
template <typename F, typename DA, typename DB>
Var binary(Var a, Var b, const char* what, F f, DA da, DB db) {
  Tape& t = tape_of(a);
  const Broadcast bc = broadcast(a.shape(), b.shape(), what);
  Tensor out(bc.out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for_each_bcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  const int ia_id = a.id, ib_id = b.id;
  return t.record(std::move(out), {a, b}, [bc, ia_id, ib_id, da, db](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(ia_id);
    const Tensor& bv = tp.value(ib_id);
    if (tp.requires_grad(ia_id)) {
      Tensor& ga = tp.grad(ia_id);
      for_each_bcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(av[ia], bv[ib]);
      });
    }
    if (tp.requires_grad(ib_id)) {
      Tensor& gb = tp.grad(ib_id);
      for_each_bcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(av[ia], bv[ib]);
      });
    }
  });
}

void require_even(const Shape& s, const char* what) {
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw Error(Errc::OddSpatialSize, std::string(what) + " on " + s.str());
  }
}

// Column layout: rows (channel, ky, kx), columns (oy, ox) of the conv output.
struct ConvGeom {
  int channels, in_h, in_w, k, stride, pad, dil, out_h, out_w;
};

// Output columns [lo, hi) whose input column ox*stride - pad + off lies inside [0, in_w).
inline void valid_range(int off, int stride, int in_w, int out_w, int& lo, int& hi) {
  lo = off >= 0 ? 0 : std::min(out_w, (-off + stride - 1) / stride);
  const int last = in_w - 1 - off;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  if (hi < lo) hi = lo;
}

void im2col(const double* x, const ConvGeom& g, double* col) {
  const int cols = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        const int off = kx * g.dil - g.pad;
        int lo, hi;
        valid_range(off, g.stride, g.in_w, g.out_w, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * g.in_w + off;
          std::fill(dst, dst + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.out_w, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* x) {
  const int cols = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        const int off = kx * g.dil - g.pad;
        int lo, hi;
        valid_range(off, g.stride, g.in_w, g.out_w, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.in_h) continue;
          const double* src = row + oy * g.out_w;
          double* dst = xc + static_cast<std::size_t>(iy) * g.in_w + off;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// A 1x1, stride 1, unpadded kernel: the input plane already is the column matrix.
inline bool is_pointwise(const ConvGeom& g) {
  return g.k == 1 && g.stride == 1 && g.pad == 0 && g.in_h == g.out_h && g.in_w == g.out_w;
}

void check_bias(const Var* bias, int channels, const char* what) {
  if (bias == nullptr) return;
  if (!(bias->shape() == Shape{1, channels, 1, 1})) {
    throw Error(Errc::ShapeMismatch, std::string(what) + ": bias shape " + bias->shape().str());
  }
}

void add_bias(Tensor& out, const Tensor& b) {
  const Shape& s = out.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (double& v : out.plane(n, c)) v += b[c];
}

void bias_grad(const Tensor& g, Tensor& gb) {
  const Shape& s = g.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (double v : g.plane(n, c)) acc += v;
      gb[c] += acc;
    }
}

// Per-axis linear interpolation table for bilinear x2 (align_corners=false).
struct Interp {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

Interp interp_table(int in) {
  Interp t;
  const int out = 2 * in;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w0.resize(out);
  t.w1.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    const double frac = src - lo;
    t.i0[o] = lo;
    t.i1[o] = hi;
    t.w0[o] = 1.0 - frac;
    t.w1[o] = frac;
  }
  return t;
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const int ia = a.id;
  return tape_of(a).record(std::move(out), {a}, [ia, s](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  const int ia = a.id;
  return tape_of(a).record(std::move(out), {a},
                           [ia](Tape& tp, const Tensor&, const Tensor& g) { tp.grad(ia).add_(g); });
}


Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (y[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax_channels(Var x, const std::vector<bool>& mask) {
  const Shape s = x.shape();
  std::vector<bool> m = mask.empty() ? std::vector<bool>(s.c, true) : mask;
  if (static_cast<int>(m.size()) != s.c) {
    throw Error(Errc::ShapeMismatch, "softmax mask length " + std::to_string(m.size()) +
                                         " vs channels " + std::to_string(s.c));
  }
  if (std::none_of(m.begin(), m.end(), [](bool b) { return b; })) {
    throw Error(Errc::UnsupportedConfig, "softmax over an empty channel mask");
  }
  const Tensor& xv = x.value();
  Tensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -INFINITY;
      for (int c = 0; c < s.c; ++c)
        if (m[c]) mx = std::max(mx, xv[xv.offset(n, c, 0, 0) + p]);
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) {
        if (!m[c]) continue;
        const double e = std::exp(xv[xv.offset(n, c, 0, 0) + p] - mx);
        out[out.offset(n, c, 0, 0) + p] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c)
        if (m[c]) out[out.offset(n, c, 0, 0) + p] /= z;
    }
  }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix, m](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& s = y.shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = y.offset(n, c, 0, 0) + p;
          if (m[c]) dot += y[i] * g[i];
        }
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = y.offset(n, c, 0, 0) + p;
          if (m[c]) gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var log_softmax_channels(Var x) {
  const Shape s = x.shape();
  const Tensor& xv = x.value();
  Tensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -INFINITY;
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, xv[xv.offset(n, c, 0, 0) + p]);
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) z += std::exp(xv[xv.offset(n, c, 0, 0) + p] - mx);
      const double lse = mx + std::log(z);
      for (int c = 0; c < s.c; ++c) {
        const std::size_t i = xv.offset(n, c, 0, 0) + p;
        out[i] = xv[i] - lse;
      }
    }
  }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& s = y.shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        double gsum = 0.0;
        for (int c = 0; c < s.c; ++c) gsum += g[y.offset(n, c, 0, 0) + p];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = y.offset(n, c, 0, 0) + p;
          gx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  const int ix = x.id;
  return tape_of(x).record(Tensor::scalar(acc), {x}, [ix](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const double gv = g[0];
    for (double& v : gx.values()) v += gv;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_spatial(Var x) {
  const Shape s = x.shape();
  Tensor out(Shape{s.n, s.c, 1, 1});
  const Tensor& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (double v : xv.plane(n, c)) acc += v;
      out.at(n, c, 0, 0) = acc;
    }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& s = y.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const double gv = g.at(n, c, 0, 0);
        for (double& v : gx.plane(n, c)) v += gv;
      }
  });
}

Var global_avg_pool(Var x) {
  return scale(sum_spatial(x), 1.0 / static_cast<double>(x.shape().plane()));
}

namespace fault {
namespace {
std::atomic<bool> flip_conv_weight_grad{false};
}
void flip_conv_weight_grad_sign(bool on) { flip_conv_weight_grad = on; }
bool conv_weight_grad_flipped() { return flip_conv_weight_grad; }
}  // namespace fault

Var conv2d(Var x, Var weight, const Var* bias, const ConvOptions& opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int groups = opt.groups;
  if (groups < 1 || xs.c % groups != 0 || ws.n % groups != 0) {
    throw Error(Errc::UnsupportedConfig, "conv2d groups " + std::to_string(groups) +
                                             " must divide channels " + xs.str() + " / " + ws.str());
  }
  if (ws.c * groups != xs.c || ws.h != ws.w) {
    throw Error(Errc::ShapeMismatch, "conv2d input " + xs.str() + " vs weight " + ws.str());
  }
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) {
    throw Error(Errc::UnsupportedConfig, "conv2d stride/dilation/padding");
  }
  check_bias(bias, ws.n, "conv2d");
  const int k = ws.h;
  const int out_h = (xs.h + 2 * opt.padding - opt.dilation * (k - 1) - 1) / opt.stride + 1;
  const int out_w = (xs.w + 2 * opt.padding - opt.dilation * (k - 1) - 1) / opt.stride + 1;
  if (out_h < 1 || out_w < 1) throw Error(Errc::ShapeMismatch, "conv2d output would be empty");

  const int cin_g = xs.c / groups;
  const int cout_g = ws.n / groups;
  const ConvGeom geom{cin_g, xs.h, xs.w, k, opt.stride, opt.padding, opt.dilation, out_h, out_w};
  const int krows = cin_g * k * k;
  const int cols = out_h * out_w;

  Tensor out(Shape{xs.n, ws.n, out_h, out_w});
  const bool direct = is_pointwise(geom);
  std::unique_ptr<double[]> col(direct ? nullptr : new double[static_cast<std::size_t>(krows) * cols]);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const double* xg = xv.data() + xv.offset(n, g * cin_g, 0, 0);
      if (!direct) im2col(xg, geom, col.get());
      ConstMatMap wg(wv.data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
      ConstMatMap cm(direct ? xg : col.get(), krows, cols);
      MatMap om(out.data() + out.offset(n, g * cout_g, 0, 0), cout_g, cols);
      om.noalias() = wg * cm;
    }
  }
  if (bias != nullptr) add_bias(out, bias->value());

  const int ix = x.id, iw = weight.id, ib = bias ? bias->id : -1;
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape_of(x).record(
      std::move(out), inputs,
      [ix, iw, ib, geom, groups, cin_g, cout_g, krows, cols](Tape& tp, const Tensor&, const Tensor& gy) {
        const Tensor& xv = tp.value(ix);
        const Tensor& wv = tp.value(iw);
        const bool need_x = tp.requires_grad(ix);
        const bool need_w = tp.requires_grad(iw);
        const bool direct = is_pointwise(geom);
        std::unique_ptr<double[]> col(direct ? nullptr
                                             : new double[static_cast<std::size_t>(krows) * cols]);
        const Shape& xs = xv.shape();
        for (int n = 0; n < xs.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            ConstMatMap gym(gy.data() + gy.offset(n, g * cout_g, 0, 0), cout_g, cols);
            const std::size_t xoff = xv.offset(n, g * cin_g, 0, 0);
            if (need_w) {
              if (!direct) im2col(xv.data() + xoff, geom, col.get());
              ConstMatMap cm(direct ? xv.data() + xoff : col.get(), krows, cols);
              MatMap gw(tp.grad(iw).data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g,
                        krows);
              if (fault::conv_weight_grad_flipped()) {
                gw.noalias() -= gym * cm.transpose();
              } else {
                gw.noalias() += gym * cm.transpose();
              }
            }
            if (need_x) {
              ConstMatMap wg(wv.data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
              if (direct) {
                MatMap gx(tp.grad(ix).data() + xoff, krows, cols);
                gx.noalias() += wg.transpose() * gym;
              } else {
                MatMap cm(col.get(), krows, cols);
                cm.noalias() = wg.transpose() * gym;
                col2im_add(col.get(), geom, tp.grad(ix).data() + xoff);
              }
            }
          }
        }
        if (ib >= 0 && tp.requires_grad(ib)) bias_grad(gy, tp.grad(ib));
      });
}

Var conv_transpose2d(Var x, Var weight, const Var* bias, const ConvTransposeOptions& opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int groups = opt.groups;
  if (groups < 1 || xs.c % groups != 0) {
    throw Error(Errc::UnsupportedConfig, "conv_transpose2d groups must divide input channels");
  }
  if (ws.n != xs.c || ws.h != ws.w) {
    throw Error(Errc::ShapeMismatch, "conv_transpose2d input " + xs.str() + " vs weight " + ws.str());
  }
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0 || opt.output_padding < 0 ||
      opt.output_padding >= std::max(opt.stride, opt.dilation)) {
    throw Error(Errc::UnsupportedConfig, "conv_transpose2d stride/dilation/padding");
  }
  const int k = ws.h;
  const int cin_g = xs.c / groups;
  const int cout_g = ws.c;
  const int cout = cout_g * groups;
  check_bias(bias, cout, "conv_transpose2d");
  const int out_h = (xs.h - 1) * opt.stride - 2 * opt.padding + opt.dilation * (k - 1) +
                    opt.output_padding + 1;
  const int out_w = (xs.w - 1) * opt.stride - 2 * opt.padding + opt.dilation * (k - 1) +
                    opt.output_padding + 1;
  if (out_h < 1 || out_w < 1) throw Error(Errc::ShapeMismatch, "conv_transpose2d output empty");
  // Geometry of the adjoint convolution: it maps the (out_h, out_w) map back to (h, w).
  const ConvGeom geom{cout_g, out_h, out_w, k, opt.stride, opt.padding, opt.dilation, xs.h, xs.w};
  const int krows = cout_g * k * k;
  const int cols = xs.h * xs.w;

  Tensor out(Shape{xs.n, cout, out_h, out_w});
  std::unique_ptr<double[]> col(new double[static_cast<std::size_t>(krows) * cols]);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  for (int n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      ConstMatMap wg(wv.data() + static_cast<std::size_t>(g) * cin_g * krows, cin_g, krows);
      ConstMatMap xm(xv.data() + xv.offset(n, g * cin_g, 0, 0), cin_g, cols);
      MatMap cm(col.get(), krows, cols);
      cm.noalias() = wg.transpose() * xm;
      col2im_add(col.get(), geom, out.data() + out.offset(n, g * cout_g, 0, 0));
    }
  }
  if (bias != nullptr) add_bias(out, bias->value());

  const int ix = x.id, iw = weight.id, ib = bias ? bias->id : -1;
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape_of(x).record(
      std::move(out), inputs,
      [ix, iw, ib, geom, groups, cin_g, cout_g, krows, cols](Tape& tp, const Tensor&, const Tensor& gy) {
        const Tensor& xv = tp.value(ix);
        const Tensor& wv = tp.value(iw);
        const bool need_x = tp.requires_grad(ix);
        const bool need_w = tp.requires_grad(iw);
        std::unique_ptr<double[]> col(new double[static_cast<std::size_t>(krows) * cols]);
        const Shape& xs = xv.shape();
        for (int n = 0; n < xs.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            im2col(gy.data() + gy.offset(n, g * cout_g, 0, 0), geom, col.get());
            ConstMatMap cm(col.get(), krows, cols);
            if (need_x) {
              ConstMatMap wg(wv.data() + static_cast<std::size_t>(g) * cin_g * krows, cin_g, krows);
              MatMap gx(tp.grad(ix).data() + xv.offset(n, g * cin_g, 0, 0), cin_g, cols);
              gx.noalias() += wg * cm;
            }
            if (need_w) {
              ConstMatMap xm(xv.data() + xv.offset(n, g * cin_g, 0, 0), cin_g, cols);
              MatMap gw(tp.grad(iw).data() + static_cast<std::size_t>(g) * cin_g * krows, cin_g,
                        krows);
              gw.noalias() += xm * cm.transpose();
            }
          }
        }
        if (ib >= 0 && tp.requires_grad(ib)) bias_grad(gy, tp.grad(ib));
      });
}

Var avg_pool2(Var x) {
  const Shape s = x.shape();
  require_even(s, "avg_pool2");
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor out(os);
  const Tensor& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx) {
          out.at(n, c, y, xx) = 0.25 * (xv.at(n, c, 2 * y, 2 * xx) + xv.at(n, c, 2 * y, 2 * xx + 1) +
                                        xv.at(n, c, 2 * y + 1, 2 * xx) +
                                        xv.at(n, c, 2 * y + 1, 2 * xx + 1));
        }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& os = y.shape();
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c)
        for (int yy = 0; yy < os.h; ++yy)
          for (int xx = 0; xx < os.w; ++xx) {
            const double v = 0.25 * g.at(n, c, yy, xx);
            gx.at(n, c, 2 * yy, 2 * xx) += v;
            gx.at(n, c, 2 * yy, 2 * xx + 1) += v;
            gx.at(n, c, 2 * yy + 1, 2 * xx) += v;
            gx.at(n, c, 2 * yy + 1, 2 * xx + 1) += v;
          }
  });
}

Var max_pool2(Var x) {
  const Shape s = x.shape();
  require_even(s, "max_pool2");
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor out(os);
  std::vector<std::size_t> argmax(os.numel());
  const Tensor& xv = x.value();
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx, ++o) {
          std::size_t best = xv.offset(n, c, 2 * y, 2 * xx);
          const std::array<std::size_t, 3> rest{xv.offset(n, c, 2 * y, 2 * xx + 1),
                                                xv.offset(n, c, 2 * y + 1, 2 * xx),
                                                xv.offset(n, c, 2 * y + 1, 2 * xx + 1)};
          for (std::size_t idx : rest) {
            if (xv[idx] > xv[best]) best = idx;  // strict: first max wins
          }
          argmax[o] = best;
          out[o] = xv[best];
        }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x},
                           [ix, argmax = std::move(argmax)](Tape& tp, const Tensor&, const Tensor& g) {
                             Tensor& gx = tp.grad(ix);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                           });
}

Var upsample_bilinear2x(Var x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, 2 * s.h, 2 * s.w};
  const Interp ty = interp_table(s.h);
  const Interp tx = interp_table(s.w);
  Tensor out(os);
  const Tensor& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      auto src = xv.plane(n, c);
      auto dst = out.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        const double* r0 = src.data() + static_cast<std::size_t>(ty.i0[y]) * s.w;
        const double* r1 = src.data() + static_cast<std::size_t>(ty.i1[y]) * s.w;
        for (int xx = 0; xx < os.w; ++xx) {
          const double top = tx.w0[xx] * r0[tx.i0[xx]] + tx.w1[xx] * r0[tx.i1[xx]];
          const double bot = tx.w0[xx] * r1[tx.i0[xx]] + tx.w1[xx] * r1[tx.i1[xx]];
          dst[static_cast<std::size_t>(y) * os.w + xx] = ty.w0[y] * top + ty.w1[y] * bot;
        }
      }
    }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix, ty, tx, s](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& os = y.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        auto src = g.plane(n, c);
        auto dst = gx.plane(n, c);
        for (int yy = 0; yy < os.h; ++yy) {
          double* r0 = dst.data() + static_cast<std::size_t>(ty.i0[yy]) * s.w;
          double* r1 = dst.data() + static_cast<std::size_t>(ty.i1[yy]) * s.w;
          for (int xx = 0; xx < os.w; ++xx) {
            const double gv = src[static_cast<std::size_t>(yy) * os.w + xx];
            const double a = ty.w0[yy] * gv;
            const double b = ty.w1[yy] * gv;
            r0[tx.i0[xx]] += a * tx.w0[xx];
            r0[tx.i1[xx]] += a * tx.w1[xx];
            r1[tx.i0[xx]] += b * tx.w0[xx];
            r1[tx.i1[xx]] += b * tx.w1[xx];
          }
        }
      }
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw Error(Errc::EmptyInput, "concat_channels of nothing");
  const Shape s0 = xs.front().shape();
  int total_c = 0;
  for (const Var& v : xs) {
    const Shape s = v.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw Error(Errc::ShapeMismatch, "concat_channels " + s.str() + " vs " + s0.str());
    }
    total_c += s.c;
  }
  Tensor out(Shape{s0.n, total_c, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  std::vector<int> ids, offsets;
  int c_off = 0;
  for (const Var& v : xs) {
    const Tensor& tv = v.value();
    for (int n = 0; n < s0.n; ++n) {
      std::memcpy(out.data() + out.offset(n, c_off, 0, 0), tv.data() + tv.offset(n, 0, 0, 0),
                  plane * tv.shape().c * sizeof(double));
    }
    ids.push_back(v.id);
    offsets.push_back(c_off);
    c_off += v.shape().c;
  }
  return tape_of(xs.front())
      .record(std::move(out), xs, [ids, offsets](Tape& tp, const Tensor&, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!tp.requires_grad(ids[k])) continue;
          Tensor& gx = tp.grad(ids[k]);
          const Shape& s = gx.shape();
          const std::size_t len = s.plane() * s.c;
          for (int n = 0; n < s.n; ++n) {
            const double* src = g.data() + g.offset(n, offsets[k], 0, 0);
            double* dst = gx.data() + gx.offset(n, 0, 0, 0);
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
      });
}

Var channel_shuffle(Var x, int groups) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw Error(Errc::UnsupportedConfig, "channel_shuffle groups must divide channels");
  }
  const int per = s.c / groups;
  // Output channel k * groups + g takes input channel g * per + k.
  std::vector<int> src(s.c);
  for (int g = 0; g < groups; ++g)
    for (int k = 0; k < per; ++k) src[k * groups + g] = g * per + k;
  Tensor out(s);
  const Tensor& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      auto from = xv.plane(n, src[c]);
      std::copy(from.begin(), from.end(), out.plane(n, c).begin());
    }
  const int ix = x.id;
  return tape_of(x).record(std::move(out), {x}, [ix, src](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& gx = tp.grad(ix);
    const Shape& s = y.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        auto from = g.plane(n, c);
        auto to = gx.plane(n, src[c]);
        for (std::size_t i = 0; i < from.size(); ++i) to[i] += from[i];
      }
  });
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  const Shape s = x.shape();
  if (groups < 1 || s.c % groups != 0) {
    throw Error(Errc::UnsupportedConfig, "group_norm groups " + std::to_string(groups) +
                                             " must divide channels " + std::to_string(s.c));
  }
  const Shape ps{1, s.c, 1, 1};
  if (!(gamma.shape() == ps) || !(beta.shape() == ps)) {
    throw Error(Errc::ShapeMismatch, "group_norm affine shape " + gamma.shape().str());
  }
  const int per = s.c / groups;
  const std::size_t count = static_cast<std::size_t>(per) * s.plane();
  Tensor xhat(s);
  std::vector<double> inv_std(static_cast<std::size_t>(s.n) * groups);
  const Tensor& xv = x.value();
  for (int n = 0; n < s.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = xv.offset(n, g * per, 0, 0);
      double m = 0.0;
      for (std::size_t i = 0; i < count; ++i) m += xv[base + i];
      m /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = xv[base + i] - m;
        var += d * d;
      }
      var /= static_cast<double>(count);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * groups + g] = is;
      for (std::size_t i = 0; i < count; ++i) xhat[base + i] = (xv[base + i] - m) * is;
    }
  }
  Tensor out(s);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      auto src = xhat.plane(n, c);
      auto dst = out.plane(n, c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = gv[c] * src[i] + bv[c];
    }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, groups, per, count, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& tp, const Tensor&, const Tensor& gy) {
        const Shape& s = gy.shape();
        const Tensor& gv = tp.value(ig);
        if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
          const bool need_g = tp.requires_grad(ig);
          const bool need_b = tp.requires_grad(ib);
          for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
              auto g = gy.plane(n, c);
              auto xh = xhat.plane(n, c);
              double dg = 0.0, db = 0.0;
              for (std::size_t i = 0; i < g.size(); ++i) {
                dg += g[i] * xh[i];
                db += g[i];
              }
              if (need_g) tp.grad(ig)[c] += dg;
              if (need_b) tp.grad(ib)[c] += db;
            }
        }
        if (!tp.requires_grad(ix)) return;
        Tensor& gx = tp.grad(ix);
        const std::size_t plane = s.plane();
        for (int n = 0; n < s.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            const std::size_t base = gy.offset(n, g * per, 0, 0);
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t i = 0; i < count; ++i) {
              const int c = g * per + static_cast<int>(i / plane);
              const double d = gy[base + i] * gv[c];
              mean_d += d;
              mean_dx += d * xhat[base + i];
            }
            mean_d /= static_cast<double>(count);
            mean_dx /= static_cast<double>(count);
            const double is = inv_std[static_cast<std::size_t>(n) * groups + g];
            for (std::size_t i = 0; i < count; ++i) {
              const int c = g * per + static_cast<int>(i / plane);
              const double d = gy[base + i] * gv[c];
              gx[base + i] += is * (d - mean_d - xhat[base + i] * mean_dx);
            }
          }
        }
      });
}

Var weighted_sum(std::span<const Var> xs, Var weights) {
  if (xs.empty()) throw Error(Errc::EmptyInput, "weighted_sum of nothing");
  const Shape s = xs.front().shape();
  const int k = static_cast<int>(xs.size());
  if (!(weights.shape() == Shape{1, k, 1, 1})) {
    throw Error(Errc::ShapeMismatch, "weighted_sum weights " + weights.shape().str() + " for " +
                                         std::to_string(k) + " terms");
  }
  Tensor out(s);
  const Tensor& wv = weights.value();
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (int i = 0; i < k; ++i) {
    const Tensor& xv = xs[i].value();
    if (!(xv.shape() == s)) {
      throw Error(Errc::ShapeMismatch, "weighted_sum term " + xv.shape().str() + " vs " + s.str());
    }
    const double wi = wv[i];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += wi * xv[j];
    ids.push_back(xs[i].id);
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  inputs.push_back(weights);
  const int iw = weights.id;
  return tape_of(weights).record(std::move(out), inputs, [ids, iw](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& wv = tp.value(iw);
    const bool need_w = tp.requires_grad(iw);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.requires_grad(ids[i])) {
        Tensor& gx = tp.grad(ids[i]);
        const double wi = wv[i];
        for (std::size_t j = 0; j < g.size(); ++j) gx[j] += wi * g[j];
      }
      if (need_w) {
        const Tensor& xv = tp.value(ids[i]);
        double acc = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) acc += g[j] * xv[j];
        tp.grad(iw)[i] += acc;
      }
    }
  });
}

}  // namespace ad

namespace {

double evaluate_scalar(const Tensor& t) {
  const double v = t.item();
  if (!std::isfinite(v)) throw Error(Errc::NonFinite, "function returned a non-finite value");
  return v;
}

}  // namespace

double finite_diff_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& input, double step) {
  auto param = make_param("fd_input", input);
  return finite_diff_check_param([&](Tape& t) { return fn(t, t.leaf(param)); }, *param, step);
}

double finite_diff_check_param(const std::function<Var(Tape&)>& fn, Parameter& param, double step) {
  if (!(step > 0.0)) throw Error(Errc::InvalidHyperparameter, "finite-difference step must be > 0");
  const Tensor saved_grad = param.grad;
  param.zero_grad();
  {
    Tape tape;
    Var out = fn(tape);
    evaluate_scalar(out.value());
    tape.backward(out);
  }
  const Tensor analytic = param.grad;
  param.grad = saved_grad;

  double worst = 0.0;
  for (std::size_t i = 0; i < param.value.size(); ++i) {
    const double orig = param.value[i];
    param.value[i] = orig + step;
    double fp = 0.0, fm = 0.0;
    {
      Tape tape;
      tape.set_grad_enabled(false);
      fp = evaluate_scalar(fn(tape).value());
    }
    param.value[i] = orig - step;
    {
      Tape tape;
      tape.set_grad_enabled(false);
      fm = evaluate_scalar(fn(tape).value());
    }
    param.value[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mixsearch
