#include "msic/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace msic {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
Var<T> emit(const char* op, Tape<T>* tape, Tensor<T> out,
            typename Tape<T>::Backward backward) {
  if (tape == nullptr) {
    out.ensure_finite(op);
    return Var<T>::constant(std::move(out));
  }
  return tape->record(op, std::move(out), std::move(backward));
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
  std::vector<std::pair<int, int>> taps;
  bool direct;  // 1x1, stride 1, no padding: columns are the input itself

  std::size_t positions() const { return static_cast<std::size_t>(ho) * wo; }
  std::size_t rows() const { return static_cast<std::size_t>(ci) * taps.size(); }
};

ConvGeometry make_geometry(const Shape& x, const Shape& w, const ConvOptions& opt) {
  if (w.h != w.w) throw ShapeError("conv2d kernel must be square, got " + w.str());
  if (w.c != x.c) {
    throw ShapeError("conv2d input channels " + std::to_string(x.c) +
                     " do not match weight " + w.str());
  }
  if (opt.stride < 1 || opt.pad < 0) throw ShapeError("conv2d invalid stride/pad");
  ConvGeometry g{};
  g.n = x.n;
  g.ci = x.c;
  g.h = x.h;
  g.w = x.w;
  g.co = w.n;
  g.k = w.h;
  g.stride = opt.stride;
  g.pad = opt.pad;
  const int span_h = x.h + 2 * opt.pad - g.k;
  const int span_w = x.w + 2 * opt.pad - g.k;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d kernel larger than padded input " + x.str());
  }
  g.ho = span_h / opt.stride + 1;
  g.wo = span_w / opt.stride + 1;
  if (opt.mask != nullptr && opt.mask->size() != g.k) {
    throw ShapeError("conv2d mask size " + std::to_string(opt.mask->size()) +
                     " does not match kernel " + std::to_string(g.k));
  }
  for (int ky = 0; ky < g.k; ++ky) {
    for (int kx = 0; kx < g.k; ++kx) {
      if (opt.mask == nullptr || opt.mask->active(ky, kx)) g.taps.emplace_back(ky, kx);
    }
  }
  g.direct = g.k == 1 && g.stride == 1 && g.pad == 0 && g.taps.size() == 1;
  return g;
}

template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.positions();
  const int nt = static_cast<int>(g.taps.size());
  for (int c = 0; c < g.ci; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * g.h * g.w;
    for (int t = 0; t < nt; ++t) {
      const auto [ky, kx] = g.taps[t];
      T* dst = cols + (static_cast<std::size_t>(c) * nt + t) * P;
      for (int oy = 0; oy < g.ho; ++oy) {
        const int iy = oy * g.stride - g.pad + ky;
        T* row = dst + static_cast<std::size_t>(oy) * g.wo;
        if (iy < 0 || iy >= g.h) {
          std::fill(row, row + g.wo, T(0));
          continue;
        }
        const T* in = plane + static_cast<std::size_t>(iy) * g.w;
        if (g.stride == 1) {
          const int off = kx - g.pad;
          const int lo = std::max(0, -off);
          const int hi = std::min(g.wo, g.w - off);
          std::fill(row, row + std::max(0, std::min(lo, g.wo)), T(0));
          if (hi > lo) std::copy(in + lo + off, in + hi + off, row + lo);
          if (hi < g.wo) std::fill(row + std::max(hi, 0), row + g.wo, T(0));
        } else {
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            row[ox] = (ix >= 0 && ix < g.w) ? in[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dst) {
  const std::size_t P = g.positions();
  const int nt = static_cast<int>(g.taps.size());
  for (int c = 0; c < g.ci; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * g.h * g.w;
    for (int t = 0; t < nt; ++t) {
      const auto [ky, kx] = g.taps[t];
      const T* src = cols + (static_cast<std::size_t>(c) * nt + t) * P;
      for (int oy = 0; oy < g.ho; ++oy) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.h) continue;
        const T* row = src + static_cast<std::size_t>(oy) * g.wo;
        T* out = plane + static_cast<std::size_t>(iy) * g.w;
        if (g.stride == 1) {
          const int off = kx - g.pad;
          const int lo = std::max(0, -off);
          const int hi = std::min(g.wo, g.w - off);
          for (int ox = lo; ox < hi; ++ox) out[ox + off] += row[ox];
          continue;
        }
        for (int ox = 0; ox < g.wo; ++ox) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix >= 0 && ix < g.w) out[ix] += row[ox];
        }
      }
    }
  }
}

// Active taps of w gathered into a (Co, Ci * taps) matrix.
template <typename T>
RowMat<T> gather_weight(const Tensor<T>& w, const ConvGeometry& g) {
  const int nt = static_cast<int>(g.taps.size());
  RowMat<T> m(g.co, g.ci * nt);
  for (int o = 0; o < g.co; ++o) {
    for (int c = 0; c < g.ci; ++c) {
      for (int t = 0; t < nt; ++t) {
        m(o, c * nt + t) = w.at(o, c, g.taps[t].first, g.taps[t].second);
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  auto dim = [&](int x, int y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(std::string(op) + ": shapes " + a.str() + " and " + b.str() +
                     " are not broadcastable");
  };
  return Shape{dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
}

struct Strides {
  std::size_t n, c, h, w;
};

Strides broadcast_strides(const Shape& s) {
  return Strides{s.n == 1 ? 0 : static_cast<std::size_t>(s.c) * s.h * s.w,
                 s.c == 1 ? 0 : static_cast<std::size_t>(s.h) * s.w,
                 s.h == 1 ? 0 : static_cast<std::size_t>(s.w),
                 s.w == 1 ? std::size_t{0} : std::size_t{1}};
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const Strides sa = broadcast_strides(a);
  const Strides sb = broadcast_strides(b);
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n) {
    for (int c = 0; c < out.c; ++c) {
      for (int h = 0; h < out.h; ++h) {
        const std::size_t ia = n * sa.n + c * sa.c + h * sa.h;
        const std::size_t ib = n * sb.n + c * sb.c + h * sb.h;
        for (int w = 0; w < out.w; ++w, ++o) f(o, ia + w * sa.w, ib + w * sb.w);
      }
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind, const char* op) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  const Shape so = broadcast_shape(sa, sb, op);
  Tensor<T> out(so);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  if (sa == sb) {
    const std::size_t n = out.numel();
    switch (kind) {
      case BinaryKind::kAdd: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinaryKind::kSub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinaryKind::kMul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
  } else {
    for_each_broadcast(so, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      switch (kind) {
        case BinaryKind::kAdd: po[o] = pa[i] + pb[j]; break;
        case BinaryKind::kSub: po[o] = pa[i] - pb[j]; break;
        case BinaryKind::kMul: po[o] = pa[i] * pb[j]; break;
      }
    });
  }
  Tape<T>* tape = active_tape<T>({&a, &b});
  NodePtr<T> an = a.node();
  NodePtr<T> bn = b.node();
  return emit<T>(op, tape, std::move(out), [an, bn, sa, sb, so, kind](const detail::Node<T>& node) {
    const T* g = node.grad.data();
    if (wants_grad(an)) {
      T* ga = an->grad_buffer().data();
      const T* vb = bn->value.data();
      for_each_broadcast(so, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
        ga[i] += kind == BinaryKind::kMul ? g[o] * vb[j] : g[o];
      });
    }
    if (wants_grad(bn)) {
      T* gb = bn->grad_buffer().data();
      const T* va = an->value.data();
      for_each_broadcast(so, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (kind) {
          case BinaryKind::kAdd: gb[j] += g[o]; break;
          case BinaryKind::kSub: gb[j] -= g[o]; break;
          case BinaryKind::kMul: gb[j] += g[o] * va[i]; break;
        }
      });
    }
  });
}

// Elementwise unary op; `derivative(x, y)` is dy/dx given input and output.
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, const char* op, F f, D derivative) {
  const Tensor<T>& in = a.value();
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  Tape<T>* tape = active_tape<T>({&a});
  NodePtr<T> an = a.node();
  return emit<T>(op, tape, std::move(out), [an, derivative](const detail::Node<T>& node) {
    if (!wants_grad(an)) return;
    T* ga = an->grad_buffer().data();
    const T* x = an->value.data();
    const T* y = node.value.data();
    const T* g = node.grad.data();
    for (std::size_t i = 0; i < node.value.numel(); ++i) ga[i] += g[i] * derivative(x[i], y[i]);
  });
}

double upper_tail(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }
double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

// ---------------------------------------------------------------------------

KernelMask::KernelMask(int k, std::span<const double> values) : k_(k) {
  if (k <= 0 || values.size() != static_cast<std::size_t>(k) * k) {
    throw ShapeError("kernel mask needs k*k entries");
  }
  bits_.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != 0.0 && values[i] != 1.0) {
      throw ShapeError("kernel mask entries must be 0 or 1");
    }
    bits_[i] = values[i] != 0.0 ? 1 : 0;
  }
}

KernelMask KernelMask::ones(int k) {
  std::vector<double> v(static_cast<std::size_t>(k) * k, 1.0);
  return KernelMask(k, v);
}

int KernelMask::active_count() const {
  return static_cast<int>(std::count(bits_.begin(), bits_.end(), 1));
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const ConvOptions& options) {
  const ConvGeometry g = make_geometry(x.shape(), w.shape(), options);
  if (bias.defined() && bias.value().numel() != static_cast<std::size_t>(g.co)) {
    throw ShapeError("conv2d bias length does not match output channels");
  }
  const std::size_t P = g.positions();
  const std::size_t K = g.rows();
  Tensor<T> out(Shape{g.n, g.co, g.ho, g.wo});
  const RowMat<T> wm = gather_weight(w.value(), g);
  Buffer<T> cols(g.direct ? 0 : K * P);
  for (int n = 0; n < g.n; ++n) {
    MapMat<T> y(out.plane(n, 0), g.co, static_cast<Eigen::Index>(P));
    const T* xn = x.value().plane(n, 0);
    if (g.direct) {
      y.noalias() = wm * ConstMapMat<T>(xn, g.ci, static_cast<Eigen::Index>(P));
    } else {
      im2col(xn, g, cols.data());
      y.noalias() = wm * ConstMapMat<T>(cols.data(), static_cast<Eigen::Index>(K),
                                        static_cast<Eigen::Index>(P));
    }
    if (bias.defined()) {
      const T* b = bias.value().data();
      for (int o = 0; o < g.co; ++o) y.row(o).array() += b[o];
    }
  }
  Tape<T>* tape = active_tape<T>({&x, &w, &bias});
  NodePtr<T> xn = x.node();
  NodePtr<T> wn = w.node();
  NodePtr<T> bn = bias.node();
  return emit<T>("conv2d", tape, std::move(out), [xn, wn, bn, g](const detail::Node<T>& node) {
    const std::size_t P = g.positions();
    const std::size_t K = g.rows();
    const RowMat<T> wm = gather_weight(wn->value, g);
    RowMat<T> gwm;
    if (wants_grad(wn)) gwm = RowMat<T>::Zero(g.co, static_cast<Eigen::Index>(K));
    Buffer<T> cols(g.direct ? 0 : K * P);
    RowMat<T> gcols;
    for (int n = 0; n < g.n; ++n) {
      ConstMapMat<T> gy(node.grad.plane(n, 0), g.co, static_cast<Eigen::Index>(P));
      const T* xv = xn->value.plane(n, 0);
      if (wants_grad(wn)) {
        if (g.direct) {
          gwm.noalias() += gy * ConstMapMat<T>(xv, g.ci, static_cast<Eigen::Index>(P)).transpose();
        } else {
          im2col(xv, g, cols.data());
          gwm.noalias() += gy * ConstMapMat<T>(cols.data(), static_cast<Eigen::Index>(K),
                                               static_cast<Eigen::Index>(P))
                                    .transpose();
        }
      }
      if (wants_grad(xn)) {
        T* gx = xn->grad_buffer().plane(n, 0);
        if (g.direct) {
          MapMat<T> gxm(gx, g.ci, static_cast<Eigen::Index>(P));
          gxm.noalias() += wm.transpose() * gy;
        } else {
          gcols.noalias() = wm.transpose() * gy;
          col2im(gcols.data(), g, gx);
        }
      }
      if (wants_grad(bn)) {
        T* gb = bn->grad_buffer().data();
        for (int o = 0; o < g.co; ++o) gb[o] += gy.row(o).sum();
      }
    }
    if (wants_grad(wn)) {
      Tensor<T>& gw = wn->grad_buffer();
      const int nt = static_cast<int>(g.taps.size());
      for (int o = 0; o < g.co; ++o) {
        for (int c = 0; c < g.ci; ++c) {
          for (int t = 0; t < nt; ++t) {
            gw.at(o, c, g.taps[t].first, g.taps[t].second) += gwm(o, c * nt + t);
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(a, "scale", [factor](T x) { return x * factor; },
               [factor](T, T) { return factor; });
}
template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return unary(a, "add_scalar", [offset](T x) { return x + offset; },
               [](T, T) { return T(1); });
}
template <typename T>
Var<T> neg(const Var<T>& a) {
  return unary(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(a, "tanh", [](T x) { return std::tanh(x); },
               [](T, T y) { return T(1) - y * y; });
}
template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <typename T>
Var<T> reciprocal(const Var<T>& a) {
  return unary(a, "reciprocal", [](T x) { return T(1) / x; },
               [](T, T y) { return -y * y; });
}
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary(
      a, "clamp", [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}
template <typename T>
Var<T> ste_round(const Var<T>& a) {
  return unary(a, "ste_round", [](T x) { return round_half_away(x); },
               [](T, T) { return T(1); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc));
  NodePtr<T> an = a.node();
  return emit<T>("sum", active_tape<T>({&a}), std::move(out), [an](const detail::Node<T>& node) {
    if (!wants_grad(an)) return;
    const T g = node.grad[0];
    for (T& v : an->grad_buffer().values()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = std::max<std::size_t>(1, a.value().numel());
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(n)));
}

template <typename T>
Var<T> batch_sum(const Var<T>& a) {
  const Shape s = a.shape();
  const std::size_t per = static_cast<std::size_t>(s.c) * s.h * s.w;
  Tensor<T> out(Shape{s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    const T* p = a.value().data() + n * per;
    for (std::size_t i = 0; i < per; ++i) acc += p[i];
    out[n] = static_cast<T>(acc);
  }
  NodePtr<T> an = a.node();
  return emit<T>("batch_sum", active_tape<T>({&a}), std::move(out),
                 [an, per](const detail::Node<T>& node) {
                   if (!wants_grad(an)) return;
                   T* g = an->grad_buffer().data();
                   for (int n = 0; n < node.value.shape().n; ++n) {
                     const T gn = node.grad[n];
                     for (std::size_t i = 0; i < per; ++i) g[n * per + i] += gn;
                   }
                 });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape first = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels mismatch " + first.str() + " vs " + s.str());
    }
    channels += s.c;
  }
  const Shape so{first.n, channels, first.h, first.w};
  Tensor<T> out(so);
  const std::size_t plane = so.plane();
  for (int n = 0; n < so.n; ++n) {
    int offset = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      std::copy_n(p.value().plane(n, 0), plane * pc, out.plane(n, offset));
      offset += pc;
    }
  }
  Tape<T>* tape = nullptr;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    if (p.requires_grad()) {
      if (tape != nullptr && p.tape() != tape) {
        throw std::logic_error("operation mixes values from different tapes");
      }
      tape = p.tape();
    }
  }
  return emit<T>("concat_channels", tape, std::move(out), [nodes, plane](const detail::Node<T>& node) {
    const Shape so = node.value.shape();
    int offset = 0;
    for (const auto& pn : nodes) {
      const int pc = pn->value.shape().c;
      if (wants_grad(pn)) {
        Tensor<T>& g = pn->grad_buffer();
        for (int n = 0; n < so.n; ++n) {
          const T* src = node.grad.plane(n, offset);
          T* dst = g.plane(n, 0);
          for (std::size_t i = 0; i < plane * pc; ++i) dst[i] += src[i];
        }
      }
      offset += pc;
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& a, int begin, int count) {
  const Shape s = a.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ShapeError("slice_channels range out of bounds for " + s.str());
  }
  const Shape so{s.n, count, s.h, s.w};
  Tensor<T> out(so);
  const std::size_t len = so.plane() * count;
  for (int n = 0; n < s.n; ++n) std::copy_n(a.value().plane(n, begin), len, out.plane(n, 0));
  NodePtr<T> an = a.node();
  return emit<T>("slice_channels", active_tape<T>({&a}), std::move(out),
                 [an, begin, len](const detail::Node<T>& node) {
                   if (!wants_grad(an)) return;
                   Tensor<T>& g = an->grad_buffer();
                   for (int n = 0; n < node.value.shape().n; ++n) {
                     const T* src = node.grad.plane(n, 0);
                     T* dst = g.plane(n, begin);
                     for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                   }
                 });
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& a) {
  const Shape s = a.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("space_to_depth needs even spatial extents, got " + s.str());
  }
  Tensor<T> out(Shape{s.n, s.c * 4, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          T* dst = out.plane(n, c * 4 + dy * 2 + dx);
          const T* src = a.plane(n, c);
          for (int y = 0; y < s.h / 2; ++y)
            for (int x = 0; x < s.w / 2; ++x)
              dst[y * (s.w / 2) + x] = src[(2 * y + dy) * s.w + 2 * x + dx];
        }
  return out;
}

template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& a) {
  const Shape s = a.shape();
  if (s.c % 4 != 0) {
    throw ShapeError("depth_to_space needs channels divisible by 4, got " + s.str());
  }
  Tensor<T> out(Shape{s.n, s.c / 4, s.h * 2, s.w * 2});
  const int ow = s.w * 2;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c / 4; ++c)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const T* src = a.plane(n, c * 4 + dy * 2 + dx);
          T* dst = out.plane(n, c);
          for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x)
              dst[(2 * y + dy) * ow + 2 * x + dx] = src[y * s.w + x];
        }
  return out;
}

template <typename T>
Var<T> space_to_depth(const Var<T>& a) {
  NodePtr<T> an = a.node();
  return emit<T>("space_to_depth", active_tape<T>({&a}), space_to_depth(a.value()),
                 [an](const detail::Node<T>& node) {
                   if (wants_grad(an)) an->grad_buffer() += depth_to_space(node.grad);
                 });
}

template <typename T>
Var<T> depth_to_space(const Var<T>& a) {
  NodePtr<T> an = a.node();
  return emit<T>("depth_to_space", active_tape<T>({&a}), depth_to_space(a.value()),
                 [an](const detail::Node<T>& node) {
                   if (wants_grad(an)) an->grad_buffer() += space_to_depth(node.grad);
                 });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  const Shape s = a.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = a.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < s.h * 2; ++y)
        for (int x = 0; x < s.w * 2; ++x) dst[y * s.w * 2 + x] = src[(y / 2) * s.w + x / 2];
    }
  NodePtr<T> an = a.node();
  return emit<T>("upsample_nearest2x", active_tape<T>({&a}), std::move(out),
                 [an, s](const detail::Node<T>& node) {
                   if (!wants_grad(an)) return;
                   Tensor<T>& g = an->grad_buffer();
                   for (int n = 0; n < s.n; ++n)
                     for (int c = 0; c < s.c; ++c) {
                       const T* src = node.grad.plane(n, c);
                       T* dst = g.plane(n, c);
                       for (int y = 0; y < s.h * 2; ++y)
                         for (int x = 0; x < s.w * 2; ++x)
                           dst[(y / 2) * s.w + x / 2] += src[y * s.w * 2 + x];
                     }
                 });
}

template <typename T>
double log_abs_det(const Tensor<T>& w) {
  const Shape s = w.shape();
  if (s.n != s.c || s.h != 1 || s.w != 1) throw ShapeError("expected (C,C,1,1) matrix, got " + s.str());
  const Eigen::MatrixXd m = ConstMapMat<T>(w.data(), s.n, s.c).template cast<double>();
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  double acc = 0.0;
  for (int i = 0; i < s.n; ++i) acc += std::log(std::abs(lu.matrixLU()(i, i)));
  return acc;
}

template <typename T>
Var<T> matrix_inverse(const Var<T>& w) {
  const Shape s = w.shape();
  if (s.n != s.c || s.h != 1 || s.w != 1) throw ShapeError("expected (C,C,1,1) matrix, got " + s.str());
  const RowMat<T> m = ConstMapMat<T>(w.value().data(), s.n, s.c);
  const Eigen::PartialPivLU<RowMat<T>> lu(m);
  double log_det = 0.0;
  int weakest = 0;
  double weakest_pivot = std::numeric_limits<double>::infinity();
  for (int i = 0; i < s.n; ++i) {
    const double pivot = std::abs(static_cast<double>(lu.matrixLU()(i, i)));
    log_det += std::log(pivot);
    if (pivot < weakest_pivot) {
      weakest_pivot = pivot;
      weakest = i;
    }
  }
  if (!(log_det > std::log(1e-6))) {
    std::ostringstream os;
    os << "matrix_inverse: near-singular " << s.n << "x" << s.n
       << " matrix, log|det| = " << log_det << ", weakest pivot " << weakest_pivot
       << " at channel " << weakest;
    throw NumericError(os.str());
  }
  Tensor<T> out(s);
  MapMat<T>(out.data(), s.n, s.c) = lu.inverse();
  NodePtr<T> wn = w.node();
  return emit<T>("matrix_inverse", active_tape<T>({&w}), std::move(out),
                 [wn, s](const detail::Node<T>& node) {
                   if (!wants_grad(wn)) return;
                   const ConstMapMat<T> inv(node.value.data(), s.n, s.c);
                   const ConstMapMat<T> g(node.grad.data(), s.n, s.c);
                   MapMat<T> gw(wn->grad_buffer().data(), s.n, s.c);
                   gw.noalias() -= inv.transpose() * g * inv.transpose();
                 });
}

template <typename T>
Var<T> gaussian_bits(const Var<T>& v, const Var<T>& sigma, double min_prob) {
  if (v.shape() != sigma.shape()) {
    throw ShapeError("gaussian_bits shape mismatch " + v.shape().str() + " vs " +
                     sigma.shape().str());
  }
  const std::size_t n = v.value().numel();
  Tensor<T> out(v.shape());
  // dbits/dv and dbits/dsigma, kept for backward.
  auto dv = std::make_shared<std::vector<T>>(n);
  auto ds = std::make_shared<std::vector<T>>(n);
  const T* pv = v.value().data();
  const T* ps = sigma.value().data();
  constexpr double kInvLn2 = 1.0 / std::numbers::ln2;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(pv[i]);
    const double s = static_cast<double>(ps[i]);
    if (!(s > 0.0)) throw NumericError("gaussian_bits: non-positive sigma");
    const double ax = std::abs(x);
    const double p = upper_tail((ax - 0.5) / s) - upper_tail((ax + 0.5) / s);
    if (p < min_prob) {
      out[i] = static_cast<T>(-std::log2(min_prob));
      (*dv)[i] = T(0);
      (*ds)[i] = T(0);
      continue;
    }
    out[i] = static_cast<T>(-std::log2(p));
    const double hi = (x + 0.5) / s;
    const double lo = (x - 0.5) / s;
    const double dp_dx = (std_normal_pdf(hi) - std_normal_pdf(lo)) / s;
    const double dp_ds = (lo * std_normal_pdf(lo) - hi * std_normal_pdf(hi)) / s;
    (*dv)[i] = static_cast<T>(-kInvLn2 * dp_dx / p);
    (*ds)[i] = static_cast<T>(-kInvLn2 * dp_ds / p);
  }
  NodePtr<T> vn = v.node();
  NodePtr<T> sn = sigma.node();
  return emit<T>("gaussian_bits", active_tape<T>({&v, &sigma}), std::move(out),
                 [vn, sn, dv, ds](const detail::Node<T>& node) {
                   const T* g = node.grad.data();
                   if (wants_grad(vn)) {
                     T* gv = vn->grad_buffer().data();
                     for (std::size_t i = 0; i < dv->size(); ++i) gv[i] += g[i] * (*dv)[i];
                   }
                   if (wants_grad(sn)) {
                     T* gs = sn->grad_buffer().data();
                     for (std::size_t i = 0; i < ds->size(); ++i) gs[i] += g[i] * (*ds)[i];
                   }
                 });
}

template <typename T>
Var<T> gain_lookup(const Var<T>& log_table, std::span<const double> qualities) {
  const Shape s = log_table.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("gain table must be (Q,C,1,1), got " + s.str());
  const int q_max = s.n - 1;
  struct Tap {
    int lo, hi;
    double frac;
  };
  std::vector<Tap> taps;
  for (double q : qualities) {
    if (!(q >= 0.0 && q <= q_max)) {
      throw RangeError("quality " + std::to_string(q) + " outside [0, " +
                       std::to_string(q_max) + "]");
    }
    const int lo = static_cast<int>(std::floor(q));
    const int hi = std::min(q_max, static_cast<int>(std::ceil(q)));
    taps.push_back(Tap{lo, hi, q - lo});
  }
  const int n = static_cast<int>(qualities.size());
  Tensor<T> out(Shape{n, s.c, 1, 1});
  const Tensor<T>& table = log_table.value();
  for (int b = 0; b < n; ++b) {
    const Tap& t = taps[b];
    for (int c = 0; c < s.c; ++c) {
      if (t.frac == 0.0) {
        out.at(b, c, 0, 0) = std::exp(table.at(t.lo, c, 0, 0));
      } else {
        const T l = static_cast<T>(t.frac);
        out.at(b, c, 0, 0) =
            std::exp((T(1) - l) * table.at(t.lo, c, 0, 0) + l * table.at(t.hi, c, 0, 0));
      }
    }
  }
  NodePtr<T> tn = log_table.node();
  return emit<T>("gain_lookup", active_tape<T>({&log_table}), std::move(out),
                 [tn, taps, s](const detail::Node<T>& node) {
                   if (!wants_grad(tn)) return;
                   Tensor<T>& g = tn->grad_buffer();
                   for (std::size_t b = 0; b < taps.size(); ++b) {
                     const Tap& t = taps[b];
                     const T l = static_cast<T>(t.frac);
                     for (int c = 0; c < s.c; ++c) {
                       const T d = node.grad.at(static_cast<int>(b), c, 0, 0) *
                                   node.value.at(static_cast<int>(b), c, 0, 0);
                       g.at(t.lo, c, 0, 0) += d * (T(1) - l);
                       g.at(t.hi, c, 0, 0) += d * l;
                     }
                   }
                 });
}

template <typename T>
T round_half_away(T v) {
  return std::round(v);
}

#define MSIC_INSTANTIATE_OPS(T)                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvOptions&); \
  template Var<T> add(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                              \
  template Var<T> add_scalar(const Var<T>&, T);                                         \
  template Var<T> neg(const Var<T>&);                                                   \
  template Var<T> exp(const Var<T>&);                                                   \
  template Var<T> sigmoid(const Var<T>&);                                               \
  template Var<T> tanh(const Var<T>&);                                                  \
  template Var<T> relu(const Var<T>&);                                                  \
  template Var<T> square(const Var<T>&);                                                \
  template Var<T> reciprocal(const Var<T>&);                                            \
  template Var<T> clamp(const Var<T>&, T, T);                                           \
  template Var<T> ste_round(const Var<T>&);                                             \
  template Var<T> sum(const Var<T>&);                                                   \
  template Var<T> mean(const Var<T>&);                                                  \
  template Var<T> batch_sum(const Var<T>&);                                             \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                          \
  template Var<T> slice_channels(const Var<T>&, int, int);                              \
  template Var<T> space_to_depth(const Var<T>&);                                        \
  template Var<T> depth_to_space(const Var<T>&);                                        \
  template Var<T> upsample_nearest2x(const Var<T>&);                                    \
  template Var<T> matrix_inverse(const Var<T>&);                                        \
  template Var<T> gaussian_bits(const Var<T>&, const Var<T>&, double);                  \
  template Var<T> gain_lookup(const Var<T>&, std::span<const double>);                  \
  template T round_half_away(T);                                                        \
  template Tensor<T> space_to_depth(const Tensor<T>&);                                  \
  template Tensor<T> depth_to_space(const Tensor<T>&);                                  \
  template double log_abs_det(const Tensor<T>&);

MSIC_INSTANTIATE_OPS(float)
MSIC_INSTANTIATE_OPS(double)

}  // namespace msic
