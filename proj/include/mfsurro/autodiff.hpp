#pragma once

// Reverse-mode automatic differentiation over 4D tensors.
//
// A Tape records every operation in execution order. backward() walks the
// record in reverse, so a node's gradient is complete before it is pushed to
// its parents. Parameters enter the tape by reference and accumulate their
// gradient directly into Parameter::grad.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mfsurro/error.hpp"
#include "mfsurro/tensor.hpp"

namespace mfsurro {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> v) { return push(std::move(v), false); }
  Var input(Tensor<T> v, bool requires_grad = true) { return push(std::move(v), requires_grad); }

  Var param(Parameter<T>& p) {
    if (!(p.grad.shape == p.value.shape)) p.grad = Tensor<T>(p.value.shape);
    Node node;
    node.external = &p.value;
    node.external_grad = &p.grad;
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return {nodes_.size() - 1};
  }

  /// Records an operation output. `fn` runs during backward with the
  /// accumulated output gradient when any parent requires a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, Backward fn) {
    if (checked_ && !value.all_finite())
      throw AutodiffError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    Var v = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(fn);
    return v;
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient accumulated for `v`, or nullptr when none was produced.
  const Tensor<T>* grad(Var v) const {
    const Node& n = node(v);
    if (n.external_grad) return n.external_grad;
    return n.has_grad ? &n.grad : nullptr;
  }

  /// Accumulator for `v`, allocated zero on first use; nullptr when `v`
  /// does not require a gradient.
  Tensor<T>* grad_sink(Var v) {
    Node& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.external_grad) return n.external_grad;
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(v).shape);
      n.has_grad = true;
    }
    return &n.grad;
  }

  void backward(Var loss) {
    if (backward_done_) throw AutodiffError("backward called twice without reset");
    if (value(loss).size() != 1) throw AutodiffError("backward needs a scalar loss");
    backward_done_ = true;
    if (!node(loss).requires_grad) return;
    Tensor<T>* seed = grad_sink(loss);
    seed->data[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad) continue;
      n.backward(*this, n.grad);
      if (checked_ && !n.grad.all_finite())
        throw AutodiffError("non-finite gradient at tape node " + std::to_string(i));
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
    pattern_ = 0;
  }

  std::size_t size() const { return nodes_.size(); }

  /// NaN/Inf detection on every recorded value and gradient.
  void set_checked(bool on) { checked_ = on; }

  // Piecewise-linear ops (ReLU masks, pooling argmax) fold their branch
  // pattern into this hash when tracking is on; grad_check uses it to detect
  // perturbations that cross a kink or a tie.
  void set_pattern_tracking(bool on) { track_pattern_ = on; }
  bool pattern_tracking() const { return track_pattern_; }
  void mix_pattern(std::uint64_t h) {
    pattern_ ^= h + 0x9E3779B97F4A7C15ull + (pattern_ << 6) + (pattern_ >> 2);
  }
  std::uint64_t pattern() const { return pattern_; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* external_grad = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw AutodiffError("variable does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw AutodiffError("variable does not belong to this tape");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
  bool checked_ = false;
  bool track_pattern_ = false;
  std::uint64_t pattern_ = 0;
};

namespace detail {

inline std::uint64_t hash_bits(const std::vector<std::uint8_t>& bits) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t b : bits) h = (h ^ b) * 1099511628211ull;
  return h;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[4];
  return buffers[slot];
}

struct ConvGeometry {
  int c, h, w, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(c) * kh * kw; }
  std::size_t plane_out() const { return static_cast<std::size_t>(ho) * wo; }
};

// cols[(ci*kh + ki)*kw + kj][col0 + oh*wo + ow] = x[ci][oh*s - p + ki][ow*s - p + kj]
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols, std::size_t ld, std::size_t col0) {
  for (int ci = 0; ci < g.c; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* row = cols + (static_cast<std::size_t>(ci * g.kh + ki) * g.kw + kj) * ld + col0;
        for (int oh = 0; oh < g.ho; ++oh) {
          T* dst = row + static_cast<std::size_t>(oh) * g.wo;
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(ih) * g.w;
          if (g.stride == 1) {
            const int lo = std::max(0, g.pad - kj);
            const int hi = std::min(g.wo, g.w + g.pad - kj);
            std::fill(dst, dst + std::max(lo, 0), T(0));
            if (hi > lo) std::copy(src + lo - g.pad + kj, src + hi - g.pad + kj, dst + lo);
            if (hi < g.wo) std::fill(dst + std::max(hi, lo), dst + g.wo, T(0));
          } else {
            for (int ow = 0; ow < g.wo; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t ld, std::size_t col0, T* dx) {
  for (int ci = 0; ci < g.c; ++ci) {
    T* xc = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(ci * g.kh + ki) * g.kw + kj) * ld + col0;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oh) * g.wo;
          T* dst = xc + static_cast<std::size_t>(ih) * g.w;
          if (g.stride == 1) {
            const int lo = std::max(0, g.pad - kj);
            const int hi = std::min(g.wo, g.w + g.pad - kj);
            for (int ow = lo; ow < hi; ++ow) dst[ow - g.pad + kj] += src[ow];
          } else {
            for (int ow = 0; ow < g.wo; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

// Batch items per GEMM so the column buffer stays under ~8M entries.
inline int conv_group(const ConvGeometry& g, int batch) {
  const std::size_t per_item = g.rows() * g.plane_out();
  const std::size_t cap = std::size_t{1} << 23;
  return static_cast<int>(std::clamp<std::size_t>(cap / std::max<std::size_t>(per_item, 1), 1,
                                                  static_cast<std::size_t>(batch)));
}

}  // namespace detail

// --- operators -------------------------------------------------------------------

/// Cross-correlation with zero padding plus per-output-channel bias.
/// w: (out, in, kh, kw), b: (1, out, 1, 1).
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, int stride = 1, int padding = 0) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& W = tape.value(w);
  const Tensor<T>& B = tape.value(b);
  const Shape xs = X.shape, ws = W.shape;
  if (xs.c != ws.c) throw ShapeError("conv2d channel mismatch: input " + to_string(xs) +
                                     " kernel " + to_string(ws));
  if (ws.h % 2 == 0 || ws.w % 2 == 0) throw ShapeError("conv2d needs odd kernel sizes");
  if (static_cast<int>(B.size()) != ws.n) throw ShapeError("conv2d bias size mismatch");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d stride/padding invalid");
  detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding,
                         (xs.h + 2 * padding - ws.h) / stride + 1,
                         (xs.w + 2 * padding - ws.w) / stride + 1};
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d output would be empty");
  const int cout = ws.n;
  const std::size_t K = g.rows(), P = g.plane_out();
  Tensor<T> out({xs.n, cout, g.ho, g.wo});
  using Map = Eigen::Map<detail::RowMat<T>>;
  using CMap = Eigen::Map<const detail::RowMat<T>>;
  CMap Wm(W.data.data(), cout, static_cast<Eigen::Index>(K));
  const int group = detail::conv_group(g, xs.n);
  auto& cols = detail::scratch<T>(0);
  auto& tmp = detail::scratch<T>(1);
  for (int n0 = 0; n0 < xs.n; n0 += group) {
    const int gn = std::min(group, xs.n - n0);
    const std::size_t ncols = P * gn;
    cols.resize(K * ncols);
    for (int i = 0; i < gn; ++i) detail::im2col(X.plane(n0 + i, 0), g, cols.data(), ncols, P * i);
    CMap C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ncols));
    if (gn == 1) {
      Map O(out.plane(n0, 0), cout, static_cast<Eigen::Index>(P));
      O.noalias() = Wm * C;
    } else {
      tmp.resize(static_cast<std::size_t>(cout) * ncols);
      Map O(tmp.data(), cout, static_cast<Eigen::Index>(ncols));
      O.noalias() = Wm * C;
      for (int i = 0; i < gn; ++i)
        for (int co = 0; co < cout; ++co)
          std::copy_n(tmp.data() + co * ncols + P * i, P, out.plane(n0 + i, co));
    }
  }
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < cout; ++co) {
      T* o = out.plane(n, co);
      const T bias = B.data[co];
      for (std::size_t p = 0; p < P; ++p) o[p] += bias;
    }

  return tape.record(std::move(out), {x, w, b}, [x, w, b, g, cout](Tape<T>& t, const Tensor<T>& dy) {
    const Tensor<T>& X = t.value(x);
    const Tensor<T>& W = t.value(w);
    Tensor<T>* dx = t.grad_sink(x);
    Tensor<T>* dw = t.grad_sink(w);
    Tensor<T>* db = t.grad_sink(b);
    const int batch = X.shape.n;
    const std::size_t K = g.rows(), P = g.plane_out();
    if (db) {
      for (int n = 0; n < batch; ++n)
        for (int co = 0; co < cout; ++co) {
          const T* d = dy.plane(n, co);
          T s = T(0);
          for (std::size_t p = 0; p < P; ++p) s += d[p];
          db->data[co] += s;
        }
    }
    if (!dx && !dw) return;
    using Map = Eigen::Map<detail::RowMat<T>>;
    using CMap = Eigen::Map<const detail::RowMat<T>>;
    CMap Wm(W.data.data(), cout, static_cast<Eigen::Index>(K));
    const int group = detail::conv_group(g, batch);
    auto& cols = detail::scratch<T>(0);
    auto& tmp = detail::scratch<T>(1);
    auto& dcols = detail::scratch<T>(2);
    for (int n0 = 0; n0 < batch; n0 += group) {
      const int gn = std::min(group, batch - n0);
      const std::size_t ncols = P * gn;
      const T* dyg;
      if (gn == 1) {
        dyg = dy.plane(n0, 0);
      } else {
        tmp.resize(static_cast<std::size_t>(cout) * ncols);
        for (int i = 0; i < gn; ++i)
          for (int co = 0; co < cout; ++co)
            std::copy_n(dy.plane(n0 + i, co), P, tmp.data() + co * ncols + P * i);
        dyg = tmp.data();
      }
      CMap DY(dyg, cout, static_cast<Eigen::Index>(ncols));
      if (dw) {
        cols.resize(K * ncols);
        for (int i = 0; i < gn; ++i)
          detail::im2col(X.plane(n0 + i, 0), g, cols.data(), ncols, P * i);
        CMap C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ncols));
        Map DW(dw->data.data(), cout, static_cast<Eigen::Index>(K));
        DW.noalias() += DY * C.transpose();
      }
      if (dx) {
        dcols.resize(K * ncols);
        Map DC(dcols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(ncols));
        DC.noalias() = Wm.transpose() * DY;
        for (int i = 0; i < gn; ++i)
          detail::col2im(dcols.data(), g, ncols, P * i, dx->plane(n0 + i, 0));
      }
    }
  });
}

enum class NormMode { train, eval };

template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(int channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  void reset() {
    std::fill(running_mean.begin(), running_mean.end(), T(0));
    std::fill(running_var.begin(), running_var.end(), T(1));
  }
};

/// Per-channel normalization. Train mode uses batch statistics (biased
/// variance) and updates the running estimates with the unbiased variance;
/// eval mode uses the running estimates.
template <class T>
Var batchnorm2d(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormState<T>& state,
                NormMode mode, double eps = 1e-5, double momentum = 0.1) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  if (s.n == 0) throw ShapeError("batchnorm2d on an empty batch");
  const Tensor<T>& G = tape.value(gamma);
  const Tensor<T>& Bt = tape.value(beta);
  if (static_cast<int>(G.size()) != s.c || static_cast<int>(Bt.size()) != s.c)
    throw ShapeError("batchnorm2d affine parameters do not match channels");
  if (static_cast<int>(state.running_mean.size()) != s.c) state = BatchNormState<T>(s.c);
  const std::size_t P = s.plane();
  const double count = static_cast<double>(s.n) * P;

  Tensor<T> out(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    double mean, var;
    if (mode == NormMode::train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = X.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) sum += p[i];
      }
      mean = sum / count;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = X.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      state.running_mean[c] =
          static_cast<T>((1.0 - momentum) * state.running_mean[c] + momentum * mean);
      state.running_var[c] =
          static_cast<T>((1.0 - momentum) * state.running_var[c] + momentum * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<T>(is);
    const T m = static_cast<T>(mean), ist = static_cast<T>(is);
    const T gm = G.data[c], bt = Bt.data[c];
    for (int n = 0; n < s.n; ++n) {
      const T* p = X.plane(n, c);
      T* xh = xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) {
        xh[i] = (p[i] - m) * ist;
        o[i] = gm * xh[i] + bt;
      }
    }
  }

  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, const Tensor<T>& dy) {
        const Shape s = dy.shape;
        const std::size_t P = s.plane();
        const double count = static_cast<double>(s.n) * P;
        const Tensor<T>& G = t.value(gamma);
        Tensor<T>* dx = t.grad_sink(x);
        Tensor<T>* dg = t.grad_sink(gamma);
        Tensor<T>* dbt = t.grad_sink(beta);
        for (int c = 0; c < s.c; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int n = 0; n < s.n; ++n) {
            const T* d = dy.plane(n, c);
            const T* xh = xhat.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
              sum_dy += d[i];
              sum_dy_xh += static_cast<double>(d[i]) * xh[i];
            }
          }
          if (dg) dg->data[c] += static_cast<T>(sum_dy_xh);
          if (dbt) dbt->data[c] += static_cast<T>(sum_dy);
          if (!dx) continue;
          const T k = G.data[c] * inv_std[c];
          if (mode == NormMode::train) {
            const T mean_dy = static_cast<T>(sum_dy / count);
            const T mean_dy_xh = static_cast<T>(sum_dy_xh / count);
            for (int n = 0; n < s.n; ++n) {
              const T* d = dy.plane(n, c);
              const T* xh = xhat.plane(n, c);
              T* g = dx->plane(n, c);
              for (std::size_t i = 0; i < P; ++i) g[i] += k * (d[i] - mean_dy - xh[i] * mean_dy_xh);
            }
          } else {
            for (int n = 0; n < s.n; ++n) {
              const T* d = dy.plane(n, c);
              T* g = dx->plane(n, c);
              for (std::size_t i = 0; i < P; ++i) g[i] += k * d[i];
            }
          }
        }
      });
}

/// max(0, x); the derivative at exactly 0 is taken as 0.
template <class T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> out(X.shape);
  for (std::size_t i = 0; i < X.size(); ++i) out.data[i] = X.data[i] > T(0) ? X.data[i] : T(0);
  if (tape.pattern_tracking()) {
    std::vector<std::uint8_t> mask(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) mask[i] = X.data[i] > T(0);
    tape.mix_pattern(detail::hash_bits(mask));
  }
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& dy) {
    const Tensor<T>& X = t.value(x);
    Tensor<T>* dx = t.grad_sink(x);
    for (std::size_t i = 0; i < X.size(); ++i) dx->data[i] += X.data[i] > T(0) ? dy.data[i] : T(0);
  });
}

/// 2x2 max pooling, stride 2. Ties go to the first cell in row-major order.
template <class T>
Var maxpool2(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  if (s.h % 2 || s.w % 2) throw ShapeError("maxpool2 needs even spatial dimensions");
  Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
  std::vector<std::uint8_t> arg(out.size());
  std::size_t k = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = X.plane(n, c);
      for (int oh = 0; oh < s.h / 2; ++oh)
        for (int ow = 0; ow < s.w / 2; ++ow, ++k) {
          const T* a = p + static_cast<std::size_t>(2 * oh) * s.w + 2 * ow;
          const T v[4] = {a[0], a[1], a[s.w], a[s.w + 1]};
          std::uint8_t best = 0;
          for (std::uint8_t j = 1; j < 4; ++j)
            if (v[j] > v[best]) best = j;
          arg[k] = best;
          out.data[k] = v[best];
        }
    }
  if (tape.pattern_tracking()) {
    // a near-tie is a kink too: record which windows have competing maxima
    tape.mix_pattern(detail::hash_bits(arg));
  }
  return tape.record(std::move(out), {x}, [x, s, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* dx = t.grad_sink(x);
    std::size_t k = 0;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        T* g = dx->plane(n, c);
        for (int oh = 0; oh < s.h / 2; ++oh)
          for (int ow = 0; ow < s.w / 2; ++ow, ++k) {
            const int j = arg[k];
            g[static_cast<std::size_t>(2 * oh + j / 2) * s.w + 2 * ow + j % 2] += dy.data[k];
          }
      }
  });
}

template <class T>
Var avgpool2(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  if (s.h % 2 || s.w % 2) throw ShapeError("avgpool2 needs even spatial dimensions");
  Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oh = 0; oh < s.h / 2; ++oh)
        for (int ow = 0; ow < s.w / 2; ++ow)
          out.at(n, c, oh, ow) = T(0.25) * (X.at(n, c, 2 * oh, 2 * ow) + X.at(n, c, 2 * oh, 2 * ow + 1) +
                                            X.at(n, c, 2 * oh + 1, 2 * ow) +
                                            X.at(n, c, 2 * oh + 1, 2 * ow + 1));
  return tape.record(std::move(out), {x}, [x, s](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* dx = t.grad_sink(x);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int oh = 0; oh < s.h / 2; ++oh)
          for (int ow = 0; ow < s.w / 2; ++ow) {
            const T g = T(0.25) * dy.at(n, c, oh, ow);
            dx->at(n, c, 2 * oh, 2 * ow) += g;
            dx->at(n, c, 2 * oh, 2 * ow + 1) += g;
            dx->at(n, c, 2 * oh + 1, 2 * ow) += g;
            dx->at(n, c, 2 * oh + 1, 2 * ow + 1) += g;
          }
  });
}

/// Nearest-neighbor x2: every cell becomes a 2x2 block.
template <class T>
Var upsample_nearest2(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  Tensor<T> out({s.n, s.c, 2 * s.h, 2 * s.w});
  const int W2 = 2 * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = X.plane(n, c);
      T* o = out.plane(n, c);
      for (int h = 0; h < s.h; ++h) {
        T* r0 = o + static_cast<std::size_t>(2 * h) * W2;
        for (int w = 0; w < s.w; ++w) r0[2 * w] = r0[2 * w + 1] = p[static_cast<std::size_t>(h) * s.w + w];
        std::copy_n(r0, W2, r0 + W2);
      }
    }
  return tape.record(std::move(out), {x}, [x, s](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* dx = t.grad_sink(x);
    const int W2 = 2 * s.w;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* d = dy.plane(n, c);
        T* g = dx->plane(n, c);
        for (int h = 0; h < s.h; ++h) {
          const T* r0 = d + static_cast<std::size_t>(2 * h) * W2;
          const T* r1 = r0 + W2;
          for (int w = 0; w < s.w; ++w)
            g[static_cast<std::size_t>(h) * s.w + w] +=
                r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
        }
      }
  });
}

/// Channel-axis concatenation; `b` may have zero channels.
template <class T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  const Shape sa = A.shape, sb = B.shape;
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels shape mismatch " + to_string(sa) + " vs " + to_string(sb));
  Tensor<T> out({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t P = sa.plane();
  for (int n = 0; n < sa.n; ++n) {
    if (sa.c) std::copy_n(A.plane(n, 0), P * sa.c, out.plane(n, 0));
    if (sb.c) std::copy_n(B.plane(n, 0), P * sb.c, out.plane(n, sa.c));
  }
  return tape.record(std::move(out), {a, b}, [a, b, sa, sb](Tape<T>& t, const Tensor<T>& dy) {
    const std::size_t P = sa.plane();
    if (Tensor<T>* da = t.grad_sink(a))
      for (int n = 0; n < sa.n; ++n) {
        const T* d = dy.plane(n, 0);
        T* g = da->plane(n, 0);
        for (std::size_t i = 0; i < P * sa.c; ++i) g[i] += d[i];
      }
    if (Tensor<T>* db = t.grad_sink(b))
      for (int n = 0; n < sb.n; ++n) {
        const T* d = dy.plane(n, sa.c);
        T* g = db->plane(n, 0);
        for (std::size_t i = 0; i < P * sb.c; ++i) g[i] += d[i];
      }
  });
}

template <class T>
Var pad2d(Tape<T>& tape, Var x, int top, int bottom, int left, int right) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d needs non-negative padding");
  const Shape os{s.n, s.c, s.h + top + bottom, s.w + left + right};
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        std::copy_n(X.plane(n, c) + static_cast<std::size_t>(h) * s.w, s.w,
                    out.plane(n, c) + static_cast<std::size_t>(h + top) * os.w + left);
  return tape.record(std::move(out), {x}, [x, s, os, top, left](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* dx = t.grad_sink(x);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < s.h; ++h) {
          const T* d = dy.plane(n, c) + static_cast<std::size_t>(h + top) * os.w + left;
          T* g = dx->plane(n, c) + static_cast<std::size_t>(h) * s.w;
          for (int w = 0; w < s.w; ++w) g[w] += d[w];
        }
  });
}

/// Window [top, top+h) x [left, left+w) of every plane.
template <class T>
Var crop2d(Tape<T>& tape, Var x, int top, int left, int h, int w) {
  const Tensor<T>& X = tape.value(x);
  const Shape s = X.shape;
  if (top < 0 || left < 0 || top + h > s.h || left + w > s.w || h <= 0 || w <= 0)
    throw ShapeError("crop2d window out of range");
  Tensor<T> out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int r = 0; r < h; ++r)
        std::copy_n(X.plane(n, c) + static_cast<std::size_t>(r + top) * s.w + left, w,
                    out.plane(n, c) + static_cast<std::size_t>(r) * w);
  return tape.record(std::move(out), {x}, [x, s, top, left, h, w](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* dx = t.grad_sink(x);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int r = 0; r < h; ++r) {
          const T* d = dy.plane(n, c) + static_cast<std::size_t>(r) * w;
          T* g = dx->plane(n, c) + static_cast<std::size_t>(r + top) * s.w + left;
          for (int k = 0; k < w; ++k) g[k] += d[k];
        }
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  if (!(A.shape == B.shape)) throw ShapeError("add shape mismatch");
  Tensor<T> out(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] + B.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& dy) {
    for (Var v : {a, b})
      if (Tensor<T>* g = t.grad_sink(v))
        for (std::size_t i = 0; i < dy.size(); ++i) g->data[i] += dy.data[i];
  });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  if (!(A.shape == B.shape)) throw ShapeError("mul shape mismatch");
  Tensor<T> out(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] * B.data[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& dy) {
    const Tensor<T>& A = t.value(a);
    const Tensor<T>& B = t.value(b);
    if (Tensor<T>* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < dy.size(); ++i) ga->data[i] += dy.data[i] * B.data[i];
    if (Tensor<T>* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < dy.size(); ++i) gb->data[i] += dy.data[i] * A.data[i];
  });
}

/// scale * x + shift
template <class T>
Var affine(Tape<T>& tape, Var x, T scale, T shift) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> out(X.shape);
  for (std::size_t i = 0; i < X.size(); ++i) out.data[i] = scale * X.data[i] + shift;
  return tape.record(std::move(out), {x}, [x, scale](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* g = t.grad_sink(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g->data[i] += scale * dy.data[i];
  });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  double s = 0.0;
  for (T v : X.data) s += v;
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(s));
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* g = t.grad_sink(x);
    const T d = dy.data[0];
    for (T& v : g->data) v += d;
  });
}

/// sum_i weights_i * x_i with constant weights.
template <class T>
Var weighted_sum(Tape<T>& tape, Var x, Tensor<T> weights) {
  const Tensor<T>& X = tape.value(x);
  if (!(weights.shape == X.shape)) throw ShapeError("weighted_sum weight shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += static_cast<double>(weights.data[i]) * X.data[i];
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(s));
  return tape.record(std::move(out), {x}, [x, weights = std::move(weights)](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* g = t.grad_sink(x);
    const T d = dy.data[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += d * weights.data[i];
  });
}

/// mean |pred - target| with `target` held constant. The subgradient at
/// exact equality is 0.
template <class T>
Var mean_abs_error(Tape<T>& tape, Var pred, const Tensor<T>& target) {
  const Tensor<T>& P = tape.value(pred);
  if (!(P.shape == target.shape))
    throw ShapeError("mean_abs_error shape mismatch " + to_string(P.shape) + " vs " +
                     to_string(target.shape));
  if (P.size() == 0) throw ShapeError("mean_abs_error on an empty tensor");
  double s = 0.0;
  std::vector<std::int8_t> sign(P.size());
  for (std::size_t i = 0; i < P.size(); ++i) {
    const T d = P.data[i] - target.data[i];
    s += std::abs(static_cast<double>(d));
    sign[i] = static_cast<std::int8_t>((d > T(0)) - (d < T(0)));
  }
  const std::size_t count = P.size();
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(s / count));
  return tape.record(std::move(out), {pred}, [pred, count, sign = std::move(sign)](Tape<T>& t, const Tensor<T>& dy) {
    Tensor<T>* g = t.grad_sink(pred);
    const T k = dy.data[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) g->data[i] += k * sign[i];
  });
}

// --- gradient checking -------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // perturbation crossed a ReLU kink or pooling tie
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace detail {

// `eval()` evaluates the function at the current contents of `point` on a
// fresh pattern-tracking tape and returns (value, branch pattern).
template <class Eval>
GradCheckResult compare_central(Eval&& eval, std::vector<double>& point,
                                const std::vector<double>& analytic, double eps,
                                const std::vector<std::size_t>& coords) {
  GradCheckResult r;
  const auto base = eval();
  for (std::size_t i : coords) {
    const double x0 = point[i];
    point[i] = x0 + eps;
    const auto plus = eval();
    point[i] = x0 - eps;
    const auto minus = eval();
    point[i] = x0;
    if (plus.second != base.second || minus.second != base.second) {
      ++r.excluded;
      continue;
    }
    const double numeric = (plus.first - minus.first) / (2.0 * eps);
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], numeric));
    ++r.checked;
  }
  return r;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

}  // namespace detail

/// Central differences of a scalar function `f(tape, x)` at `point` against
/// the tape gradient. Coordinates whose +-eps perturbation changes any
/// ReLU/pooling branch are excluded and counted.
template <class F>
GradCheckResult grad_check(F&& f, const Tensor<double>& point, double eps = 1e-5,
                           std::vector<std::size_t> coords = {}) {
  if (coords.empty()) coords = detail::all_coords(point.size());
  Tensor<double> work = point;
  std::vector<double> analytic;
  {
    Tape<double> tape;
    tape.set_pattern_tracking(true);
    Var x = tape.input(work, true);
    Var y = f(tape, x);
    tape.backward(y);
    const Tensor<double>* g = tape.grad(x);
    analytic = g ? g->data : std::vector<double>(point.size(), 0.0);
  }
  auto eval = [&] {
    Tape<double> tape;
    tape.set_pattern_tracking(true);
    Var x = tape.input(work, false);
    Var y = f(tape, x);
    return std::make_pair(tape.value(y).data[0], tape.pattern());
  };
  return detail::compare_central(eval, work.data, analytic, eps, coords);
}

/// Same check with respect to a parameter used inside `f(tape)`.
template <class F>
GradCheckResult grad_check_parameter(F&& f, Parameter<double>& p, double eps = 1e-5,
                                     std::vector<std::size_t> coords = {}) {
  if (coords.empty()) coords = detail::all_coords(p.value.size());
  p.grad = Tensor<double>(p.value.shape);
  {
    Tape<double> tape;
    tape.set_pattern_tracking(true);
    Var y = f(tape);
    tape.backward(y);
  }
  const std::vector<double> analytic = p.grad.data;
  auto eval = [&] {
    Tape<double> tape;
    tape.set_pattern_tracking(true);
    Var y = f(tape);
    return std::make_pair(tape.value(y).data[0], tape.pattern());
  };
  return detail::compare_central(eval, p.value.data, analytic, eps, coords);
}

}  // namespace mfsurro
