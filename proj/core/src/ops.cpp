#include "jdnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "op_support.hpp"

namespace jdnet {

using detail::grad_sink;
using detail::record;
using detail::require;
using detail::require_same_shape;
using detail::StoragePtr;

// ---------------------------------------------------------------------------
// Parameter construction

template <typename T>
ConvParams<T> ConvParams<T>::make(int in_channels, int out_channels, int kernel, int stride, Rng& rng) {
  require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
          "ConvParams::make: non-positive argument");
  ConvParams p;
  p.weight = Tensor<T>(Shape{out_channels, in_channels, kernel, kernel});
  p.bias = Tensor<T>(Shape{1, out_channels, 1, 1});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels) * kernel * kernel);
  for (auto& v : p.weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  p.stride = stride;
  p.padding = (kernel - 1) / 2;
  return p;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::make(int channels) {
  BatchNormParams p;
  p.scale = Tensor<T>(Shape{1, channels, 1, 1}, T(1));
  p.shift = Tensor<T>(Shape{1, channels, 1, 1}, T(0));
  p.running_mean = Tensor<T>(Shape{1, channels, 1, 1}, T(0));
  p.running_var = Tensor<T>(Shape{1, channels, 1, 1}, T(1));
  return p;
}

// ---------------------------------------------------------------------------
// conv2d: im2col + GEMM

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int in_c, in_h, in_w;
  int k_h, k_w, stride, pad;
  int out_h, out_w;

  [[nodiscard]] bool pointwise() const { return k_h == 1 && k_w == 1 && stride == 1 && pad == 0; }
  [[nodiscard]] int rows() const { return in_c * k_h * k_w; }
  [[nodiscard]] int cols() const { return out_h * out_w; }
};

// Output columns ox whose input column ox*stride - pad + kx lies in [0, in_w).
std::pair<int, int> valid_columns(const ConvGeometry& g, int kx) {
  const int first = g.pad - kx;                 // need ox*stride >= first
  const int last = g.in_w - 1 + g.pad - kx;     // need ox*stride <= last
  if (last < 0) return {0, 0};
  const int lo = first <= 0 ? 0 : (first + g.stride - 1) / g.stride;
  const int hi = std::min(g.out_w, last / g.stride + 1);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const int L = g.cols();
  for (int ci = 0; ci < g.in_c; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        T* row = cols + static_cast<std::size_t>((ci * g.k_h + ky) * g.k_w + kx) * L;
        const auto [lo, hi] = valid_columns(g, kx);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          const int shift = kx - g.pad;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + shift];
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const int L = g.cols();
  for (int ci = 0; ci < g.in_c; ++ci) {
    T* plane = dx + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k_h; ++ky) {
      for (int kx = 0; kx < g.k_w; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ci * g.k_h + ky) * g.k_w + kx) * L;
        const auto [lo, hi] = valid_columns(g, kx);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          const int shift = kx - g.pad;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
  const Shape& xs = input.shape();
  const Shape& ws = params.weight.shape();
  require(xs.c == ws.c, "conv2d: input " + xs.str() + " has " + std::to_string(xs.c) +
                            " channels but weight " + ws.str() + " expects " + std::to_string(ws.c));
  require(params.bias.numel() == static_cast<std::size_t>(ws.n),
          "conv2d: bias " + params.bias.shape().str() + " does not match weight " + ws.str());
  require(params.stride > 0 && params.padding >= 0, "conv2d: invalid stride/padding");

  ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, params.stride, params.padding, 0, 0};
  g.out_h = (xs.h + 2 * g.pad - g.k_h) / g.stride + 1;
  g.out_w = (xs.w + 2 * g.pad - g.k_w) / g.stride + 1;
  require(xs.h + 2 * g.pad >= g.k_h && xs.w + 2 * g.pad >= g.k_w,
          "conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());

  const int cout = ws.n;
  const int K = g.rows();
  const int L = g.cols();
  Tensor<T> out(Shape{xs.n, cout, g.out_h, g.out_w});

  const bool track = detail::needs_grad<T>({&input, &params.weight, &params.bias});
  std::vector<T> saved_cols;  // im2col buffers for the weight gradient
  std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(K) * L);
  if (track && !g.pointwise()) saved_cols.resize(static_cast<std::size_t>(xs.n) * K * L);

  ConstMatrixMap<T> weight(params.weight.data().data(), cout, K);
  const auto bias = params.bias.data();
  const std::size_t in_stride = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * L;

  for (int n = 0; n < xs.n; ++n) {
    const T* x = input.data().data() + n * in_stride;
    const T* colptr = x;
    if (!g.pointwise()) {
      T* buf = track ? saved_cols.data() + static_cast<std::size_t>(n) * K * L : cols.data();
      im2col(x, g, buf);
      colptr = buf;
    }
    MatrixMap<T> y(out.data().data() + n * out_stride, cout, L);
    y.noalias() = weight * ConstMatrixMap<T>(colptr, K, L);
    for (int co = 0; co < cout; ++co) y.row(co).array() += bias[co];
  }

  if (track) {
    StoragePtr<T> xin = input.storage();
    StoragePtr<T> w = params.weight.storage();
    StoragePtr<T> b = params.bias.storage();
    record(out, [xin, w, b, g, cout, K, L, in_stride, out_stride,
                 saved = std::move(saved_cols)](const std::vector<T>& gout) {
      const int batch = xin->shape.n;
      auto* gx = grad_sink(xin);
      auto* gw = grad_sink(w);
      auto* gb = grad_sink(b);
      if (gb) {
        for (int n = 0; n < batch; ++n)
          for (int co = 0; co < cout; ++co) {
            const T* row = gout.data() + n * out_stride + static_cast<std::size_t>(co) * L;
            (*gb)[co] += std::accumulate(row, row + L, T(0));
          }
      }
      ConstMatrixMap<T> weight(w->data.data(), cout, K);
      std::vector<T> dcols(gx && !g.pointwise() ? static_cast<std::size_t>(K) * L : 0);
      for (int n = 0; n < batch; ++n) {
        ConstMatrixMap<T> go(gout.data() + n * out_stride, cout, L);
        if (gw) {
          const T* colptr = g.pointwise() ? xin->data.data() + n * in_stride
                                          : saved.data() + static_cast<std::size_t>(n) * K * L;
          MatrixMap<T> dw(gw->data(), cout, K);
          dw.noalias() += go * ConstMatrixMap<T>(colptr, K, L).transpose();
        }
        if (gx) {
          if (g.pointwise()) {
            MatrixMap<T> dx(gx->data() + n * in_stride, K, L);
            dx.noalias() += weight.transpose() * go;
          } else {
            MatrixMap<T> dc(dcols.data(), K, L);
            dc.noalias() = weight.transpose() * go;
            col2im_add(dcols.data(), g, gx->data() + n * in_stride);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and resampling

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& input, int rate) {
  const Shape& s = input.shape();
  require(rate > 0, "avg_pool: rate must be positive");
  require(s.h % rate == 0 && s.w % rate == 0,
          "avg_pool: spatial size " + s.str() + " not divisible by rate " + std::to_string(rate));
  const int oh = s.h / rate;
  const int ow = s.w / rate;
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  const T inv = T(1) / static_cast<T>(rate * rate);
  const auto x = input.data();
  auto y = out.data();
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = y.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int iy = 0; iy < s.h; ++iy)
      for (int ix = 0; ix < s.w; ++ix) dst[(iy / rate) * ow + ix / rate] += src[iy * s.w + ix];
    for (int i = 0; i < oh * ow; ++i) dst[i] *= inv;
  }
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, rate, oh, ow, inv](const std::vector<T>& g) {
      const Shape& s = xin->shape;
      auto& gx = xin->ensure_grad();
      for (int p = 0; p < s.n * s.c; ++p) {
        const T* src = g.data() + static_cast<std::size_t>(p) * oh * ow;
        T* dst = gx.data() + static_cast<std::size_t>(p) * s.plane();
        for (int iy = 0; iy < s.h; ++iy)
          for (int ix = 0; ix < s.w; ++ix) dst[iy * s.w + ix] += src[(iy / rate) * ow + ix / rate] * inv;
      }
    });
  }
  return out;
}

namespace {

struct LinearTap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LinearTap> bilinear_taps(int in_size, int out_size) {
  std::vector<LinearTap> taps(out_size);
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int out_h, int out_w) {
  const Shape& s = input.shape();
  require(out_h > 0 && out_w > 0, "upsample_bilinear: zero-sized target");
  require(out_h >= s.h && out_w >= s.w,
          "upsample_bilinear: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " smaller than input " + s.str());
  const auto ty = bilinear_taps(s.h, out_h);
  const auto tx = bilinear_taps(s.w, out_w);
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  const auto x = input.data();
  auto y = out.data();
  for (int p = 0; p < s.n * s.c; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * s.plane();
    T* dst = y.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
        dst[oy * out_w + ox] = wy0 * (wx0 * src[a.i0 * s.w + b.i0] + wx1 * src[a.i0 * s.w + b.i1]) +
                               wy1 * (wx0 * src[a.i1 * s.w + b.i0] + wx1 * src[a.i1 * s.w + b.i1]);
      }
    }
  }
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, ty, tx, out_h, out_w](const std::vector<T>& g) {
      const Shape& s = xin->shape;
      auto& gx = xin->ensure_grad();
      for (int p = 0; p < s.n * s.c; ++p) {
        const T* src = g.data() + static_cast<std::size_t>(p) * out_h * out_w;
        T* dst = gx.data() + static_cast<std::size_t>(p) * s.plane();
        for (int oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[oy];
          const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
          for (int ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
            const T v = src[oy * out_w + ox];
            dst[a.i0 * s.w + b.i0] += v * wy0 * wx0;
            dst[a.i0 * s.w + b.i1] += v * wy0 * wx1;
            dst[a.i1 * s.w + b.i0] += v * wy1 * wx0;
            dst[a.i1 * s.w + b.i1] += v * wy1 * wx1;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, slope](const std::vector<T>& g) {
      auto& gx = xin->ensure_grad();
      const auto& x = xin->data;
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] >= T(0) ? g[i] : slope * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  }
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    StoragePtr<T> y = out.storage();
    record(out, [xin, y](const std::vector<T>& g) {
      auto& gx = xin->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y->data[i] * (T(1) - y->data[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormParams<T>& params, bool training) {
  const Shape& s = input.shape();
  const int C = s.c;
  require(C == params.channels(), "batch_norm: input " + s.str() + " has " + std::to_string(C) +
                                      " channels, params have " + std::to_string(params.channels()));
  const std::size_t count = static_cast<std::size_t>(s.n) * s.plane();
  require(!training || count > 0, "batch_norm: empty batch");

  std::vector<T> mean(C), invstd(C);
  const auto x = input.data();
  auto channel_at = [&](int n, int c) { return (static_cast<std::size_t>(n) * C + c) * s.plane(); };

  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) acc += x[channel_at(n, c) + i];
      const double mu = acc / static_cast<double>(count);
      double sq = 0;
      for (int n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = x[channel_at(n, c) + i] - mu;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(params.epsilon)));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      const T m = params.momentum;
      T& rm = params.running_mean.data()[c];
      T& rv = params.running_var.data()[c];
      rm = (T(1) - m) * rm + m * static_cast<T>(mu);
      rv = (T(1) - m) * rv + m * static_cast<T>(unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = params.running_mean.data()[c];
      invstd[c] = T(1) / std::sqrt(params.running_var.data()[c] + params.epsilon);
    }
  }

  Tensor<T> out(s);
  auto y = out.data();
  const auto gamma = params.scale.data();
  const auto beta = params.shift.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = channel_at(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i)
        y[base + i] = gamma[c] * (x[base + i] - mean[c]) * invstd[c] + beta[c];
    }

  if (detail::needs_grad<T>({&input, &params.scale, &params.shift})) {
    StoragePtr<T> xin = input.storage();
    StoragePtr<T> sc = params.scale.storage();
    StoragePtr<T> sh = params.shift.storage();
    record(out, [xin, sc, sh, mean, invstd, training, count](const std::vector<T>& g) {
      const Shape& s = xin->shape;
      const int C = s.c;
      const auto& x = xin->data;
      auto* gx = grad_sink(xin);
      auto* gscale = grad_sink(sc);
      auto* gshift = grad_sink(sh);
      for (int c = 0; c < C; ++c) {
        double sum_g = 0, sum_gxhat = 0;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * s.plane();
          for (std::size_t i = 0; i < s.plane(); ++i) {
            const double xhat = (x[base + i] - mean[c]) * invstd[c];
            sum_g += g[base + i];
            sum_gxhat += g[base + i] * xhat;
          }
        }
        if (gscale) (*gscale)[c] += static_cast<T>(sum_gxhat);
        if (gshift) (*gshift)[c] += static_cast<T>(sum_g);
        if (!gx) continue;
        const T gamma = sc->data[c];
        const double m = static_cast<double>(count);
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * s.plane();
          for (std::size_t i = 0; i < s.plane(); ++i) {
            if (training) {
              const double xhat = (x[base + i] - mean[c]) * invstd[c];
              const double d = (g[base + i] - sum_g / m - xhat * sum_gxhat / m) * gamma * invstd[c];
              (*gx)[base + i] += static_cast<T>(d);
            } else {
              (*gx)[base + i] += g[base + i] * gamma * invstd[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
  require(!inputs.empty(), "concat_channels: no inputs");
  const Shape& first = inputs.front().shape();
  int channels = 0;
  for (const auto& t : inputs) {
    const Shape& s = t.shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w,
            "concat_channels: spatial mismatch " + first.str() + " vs " + s.str());
    channels += s.c;
  }
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  auto y = out.data();
  for (int n = 0; n < first.n; ++n) {
    std::size_t offset = static_cast<std::size_t>(n) * channels * plane;
    for (const auto& t : inputs) {
      const std::size_t block = static_cast<std::size_t>(t.shape().c) * plane;
      const T* src = t.data().data() + n * block;
      std::copy(src, src + block, y.data() + offset);
      offset += block;
    }
  }
  bool track = false;
  for (const auto& t : inputs) track = track || detail::needs_grad<T>({&t});
  if (track) {
    std::vector<StoragePtr<T>> parts;
    for (const auto& t : inputs) parts.push_back(t.storage());
    record(out, [parts, channels, plane](const std::vector<T>& g) {
      const int batch = parts.front()->shape.n;
      for (int n = 0; n < batch; ++n) {
        std::size_t offset = static_cast<std::size_t>(n) * channels * plane;
        for (const auto& p : parts) {
          const std::size_t block = static_cast<std::size_t>(p->shape.c) * plane;
          if (auto* gp = grad_sink(p)) {
            T* dst = gp->data() + n * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[offset + i];
          }
          offset += block;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int begin, int end) {
  const Shape& s = input.shape();
  require(0 <= begin && begin < end && end <= s.c,
          "slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for " + s.str());
  const int c = end - begin;
  Tensor<T> out(Shape{s.n, c, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const T* src = input.data().data() + (static_cast<std::size_t>(n) * s.c + begin) * plane;
    std::copy(src, src + c * plane, out.data().data() + static_cast<std::size_t>(n) * c * plane);
  }
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, begin, c, plane](const std::vector<T>& g) {
      const Shape& s = xin->shape;
      auto& gx = xin->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        T* dst = gx.data() + (static_cast<std::size_t>(n) * s.c + begin) * plane;
        const T* src = g.data() + static_cast<std::size_t>(n) * c * plane;
        for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Binary { Add, Sub, Mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  require_same_shape(a.shape(), b.shape(), name);
  Tensor<T> out(a.shape());
  const auto x = a.data();
  const auto z = b.data();
  auto y = out.data();
  switch (kind) {
    case Binary::Add:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
      break;
    case Binary::Sub:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
      break;
    case Binary::Mul:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
      break;
  }
  if (detail::needs_grad<T>({&a, &b})) {
    StoragePtr<T> sa = a.storage();
    StoragePtr<T> sb = b.storage();
    record(out, [sa, sb, kind](const std::vector<T>& g) {
      auto* ga = grad_sink(sa);
      auto* gb = grad_sink(sb);
      const std::size_t n = g.size();
      if (kind == Binary::Mul) {
        for (std::size_t i = 0; i < n; ++i) {
          const T va = sa->data[i];
          const T vb = sb->data[i];
          if (ga) (*ga)[i] += g[i] * vb;
          if (gb) (*gb)[i] += g[i] * va;
        }
        return;
      }
      const T sign_b = kind == Binary::Sub ? T(-1) : T(1);
      if (ga)
        for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g[i];
      if (gb)
        for (std::size_t i = 0; i < n; ++i) (*gb)[i] += sign_b * g[i];
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::Add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::Sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::Mul, "hadamard");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out(input.shape());
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, factor](const std::vector<T>& g) {
      auto& gx = xin->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  double acc = 0;
  for (T v : input.data()) acc += v;
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc));
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin](const std::vector<T>& g) {
      auto& gx = xin->ensure_grad();
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input) {
  require(input.numel() > 0, "mean: empty tensor");
  return scale(sum(input), T(1) / static_cast<T>(input.numel()));
}

// ---------------------------------------------------------------------------
// Softmax over a positions axis

template <typename T>
Tensor<T> softmax_over_positions(const Tensor<T>& input, int positions, std::span<const std::uint8_t> valid) {
  const Shape& s = input.shape();
  require(positions >= 1, "softmax_over_positions: positions must be >= 1");
  require(s.c % positions == 0, "softmax_over_positions: channel count " + std::to_string(s.c) +
                                    " not a multiple of positions " + std::to_string(positions));
  const std::size_t plane = s.plane();
  require(valid.empty() || valid.size() == positions * plane,
          "softmax_over_positions: validity mask has wrong size");
  const int groups = s.c / positions;
  Tensor<T> out(s);
  const auto x = input.data();
  auto y = out.data();
  // Plane-wise passes over the positions keep the inner loops contiguous.
  auto ok = [&](int p, std::size_t i) { return valid.empty() || valid[p * plane + i] != 0; };
  std::vector<T> peak(plane), total(plane);
  Eigen::Array<T, Eigen::Dynamic, 1> scratch(static_cast<Eigen::Index>(plane));
  for (int n = 0; n < s.n; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + static_cast<std::size_t>(gi) * positions) * plane;
      std::fill(peak.begin(), peak.end(), -std::numeric_limits<T>::infinity());
      std::fill(total.begin(), total.end(), T(0));
      for (int p = 0; p < positions; ++p) {
        const T* xp = x.data() + base + p * plane;
        for (std::size_t i = 0; i < plane; ++i)
          if (ok(p, i)) peak[i] = std::max(peak[i], xp[i]);
      }
      for (int p = 0; p < positions; ++p) {
        const T* xp = x.data() + base + p * plane;
        T* yp = y.data() + base + p * plane;
        // Eigen evaluates an unaligned head with scalar exp and the rest with
        // packet exp; an owned (aligned) destination keeps the split fixed.
        scratch = (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(xp, scratch.size()) -
                   Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(peak.data(), scratch.size()))
                      .exp();
        for (std::size_t i = 0; i < plane; ++i) {
          yp[i] = ok(p, i) ? scratch[static_cast<Eigen::Index>(i)] : T(0);
          total[i] += yp[i];
        }
      }
      for (auto& t : total) t = t > T(0) ? T(1) / t : T(0);
      for (int p = 0; p < positions; ++p) {
        T* yp = y.data() + base + p * plane;
        for (std::size_t i = 0; i < plane; ++i) yp[i] *= total[i];
      }
    }

  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    StoragePtr<T> yout = out.storage();
    record(out, [xin, yout, positions, groups, plane](const std::vector<T>& g) {
      const auto& y = yout->data;
      auto& gx = xin->ensure_grad();
      const Shape& s = xin->shape;
      std::vector<T> dot(plane);
      for (int n = 0; n < s.n; ++n)
        for (int gi = 0; gi < groups; ++gi) {
          const std::size_t base =
              (static_cast<std::size_t>(n) * s.c + static_cast<std::size_t>(gi) * positions) * plane;
          std::fill(dot.begin(), dot.end(), T(0));
          for (int p = 0; p < positions; ++p) {
            const std::size_t k = base + p * plane;
            for (std::size_t i = 0; i < plane; ++i) dot[i] += g[k + i] * y[k + i];
          }
          for (int p = 0; p < positions; ++p) {
            const std::size_t k = base + p * plane;
            for (std::size_t i = 0; i < plane; ++i) gx[k + i] += y[k + i] * (g[k + i] - dot[i]);
          }
        }
    });
  }
  return out;
}

#define JDNET_INSTANTIATE_OPS(T)                                                                 \
  template struct ConvParams<T>;                                                                 \
  template struct BatchNormParams<T>;                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                             \
  template Tensor<T> avg_pool(const Tensor<T>&, int);                                            \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int, int);                              \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                            \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormParams<T>&, bool);                    \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> softmax_over_positions(const Tensor<T>&, int, std::span<const std::uint8_t>);

JDNET_INSTANTIATE_OPS(float)
JDNET_INSTANTIATE_OPS(double)

}  // namespace jdnet
