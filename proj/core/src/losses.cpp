#include "jdnet/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "jdnet/ops.hpp"
#include "op_support.hpp"

namespace jdnet {

using detail::grad_sink;
using detail::record;
using detail::require;
using detail::require_same_shape;
using detail::StoragePtr;

std::vector<double> SsimConfig::taps() const {
  std::vector<double> g(window);
  const double centre = (window - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < window; ++i) {
    const double d = i - centre;
    g[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

namespace {

// Separable "valid" Gaussian filtering of one H x W plane.
class ValidFilter {
 public:
  ValidFilter(std::vector<double> taps, int height, int width)
      : taps_(std::move(taps)),
        k_(static_cast<int>(taps_.size())),
        h_(height),
        w_(width),
        oh_(height - k_ + 1),
        ow_(width - k_ + 1),
        scratch_(static_cast<std::size_t>(h_) * ow_) {}

  [[nodiscard]] std::size_t out_size() const { return static_cast<std::size_t>(oh_) * ow_; }

  void apply(const double* in, double* out) {
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < ow_; ++x) {
        double acc = 0;
        for (int k = 0; k < k_; ++k) acc += taps_[k] * in[y * w_ + x + k];
        scratch_[y * ow_ + x] = acc;
      }
    for (int y = 0; y < oh_; ++y)
      for (int x = 0; x < ow_; ++x) {
        double acc = 0;
        for (int k = 0; k < k_; ++k) acc += taps_[k] * scratch_[(y + k) * ow_ + x];
        out[y * ow_ + x] = acc;
      }
  }

  /// in_grad += G^T out_grad
  void adjoint_add(const double* out_grad, double* in_grad) {
    std::fill(scratch_.begin(), scratch_.end(), 0.0);
    for (int y = 0; y < oh_; ++y)
      for (int x = 0; x < ow_; ++x) {
        const double v = out_grad[y * ow_ + x];
        for (int k = 0; k < k_; ++k) scratch_[(y + k) * ow_ + x] += taps_[k] * v;
      }
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < ow_; ++x) {
        const double v = scratch_[y * ow_ + x];
        for (int k = 0; k < k_; ++k) in_grad[y * w_ + x + k] += taps_[k] * v;
      }
  }

 private:
  std::vector<double> taps_;
  int k_, h_, w_, oh_, ow_;
  std::vector<double> scratch_;
};

struct PlaneStats {
  std::vector<double> mu_a, mu_b, e_aa, e_bb, e_ab;
};

template <typename T>
PlaneStats plane_stats(const T* a, const T* b, std::size_t plane, ValidFilter& filter) {
  std::vector<double> va(a, a + plane), vb(b, b + plane), aa(plane), bb(plane), ab(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  PlaneStats s;
  const std::size_t m = filter.out_size();
  for (auto* v : {&s.mu_a, &s.mu_b, &s.e_aa, &s.e_bb, &s.e_ab}) v->resize(m);
  filter.apply(va.data(), s.mu_a.data());
  filter.apply(vb.data(), s.mu_b.data());
  filter.apply(aa.data(), s.e_aa.data());
  filter.apply(bb.data(), s.e_bb.data());
  filter.apply(ab.data(), s.e_ab.data());
  return s;
}

}  // namespace

template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimConfig& config) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  const Shape& s = a.shape();
  require(config.window >= 1 && config.window % 2 == 1, "ssim: window size must be odd");
  require(s.h >= config.window && s.w >= config.window,
          "ssim: window " + std::to_string(config.window) + " larger than image " + s.str());
  require(s.numel() > 0, "ssim: empty input");

  const double c1 = config.c1();
  const double c2 = config.c2();
  const std::size_t plane = s.plane();
  const int planes = s.n * s.c;
  ValidFilter filter(config.taps(), s.h, s.w);
  const std::size_t m = filter.out_size();
  const double count = static_cast<double>(m) * planes;

  double total = 0;
  for (int p = 0; p < planes; ++p) {
    const PlaneStats st = plane_stats(a.data().data() + p * plane, b.data().data() + p * plane, plane, filter);
    for (std::size_t i = 0; i < m; ++i) {
      const double ma = st.mu_a[i], mb = st.mu_b[i];
      const double va = st.e_aa[i] - ma * ma, vb = st.e_bb[i] - mb * mb, cab = st.e_ab[i] - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(total / count));

  if (detail::needs_grad<T>({&a, &b})) {
    StoragePtr<T> sa = a.storage();
    StoragePtr<T> sb = b.storage();
    record(out, [sa, sb, config, c1, c2, plane, planes, count](const std::vector<T>& g) {
      const Shape& s = sa->shape;
      auto* ga = grad_sink(sa);
      auto* gb = grad_sink(sb);
      ValidFilter filter(config.taps(), s.h, s.w);
      const std::size_t m = filter.out_size();
      const double seed = static_cast<double>(g[0]) / count;
      std::vector<double> d_mu_a(m), d_mu_b(m), d_e_aa(m), d_e_bb(m), d_e_ab(m);
      std::vector<double> acc_mu_a(plane), acc_mu_b(plane), acc_aa(plane), acc_bb(plane), acc_ab(plane);
      for (int p = 0; p < planes; ++p) {
        const T* pa = sa->data.data() + p * plane;
        const T* pb = sb->data.data() + p * plane;
        const PlaneStats st = plane_stats(pa, pb, plane, filter);
        for (std::size_t i = 0; i < m; ++i) {
          const double ma = st.mu_a[i], mb = st.mu_b[i];
          const double va = st.e_aa[i] - ma * ma, vb = st.e_bb[i] - mb * mb, cab = st.e_ab[i] - ma * mb;
          const double a1 = 2 * ma * mb + c1, a2 = 2 * cab + c2;
          const double b1 = ma * ma + mb * mb + c1, b2 = va + vb + c2;
          const double value = (a1 * a2) / (b1 * b2);
          const double ds_dcov = 2 * a1 / (b1 * b2);
          const double ds_dvar = -value / b2;
          const double ds_dmu_a = 2 * mb * a2 / (b1 * b2) - value * 2 * ma / b1;
          const double ds_dmu_b = 2 * ma * a2 / (b1 * b2) - value * 2 * mb / b1;
          d_mu_a[i] = seed * (ds_dmu_a - 2 * ma * ds_dvar - mb * ds_dcov);
          d_mu_b[i] = seed * (ds_dmu_b - 2 * mb * ds_dvar - ma * ds_dcov);
          d_e_aa[i] = seed * ds_dvar;
          d_e_bb[i] = seed * ds_dvar;
          d_e_ab[i] = seed * ds_dcov;
        }
        for (auto* v : {&acc_mu_a, &acc_mu_b, &acc_aa, &acc_bb, &acc_ab}) std::fill(v->begin(), v->end(), 0.0);
        if (ga) {
          filter.adjoint_add(d_mu_a.data(), acc_mu_a.data());
          filter.adjoint_add(d_e_aa.data(), acc_aa.data());
        }
        if (gb) {
          filter.adjoint_add(d_mu_b.data(), acc_mu_b.data());
          filter.adjoint_add(d_e_bb.data(), acc_bb.data());
        }
        filter.adjoint_add(d_e_ab.data(), acc_ab.data());
        for (std::size_t i = 0; i < plane; ++i) {
          const double xa = pa[i], xb = pb[i];
          if (ga) (*ga)[p * plane + i] += static_cast<T>(acc_mu_a[i] + 2 * xa * acc_aa[i] + xb * acc_ab[i]);
          if (gb) (*gb)[p * plane + i] += static_cast<T>(acc_mu_b[i] + 2 * xb * acc_bb[i] + xa * acc_ab[i]);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> neg_ssim_loss(const Tensor<T>& prediction, const Tensor<T>& target, const SsimConfig& config) {
  return scale(ssim(prediction, target, config), T(-1));
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "mae_loss");
  const auto x = prediction.data();
  const auto y = target.data();
  const double count = static_cast<double>(x.size());
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(static_cast<double>(x[i]) - y[i]);
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc / count));
  if (detail::needs_grad<T>({&prediction, &target})) {
    StoragePtr<T> sp = prediction.storage();
    StoragePtr<T> st = target.storage();
    record(out, [sp, st, count](const std::vector<T>& g) {
      auto* gp = grad_sink(sp);
      auto* gt = grad_sink(st);
      const T k = static_cast<T>(g[0] / count);
      for (std::size_t i = 0; i < sp->data.size(); ++i) {
        const T d = sp->data[i] - st->data[i];
        const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (gp) (*gp)[i] += k * sign;
        if (gt) (*gt)[i] -= k * sign;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "mse_loss");
  const auto x = prediction.data();
  const auto y = target.data();
  const double count = static_cast<double>(x.size());
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - y[i];
    acc += d * d;
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(acc / count));
  if (detail::needs_grad<T>({&prediction, &target})) {
    StoragePtr<T> sp = prediction.storage();
    StoragePtr<T> st = target.storage();
    record(out, [sp, st, count](const std::vector<T>& g) {
      auto* gp = grad_sink(sp);
      auto* gt = grad_sink(st);
      const T k = static_cast<T>(2.0 * g[0] / count);
      for (std::size_t i = 0; i < sp->data.size(); ++i) {
        const T d = sp->data[i] - st->data[i];
        if (gp) (*gp)[i] += k * d;
        if (gt) (*gt)[i] -= k * d;
      }
    });
  }
  return out;
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  require_same_shape(a.shape(), b.shape(), "psnr");
  const auto x = a.data();
  const auto y = b.data();
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - y[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

template <typename T>
Tensor<T> to_luma(const Tensor<T>& rgb) {
  const Shape& s = rgb.shape();
  require(s.c == 3, "to_luma: expected 3 channels, got " + s.str());
  static constexpr double kWeights[3] = {0.299, 0.587, 0.114};
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < 3; ++c) {
      const T* src = rgb.data().data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
      T* dst = out.data().data() + static_cast<std::size_t>(n) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += static_cast<T>(kWeights[c]) * src[i];
    }
  if (detail::needs_grad<T>({&rgb})) {
    StoragePtr<T> sx = rgb.storage();
    record(out, [sx, plane](const std::vector<T>& g) {
      auto& gx = sx->ensure_grad();
      for (int n = 0; n < sx->shape.n; ++n)
        for (int c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < plane; ++i)
            gx[(static_cast<std::size_t>(n) * 3 + c) * plane + i] +=
                static_cast<T>(kWeights[c]) * g[static_cast<std::size_t>(n) * plane + i];
    });
  }
  return out;
}

LossKind parse_loss(std::string_view name) {
  if (name == "neg_ssim" || name == "ssim") return LossKind::NegSsim;
  if (name == "mae") return LossKind::Mae;
  if (name == "mse") return LossKind::Mse;
  throw ShapeError("unknown loss '" + std::string(name) + "' (expected neg_ssim, mae or mse)");
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::NegSsim:
      return "neg_ssim";
    case LossKind::Mae:
      return "mae";
    case LossKind::Mse:
      return "mse";
  }
  return "?";
}

template <typename T>
Tensor<T> compute_loss(LossKind kind, const Tensor<T>& prediction, const Tensor<T>& target) {
  switch (kind) {
    case LossKind::Mae:
      return mae_loss(prediction, target);
    case LossKind::Mse:
      return mse_loss(prediction, target);
    case LossKind::NegSsim:
      break;
  }
  return neg_ssim_loss(prediction, target);
}

#define JDNET_INSTANTIATE_LOSSES(T)                                                        \
  template Tensor<T> ssim(const Tensor<T>&, const Tensor<T>&, const SsimConfig&);          \
  template Tensor<T> neg_ssim_loss(const Tensor<T>&, const Tensor<T>&, const SsimConfig&); \
  template Tensor<T> mae_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template double psnr(const Tensor<T>&, const Tensor<T>&, double);                        \
  template Tensor<T> to_luma(const Tensor<T>&);                                            \
  template Tensor<T> compute_loss(LossKind, const Tensor<T>&, const Tensor<T>&);

JDNET_INSTANTIATE_LOSSES(float)
JDNET_INSTANTIATE_LOSSES(double)

}  // namespace jdnet
