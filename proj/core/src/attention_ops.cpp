#include <algorithm>
#include <string>

#include "jdnet/ops.hpp"
#include "op_support.hpp"

namespace jdnet {

using detail::grad_sink;
using detail::record;
using detail::require;
using detail::StoragePtr;

std::vector<FootprintOffset> footprint_offsets(int footprint) {
  require(footprint > 0 && footprint % 2 == 1, "footprint must be a positive odd integer");
  const int half = footprint / 2;
  std::vector<FootprintOffset> offsets;
  offsets.reserve(static_cast<std::size_t>(footprint) * footprint);
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) offsets.push_back({dy, dx});
  return offsets;
}

std::vector<std::uint8_t> footprint_validity(int footprint, int height, int width) {
  const auto offsets = footprint_offsets(footprint);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<std::uint8_t> valid(offsets.size() * plane, 0);
  for (std::size_t p = 0; p < offsets.size(); ++p)
    for (int h = 0; h < height; ++h)
      for (int w = 0; w < width; ++w) {
        const int y = h + offsets[p].dy;
        const int x = w + offsets[p].dx;
        valid[p * plane + static_cast<std::size_t>(h) * width + w] = y >= 0 && y < height && x >= 0 && x < width;
      }
  return valid;
}

template <typename T>
Tensor<T> footprint_relation(const Tensor<T>& a, const Tensor<T>& b, int footprint) {
  detail::require_same_shape(a.shape(), b.shape(), "footprint_relation");
  const Shape& s = a.shape();
  const auto offsets = footprint_offsets(footprint);
  const int P = static_cast<int>(offsets.size());
  const std::size_t plane = s.plane();
  Tensor<T> out(Shape{s.n * P, s.c, s.h, s.w});
  const auto x = a.data();
  const auto z = b.data();
  auto y = out.data();
  for (int n = 0; n < s.n; ++n)
    for (int p = 0; p < P; ++p) {
      const auto [dy, dx] = offsets[p];
      const int w_lo = std::max(0, -dx);
      const int w_hi = std::min(s.w, s.w - dx);
      for (int c = 0; c < s.c; ++c) {
        const std::size_t src = (static_cast<std::size_t>(n) * s.c + c) * plane;
        const std::size_t dst = ((static_cast<std::size_t>(n) * P + p) * s.c + c) * plane;
        std::copy_n(x.data() + src, plane, y.data() + dst);
        for (int h = 0; h < s.h; ++h) {
          const int yy = h + dy;
          if (yy < 0 || yy >= s.h) continue;
          T* row = y.data() + dst + static_cast<std::size_t>(h) * s.w;
          const T* nb = z.data() + src + static_cast<std::size_t>(yy) * s.w;
          for (int w = w_lo; w < w_hi; ++w) row[w] -= nb[w + dx];
        }
      }
    }
  if (detail::needs_grad<T>({&a, &b})) {
    StoragePtr<T> sa = a.storage();
    StoragePtr<T> sb = b.storage();
    record(out, [sa, sb, offsets, plane](const std::vector<T>& g) {
      const Shape& s = sa->shape;
      const int P = static_cast<int>(offsets.size());
      auto* ga = grad_sink(sa);
      auto* gb = grad_sink(sb);
      for (int n = 0; n < s.n; ++n)
        for (int p = 0; p < P; ++p) {
          const auto [dy, dx] = offsets[p];
          const int w_lo = std::max(0, -dx);
          const int w_hi = std::min(s.w, s.w - dx);
          for (int c = 0; c < s.c; ++c) {
            const std::size_t src = (static_cast<std::size_t>(n) * s.c + c) * plane;
            const std::size_t dst = ((static_cast<std::size_t>(n) * P + p) * s.c + c) * plane;
            const T* gp = g.data() + dst;
            if (ga)
              for (std::size_t i = 0; i < plane; ++i) (*ga)[src + i] += gp[i];
            if (!gb) continue;
            for (int h = 0; h < s.h; ++h) {
              const int yy = h + dy;
              if (yy < 0 || yy >= s.h) continue;
              const T* row = gp + static_cast<std::size_t>(h) * s.w;
              T* nb = gb->data() + src + static_cast<std::size_t>(yy) * s.w;
              for (int w = w_lo; w < w_hi; ++w) nb[w + dx] -= row[w];
            }
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> positions_to_channels(const Tensor<T>& input, int positions) {
  const Shape& s = input.shape();
  require(positions >= 1 && s.n % positions == 0,
          "positions_to_channels: batch " + std::to_string(s.n) + " not a multiple of " +
              std::to_string(positions));
  const int N = s.n / positions;
  const int G = s.c;
  const std::size_t plane = s.plane();
  Tensor<T> out(Shape{N, G * positions, s.h, s.w});
  const auto x = input.data();
  auto y = out.data();
  // (n, p, g) -> (n, g, p)
  auto src_index = [=](int n, int p, int g) {
    return ((static_cast<std::size_t>(n) * positions + p) * G + g) * plane;
  };
  auto dst_index = [=](int n, int p, int g) {
    return ((static_cast<std::size_t>(n) * G + g) * positions + p) * plane;
  };
  for (int n = 0; n < N; ++n)
    for (int p = 0; p < positions; ++p)
      for (int g = 0; g < G; ++g)
        std::copy_n(x.data() + src_index(n, p, g), plane, y.data() + dst_index(n, p, g));
  if (detail::needs_grad<T>({&input})) {
    StoragePtr<T> xin = input.storage();
    record(out, [xin, N, G, positions, plane, src_index, dst_index](const std::vector<T>& grad) {
      auto& gx = xin->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int p = 0; p < positions; ++p)
          for (int g = 0; g < G; ++g) {
            T* dst = gx.data() + src_index(n, p, g);
            const T* src = grad.data() + dst_index(n, p, g);
            for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> footprint_aggregate(const Tensor<T>& weights, const Tensor<T>& values, int footprint, int share) {
  const Shape& ws = weights.shape();
  const Shape& vs = values.shape();
  const auto offsets = footprint_offsets(footprint);
  const int P = static_cast<int>(offsets.size());
  require(share >= 1 && vs.c % share == 0,
          "footprint_aggregate: channel count " + std::to_string(vs.c) + " not divisible by share " +
              std::to_string(share));
  const int G = vs.c / share;
  require(ws.n == vs.n && ws.h == vs.h && ws.w == vs.w && ws.c == G * P,
          "footprint_aggregate: weights " + ws.str() + " incompatible with values " + vs.str());

  const std::size_t plane = vs.plane();
  Tensor<T> out(vs);
  const auto wt = weights.data();
  const auto v = values.data();
  auto y = out.data();
  for (int n = 0; n < vs.n; ++n)
    for (int c = 0; c < vs.c; ++c) {
      const std::size_t vbase = (static_cast<std::size_t>(n) * vs.c + c) * plane;
      const std::size_t wbase = (static_cast<std::size_t>(n) * ws.c + static_cast<std::size_t>(c / share) * P) * plane;
      for (int p = 0; p < P; ++p) {
        const auto [dy, dx] = offsets[p];
        const T* wp = wt.data() + wbase + p * plane;
        for (int h = 0; h < vs.h; ++h) {
          const int yy = h + dy;
          if (yy < 0 || yy >= vs.h) continue;
          const int w_lo = std::max(0, -dx);
          const int w_hi = std::min(vs.w, vs.w - dx);
          for (int w = w_lo; w < w_hi; ++w)
            y[vbase + static_cast<std::size_t>(h) * vs.w + w] +=
                wp[static_cast<std::size_t>(h) * vs.w + w] * v[vbase + static_cast<std::size_t>(yy) * vs.w + w + dx];
        }
      }
    }
  if (detail::needs_grad<T>({&weights, &values})) {
    StoragePtr<T> sw = weights.storage();
    StoragePtr<T> sv = values.storage();
    record(out, [sw, sv, offsets, share, plane](const std::vector<T>& g) {
      const Shape& ws = sw->shape;
      const Shape& vs = sv->shape;
      const int P = static_cast<int>(offsets.size());
      auto* gw = grad_sink(sw);
      auto* gv = grad_sink(sv);
      const auto& wt = sw->data;
      const auto& v = sv->data;
      for (int n = 0; n < vs.n; ++n)
        for (int c = 0; c < vs.c; ++c) {
          const std::size_t vbase = (static_cast<std::size_t>(n) * vs.c + c) * plane;
          const std::size_t wbase =
              (static_cast<std::size_t>(n) * ws.c + static_cast<std::size_t>(c / share) * P) * plane;
          for (int p = 0; p < P; ++p) {
            const auto [dy, dx] = offsets[p];
            for (int h = 0; h < vs.h; ++h) {
              const int yy = h + dy;
              if (yy < 0 || yy >= vs.h) continue;
              const int w_lo = std::max(0, -dx);
              const int w_hi = std::min(vs.w, vs.w - dx);
              const T* go = g.data() + vbase + static_cast<std::size_t>(h) * vs.w;
              const std::size_t wrow = wbase + p * plane + static_cast<std::size_t>(h) * vs.w;
              const std::size_t vrow = vbase + static_cast<std::size_t>(yy) * vs.w;
              if (gw) {
                T* dw = gw->data() + wrow;
                const T* vv = v.data() + vrow;
                for (int w = w_lo; w < w_hi; ++w) dw[w] += go[w] * vv[w + dx];
              }
              if (gv) {
                T* dv = gv->data() + vrow;
                const T* ww = wt.data() + wrow;
                for (int w = w_lo; w < w_hi; ++w) dv[w + dx] += go[w] * ww[w];
              }
            }
          }
        }
    });
  }
  return out;
}

#define JDNET_INSTANTIATE_ATTENTION_OPS(T)                                             \
  template Tensor<T> footprint_relation(const Tensor<T>&, const Tensor<T>&, int);      \
  template Tensor<T> positions_to_channels(const Tensor<T>&, int);                     \
  template Tensor<T> footprint_aggregate(const Tensor<T>&, const Tensor<T>&, int, int);

JDNET_INSTANTIATE_ATTENTION_OPS(float)
JDNET_INSTANTIATE_ATTENTION_OPS(double)

}  // namespace jdnet
