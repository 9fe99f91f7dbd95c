#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "jdnet/random.hpp"
#include "jdnet/tensor.hpp"

namespace jdnet {

/// Convolution filter bank; weight is (C_out, C_in, k_h, k_w), bias is (1, C_out, 1, 1).
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;

  [[nodiscard]] int in_channels() const { return weight.shape().c; }
  [[nodiscard]] int out_channels() const { return weight.shape().n; }
  [[nodiscard]] int kernel_h() const { return weight.shape().h; }
  [[nodiscard]] int kernel_w() const { return weight.shape().w; }

  /// Square kernel, weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
  /// Padding defaults to (k-1)/2 so stride-1 convolutions keep H and W.
  static ConvParams make(int in_channels, int out_channels, int kernel, int stride, Rng& rng);
};

/// Per-channel affine normalization. running_var holds the unbiased
/// batch variance estimate, as PyTorch does.
template <typename T>
struct BatchNormParams {
  Tensor<T> scale;  // (1, C, 1, 1)
  Tensor<T> shift;  // (1, C, 1, 1)
  Tensor<T> running_mean;  // (1, C, 1, 1), never differentiated
  Tensor<T> running_var;   // (1, C, 1, 1), never differentiated
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  [[nodiscard]] int channels() const { return scale.shape().c; }
  static BatchNormParams make(int channels);
};

/// Cross-correlation of `input` with `params.weight` plus per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params);

/// Non-overlapping r x r mean pooling; H and W must be multiples of r.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& input, int rate);

/// Bilinear resize with half-pixel centres and edge clamping.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int out_h, int out_w);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

/// Training mode normalizes by batch statistics over (N, H, W) and updates
/// the running estimates; inference mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormParams<T>& params, bool training);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> inputs) {
  std::vector<Tensor<T>> v(inputs);
  return concat_channels<T>(std::span<const Tensor<T>>(v));
}

/// Channels [begin, end) of `input`.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int begin, int end);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

/// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& input);

/// Mean of all elements as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> mean(const Tensor<T>& input);

/// Softmax along a positions axis.
///
/// `input` has shape (N, groups * positions, H, W) and is read as
/// (N, groups, positions, H, W). When `valid` is non-empty it holds
/// positions * H * W flags (broadcast over N and groups); entries whose flag
/// is zero are excluded and produce weight 0. Uses max subtraction.
template <typename T>
Tensor<T> softmax_over_positions(const Tensor<T>& input, int positions,
                                 std::span<const std::uint8_t> valid = {});

// -- neighbourhood operators used by pairwise self-attention ---------------

/// Offsets (dy, dx) of a square footprint in row-major order.
struct FootprintOffset {
  int dy;
  int dx;
};
std::vector<FootprintOffset> footprint_offsets(int footprint);

/// positions * H * W flags: 1 where (h+dy, w+dx) is inside the image.
std::vector<std::uint8_t> footprint_validity(int footprint, int height, int width);

/// Pairwise subtraction relation over a footprint.
///
/// Returns shape (N * P, C, H, W) laid out [n][p]: out = a(i) - b(i + offset_p),
/// with b zero-padded outside the image.
template <typename T>
Tensor<T> footprint_relation(const Tensor<T>& a, const Tensor<T>& b, int footprint);

/// (N * P, G, H, W) laid out [n][p] -> (N, G * P, H, W) laid out [g][p].
template <typename T>
Tensor<T> positions_to_channels(const Tensor<T>& input, int positions);

/// Weighted footprint aggregation.
///
/// weights: (N, G * P, H, W); values: (N, G * share, H, W).
/// out[n, c, i] = sum_p weights[n, (c / share) * P + p, i] * values[n, c, i + offset_p],
/// with values zero-padded outside the image.
template <typename T>
Tensor<T> footprint_aggregate(const Tensor<T>& weights, const Tensor<T>& values, int footprint,
                              int share);

}  // namespace jdnet
