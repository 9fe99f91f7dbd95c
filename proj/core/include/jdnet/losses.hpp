#pragma once

#include <string_view>
#include <vector>

#include "jdnet/tensor.hpp"

namespace jdnet {

/// Gaussian-window SSIM constants (Wang et al. defaults).
struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  [[nodiscard]] double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  [[nodiscard]] double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  /// Normalized 1-D taps; the 2-D window is their outer product.
  [[nodiscard]] std::vector<double> taps() const;
};

/// Mean SSIM over batch, channels and every valid window position.
/// Differentiable with respect to both arguments.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimConfig& config = {});

/// -ssim(prediction, target).
template <typename T>
Tensor<T> neg_ssim_loss(const Tensor<T>& prediction, const Tensor<T>& target, const SsimConfig& config = {});

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& prediction, const Tensor<T>& target);

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

/// Peak signal-to-noise ratio in dB; +inf when the inputs are identical.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0);

/// Text outputs report identical images at this value instead of +inf.
inline constexpr double kPsnrCap = 100.0;
inline double capped_psnr(double db) { return db > kPsnrCap ? kPsnrCap : db; }

/// BT.601 luma, (N, 3, H, W) -> (N, 1, H, W).
template <typename T>
Tensor<T> to_luma(const Tensor<T>& rgb);

enum class LossKind { NegSsim, Mae, Mse };
LossKind parse_loss(std::string_view name);
std::string_view to_string(LossKind kind);

template <typename T>
Tensor<T> compute_loss(LossKind kind, const Tensor<T>& prediction, const Tensor<T>& target);

}  // namespace jdnet
