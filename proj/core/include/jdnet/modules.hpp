#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "jdnet/ops.hpp"
#include "jdnet/random.hpp"
#include "jdnet/tensor.hpp"

namespace jdnet {

inline constexpr double kLeakySlope = 0.2;

/// Joint-unit composition used by the ablation study.
///   R1: scale-aggregation only
///   R2: scale-aggregation -> self-calibrated convolution
///   R3: scale-aggregation -> self-calibrated convolution -> self-attention
enum class Ablation { R1, R2, R3 };

Ablation parse_ablation(std::string_view tag);
std::string_view to_string(Ablation ablation);

enum class AttentionNorm { Softmax, None };

AttentionNorm parse_attention_norm(std::string_view tag);
std::string_view to_string(AttentionNorm norm);

struct ModelConfig {
  int units = 32;
  int channels = 32;
  int scales = 4;     // pyramid depth n of scale-aggregation
  int pool_rate = 4;  // r of self-calibrated convolution
  int footprint = 7;
  int reduction = 4;
  int share = 1;
  Ablation ablation = Ablation::R3;
  AttentionNorm attention_normalize = AttentionNorm::Softmax;

  /// Throws ShapeError on inconsistent settings.
  void validate() const;
  /// Input H and W must be multiples of this.
  [[nodiscard]] int spatial_multiple() const;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <typename T>
using TensorList = std::vector<NamedTensor<T>>;

template <typename T>
void collect(const ConvParams<T>& conv, const std::string& prefix, TensorList<T>& out);
template <typename T>
void collect(const BatchNormParams<T>& bn, const std::string& prefix, TensorList<T>& out);

/// Pairwise self-attention with a subtraction relation over a local footprint.
template <typename T>
struct SelfAttention {
  ConvParams<T> phi;
  ConvParams<T> psi;
  ConvParams<T> beta;
  ConvParams<T> gamma_hidden;
  ConvParams<T> gamma_out;
  ConvParams<T> expand;
  BatchNormParams<T> bn;
  int footprint = 7;
  int share = 1;
  AttentionNorm normalize = AttentionNorm::Softmax;

  /// Intermediates exposed for inspection.
  struct Trace {
    Tensor<T> weights;     // (N, G * P, H, W), after normalization
    Tensor<T> aggregated;  // (N, C / reduction, H, W), before BN
  };

  static SelfAttention make(int channels, const ModelConfig& config, Rng& rng);

  [[nodiscard]] int reduced_channels() const { return phi.out_channels(); }
  [[nodiscard]] int groups() const { return reduced_channels() / share; }

  Tensor<T> forward(const Tensor<T>& x, bool training, Trace* trace = nullptr);
  void collect(const std::string& prefix, TensorList<T>& out) const;
};

/// Multi-scale pyramid (stride-2 conv + residual block per level) fused by a 1x1 conv.
template <typename T>
struct ScaleAggregation {
  struct ResBlock {
    ConvParams<T> first;
    ConvParams<T> second;
  };
  std::vector<ConvParams<T>> down;
  std::vector<ResBlock> res;
  ConvParams<T> fuse;

  static ScaleAggregation make(int channels, int scales, Rng& rng);

  [[nodiscard]] int scales() const { return static_cast<int>(down.size()); }

  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, TensorList<T>& out) const;
};

/// Self-calibrated convolution: a pooled branch gates a full-resolution branch.
template <typename T>
struct SelfCalibratedConv {
  ConvParams<T> split1;
  ConvParams<T> split2;
  ConvParams<T> k1;
  ConvParams<T> k2;
  ConvParams<T> k3;
  ConvParams<T> k4;
  int rate = 4;

  struct Trace {
    Tensor<T> pooled;      // T1
    Tensor<T> calibrated;  // Y1 before K4
  };

  static SelfCalibratedConv make(int channels, int rate, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Trace* trace = nullptr);
  void collect(const std::string& prefix, TensorList<T>& out) const;
};

template <typename T>
struct JointUnit {
  ConvParams<T> compress;
  ScaleAggregation<T> scale_agg;
  std::optional<SelfCalibratedConv<T>> sc_conv;
  std::optional<SelfAttention<T>> attention;

  struct Trace {
    Tensor<T> compressed;
    Tensor<T> after_scale_agg;
    Tensor<T> after_sc_conv;    // empty under R1
    Tensor<T> after_attention;  // empty under R1/R2
  };

  /// Builds the sub-modules required by `ablation` (or all of them when
  /// `all_modules` is set, so the same parameters can be run under any tag).
  static JointUnit make(int in_channels, const ModelConfig& config, Ablation ablation, Rng& rng,
                        bool all_modules = false);

  Tensor<T> forward(const Tensor<T>& dense_in, Ablation ablation, bool training, Trace* trace = nullptr);
  void collect(const std::string& prefix, TensorList<T>& out) const;
};

/// Dense-connected stack of joint units predicting the rain layer.
template <typename T>
class JDNet {
 public:
  struct Output {
    Tensor<T> background;  // b_hat = o - r_hat, unclamped
    Tensor<T> rain;        // r_hat
  };

  static JDNet make(const ModelConfig& config, std::uint64_t seed);

  Output forward(const Tensor<T>& rainy, bool training);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<JointUnit<T>>& units() const { return units_; }
  [[nodiscard]] std::vector<JointUnit<T>>& units() { return units_; }

  /// Every named tensor: trainable parameters plus BatchNorm running statistics.
  [[nodiscard]] TensorList<T> state() const;
  /// Trainable parameters only.
  [[nodiscard]] TensorList<T> parameters() const;

  ConvParams<T> head;
  ConvParams<T> tail;

 private:
  ModelConfig config_;
  std::vector<JointUnit<T>> units_;
};

}  // namespace jdnet
