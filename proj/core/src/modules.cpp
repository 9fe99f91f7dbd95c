#include "jdnet/modules.hpp"

#include <numeric>

namespace jdnet {

using detail::require;

namespace {

template <typename T>
Tensor<T> lrelu(const Tensor<T>& x) {
  return leaky_relu(x, static_cast<T>(kLeakySlope));
}

}  // namespace

Ablation parse_ablation(std::string_view tag) {
  if (tag == "R1" || tag == "r1") return Ablation::R1;
  if (tag == "R2" || tag == "r2") return Ablation::R2;
  if (tag == "R3" || tag == "r3") return Ablation::R3;
  throw ShapeError("unknown ablation tag '" + std::string(tag) + "' (expected R1, R2 or R3)");
}

std::string_view to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::R1:
      return "R1";
    case Ablation::R2:
      return "R2";
    case Ablation::R3:
      return "R3";
  }
  return "?";
}

AttentionNorm parse_attention_norm(std::string_view tag) {
  if (tag == "softmax") return AttentionNorm::Softmax;
  if (tag == "none") return AttentionNorm::None;
  throw ShapeError("unknown attention normalization '" + std::string(tag) + "' (expected softmax or none)");
}

std::string_view to_string(AttentionNorm norm) {
  return norm == AttentionNorm::Softmax ? "softmax" : "none";
}

void ModelConfig::validate() const {
  require(units >= 1, "units must be >= 1");
  require(channels >= 1, "channels must be >= 1");
  require(scales >= 1, "scales must be >= 1");
  require(pool_rate >= 1, "pool_rate must be >= 1");
  require(footprint >= 1 && footprint % 2 == 1, "footprint must be a positive odd integer");
  require(reduction >= 1 && share >= 1, "reduction and share must be >= 1");
  if (ablation != Ablation::R1) require(channels % 2 == 0, "self-calibrated convolution needs an even channel count");
  if (ablation == Ablation::R3) {
    require(channels % reduction == 0, "channels must be divisible by the attention reduction factor");
    require((channels / reduction) % share == 0, "reduced channels must be divisible by share");
  }
}

int ModelConfig::spatial_multiple() const {
  const int pyramid = 1 << scales;
  return ablation == Ablation::R1 ? pyramid : std::lcm(pyramid, pool_rate);
}

template <typename T>
void collect(const ConvParams<T>& conv, const std::string& prefix, TensorList<T>& out) {
  out.push_back({prefix + ".weight", conv.weight, true});
  out.push_back({prefix + ".bias", conv.bias, true});
}

template <typename T>
void collect(const BatchNormParams<T>& bn, const std::string& prefix, TensorList<T>& out) {
  out.push_back({prefix + ".scale", bn.scale, true});
  out.push_back({prefix + ".shift", bn.shift, true});
  out.push_back({prefix + ".running_mean", bn.running_mean, false});
  out.push_back({prefix + ".running_var", bn.running_var, false});
}

// ---------------------------------------------------------------------------
// Self-attention

template <typename T>
SelfAttention<T> SelfAttention<T>::make(int channels, const ModelConfig& config, Rng& rng) {
  require(channels % config.reduction == 0, "attention: channels " + std::to_string(channels) +
                                                " not divisible by reduction " +
                                                std::to_string(config.reduction));
  const int reduced = channels / config.reduction;
  require(reduced % config.share == 0, "attention: reduced channels " + std::to_string(reduced) +
                                           " not divisible by share " + std::to_string(config.share));
  require(config.footprint % 2 == 1, "attention: footprint must be odd");
  SelfAttention a;
  a.phi = ConvParams<T>::make(channels, reduced, 1, 1, rng);
  a.psi = ConvParams<T>::make(channels, reduced, 1, 1, rng);
  a.beta = ConvParams<T>::make(channels, reduced, 1, 1, rng);
  a.gamma_hidden = ConvParams<T>::make(reduced, reduced, 1, 1, rng);
  a.gamma_out = ConvParams<T>::make(reduced, reduced / config.share, 1, 1, rng);
  a.expand = ConvParams<T>::make(reduced, channels, 1, 1, rng);
  a.bn = BatchNormParams<T>::make(reduced);
  a.footprint = config.footprint;
  a.share = config.share;
  a.normalize = config.attention_normalize;
  return a;
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T>& x, bool training, Trace* trace) {
  const Shape& s = x.shape();
  require(s.c == phi.in_channels(), "attention: input " + s.str() + " expects " +
                                        std::to_string(phi.in_channels()) + " channels");
  require(footprint <= 2 * std::min(s.h, s.w) + 1,
          "attention: footprint " + std::to_string(footprint) + " too large for input " + s.str());
  const int positions = footprint * footprint;

  const Tensor<T> query = conv2d(x, phi);
  const Tensor<T> key = conv2d(x, psi);
  const Tensor<T> value = conv2d(x, beta);

  const Tensor<T> relation = footprint_relation(query, key, footprint);
  const Tensor<T> hidden = lrelu(conv2d(relation, gamma_hidden));
  const Tensor<T> logits = positions_to_channels(conv2d(hidden, gamma_out), positions);

  Tensor<T> weights = logits;
  if (normalize == AttentionNorm::Softmax) {
    const auto valid = footprint_validity(footprint, s.h, s.w);
    weights = softmax_over_positions(logits, positions, valid);
  }
  const Tensor<T> aggregated = footprint_aggregate(weights, value, footprint, share);
  if (trace) {
    trace->weights = weights;
    trace->aggregated = aggregated;
  }
  const Tensor<T> mixed = conv2d(lrelu(batch_norm(aggregated, bn, training)), expand);
  return add(mixed, x);
}

template <typename T>
void SelfAttention<T>::collect(const std::string& prefix, TensorList<T>& out) const {
  jdnet::collect(phi, prefix + ".phi", out);
  jdnet::collect(psi, prefix + ".psi", out);
  jdnet::collect(beta, prefix + ".beta", out);
  jdnet::collect(gamma_hidden, prefix + ".gamma.0", out);
  jdnet::collect(gamma_out, prefix + ".gamma.1", out);
  jdnet::collect(bn, prefix + ".bn", out);
  jdnet::collect(expand, prefix + ".expand", out);
}

// ---------------------------------------------------------------------------
// Scale aggregation

template <typename T>
ScaleAggregation<T> ScaleAggregation<T>::make(int channels, int scales, Rng& rng) {
  require(scales >= 1, "scale aggregation needs at least one scale");
  ScaleAggregation s;
  for (int i = 0; i < scales; ++i) {
    s.down.push_back(ConvParams<T>::make(channels, channels, 3, 2, rng));
    ResBlock block;
    block.first = ConvParams<T>::make(channels, channels, 3, 1, rng);
    block.second = ConvParams<T>::make(channels, channels, 3, 1, rng);
    s.res.push_back(std::move(block));
  }
  s.fuse = ConvParams<T>::make((scales + 1) * channels, channels, 1, 1, rng);
  return s;
}

template <typename T>
Tensor<T> ScaleAggregation<T>::forward(const Tensor<T>& x) {
  const Shape& s = x.shape();
  const int multiple = 1 << scales();
  require(s.h % multiple == 0 && s.w % multiple == 0,
          "scale aggregation: input " + s.str() + " must have H and W divisible by " + std::to_string(multiple) +
              " for " + std::to_string(scales()) + " scales");
  std::vector<Tensor<T>> pyramid{x};
  Tensor<T> level = x;
  for (int i = 0; i < scales(); ++i) {
    level = lrelu(conv2d(level, down[i]));
    const Tensor<T> inner = conv2d(lrelu(conv2d(level, res[i].first)), res[i].second);
    level = add(level, inner);
    pyramid.push_back(upsample_bilinear(level, s.h, s.w));
  }
  return conv2d(concat_channels<T>(pyramid), fuse);
}

template <typename T>
void ScaleAggregation<T>::collect(const std::string& prefix, TensorList<T>& out) const {
  for (int i = 0; i < scales(); ++i) {
    const std::string level = std::to_string(i + 1);
    jdnet::collect(down[i], prefix + ".down." + level, out);
    jdnet::collect(res[i].first, prefix + ".res." + level + ".0", out);
    jdnet::collect(res[i].second, prefix + ".res." + level + ".1", out);
  }
  jdnet::collect(fuse, prefix + ".fuse", out);
}

// ---------------------------------------------------------------------------
// Self-calibrated convolution

template <typename T>
SelfCalibratedConv<T> SelfCalibratedConv<T>::make(int channels, int rate, Rng& rng) {
  require(channels % 2 == 0, "self-calibrated conv: channel count " + std::to_string(channels) + " is odd");
  require(rate >= 1, "self-calibrated conv: pooling rate must be >= 1");
  const int half = channels / 2;
  SelfCalibratedConv sc;
  sc.split1 = ConvParams<T>::make(channels, half, 1, 1, rng);
  sc.split2 = ConvParams<T>::make(channels, half, 1, 1, rng);
  sc.k1 = ConvParams<T>::make(half, half, 3, 1, rng);
  sc.k2 = ConvParams<T>::make(half, half, 3, 1, rng);
  sc.k3 = ConvParams<T>::make(half, half, 3, 1, rng);
  sc.k4 = ConvParams<T>::make(half, half, 3, 1, rng);
  sc.rate = rate;
  return sc;
}

template <typename T>
Tensor<T> SelfCalibratedConv<T>::forward(const Tensor<T>& x, Trace* trace) {
  const Shape& s = x.shape();
  require(s.c % 2 == 0, "self-calibrated conv: input " + s.str() + " has an odd channel count");
  require(s.h % rate == 0 && s.w % rate == 0,
          "self-calibrated conv: input " + s.str() + " not divisible by pooling rate " + std::to_string(rate));
  const Tensor<T> x1 = conv2d(x, split1);
  const Tensor<T> x2 = conv2d(x, split2);

  const Tensor<T> pooled = avg_pool(x1, rate);
  const Tensor<T> context = upsample_bilinear(conv2d(pooled, k2), s.h, s.w);
  const Tensor<T> gate = sigmoid(add(x1, context));
  const Tensor<T> calibrated = mul(conv2d(x1, k3), gate);
  const Tensor<T> y1 = conv2d(calibrated, k4);
  const Tensor<T> y2 = conv2d(x2, k1);
  if (trace) {
    trace->pooled = pooled;
    trace->calibrated = calibrated;
  }
  return concat_channels({y1, y2});
}

template <typename T>
void SelfCalibratedConv<T>::collect(const std::string& prefix, TensorList<T>& out) const {
  jdnet::collect(split1, prefix + ".split1", out);
  jdnet::collect(split2, prefix + ".split2", out);
  jdnet::collect(k1, prefix + ".k1", out);
  jdnet::collect(k2, prefix + ".k2", out);
  jdnet::collect(k3, prefix + ".k3", out);
  jdnet::collect(k4, prefix + ".k4", out);
}

// ---------------------------------------------------------------------------
// Joint unit

template <typename T>
JointUnit<T> JointUnit<T>::make(int in_channels, const ModelConfig& config, Ablation ablation, Rng& rng,
                                bool all_modules) {
  JointUnit u;
  u.compress = ConvParams<T>::make(in_channels, config.channels, 1, 1, rng);
  u.scale_agg = ScaleAggregation<T>::make(config.channels, config.scales, rng);
  if (all_modules || ablation != Ablation::R1)
    u.sc_conv = SelfCalibratedConv<T>::make(config.channels, config.pool_rate, rng);
  if (all_modules || ablation == Ablation::R3)
    u.attention = SelfAttention<T>::make(config.channels, config, rng);
  return u;
}

template <typename T>
Tensor<T> JointUnit<T>::forward(const Tensor<T>& dense_in, Ablation ablation, bool training, Trace* trace) {
  require(dense_in.shape().c == compress.in_channels(),
          "joint unit: dense input " + dense_in.shape().str() + " but compress expects " +
              std::to_string(compress.in_channels()) + " channels");
  const bool use_sc = ablation != Ablation::R1;
  const bool use_att = ablation == Ablation::R3;
  require(!use_sc || sc_conv.has_value(), "joint unit: ablation " + std::string(to_string(ablation)) +
                                              " needs self-calibrated convolution parameters");
  require(!use_att || attention.has_value(),
          "joint unit: ablation " + std::string(to_string(ablation)) + " needs self-attention parameters");

  Tensor<T> y = conv2d(dense_in, compress);
  if (trace) trace->compressed = y;
  y = scale_agg.forward(y);
  if (trace) trace->after_scale_agg = y;
  if (use_sc) {
    y = sc_conv->forward(y);
    if (trace) trace->after_sc_conv = y;
  }
  if (use_att) {
    y = attention->forward(y, training);
    if (trace) trace->after_attention = y;
  }
  return y;
}

template <typename T>
void JointUnit<T>::collect(const std::string& prefix, TensorList<T>& out) const {
  jdnet::collect(compress, prefix + ".compress", out);
  scale_agg.collect(prefix + ".scale_agg", out);
  if (sc_conv) sc_conv->collect(prefix + ".sc_conv", out);
  if (attention) attention->collect(prefix + ".attention", out);
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
JDNet<T> JDNet<T>::make(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  JDNet net;
  net.config_ = config;
  const int C = config.channels;
  net.head = ConvParams<T>::make(3, C, 3, 1, rng);
  for (int k = 0; k < config.units; ++k) {
    net.units_.push_back(JointUnit<T>::make((k + 1) * C, config, config.ablation, rng));
    require(net.units_.back().compress.in_channels() == (k + 1) * C, "dense compress width mismatch");
  }
  net.tail = ConvParams<T>::make(C, 3, 3, 1, rng);
  return net;
}

template <typename T>
typename JDNet<T>::Output JDNet<T>::forward(const Tensor<T>& rainy, bool training) {
  const Shape& s = rainy.shape();
  const int multiple = config_.spatial_multiple();
  require(s.c == 3, "jdnet: expected a 3-channel image batch, got " + s.str());
  require(s.h % multiple == 0 && s.w % multiple == 0,
          "jdnet: input " + s.str() + " must have H and W divisible by " + std::to_string(multiple));

  std::vector<Tensor<T>> features{lrelu(conv2d(rainy, head))};
  for (auto& unit : units_) {
    const Tensor<T> dense = features.size() == 1 ? features.front() : concat_channels<T>(features);
    features.push_back(unit.forward(dense, config_.ablation, training));
  }
  Output out;
  out.rain = conv2d(lrelu(features.back()), tail);
  out.background = sub(rainy, out.rain);
  return out;
}

template <typename T>
TensorList<T> JDNet<T>::state() const {
  TensorList<T> out;
  jdnet::collect(head, "head", out);
  for (std::size_t k = 0; k < units_.size(); ++k) units_[k].collect("units." + std::to_string(k), out);
  jdnet::collect(tail, "tail", out);
  return out;
}

template <typename T>
TensorList<T> JDNet<T>::parameters() const {
  TensorList<T> all = state();
  TensorList<T> trainable;
  for (auto& t : all)
    if (t.trainable) trainable.push_back(std::move(t));
  return trainable;
}

template struct SelfAttention<float>;
template struct SelfAttention<double>;
template struct ScaleAggregation<float>;
template struct ScaleAggregation<double>;
template struct SelfCalibratedConv<float>;
template struct SelfCalibratedConv<double>;
template struct JointUnit<float>;
template struct JointUnit<double>;
template class JDNet<float>;
template class JDNet<double>;
template void collect(const ConvParams<float>&, const std::string&, TensorList<float>&);
template void collect(const ConvParams<double>&, const std::string&, TensorList<double>&);
template void collect(const BatchNormParams<float>&, const std::string&, TensorList<float>&);
template void collect(const BatchNormParams<double>&, const std::string&, TensorList<double>&);

}  // namespace jdnet
