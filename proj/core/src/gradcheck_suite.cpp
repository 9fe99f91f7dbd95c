#include "jdnet/gradcheck_suite.hpp"

#include <algorithm>

#include "jdnet/losses.hpp"
#include "jdnet/modules.hpp"
#include "jdnet/ops.hpp"

namespace jdnet {

namespace {

using Td = Tensor<double>;

Td random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Td t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero so a kink is never straddled by +-step.
Td away_from_zero(Shape s, Rng& rng, double margin = 0.1) {
  Td t(s);
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(margin, 1.0);
  return t;
}

/// Scalar read-out <out, r> for a fixed random r.
struct Projection {
  Td weights;
  Projection(const Shape& s, Rng& rng) : weights(random_tensor(s, rng)) {}
  Td operator()(const Td& out) const { return scale(sum(mul(out, weights)), 1.0 / weights.numel()); }
};

std::uint64_t name_seed(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

/// Runs `check(shape_index, rng)` for every shape and folds the reports.
GradCheckReport over_shapes(const std::string& name, int shapes, const GradCheckOptions& opts,
                            const std::function<GradCheckReport(int, Rng&, const GradCheckOptions&)>& check) {
  GradCheckReport merged;
  merged.name = name;
  merged.tolerance = opts.tolerance;
  for (int i = 0; i < shapes; ++i) {
    Rng rng(derive_seed(name_seed(name), static_cast<std::uint64_t>(i)));
    const GradCheckReport r = check(i, rng, opts);
    merged.relative_errors.insert(merged.relative_errors.end(), r.relative_errors.begin(), r.relative_errors.end());
    merged.max_relative_error = std::max(merged.max_relative_error, r.max_relative_error);
    merged.refined_elements += r.refined_elements;
    merged.passed = merged.passed && r.passed;
  }
  return merged;
}

template <typename Module>
std::vector<Td> with_parameters(const Module& m, std::vector<Td> inputs) {
  TensorList<double> params;
  m.collect("m", params);
  for (auto& p : params)
    if (p.trainable) inputs.push_back(p.tensor);
  return inputs;
}

GradCheckCase unary_case(const std::string& name, const std::vector<Shape>& shapes,
                         std::function<Td(const Td&)> op, bool avoid_zero = false) {
  return {name, "conv", 1e-4, [=](const GradCheckOptions& opts) {
            return over_shapes(name, static_cast<int>(shapes.size()), opts, [&](int i, Rng& rng, const auto& o) {
              Td x = avoid_zero ? away_from_zero(shapes[i], rng) : random_tensor(shapes[i], rng);
              const Shape out = op(x).shape();
              Projection proj(out, rng);
              return finite_diff_check(name, [&] { return proj(op(x)); }, {x}, o);
            });
          }};
}

GradCheckCase binary_case(const std::string& name, std::function<Td(const Td&, const Td&)> op) {
  const std::vector<Shape> shapes{{1, 2, 3, 3}, {2, 3, 4, 5}, {3, 1, 2, 6}};
  return {name, "conv", 1e-4, [=](const GradCheckOptions& opts) {
            return over_shapes(name, 3, opts, [&](int i, Rng& rng, const auto& o) {
              Td a = random_tensor(shapes[i], rng);
              Td b = random_tensor(shapes[i], rng);
              Projection proj(shapes[i], rng);
              return finite_diff_check(name, [&] { return proj(op(a, b)); }, {a, b}, o);
            });
          }};
}

std::vector<GradCheckCase> build_registry() {
  std::vector<GradCheckCase> cases;

  cases.push_back({"conv2d", "conv", 1e-4, [](const GradCheckOptions& opts) {
                     struct Setup {
                       Shape in;
                       int cout, k, stride;
                     };
                     const std::vector<Setup> setups{
                         {{1, 2, 5, 5}, 3, 3, 1}, {{2, 3, 6, 4}, 2, 3, 2}, {{2, 4, 3, 3}, 5, 1, 1}, {{1, 1, 7, 7}, 2, 5, 1}};
                     return over_shapes("conv2d", 4, opts, [&](int i, Rng& rng, const auto& o) {
                       const Setup& s = setups[i];
                       auto p = ConvParams<double>::make(s.in.c, s.cout, s.k, s.stride, rng);
                       for (double& v : p.bias.data()) v = rng.uniform(-0.5, 0.5);
                       Td x = random_tensor(s.in, rng);
                       Projection proj(conv2d(x, p).shape(), rng);
                       return finite_diff_check("conv2d", [&] { return proj(conv2d(x, p)); }, {x, p.weight, p.bias}, o);
                     });
                   }});
  cases.push_back(unary_case("avg_pool", {{1, 2, 4, 4}, {2, 1, 6, 9}, {1, 3, 8, 8}}, [](const Td& x) {
    const int rate = x.shape().h == 6 ? 3 : (x.shape().h == 8 ? 4 : 2);
    return avg_pool(x, rate);
  }));
  cases.push_back(unary_case("upsample_bilinear", {{1, 2, 2, 2}, {2, 1, 3, 5}, {1, 3, 4, 4}}, [](const Td& x) {
    return upsample_bilinear(x, 2 * x.shape().h, x.shape().w == 5 ? 7 : 4 * x.shape().w);
  }));
  cases.push_back(unary_case("leaky_relu", {{1, 2, 3, 3}, {2, 3, 4, 5}, {1, 1, 8, 2}},
                             [](const Td& x) { return leaky_relu(x, kLeakySlope); }, true));
  cases.push_back(unary_case("sigmoid", {{1, 2, 3, 3}, {2, 3, 4, 5}, {1, 1, 8, 2}},
                             [](const Td& x) { return sigmoid(scale(x, 3.0)); }));
  cases.push_back({"batch_norm", "conv", 1e-4, [](const GradCheckOptions& opts) {
                     const std::vector<Shape> shapes{{2, 2, 3, 3}, {4, 3, 1, 1}, {1, 2, 4, 5}};
                     return over_shapes("batch_norm", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       auto bn = BatchNormParams<double>::make(shapes[i].c);
                       for (double& v : bn.scale.data()) v = rng.uniform(0.5, 1.5);
                       for (double& v : bn.shift.data()) v = rng.uniform(-0.5, 0.5);
                       Td x = random_tensor(shapes[i], rng);
                       Projection proj(shapes[i], rng);
                       return finite_diff_check("batch_norm", [&] { return proj(batch_norm(x, bn, true)); },
                                                {x, bn.scale, bn.shift}, o);
                     });
                   }});
  cases.push_back({"concat_channels", "conv", 1e-4, [](const GradCheckOptions& opts) {
                     return over_shapes("concat_channels", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       const int h = 2 + i, w = 3;
                       Td a = random_tensor({2, 1 + i, h, w}, rng);
                       Td b = random_tensor({2, 2, h, w}, rng);
                       Td c = random_tensor({2, 3 - i, h, w}, rng);
                       Projection proj({2, 6, h, w}, rng);
                       return finite_diff_check("concat_channels", [&] { return proj(concat_channels<double>({a, b, c})); },
                                                {a, b, c}, o);
                     });
                   }});
  cases.push_back(unary_case("slice_channels", {{1, 4, 3, 3}, {2, 5, 2, 4}, {1, 3, 5, 1}}, [](const Td& x) {
    return slice_channels(x, 1, x.shape().c - 1);
  }));
  cases.push_back(binary_case("add", [](const Td& a, const Td& b) { return add(a, b); }));
  cases.push_back(binary_case("sub", [](const Td& a, const Td& b) { return sub(a, b); }));
  cases.push_back(binary_case("mul", [](const Td& a, const Td& b) { return mul(a, b); }));
  cases.push_back(unary_case("scale", {{1, 2, 3, 3}, {2, 3, 4, 5}, {1, 1, 8, 2}},
                             [](const Td& x) { return scale(x, -1.7); }));
  cases.push_back(unary_case("sum", {{1, 2, 3, 3}, {2, 3, 4, 5}, {1, 1, 8, 2}},
                             [](const Td& x) { return sum(mul(x, x)); }));
  cases.push_back(unary_case("mean", {{1, 2, 3, 3}, {2, 3, 4, 5}, {1, 1, 8, 2}},
                             [](const Td& x) { return mean(mul(x, x)); }));

  cases.push_back({"softmax_over_positions", "attention", 1e-4, [](const GradCheckOptions& opts) {
                     return over_shapes("softmax_over_positions", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       const int fp = i == 2 ? 5 : 3;
                       const int P = fp * fp, G = 1 + i % 2, H = 3 + i, W = 4;
                       Td x = random_tensor({1 + i % 2, G * P, H, W}, rng, -2.0, 2.0);
                       const auto valid = footprint_validity(fp, H, W);
                       const bool masked = i != 1;
                       Projection proj(x.shape(), rng);
                       return finite_diff_check(
                           "softmax_over_positions",
                           [&] {
                             return proj(masked ? softmax_over_positions(x, P, valid) : softmax_over_positions(x, P));
                           },
                           {x}, o);
                     });
                   }});
  cases.push_back({"footprint_relation", "attention", 1e-4, [](const GradCheckOptions& opts) {
                     return over_shapes("footprint_relation", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       const int fp = 3 + 2 * (i % 2);
                       const Shape s{1 + i % 2, 1 + i, 3 + i, 4};
                       Td a = random_tensor(s, rng);
                       Td b = random_tensor(s, rng);
                       Projection proj(footprint_relation(a, b, fp).shape(), rng);
                       return finite_diff_check("footprint_relation", [&] { return proj(footprint_relation(a, b, fp)); },
                                                {a, b}, o);
                     });
                   }});
  cases.push_back(unary_case("positions_to_channels", {{9, 2, 3, 3}, {18, 1, 2, 4}, {25, 3, 2, 2}}, [](const Td& x) {
    const int P = x.shape().n == 25 ? 25 : 9;
    return positions_to_channels(x, P);
  }));
  cases.back().group = "attention";
  cases.push_back({"footprint_aggregate", "attention", 1e-4, [](const GradCheckOptions& opts) {
                     return over_shapes("footprint_aggregate", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       const int fp = i == 2 ? 5 : 3, share = i == 1 ? 2 : 1;
                       const int P = fp * fp, m = 2 + i % 2 * 2, G = m / share, N = 1 + i % 2;
                       const int H = 3 + i, W = 4;
                       Td weights = random_tensor({N, G * P, H, W}, rng);
                       Td values = random_tensor({N, m, H, W}, rng);
                       Projection proj(values.shape(), rng);
                       return finite_diff_check("footprint_aggregate",
                                                [&] { return proj(footprint_aggregate(weights, values, fp, share)); },
                                                {weights, values}, o);
                     });
                   }});
  cases.push_back({"self_attention", "attention", 1e-4, [](const GradCheckOptions& opts) {
                     struct Setup {
                       Shape in;
                       int footprint, reduction, share;
                       AttentionNorm norm;
                     };
                     const std::vector<Setup> setups{{{2, 4, 5, 5}, 3, 2, 1, AttentionNorm::Softmax},
                                                     {{1, 8, 4, 6}, 5, 4, 2, AttentionNorm::Softmax},
                                                     {{2, 8, 5, 5}, 7, 2, 1, AttentionNorm::None}};
                     GradCheckOptions limited = opts;
                     limited.max_elements_per_input = 16;
                     return over_shapes("self_attention", 3, limited, [&](int i, Rng& rng, const auto& o) {
                       const Setup& s = setups[i];
                       ModelConfig cfg;
                       cfg.footprint = s.footprint;
                       cfg.reduction = s.reduction;
                       cfg.share = s.share;
                       cfg.attention_normalize = s.norm;
                       auto att = SelfAttention<double>::make(s.in.c, cfg, rng);
                       Td x = random_tensor(s.in, rng);
                       Projection proj(s.in, rng);
                       return finite_diff_check("self_attention", [&] { return proj(att.forward(x, true)); },
                                                with_parameters(att, {x}), o);
                     });
                   }});

  cases.push_back({"scale_aggregation", "scaleagg", 1e-4, [](const GradCheckOptions& opts) {
                     struct Setup {
                       Shape in;
                       int scales;
                     };
                     const std::vector<Setup> setups{{{2, 4, 8, 8}, 2}, {{1, 3, 8, 4}, 1}, {{1, 2, 16, 8}, 3}};
                     GradCheckOptions limited = opts;
                     limited.max_elements_per_input = 16;
                     return over_shapes("scale_aggregation", 3, limited, [&](int i, Rng& rng, const auto& o) {
                       auto sa = ScaleAggregation<double>::make(setups[i].in.c, setups[i].scales, rng);
                       Td x = random_tensor(setups[i].in, rng);
                       Projection proj(setups[i].in, rng);
                       return finite_diff_check("scale_aggregation", [&] { return proj(sa.forward(x)); },
                                                with_parameters(sa, {x}), o);
                     });
                   }});

  cases.push_back({"self_calibrated_conv", "scconv", 1e-4, [](const GradCheckOptions& opts) {
                     struct Setup {
                       Shape in;
                       int rate;
                     };
                     const std::vector<Setup> setups{{{2, 4, 8, 8}, 2}, {{1, 6, 8, 12}, 4}, {{1, 2, 6, 6}, 3}};
                     GradCheckOptions limited = opts;
                     limited.max_elements_per_input = 16;
                     return over_shapes("self_calibrated_conv", 3, limited, [&](int i, Rng& rng, const auto& o) {
                       auto sc = SelfCalibratedConv<double>::make(setups[i].in.c, setups[i].rate, rng);
                       Td x = random_tensor(setups[i].in, rng);
                       Projection proj(setups[i].in, rng);
                       return finite_diff_check("self_calibrated_conv", [&] { return proj(sc.forward(x)); },
                                                with_parameters(sc, {x}), o);
                     });
                   }});

  cases.push_back({"ssim", "ssim", 1e-4, [](const GradCheckOptions& opts) {
                     const std::vector<Shape> shapes{{1, 1, 11, 11}, {2, 3, 12, 14}, {1, 2, 16, 13}};
                     return over_shapes("ssim", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       Td a = random_tensor(shapes[i], rng, 0.0, 1.0);
                       Td b = random_tensor(shapes[i], rng, 0.0, 1.0);
                       return finite_diff_check("ssim", [&] { return ssim(a, b); }, {a, b}, o);
                     });
                   }});
  cases.push_back({"mae_loss", "ssim", 1e-4, [](const GradCheckOptions& opts) {
                     const std::vector<Shape> shapes{{1, 1, 3, 3}, {2, 3, 4, 5}, {1, 2, 6, 1}};
                     return over_shapes("mae_loss", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       Td a = random_tensor(shapes[i], rng);
                       Td b = add(a, away_from_zero(shapes[i], rng));
                       return finite_diff_check("mae_loss", [&] { return mae_loss(a, b); }, {a, b}, o);
                     });
                   }});
  cases.push_back({"mse_loss", "ssim", 1e-4, [](const GradCheckOptions& opts) {
                     const std::vector<Shape> shapes{{1, 1, 3, 3}, {2, 3, 4, 5}, {1, 2, 6, 1}};
                     return over_shapes("mse_loss", 3, opts, [&](int i, Rng& rng, const auto& o) {
                       Td a = random_tensor(shapes[i], rng);
                       Td b = random_tensor(shapes[i], rng);
                       return finite_diff_check("mse_loss", [&] { return mse_loss(a, b); }, {a, b}, o);
                     });
                   }});
  cases.push_back(unary_case("to_luma", {{1, 3, 3, 3}, {2, 3, 4, 5}, {1, 3, 1, 7}},
                             [](const Td& x) { return to_luma(x); }));
  cases.back().group = "ssim";

  cases.push_back({"jdnet", "network", 1e-3, [](const GradCheckOptions& opts) {
                     GradCheckOptions limited = opts;
                     limited.max_elements_per_input = 4;
                     return over_shapes("jdnet", 1, limited, [&](int, Rng& rng, const auto& o) {
                       ModelConfig cfg;
                       cfg.units = 2;
                       cfg.channels = 4;
                       cfg.scales = 2;
                       cfg.pool_rate = 2;
                       auto net = JDNet<double>::make(cfg, rng.next());
                       Td rainy = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
                       Td clean = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
                       std::vector<Td> inputs{rainy};
                       for (auto& p : net.parameters()) inputs.push_back(p.tensor);
                       return finite_diff_check(
                           "jdnet", [&] { return neg_ssim_loss(net.forward(rainy, true).background, clean); }, inputs,
                           o);
                     });
                   }});
  return cases;
}

}  // namespace

const std::vector<GradCheckCase>& gradcheck_registry() {
  static const std::vector<GradCheckCase> registry = build_registry();
  return registry;
}

const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> groups{"all", "conv", "attention", "scaleagg", "scconv", "ssim", "network"};
  return groups;
}

std::vector<GradCheckReport> run_gradcheck_suite(std::string_view group, std::optional<double> tolerance,
                                                 const std::function<void(const GradCheckReport&)>& on_report) {
  const auto& groups = gradcheck_groups();
  detail::require(std::find(groups.begin(), groups.end(), group) != groups.end(),
                  "unknown gradcheck module '" + std::string(group) + "'");
  std::vector<GradCheckReport> reports;
  for (const auto& c : gradcheck_registry()) {
    if (group != "all" && c.group != group) continue;
    GradCheckOptions opts;
    opts.tolerance = tolerance.value_or(c.default_tolerance);
    reports.push_back(c.run(opts));
    if (on_report) on_report(reports.back());
  }
  return reports;
}

}  // namespace jdnet
