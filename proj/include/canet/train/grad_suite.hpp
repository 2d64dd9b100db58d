#pragma once

// Finite-difference checks of every differentiable op, every loss and every
// network block, each on randomly drawn shapes in double precision.

#include <algorithm>
#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "canet/core/grad_check.hpp"
#include "canet/core/ops.hpp"
#include "canet/core/optim.hpp"
#include "canet/loss/supervision.hpp"
#include "canet/nn/cod_network.hpp"
#include "canet/nn/confidence_network.hpp"
#include "canet/nn/layers.hpp"

namespace canet {

struct GradSuiteRow {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords = 0;
  std::size_t skipped = 0;  // probes that straddled a kink
  int shapes = 0;
  double seconds = 0;
};

namespace gradsuite {

using D = double;
using LossFn = std::function<Var<D>(Tape<D>&)>;

/// One randomly shaped instance: the scalar loss and the tensors to probe.
struct Case {
  LossFn loss;
  std::vector<Var<D>> params;
};

struct Entry {
  std::string name;
  std::function<Case(Rng&)> make;
};

inline Tensor<D> uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values with magnitude in [0.1, 1], keeping kinks out of the probe range.
inline Tensor<D> away_from_zero(Shape s, Rng& rng) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

/// Distinct values spaced 0.02 apart in random order, so no max can flip.
inline Tensor<D> spaced(Shape s, Rng& rng) {
  Tensor<D> t(std::move(s));
  const std::size_t n = t.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t i = 0; i < n; ++i) t[i] = 0.02 * static_cast<double>(perm[i]) - 0.01 * static_cast<double>(n);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// sum(r * out) with a fixed random r, so every output element matters.
inline Var<D> project(Tape<D>& tape, const Var<D>& out, const Tensor<D>& r) { return sum(tape, mul(tape, out, constant(r))); }

/// Zero-initialized heads would hide everything upstream; give them weight.
inline void randomize_heads(ParamStore<D>& store, Rng& rng) {
  for (const auto& e : store.params()) {
    if (e.name.find("head") != std::string::npos) {
      for (auto& v : e.var->value.data()) v = 0.5 * rng.normal();
    }
  }
}

inline Shape op_shape(const std::function<Var<D>(Tape<D>&, const Var<D>&)>& op, const Var<D>& x) {
  Tape<D> t(false);
  return op(t, x)->value.shape();
}

/// Unary op on a random rank-4 input.
inline Entry unary(std::string name, std::function<Tensor<D>(Shape, Rng&)> init,
                   std::function<Var<D>(Tape<D>&, const Var<D>&)> op) {
  return {std::move(name), [init, op](Rng& rng) {
            Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
            auto x = parameter(init(s, rng));
            auto r = uniform(op_shape(op, x), rng);
            return Case{[=](Tape<D>& t) { return project(t, op(t, x), r); }, {x}};
          }};
}

inline std::vector<Entry> entries() {
  std::vector<Entry> e;
  auto any = [](Shape s, Rng& rng) { return uniform(std::move(s), rng); };
  auto kinky = [](Shape s, Rng& rng) { return away_from_zero(std::move(s), rng); };

  e.push_back({"conv2d", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                 const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
                 const std::size_t h = pick(rng, k + 1, 6), w = pick(rng, k + 1, 6);
                 auto x = parameter(uniform({n, ci, h, w}, rng));
                 auto wt = parameter(uniform({co, ci, k, k}, rng));
                 auto b = parameter(uniform({co}, rng));
                 Tape<D> probe(false);
                 auto r = uniform(conv2d(probe, x, wt, b, stride, pad)->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, conv2d(t, x, wt, b, stride, pad), r); }, {x, wt, b}};
               }});
  e.push_back({"conv_transpose2d", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                 const std::size_t k = pick(rng, 2, 3), stride = pick(rng, 1, 2);
                 auto x = parameter(uniform({n, ci, pick(rng, 2, 4), pick(rng, 2, 4)}, rng));
                 auto wt = parameter(uniform({ci, co, k, k}, rng));
                 auto b = parameter(uniform({co}, rng));
                 Tape<D> probe(false);
                 auto r = uniform(conv_transpose2d(probe, x, wt, b, stride)->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, conv_transpose2d(t, x, wt, b, stride), r); },
                             {x, wt, b}};
               }});
  e.push_back({"batch_norm", [](Rng& rng) {
                 const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3);
                 auto x = parameter(uniform({n, c, pick(rng, 2, 4), pick(rng, 2, 4)}, rng));
                 auto g = parameter(uniform({c}, rng, 0.5, 1.5));
                 auto b = parameter(uniform({c}, rng));
                 auto r = uniform(x->value.shape(), rng);
                 return Case{[=](Tape<D>& t) {
                               Tensor<D> rm({c}), rv({c}, 1.0);
                               return project(t, batch_norm(t, x, g, b, rm, rv, BatchNormOptions{}), r);
                             },
                             {x, g, b}};
               }});
  e.push_back(unary("leaky_relu", kinky, [](Tape<D>& t, const Var<D>& x) { return leaky_relu(t, x, 0.2); }));
  e.push_back(unary("relu", kinky, [](Tape<D>& t, const Var<D>& x) { return relu(t, x); }));
  e.push_back(unary("sigmoid", [](Shape s, Rng& rng) { return uniform(std::move(s), rng, -4, 4); },
                    [](Tape<D>& t, const Var<D>& x) { return sigmoid(t, x); }));
  e.push_back(unary("dropout", any, [](Tape<D>& t, const Var<D>& x) {
    Rng mask(7);
    return dropout(t, x, 0.5, true, mask);
  }));
  e.push_back({"bilinear_resize", [](Rng& rng) {
                 auto x = parameter(uniform({pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 2, 5)}, rng));
                 const std::size_t oh = pick(rng, 2, 9), ow = pick(rng, 2, 9);
                 auto r = uniform({x->value.dim(0), x->value.dim(1), oh, ow}, rng);
                 return Case{[=](Tape<D>& t) { return project(t, bilinear_resize(t, x, oh, ow), r); }, {x}};
               }});
  e.push_back({"max_pool2d", [](Rng& rng) {
                 auto x = parameter(spaced({pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)}, rng));
                 Tape<D> probe(false);
                 auto r = uniform(max_pool2d(probe, x)->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, max_pool2d(t, x), r); }, {x}};
               }});
  e.push_back({"concat_channels", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                 auto a = parameter(uniform({n, pick(rng, 1, 3), h, w}, rng));
                 auto b = parameter(uniform({n, pick(rng, 1, 3), h, w}, rng));
                 Tape<D> probe(false);
                 auto r = uniform(concat_channels(probe, {a, b})->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, concat_channels(t, {a, b}), r); }, {a, b}};
               }});
  auto binary = [](std::string name, bool separated, std::function<Var<D>(Tape<D>&, const Var<D>&, const Var<D>&)> op) {
    return Entry{std::move(name), [=](Rng& rng) {
                   Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
                   auto a = parameter(uniform(s, rng));
                   Tensor<D> bv = uniform(s, rng);
                   if (separated) {
                     for (std::size_t i = 0; i < bv.size(); ++i) {
                       bv[i] = a->value[i] + (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.05, 0.5);
                     }
                   }
                   auto b = parameter(bv);
                   auto r = uniform(s, rng);
                   return Case{[=](Tape<D>& t) { return project(t, op(t, a, b), r); }, {a, b}};
                 }};
  };
  e.push_back(binary("add", false, [](Tape<D>& t, const Var<D>& a, const Var<D>& b) { return add(t, a, b); }));
  e.push_back(binary("mul", false, [](Tape<D>& t, const Var<D>& a, const Var<D>& b) { return mul(t, a, b); }));
  e.push_back(binary("maximum", true, [](Tape<D>& t, const Var<D>& a, const Var<D>& b) { return maximum(t, a, b); }));
  e.push_back(unary("scale", any, [](Tape<D>& t, const Var<D>& x) { return scale(t, x, -1.7); }));
  e.push_back({"scale_channels", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3);
                 auto x = parameter(uniform({n, c, pick(rng, 2, 4), pick(rng, 2, 4)}, rng));
                 auto g = parameter(uniform({n, c, 1, 1}, rng));
                 auto r = uniform(x->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, scale_channels(t, x, g), r); }, {x, g}};
               }});
  e.push_back({"scale_spatial", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                 auto x = parameter(uniform({n, pick(rng, 1, 3), h, w}, rng));
                 auto a = parameter(uniform({n, 1, h, w}, rng));
                 auto r = uniform(x->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, scale_spatial(t, x, a), r); }, {x, a}};
               }});
  e.push_back(unary("global_avg_pool", any, [](Tape<D>& t, const Var<D>& x) { return global_avg_pool(t, x); }));
  e.push_back(unary("sum", any, [](Tape<D>& t, const Var<D>& x) { return sum(t, x); }));
  e.push_back(unary("mean", any, [](Tape<D>& t, const Var<D>& x) { return mean(t, x); }));

  // Losses take probabilities; inputs are sigmoid(z) so probes stay inside (0, 1).
  auto prob_shape = [](Rng& rng) { return Shape{pick(rng, 1, 3), 1, pick(rng, 2, 5), pick(rng, 2, 5)}; };
  e.push_back({"bce_mean", [=](Rng& rng) {
                 auto s = prob_shape(rng);
                 auto z = parameter(uniform(s, rng, -3, 3));
                 auto target = uniform(s, rng, 0, 1);
                 return Case{[=](Tape<D>& t) { return loss::bce_mean(t, sigmoid(t, z), target); }, {z}};
               }});
  e.push_back({"confidence_loss", [=](Rng& rng) {
                 auto s = prob_shape(rng);
                 auto a = parameter(uniform(s, rng, -3, 3)), b = parameter(uniform(s, rng, -3, 3));
                 auto ya = uniform(s, rng, 0, 1), yb = uniform(s, rng, 0, 1);
                 return Case{[=](Tape<D>& t) { return loss::confidence_loss(t, sigmoid(t, a), sigmoid(t, b), ya, yb); },
                             {a, b}};
               }});
  e.push_back({"adversarial_confidence_loss", [=](Rng& rng) {
                 auto s = prob_shape(rng);
                 auto a = parameter(uniform(s, rng, -3, 3)), b = parameter(uniform(s, rng, -3, 3));
                 auto g = parameter(uniform(s, rng, -3, 3));
                 return Case{[=](Tape<D>& t) {
                               return loss::adversarial_confidence_loss(t, sigmoid(t, a), sigmoid(t, b), sigmoid(t, g));
                             },
                             {a, b, g}};
               }});
  e.push_back({"structure_loss", [=](Rng& rng) {
                 auto s = prob_shape(rng);
                 auto z = parameter(uniform(s, rng, -3, 3));
                 Tensor<D> y(s), w = uniform(s, rng, 1, 11);
                 for (auto& v : y.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
                 return Case{[=](Tape<D>& t) { return loss::structure_loss(t, sigmoid(t, z), y, w); }, {z}};
               }});
  e.push_back({"structure_loss_pair", [=](Rng& rng) {
                 auto s = prob_shape(rng);
                 auto a = parameter(uniform(s, rng, -3, 3)), b = parameter(uniform(s, rng, -3, 3));
                 Tensor<D> y(s), wa = uniform(s, rng, 1, 11), wb = uniform(s, rng, 1, 11);
                 for (auto& v : y.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
                 return Case{[=](Tape<D>& t) { return loss::structure_loss_pair(t, sigmoid(t, a), sigmoid(t, b), y, wa, wb); },
                             {a, b}};
               }});

  // Blocks own their parameters; the store is kept alive by the closure.
  auto block = [](std::string name, std::function<Case(Rng&, std::shared_ptr<ParamStore<D>>)> make) {
    return Entry{std::move(name), [make](Rng& rng) { return make(rng, std::make_shared<ParamStore<D>>()); }};
  };
  auto with_params = [](Case c, const ParamStore<D>& store) {
    for (const auto& p : store.param_vars()) c.params.push_back(p);
    return c;
  };
  e.push_back(block("conv_bn_act", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), stride = pick(rng, 1, 2);
    nn::ConvBnAct<D> m(*store, "b", ci, co, stride, rng);
    auto x = parameter(uniform({pick(rng, 2, 3), ci, 4, 4}, rng));
    Tape<D> probe(false);
    auto r = uniform(m(probe, x, nn::Mode{true})->value.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) { return project(t, m(t, x, nn::Mode{true}), r); }, {x}}, *store);
  }));
  e.push_back(block("rcab", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    const std::size_t c = pick(rng, 2, 4);
    nn::Rcab<D> m(*store, "b", c, 2, rng);
    auto x = parameter(uniform({pick(rng, 1, 2), c, pick(rng, 2, 4), pick(rng, 2, 4)}, rng));
    auto r = uniform(x->value.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) { return project(t, m(t, x), r); }, {x}}, *store);
  }));
  e.push_back(block("res_block", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    const std::size_t c = pick(rng, 1, 3);
    nn::ResBlock<D> m(*store, "b", c, rng);
    auto x = parameter(uniform({pick(rng, 2, 3), c, pick(rng, 2, 4), pick(rng, 2, 4)}, rng));
    auto r = uniform(x->value.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) { return project(t, m(t, x, nn::Mode{true}), r); }, {x}}, *store);
  }));
  e.push_back({"holistic_attention", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
                 auto f = parameter(uniform({n, pick(rng, 1, 3), h, w}, rng));
                 // Map and blur separated so the max never flips under a probe.
                 auto ymap = parameter(spaced({n, 1, h, w}, rng));
                 auto kernel = constant(nn::gaussian_kernel<D>(3, 1.0));
                 auto r = uniform(f->value.shape(), rng);
                 return Case{[=](Tape<D>& t) { return project(t, nn::holistic_attention(t, f, ymap, kernel), r); }, {f}};
               }});
  e.push_back(block("fusion_module", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    const std::size_t n = pick(rng, 2, 3), base = 4 * pick(rng, 1, 2);
    const std::vector<std::size_t> ch{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
    nn::FusionModule<D> m(*store, "fm", ch, 2, 3, 2, rng);
    randomize_heads(*store, rng);
    std::vector<Var<D>> feats;
    for (std::size_t i = 0; i < ch.size(); ++i) feats.push_back(parameter(uniform({n, ch[i], base >> i, base >> i}, rng)));
    auto top = parameter(uniform({n, 2, 1, 1}, rng));
    auto r = uniform({n, 1, base, base}, rng);
    Case c{[=](Tape<D>& t) { return project(t, m(t, feats, top, nn::Mode{true}), r); }, feats};
    c.params.push_back(top);
    return with_params(c, *store);
  }));
  e.push_back(block("cod_network", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    nn::CodConfig cfg;
    cfg.image_size = 32;
    cfg.widths = {2, 3, pick(rng, 2, 4), 3, 3};
    cfg.fusion_width = 3;
    cfg.rcab_reduction = 2;
    nn::CodNetwork<D> net(*store, cfg, rng);
    randomize_heads(*store, rng);
    const std::size_t n = 2;
    auto x = parameter(uniform({n, 3, cfg.image_size, cfg.image_size}, rng, 0, 1));
    auto ri = uniform({n, 1, cfg.image_size, cfg.image_size}, rng), rr = uniform(ri.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) {
                              auto o = net(t, x, nn::Mode{true});
                              return add(t, project(t, o.y_ini, ri), project(t, o.y_ref, rr));
                            },
                            {x}},
                       *store);
  }));
  e.push_back(block("confidence_down_block", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    nn::ConfConfig cfg;
    cfg.widths = {2, 2, pick(rng, 2, 3), 3, 3};
    nn::ConfidenceNetwork<D> net(*store, cfg, rng);
    const std::size_t level = pick(rng, 2, 3), n = 2;
    auto x = parameter(uniform({n, cfg.widths[level - 2], 8, 8}, rng));
    Tape<D> probe(false);
    Rng mask(3);
    auto r = uniform(net.down_block(probe, x, level, nn::Mode{true, &mask})->value.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) {
                              Rng m(3);
                              return project(t, net.down_block(t, x, level, nn::Mode{true, &m}), r);
                            },
                            {x}},
                       *store);
  }));
  e.push_back(block("confidence_up_block", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    nn::ConfConfig cfg;
    cfg.widths = {2, 2, pick(rng, 2, 3), 3, 3};
    nn::ConfidenceNetwork<D> net(*store, cfg, rng);
    const std::size_t level = pick(rng, 2, 4), n = 2;
    auto skip = parameter(uniform({n, cfg.widths[level - 1], 4, 4}, rng));
    auto below = parameter(uniform({n, level == 5 ? cfg.widths[4] : cfg.widths[level], 2, 2}, rng));
    auto r = uniform(skip->value.shape(), rng);
    return with_params(Case{[=](Tape<D>& t) {
                              Rng m(5);
                              return project(t, net.up_block(t, skip, below, level, nn::Mode{true, &m}), r);
                            },
                            {skip, below}},
                       *store);
  }));
  e.push_back(block("confidence_network", [=](Rng& rng, std::shared_ptr<ParamStore<D>> store) {
    nn::ConfConfig cfg;
    cfg.image_size = 32;
    cfg.widths = {2, 2, pick(rng, 2, 3), 3, 3};
    nn::ConfidenceNetwork<D> net(*store, cfg, rng);
    randomize_heads(*store, rng);
    // Three samples keep the 1x1 bottleneck statistics away from degenerate.
    const std::size_t n = 3, s = cfg.image_size;
    auto img = parameter(uniform({n, 3, s, s}, rng, 0, 1));
    auto pred = parameter(uniform({n, 1, s, s}, rng, 0, 1));
    auto r = uniform({n, 1, s, s}, rng);
    return with_params(Case{[=](Tape<D>& t) {
                              Rng m(11);
                              return project(t, net(t, img, pred, nn::Mode{true, &m}), r);
                            },
                            {img, pred}},
                       *store);
  }));
  return e;
}

}  // namespace gradsuite

struct GradSuiteOptions {
  std::uint64_t seed = 2024;
  int shapes = 3;
  double eps = 1e-3;
  std::size_t max_coords_per_param = 12;
  std::function<void(const GradSuiteRow&)> on_row;
};

/// Runs every entry on `shapes` random instances; one row per entry holding
/// the worst relative error seen.
inline std::vector<GradSuiteRow> run_grad_suite(const GradSuiteOptions& opt = {}) {
  std::vector<GradSuiteRow> rows;
  Rng rng(opt.seed);
  for (const auto& entry : gradsuite::entries()) {
    const auto start = std::chrono::steady_clock::now();
    GradSuiteRow row{entry.name, 0.0, 0, 0, opt.shapes, 0.0};
    for (int s = 0; s < opt.shapes; ++s) {
      auto c = entry.make(rng);
      const auto r = grad_check(c.loss, c.params, GradCheckOptions{opt.eps, opt.max_coords_per_param, rng.next()});
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      row.coords += r.coords_checked;
      row.skipped += r.coords_skipped;
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (opt.on_row) opt.on_row(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace canet
