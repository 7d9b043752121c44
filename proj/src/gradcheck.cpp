#include "unitmod/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>

#include "unitmod/detector.hpp"
#include "unitmod/losses.hpp"
#include "unitmod/ops.hpp"
#include "unitmod/physics.hpp"
#include "unitmod/train.hpp"
#include "unitmod/unit_net.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace gradcheck {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

Tensor random_leaf(const Shape& shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<real>(rng.uniform(lo, hi));
    t.set_requires_grad();
    return t;
}

// Uniform in [lo,hi] but at least `margin` away from each kink.
Tensor away_from(const Shape& shape, double lo, double hi, std::vector<double> kinks, double margin, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data()) {
        double x = 0;
        bool ok = false;
        while (!ok) {
            x = rng.uniform(lo, hi);
            ok = std::all_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) >= margin; });
        }
        v = static_cast<real>(x);
    }
    t.set_requires_grad();
    return t;
}

Tensor constant(const Shape& shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<real>(rng.uniform(lo, hi));
    return t;
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
    std::vector<Tensor> out;
    for (const auto& n : named) out.push_back(n.tensor);
    return out;
}

Tensor faulty_square(const Tensor& x) {
    std::vector<real> v(x.data().begin(), x.data().end());
    for (auto& e : v) e *= e;
    Tensor in = x;
    // Deliberately wrong: the factor 2 is missing.
    return make_op("faulty_square", x.shape(), std::move(v), {x}, [in](TensorImpl& out) mutable {
        auto g = grad_target(in);
        if (g.empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * in[static_cast<std::int64_t>(i)];
    });
}

void tensor_cases(std::vector<Case>& out, Rng& rng) {
    auto add = [&](std::string name, std::vector<Tensor> inputs, Fn op) {
        out.push_back({"tensor", std::move(name), std::move(inputs), projected(std::move(op)), 1.0, -1});
    };
    const Shape img{2, 3, 4, 5};
    add("add", {random_leaf(img, -1, 1, rng), random_leaf(img, -1, 1, rng)},
        [](const auto& x) { return x[0] + x[1]; });
    add("add_broadcast_scalar", {random_leaf(img, -1, 1, rng), random_leaf({1}, -1, 1, rng)},
        [](const auto& x) { return x[0] + x[1]; });
    add("add_broadcast_channel", {random_leaf(img, -1, 1, rng), random_leaf({3}, -1, 1, rng)},
        [](const auto& x) { return x[0] + x[1]; });
    add("sub_broadcast_image_channel", {random_leaf(img, -1, 1, rng), random_leaf({2, 3}, -1, 1, rng)},
        [](const auto& x) { return x[0] - x[1]; });
    add("mul", {random_leaf(img, -1, 1, rng), random_leaf(img, -1, 1, rng)},
        [](const auto& x) { return x[0] * x[1]; });
    add("mul_broadcast_4d", {random_leaf(img, -1, 1, rng), random_leaf({2, 3, 1, 1}, -1, 1, rng)},
        [](const auto& x) { return x[1] * x[0]; });
    add("div", {random_leaf(img, -1, 1, rng), random_leaf(img, 0.5, 2, rng)},
        [](const auto& x) { return x[0] / x[1]; });
    add("div_broadcast", {random_leaf({2, 3}, -1, 1, rng), random_leaf(img, 0.5, 2, rng)},
        [](const auto& x) { return x[0] / x[1]; });
    add("add_scalar", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return x[0] + real(0.3); });
    add("mul_scalar", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return x[0] * real(-1.7); });
    add("rsub_scalar", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return real(1) - x[0]; });
    add("neg", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return -x[0]; });
    add("square", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return ops::square(x[0]); });
    add("relu", {away_from(img, -1, 1, {0.0}, 0.01, rng)}, [](const auto& x) { return ops::relu(x[0]); });
    add("sigmoid", {random_leaf(img, -4, 4, rng)}, [](const auto& x) { return ops::sigmoid(x[0]); });
    add("softplus", {random_leaf(img, -4, 4, rng)}, [](const auto& x) { return ops::softplus(x[0]); });
    add("exp", {random_leaf(img, -2, 2, rng)}, [](const auto& x) { return ops::exp(x[0]); });
    add("clamp_min", {away_from(img, -1, 1, {0.1}, 0.01, rng)},
        [](const auto& x) { return ops::clamp_min(x[0], real(0.1)); });
    add("sum", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return ops::sum(x[0]); });
    add("mean", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return ops::mean(x[0]); });
    add("channel_mean", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return ops::channel_mean(x[0]); });
    add("narrow", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return ops::narrow(x[0], 3, 1, 3); });
    add("concat", {random_leaf({2, 2, 3, 3}, -1, 1, rng), random_leaf({2, 1, 3, 3}, -1, 1, rng)},
        [](const auto& x) { return ops::concat({x[0], x[1]}, 1); });
    add("reshape", {random_leaf(img, -1, 1, rng)}, [](const auto& x) { return x[0].reshape({6, 20}); });
    add("conv2d_dense_stride2", {random_leaf({2, 3, 7, 7}, -1, 1, rng), random_leaf({4, 3, 3, 3}, -1, 1, rng),
                                 random_leaf({4}, -1, 1, rng)},
        [](const auto& x) { return ops::conv2d(x[0], x[1], x[2], {2, 1, 1}); });
    add("conv2d_pointwise", {random_leaf({2, 4, 5, 5}, -1, 1, rng), random_leaf({6, 4, 1, 1}, -1, 1, rng)},
        [](const auto& x) { return ops::conv2d(x[0], x[1], Tensor(), {1, 0, 1}); });
    add("conv2d_depthwise", {random_leaf({2, 4, 6, 6}, -1, 1, rng), random_leaf({4, 1, 5, 5}, -1, 1, rng),
                             random_leaf({4}, -1, 1, rng)},
        [](const auto& x) { return ops::conv2d(x[0], x[1], x[2], {1, 2, 4}); });
    add("conv2d_grouped", {random_leaf({1, 4, 5, 5}, -1, 1, rng), random_leaf({6, 2, 3, 3}, -1, 1, rng)},
        [](const auto& x) { return ops::conv2d(x[0], x[1], Tensor(), {1, 1, 2}); });
    add("group_norm", {random_leaf({2, 8, 4, 4}, -1, 1, rng), random_leaf({8}, 0.5, 1.5, rng),
                       random_leaf({8}, -0.5, 0.5, rng)},
        [](const auto& x) { return ops::group_norm(x[0], 4, x[1], x[2]); });
    add("group_norm_2d", {random_leaf({6, 32}, -1, 1, rng), random_leaf({32}, 0.5, 1.5, rng),
                          random_leaf({32}, -0.5, 0.5, rng)},
        [](const auto& x) { return ops::group_norm(x[0], 8, x[1], x[2]); });
    add("upsample_nearest2x", {random_leaf({2, 3, 3, 4}, -1, 1, rng)},
        [](const auto& x) { return ops::upsample_nearest2x(x[0]); });
    add("adaptive_avg_pool2d", {random_leaf({2, 3, 10, 9}, -1, 1, rng)},
        [](const auto& x) { return ops::adaptive_avg_pool2d(x[0], 7, 7); });
    add("linear", {random_leaf({5, 7}, -1, 1, rng), random_leaf({3, 7}, -1, 1, rng), random_leaf({3}, -1, 1, rng)},
        [](const auto& x) { return ops::linear(x[0], x[1], x[2]); });
}

void loss_cases(std::vector<Case>& out, Rng& rng) {
    auto add = [&](std::string name, std::vector<Tensor> inputs, Fn fn) {
        out.push_back({"losses", std::move(name), std::move(inputs), std::move(fn), 1.0, -1});
    };
    const Shape img{2, 3, 8, 8};
    const physics::Alpha alpha(0.9);
    for (auto red : {loss::PixelReduction::Sum, loss::PixelReduction::Mean}) {
        const std::string suffix = red == loss::PixelReduction::Sum ? "_sum" : "_mean";
        add("transmission_loss" + suffix, {random_leaf(img, 0.2, 0.9, rng), random_leaf(img, 0.2, 0.9, rng)},
            [=](const auto& x) { return loss::transmission_loss({x[0]}, {x[1]}, alpha, red); });
        add("saturated_pixel_loss" + suffix,
            {away_from(img, -0.5, 1.5, {0.0, 1.0}, 0.01, rng), away_from(img, -0.5, 1.5, {0.0, 1.0}, 0.01, rng)},
            [=](const auto& x) { return loss::saturated_pixel_loss(x[0], x[1], red); });
        add("total_variation_loss" + suffix, {random_leaf(img, 0, 1, rng)},
            [=](const auto& x) { return loss::total_variation_loss(x[0], red); });
    }
    add("saturated_pixel_loss_single", {away_from(img, -0.5, 1.5, {0.0, 1.0}, 0.01, rng)},
        [](const auto& x) { return loss::saturated_pixel_loss(x[0], Tensor()); });
    add("color_cast_loss", {random_leaf(img, 0, 1, rng)}, [](const auto& x) { return loss::color_cast_loss(x[0]); });
    Tensor label = constant({2, 3}, 0.3, 0.9, rng);
    add("assisting_color_cast_loss", {random_leaf({2, 3}, 0.1, 0.9, rng)},
        [label](const auto& x) { return loss::assisting_color_cast_loss({x[0]}, {label}); });
    add("unit_module_loss",
        {random_leaf(img, 0.2, 0.9, rng), random_leaf(img, 0.2, 0.9, rng), away_from(img, -0.5, 1.5, {0.0, 1.0}, 0.01, rng),
         random_leaf({2, 3}, 0.1, 0.9, rng)},
        [=](const auto& x) {
            loss::LossComponents c;
            c.l_t = loss::transmission_loss({x[0]}, {x[1]}, alpha);
            c.l_sp = loss::saturated_pixel_loss(x[2], Tensor());
            c.l_tv = loss::total_variation_loss(x[2]);
            c.l_cc = loss::color_cast_loss(x[2]);
            c.l_acc = loss::assisting_color_cast_loss({x[3]}, {label});
            loss::LossReport rep;
            return loss::unit_module_loss(c, loss::LossWeights{}, rep);
        });

    // Detector loss on a hand-placed grid: offsets positive, some cells positive.
    Tensor raw({2, det::kOutChannels, 4, 4});
    for (int b = 0; b < 2; ++b) {
        for (int ch = 0; ch < det::kOutChannels; ++ch) {
            for (int i = 0; i < 16; ++i) {
                raw[(b * det::kOutChannels + ch) * 16 + i] =
                    static_cast<real>(ch < 4 ? rng.uniform(-2, 2) : rng.uniform(0.2, 3.0));
            }
        }
    }
    raw.set_requires_grad();
    const std::vector<std::vector<synth::Box>> boxes{{{0, 3, 4, 20, 25}, {2, 35, 30, 60, 58}},
                                                     {{1, 10, 40, 28, 62}}};
    add("detector_loss", {raw}, [boxes](const auto& x) { return det::detector_loss(x[0], boxes); });
    add("detector_loss_empty", {random_leaf({1, det::kOutChannels, 2, 2}, -2, 2, rng)},
        [](const auto& x) { return det::detector_loss(x[0], {{}}); });
}

void net_cases(std::vector<Case>& out, Rng& rng) {
    const Shape img{2, 3, 8, 8};
    auto add = [&](std::string name, std::vector<Tensor> inputs, Fn fn, double scale = 1.0, int max_el = -1) {
        out.push_back({"net", std::move(name), std::move(inputs), std::move(fn), scale, max_el});
    };
    add("degrade_km", {random_leaf(img, 0, 1, rng), random_leaf(img, 0.1, 1, rng), random_leaf({2, 3}, 0.2, 0.9, rng)},
        projected([](const auto& x) { return physics::degrade_km(x[0], {x[1]}, {x[2]}); }));
    add("enhance_km", {random_leaf(img, 0, 1, rng), random_leaf(img, 0.2, 1, rng), random_leaf({2, 3}, 0.2, 0.9, rng)},
        projected([](const auto& x) { return physics::enhance_km(x[0], {x[1]}, {x[2]}); }));
    add("degrade_alpha", {random_leaf(img, 0, 1, rng), random_leaf({2, 3}, 0.2, 0.9, rng)},
        projected([](const auto& x) { return physics::degrade_alpha(x[0], physics::Alpha(0.9), {x[1]}); }));
    add("background_light", {random_leaf(img, 0, 1, rng)},
        projected([](const auto& x) { return physics::background_light(x[0]).value; }));

    net::UnitModuleConfig small;
    small.stem_c1 = 8;
    small.stem_c2 = 8;
    small.k1 = 5;
    small.k2 = 5;
    Rng init(rng.next_u64());
    auto toy = std::make_shared<net::UnitModule>(small, init);
    // A few training steps' worth of running statistics so the frozen and
    // merged paths are not at their initial values.
    {
        NoGradGuard guard;
        for (int i = 0; i < 3; ++i) toy->enhance(constant({2, 3, 28, 28}, 0, 1, rng), Mode::Train);
    }
    Tensor image = random_leaf({1, 3, 28, 28}, 0, 1, rng);
    auto with_image = [&](std::vector<Tensor> params) {
        params.push_back(image);
        return params;
    };
    add("unit_module_enhance", with_image(tensors_of(toy->parameters(true))),
        projected([toy](const auto& x) {
            auto r = toy->enhance(x.back(), Mode::Eval);
            auto flat = [](const Tensor& t) { return t.reshape({static_cast<int>(t.numel())}); };
            return ops::concat({flat(r.enhanced), flat(r.t.value), flat(r.color_cast->value)}, 0);
        }));
    add("unit_module_frozen_branches", with_image(tensors_of(toy->parameters(false))),
        projected([toy](const auto& x) { return toy->enhance(x.back(), Mode::Inference).enhanced; }));
    auto merged = std::make_shared<net::UnitModule>(toy->reparameterize());
    add("unit_module_reparameterized", with_image(tensors_of(merged->parameters(false))),
        projected([merged](const auto& x) { return merged->enhance(x.back(), Mode::Inference).enhanced; }));

    Rng det_init(rng.next_u64());
    auto detector = std::make_shared<det::ToyDetector>(det_init);
    Tensor det_image = random_leaf({2, 3, 32, 32}, 0, 1, rng);
    auto det_inputs = tensors_of(detector->parameters());
    det_inputs.push_back(det_image);
    add("detector_forward", det_inputs, projected([detector](const auto& x) { return detector->forward(x.back()); }));

    // The whole joint objective on a 64×64 batch, full-size module. Only a
    // sample of elements per tensor is perturbed.
    train::TrainConfig cfg;
    cfg.seed = rng.next_u64();
    auto trainer = std::make_shared<train::Trainer>(cfg);
    auto samples = synth::generate_dataset(cfg.seed, 2, 64);
    auto batch = std::make_shared<train::Batch>(train::make_batch(samples, {0, 1}));
    // Zero-initialised biases put dead color-cast rows exactly on a ReLU
    // kink, where no finite difference is meaningful.
    std::vector<Tensor> joint;
    for (const auto& p : trainer->optimizer().params()) {
        if (p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "bias") == 0) {
            Tensor b = p.tensor;
            for (auto& v : b.data()) v += static_cast<real>(rng.uniform(-0.05, 0.05));
        }
        joint.push_back(p.tensor);
    }
    add("joint_objective", joint,
        [trainer, batch](const auto&) {
            Tensor total;
            trainer->compute_losses(*batch, &total);
            return total;
        },
        10.0, 3);
}

}  // namespace

Fn projected(Fn op, std::uint64_t seed) {
    auto weights = std::make_shared<Tensor>();
    return [op = std::move(op), weights, seed](const std::vector<Tensor>& x) {
        Tensor y = op(x);
        if (!weights->defined() || weights->shape() != y.shape()) {
            Rng rng(seed);
            *weights = Tensor(y.shape());
            for (auto& v : weights->data()) v = static_cast<real>(rng.uniform(-1, 1));
        }
        return ops::sum(y * *weights);
    };
}

Result check(const Case& c, const Options& opt) {
    Result r;
    r.module = c.module;
    r.name = c.name;
    r.tolerance = opt.tolerance * c.tolerance_scale;
    std::vector<Tensor> inputs = c.inputs;
    for (auto& t : inputs) {
        if (!t.requires_grad() || !t.is_leaf()) throw ContractError("gradcheck '" + c.name + "': inputs must be leaves requiring grad");
        t.zero_grad();
    }
    Tensor out = c.fn(inputs);
    if (out.numel() != 1) throw ContractError("gradcheck '" + c.name + "': function must return a scalar");
    const double f0 = out.item();
    out.backward();
    std::vector<std::vector<real>> analytic;
    for (auto& t : inputs) {
        auto g = t.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(t.numel()), real(0));
        t.zero_grad();
    }

    const int limit = c.max_elements >= 0 ? c.max_elements : opt.max_elements;
    Rng pick(opt.seed);
    double worst = -1;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k];
        const std::int64_t n = t.numel();
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        if (limit > 0 && n > limit) {
            for (int i = 0; i < limit; ++i) {
                const auto j = static_cast<std::size_t>(i) + pick.below(static_cast<std::uint64_t>(n - i));
                std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
            }
            idx.resize(static_cast<std::size_t>(limit));
        }
        for (std::int64_t i : idx) {
            const real saved = t[i];
            const double a = analytic[k][static_cast<std::size_t>(i)];
            double abs_err = 0, rel = 0;
            double step = opt.step;
            for (int attempt = 0; attempt <= opt.refinements; ++attempt, step *= 0.1) {
                double fp = 0, fm = 0;
                {
                    NoGradGuard guard;
                    t[i] = static_cast<real>(saved + step);
                    fp = c.fn(inputs).item();
                    t[i] = static_cast<real>(saved - step);
                    fm = c.fn(inputs).item();
                }
                t[i] = saved;
                const double numeric = (fp - fm) / (2 * step);
                const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
                const double e = std::abs(a - numeric);
                const double q = e / denom;
                if (attempt == 0 || q < rel) {
                    rel = q;
                    abs_err = e;
                }
                // Disagreeing one-sided slopes mark a kink inside the step.
                const double kink = std::abs(fp - 2 * f0 + fm) / (2 * step) / denom;
                if (attempt == 0) {
                    if (q < r.tolerance && kink < 0.1 * r.tolerance) break;
                    ++r.refined;
                }
            }
            r.max_abs_err = std::max(r.max_abs_err, abs_err);
            if (rel > worst) {
                worst = rel;
                r.worst = std::to_string(k) + ":" + std::to_string(i);
            }
            ++r.checked;
        }
    }
    r.max_rel_err = std::max(worst, 0.0);
    r.pass = std::isfinite(r.max_rel_err) && r.max_rel_err < r.tolerance;
    return r;
}

std::vector<Case> builtin_cases(const std::string& module, bool with_fault) {
    if (module != "all" && module != "tensor" && module != "losses" && module != "net") {
        throw ConfigError("gradcheck module must be all, tensor, losses or net; got '" + module + "'");
    }
    std::vector<Case> out;
    Rng rng(2024);
    if (module == "all" || module == "tensor") tensor_cases(out, rng);
    if (module == "all" || module == "losses") loss_cases(out, rng);
    if (module == "all" || module == "net") net_cases(out, rng);
    if (with_fault) {
        Rng frng(5);
        out.push_back({"fixture", "faulty_square", {random_leaf({3, 4}, 0.5, 1.5, frng)},
                       projected([](const auto& x) { return faulty_square(x[0]); }), 1.0, -1});
    }
    return out;
}

std::vector<Result> run_suite(const std::string& module, const Options& opt, bool with_fault) {
    std::vector<Result> results;
    for (const auto& c : builtin_cases(module, with_fault)) results.push_back(check(c, opt));
    return results;
}

std::string format_table(const std::vector<Result>& results) {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-8s %-32s %12s %10s %8s %8s %s\n", "module", "case", "max_rel_err",
                  "tolerance", "checked", "refined", "status");
    os << buf;
    for (const auto& r : results) {
        std::snprintf(buf, sizeof(buf), "%-8s %-32s %12.3e %10.1e %8lld %8lld %s\n", r.module.c_str(),
                      r.name.c_str(), r.max_rel_err, r.tolerance, static_cast<long long>(r.checked),
                      static_cast<long long>(r.refined),
                      r.pass ? "PASS" : ("FAIL" + (r.worst.empty() ? std::string() : " at " + r.worst)).c_str());
        os << buf;
    }
    return os.str();
}

}  // namespace gradcheck
UNITMOD_END_NAMESPACE
