#include "unitmod/layers.hpp"

#include <cmath>
#include <unordered_map>

UNITMOD_BEGIN_NAMESPACE

void fill_uniform(Tensor& t, double bound, Rng& rng) {
    for (auto& v : t.data()) v = static_cast<real>(rng.uniform(-bound, bound));
}

ConvLayer ConvLayer::make(int cin, int cout, int kernel, int stride, int padding, int groups,
                          bool with_bias, Rng& rng) {
    ConvLayer c;
    c.weight = Tensor({cout, cin / groups, kernel, kernel});
    fill_uniform(c.weight, std::sqrt(6.0 / (static_cast<double>(cin / groups) * kernel * kernel)), rng);
    c.weight.set_requires_grad();
    if (with_bias) {
        c.bias = Tensor({cout});
        c.bias.set_requires_grad();
    }
    c.stride = stride;
    c.padding = padding;
    c.groups = groups;
    return c;
}

Tensor ConvLayer::forward(const Tensor& x) const {
    return ops::conv2d(x, weight, bias, {stride, padding, groups});
}

NormLayer NormLayer::make(int channels, int groups, bool track_stats) {
    NormLayer n;
    n.gamma = Tensor::ones({channels});
    n.gamma.set_requires_grad();
    n.beta = Tensor::zeros({channels});
    n.beta.set_requires_grad();
    n.groups = groups;
    n.track_stats = track_stats;
    if (track_stats) {
        n.running_mean = Tensor::zeros({groups});
        n.running_var = Tensor::ones({groups});
    }
    return n;
}

Tensor NormLayer::forward(const Tensor& x, Mode mode, double momentum) {
    if (!(track_stats && mode == Mode::Train)) {
        return ops::group_norm(x, groups, gamma, beta, static_cast<real>(kNormEps));
    }
    ops::GroupStats stats;
    Tensor y = ops::group_norm(x, groups, gamma, beta, static_cast<real>(kNormEps), &stats);
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (int g = 0; g < groups; ++g) {
        double m = 0.0, v = 0.0;
        for (int b = 0; b < stats.batch; ++b) {
            m += stats.mean[static_cast<std::size_t>(b * groups + g)];
            v += stats.var[static_cast<std::size_t>(b * groups + g)];
        }
        m /= stats.batch;
        v /= stats.batch;
        rm[g] = static_cast<real>(momentum * rm[g] + (1.0 - momentum) * m);
        rv[g] = static_cast<real>(momentum * rv[g] + (1.0 - momentum) * v);
    }
    return y;
}

std::pair<std::vector<real>, std::vector<real>> NormLayer::folded_affine() const {
    const int c = channels();
    const int cg = c / groups;
    std::vector<real> scale(static_cast<std::size_t>(c));
    std::vector<real> shift(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const int g = ch / cg;
        const double s = gamma[ch] / std::sqrt(static_cast<double>(running_var[g]) + kNormEps);
        scale[static_cast<std::size_t>(ch)] = static_cast<real>(s);
        shift[static_cast<std::size_t>(ch)] = static_cast<real>(beta[ch] - s * running_mean[g]);
    }
    return {scale, shift};
}

Tensor NormLayer::forward_frozen(const Tensor& x) const {
    if (!track_stats) throw ContractError("frozen normalization needs running statistics");
    const int c = channels();
    const int cg = c / groups;
    std::vector<real> rstd(static_cast<std::size_t>(c)), mean(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const int g = ch / cg;
        rstd[static_cast<std::size_t>(ch)] = static_cast<real>(1.0 / std::sqrt(static_cast<double>(running_var[g]) + kNormEps));
        mean[static_cast<std::size_t>(ch)] = running_mean[g];
    }
    Tensor scale = gamma * Tensor({c}, std::move(rstd));
    Tensor shift = beta - scale * Tensor({c}, std::move(mean));
    return x * scale + shift;
}

LinearLayer LinearLayer::make(int in, int out, Rng& rng) {
    LinearLayer l;
    l.weight = Tensor({out, in});
    fill_uniform(l.weight, std::sqrt(6.0 / in), rng);
    l.weight.set_requires_grad();
    l.bias = Tensor::zeros({out});
    l.bias.set_requires_grad();
    return l;
}

void load_into(const std::vector<NamedTensor>& targets, const std::vector<NamedTensor>& entries) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    for (const auto& t : targets) {
        auto it = by_name.find(t.name);
        if (it == by_name.end()) throw IoError("checkpoint lacks entry '" + t.name + "'");
        if (it->second->shape() != t.tensor.shape()) {
            throw IoError("checkpoint entry '" + t.name + "' has shape " + shape_str(it->second->shape()) +
                          ", expected " + shape_str(t.tensor.shape()));
        }
        Tensor dst = t.tensor;
        auto src = it->second->data();
        std::copy(src.begin(), src.end(), dst.data().begin());
    }
}

std::int64_t count_elements(const std::vector<NamedTensor>& entries) {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.tensor.numel();
    return n;
}

UNITMOD_END_NAMESPACE
