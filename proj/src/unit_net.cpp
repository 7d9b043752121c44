#include "unitmod/unit_net.hpp"

#include <algorithm>

UNITMOD_BEGIN_NAMESPACE
namespace net {

namespace {

constexpr int kPoolSize = 7;
constexpr int kFcWidths[3] = {32, 16, 1};

// Layout of the architecture record stored with the weights.
enum ConfigSlot {
    kStemC1, kStemC2, kK1, kK2, kGroups, kTMin, kMomentum, kStrict, kMerged, kHasHead, kBiasInit, kSlots
};

int groups_for(int channels, int preferred) { return channels % preferred == 0 ? preferred : 1; }

void check_odd_kernel(int k, const char* name) {
    if (k < 3 || k > 13 || k % 2 == 0) {
        throw ConfigError(std::string(name) + " must be an odd kernel size in [3,13], got " + std::to_string(k));
    }
}

std::string lk_name(int i) { return "lk." + std::to_string(i); }

}  // namespace

void UnitModuleConfig::validate() const {
    if (stem_c1 < 1 || stem_c2 < 1) throw ConfigError("stem channels must be positive");
    check_odd_kernel(k1, "K1");
    check_odd_kernel(k2, "K2");
    if (gn_groups < 1 || stem_c1 % gn_groups != 0 || stem_c2 % gn_groups != 0) {
        throw ConfigError("stem channels must be divisible by gn_groups = " + std::to_string(gn_groups));
    }
    if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0,1)");
    if (!(stats_momentum >= 0.0 && stats_momentum < 1.0)) throw ConfigError("stats_momentum must lie in [0,1)");
}

UnitModule::UnitModule(UnitModuleConfig config, Rng& rng) : config_(config) {
    config_.validate();
    const int c1 = config_.stem_c1;
    const int c = config_.stem_c2;
    const int g = config_.gn_groups;
    auto& p = params_;
    p.stem[0] = ConvLayer::make(3, c1, 3, 2, 1, 1, false, rng);
    p.stem_gn[0] = NormLayer::make(c1, g, false);
    p.stem[1] = ConvLayer::make(c1, c, 3, 2, 1, 1, false, rng);
    p.stem_gn[1] = NormLayer::make(c, g, false);
    const int kernels[2] = {config_.k1, config_.k2};
    for (int i = 0; i < 2; ++i) {
        auto& b = p.lk[static_cast<std::size_t>(i)];
        const int k = kernels[i];
        b.pw_in = ConvLayer::make(c, c, 1, 1, 0, 1, false, rng);
        b.pw_in_gn = NormLayer::make(c, g, false);
        b.dw_large = ConvLayer::make(c, c, k, 1, k / 2, c, false, rng);
        b.dw_large_gn = NormLayer::make(c, g, true);
        b.dw_small = ConvLayer::make(c, c, 3, 1, 1, c, false, rng);
        b.dw_small_gn = NormLayer::make(c, g, true);
        b.pw_out = ConvLayer::make(c, c, 1, 1, 0, 1, false, rng);
        b.pw_out_gn = NormLayer::make(c, g, false);
    }
    p.thead[0] = ConvLayer::make(c, c, 3, 1, 1, 1, false, rng);
    p.thead_gn = NormLayer::make(c, g, false);
    p.thead[1] = ConvLayer::make(c, 3, 3, 1, 1, 1, true, rng);
    for (auto& v : p.thead[1].bias.data()) v = static_cast<real>(config_.thead_bias_init);

    ColorCastHead head;
    head.conv = ConvLayer::make(c, 3, 1, 1, 0, 1, false, rng);
    head.conv_gn = NormLayer::make(3, 1, false);
    int in = kPoolSize * kPoolSize;
    for (int i = 0; i < 3; ++i) {
        head.fc[static_cast<std::size_t>(i)] = LinearLayer::make(in, kFcWidths[i], rng);
        if (i < 2) head.fc_gn[static_cast<std::size_t>(i)] = NormLayer::make(kFcWidths[i], groups_for(kFcWidths[i], g), false);
        in = kFcWidths[i];
    }
    p.color_cast = std::move(head);
}

Tensor UnitModule::lk_forward(LKBlock& b, const Tensor& x, Mode mode) {
    const double mom = config_.stats_momentum;
    Tensor y = ops::relu(b.pw_in_gn.forward(b.pw_in.forward(x), mode, mom));
    Tensor z;
    if (b.merged) {
        z = b.dw_merged.forward(y);
        if (config_.strict_reparam) z = b.dw_merged_gn.forward(z, mode, mom);
    } else {
        Tensor large = b.dw_large.forward(y);
        Tensor small = b.dw_small.forward(y);
        if (mode == Mode::Inference && !config_.strict_reparam) {
            large = b.dw_large_gn.forward_frozen(large);
            small = b.dw_small_gn.forward_frozen(small);
        } else {
            large = b.dw_large_gn.forward(large, mode, mom);
            small = b.dw_small_gn.forward(small, mode, mom);
        }
        // No activation before the branch sum.
        z = large + small;
    }
    z = ops::relu(z);
    Tensor out = b.pw_out_gn.forward(b.pw_out.forward(z), mode, mom);
    // No activation before the shortcut sum.
    return ops::relu(out + x);
}

Tensor UnitModule::backbone(const Tensor& image, Mode mode) {
    if (image.ndim() != 4 || image.dim(1) != 3) {
        throw DimensionError("UnitModule expects N×3×H×W images, got " + shape_str(image.shape()));
    }
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
        throw ConfigError("UnitModule input height and width must be divisible by 4, got " +
                          std::to_string(image.dim(2)) + "×" + std::to_string(image.dim(3)));
    }
    auto& p = params_;
    const double mom = config_.stats_momentum;
    Tensor x = image;
    for (int i = 0; i < 2; ++i) {
        x = ops::relu(p.stem_gn[static_cast<std::size_t>(i)].forward(p.stem[static_cast<std::size_t>(i)].forward(x), mode, mom));
    }
    for (auto& b : p.lk) x = lk_forward(b, x, mode);
    return x;
}

physics::TransmissionMap UnitModule::thead(const Tensor& features) const {
    const auto& p = params_;
    auto gn = p.thead_gn;  // handle copy; this norm keeps no statistics
    Tensor x = ops::upsample_nearest2x(features);
    x = ops::relu(gn.forward(p.thead[0].forward(x), Mode::Eval, 0.0));
    x = ops::upsample_nearest2x(x);
    x = p.thead[1].forward(x);
    return {ops::clamp_min(ops::sigmoid(x), static_cast<real>(config_.t_min))};
}

ColorCastPrediction UnitModule::color_cast(const Tensor& features, Mode mode) {
    if (mode == Mode::Inference || !params_.color_cast) {
        throw ContractError("the color-cast predictor is training-only and unavailable in inference");
    }
    auto& h = *params_.color_cast;
    const int n = features.dim(0);
    Tensor x = ops::adaptive_avg_pool2d(features, kPoolSize, kPoolSize);
    x = ops::relu(h.conv_gn.forward(h.conv.forward(x), mode, 0.0));
    x = x.reshape({n * 3, kPoolSize * kPoolSize});
    for (std::size_t i = 0; i < 2; ++i) x = ops::relu(h.fc_gn[i].forward(h.fc[i].forward(x), mode, 0.0));
    x = h.fc[2].forward(x);
    return {ops::sigmoid(x.reshape({n, 3}))};
}

EnhanceResult UnitModule::enhance(const Tensor& image, Mode mode) {
    EnhanceResult r;
    Tensor features = backbone(image, mode);
    r.t = thead(features);
    r.a = physics::background_light(image);
    r.enhanced = physics::enhance_km(image, r.t, r.a, config_.t_min);
    if (mode != Mode::Inference && params_.color_cast) r.color_cast = color_cast(features, mode);
    return r;
}

std::vector<NamedTensor> UnitModule::parameters(bool include_color_cast) const {
    StateBuilder s;
    const auto& p = params_;
    for (int i = 0; i < 2; ++i) {
        const std::string base = "stem." + std::to_string(i);
        s.conv(base + ".conv", p.stem[static_cast<std::size_t>(i)]);
        s.norm(base + ".gn", p.stem_gn[static_cast<std::size_t>(i)], false);
    }
    for (int i = 0; i < 2; ++i) {
        const auto& b = p.lk[static_cast<std::size_t>(i)];
        const std::string base = lk_name(i);
        s.conv(base + ".pw_in", b.pw_in);
        s.norm(base + ".pw_in_gn", b.pw_in_gn, false);
        if (b.merged) {
            s.conv(base + ".dw_merged", b.dw_merged);
            if (config_.strict_reparam) s.norm(base + ".dw_merged_gn", b.dw_merged_gn, false);
        } else {
            s.conv(base + ".dw_large", b.dw_large);
            s.norm(base + ".dw_large_gn", b.dw_large_gn, false);
            s.conv(base + ".dw_small", b.dw_small);
            s.norm(base + ".dw_small_gn", b.dw_small_gn, false);
        }
        s.conv(base + ".pw_out", b.pw_out);
        s.norm(base + ".pw_out_gn", b.pw_out_gn, false);
    }
    s.conv("thead.0.conv", p.thead[0]);
    s.norm("thead.0.gn", p.thead_gn, false);
    s.conv("thead.1.conv", p.thead[1]);
    if (include_color_cast && p.color_cast) {
        const auto& h = *p.color_cast;
        s.conv("cc.conv", h.conv);
        s.norm("cc.conv_gn", h.conv_gn, false);
        for (int i = 0; i < 3; ++i) {
            s.linear("cc.fc." + std::to_string(i), h.fc[static_cast<std::size_t>(i)]);
            if (i < 2) s.norm("cc.fc." + std::to_string(i) + ".gn", h.fc_gn[static_cast<std::size_t>(i)], false);
        }
    }
    return s.take();
}

std::vector<NamedTensor> UnitModule::state() const {
    auto entries = parameters(true);
    for (int i = 0; i < 2; ++i) {
        const auto& b = params_.lk[static_cast<std::size_t>(i)];
        if (b.merged) continue;
        const std::string base = lk_name(i);
        entries.push_back({base + ".dw_large_gn.running_mean", b.dw_large_gn.running_mean});
        entries.push_back({base + ".dw_large_gn.running_var", b.dw_large_gn.running_var});
        entries.push_back({base + ".dw_small_gn.running_mean", b.dw_small_gn.running_mean});
        entries.push_back({base + ".dw_small_gn.running_var", b.dw_small_gn.running_var});
    }
    std::vector<real> cfg(kSlots);
    cfg[kStemC1] = static_cast<real>(config_.stem_c1);
    cfg[kStemC2] = static_cast<real>(config_.stem_c2);
    cfg[kK1] = static_cast<real>(config_.k1);
    cfg[kK2] = static_cast<real>(config_.k2);
    cfg[kGroups] = static_cast<real>(config_.gn_groups);
    cfg[kTMin] = static_cast<real>(config_.t_min);
    cfg[kMomentum] = static_cast<real>(config_.stats_momentum);
    cfg[kStrict] = config_.strict_reparam ? 1 : 0;
    cfg[kMerged] = reparameterized_ ? 1 : 0;
    cfg[kHasHead] = params_.color_cast ? 1 : 0;
    cfg[kBiasInit] = static_cast<real>(config_.thead_bias_init);
    entries.push_back({"config", Tensor({kSlots}, std::move(cfg))});
    return entries;
}

UnitModule UnitModule::from_state(const std::vector<NamedTensor>& entries, const std::string& prefix) {
    std::vector<NamedTensor> own;
    for (const auto& e : entries) {
        if (e.name.compare(0, prefix.size(), prefix) == 0) own.push_back({e.name.substr(prefix.size()), e.tensor});
    }
    const auto cfg_it = std::find_if(own.begin(), own.end(), [](const NamedTensor& e) { return e.name == "config"; });
    if (cfg_it == own.end() || cfg_it->tensor.numel() != kSlots) {
        throw IoError("checkpoint lacks a UnitModule architecture record ('" + prefix + "config')");
    }
    const Tensor& c = cfg_it->tensor;
    UnitModuleConfig config;
    config.stem_c1 = static_cast<int>(c[kStemC1]);
    config.stem_c2 = static_cast<int>(c[kStemC2]);
    config.k1 = static_cast<int>(c[kK1]);
    config.k2 = static_cast<int>(c[kK2]);
    config.gn_groups = static_cast<int>(c[kGroups]);
    config.t_min = static_cast<double>(static_cast<float>(c[kTMin]));
    config.stats_momentum = static_cast<double>(static_cast<float>(c[kMomentum]));
    config.strict_reparam = c[kStrict] != 0;
    config.thead_bias_init = c[kBiasInit];
    Rng scratch(0);
    UnitModule m(config, scratch);
    if (c[kMerged] != 0) {
        m = m.reparameterize();
    }
    if (c[kHasHead] == 0) m.params_.color_cast.reset();
    auto targets = m.state();
    targets.pop_back();  // config
    load_into(targets, own);
    return m;
}

UnitModule UnitModule::reparameterize() const {
    if (reparameterized_) return from_state(state());
    UnitModule m;
    m.config_ = config_;
    // Deep copy through the state record, then fold.
    {
        Rng scratch(0);
        UnitModule fresh(config_, scratch);
        auto targets = fresh.state();
        targets.pop_back();
        load_into(targets, state());
        m.params_ = std::move(fresh.params_);
    }
    m.params_.color_cast.reset();
    for (auto& b : m.params_.lk) {
        const int k = b.dw_large.kernel();
        if (k < 3) throw ConfigError("re-parameterization needs K >= 3, got " + std::to_string(k));
        const int ch = b.dw_large.weight.dim(0);
        const int off = (k - 3) / 2;
        Tensor w({ch, 1, k, k});
        const real* wl = b.dw_large.weight.data().data();
        const real* ws = b.dw_small.weight.data().data();
        if (config_.strict_reparam) {
            for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = wl[i];
            for (int c = 0; c < ch; ++c)
                for (int y = 0; y < 3; ++y)
                    for (int x = 0; x < 3; ++x) w[(c * k + y + off) * k + x + off] += ws[(c * 3 + y) * 3 + x];
            b.dw_merged.weight = w;
            b.dw_merged_gn = NormLayer::make(ch, b.dw_large_gn.groups, false);
            b.dw_merged_gn.gamma = b.dw_large_gn.gamma.detach();
            b.dw_merged_gn.beta = b.dw_large_gn.beta.detach();
            b.dw_merged_gn.gamma.set_requires_grad();
            b.dw_merged_gn.beta.set_requires_grad();
        } else {
            auto [sl, hl] = b.dw_large_gn.folded_affine();
            auto [ss, hs] = b.dw_small_gn.folded_affine();
            Tensor bias({ch});
            for (int c = 0; c < ch; ++c) {
                for (int i = 0; i < k * k; ++i) w[c * k * k + i] = sl[static_cast<std::size_t>(c)] * wl[c * k * k + i];
                for (int y = 0; y < 3; ++y)
                    for (int x = 0; x < 3; ++x)
                        w[(c * k + y + off) * k + x + off] += ss[static_cast<std::size_t>(c)] * ws[(c * 3 + y) * 3 + x];
                bias[c] = hl[static_cast<std::size_t>(c)] + hs[static_cast<std::size_t>(c)];
            }
            b.dw_merged.weight = w;
            b.dw_merged.bias = bias;
            b.dw_merged.bias.set_requires_grad();
        }
        b.dw_merged.weight.set_requires_grad();
        b.dw_merged.stride = 1;
        b.dw_merged.padding = k / 2;
        b.dw_merged.groups = ch;
        b.merged = true;
        b.dw_large = {};
        b.dw_small = {};
        b.dw_large_gn = {};
        b.dw_small_gn = {};
    }
    m.reparameterized_ = true;
    return m;
}

std::int64_t UnitModule::inference_parameter_count() const { return count_elements(parameters(false)); }

}  // namespace net
UNITMOD_END_NAMESPACE
