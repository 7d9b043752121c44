#pragma once

#include <array>
#include <optional>
#include <vector>

#include "unitmod/layers.hpp"
#include "unitmod/physics.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace net {

/// Architecture [C_s1, C_s2], [K_1, K_2]. The LK blocks run at C_s2 channels.
struct UnitModuleConfig {
    int stem_c1 = 32;
    int stem_c2 = 32;
    int k1 = 9;
    int k2 = 9;
    int gn_groups = 8;
    double t_min = physics::kDefaultTMin;
    /// Initial bias of the last THead conv; sigmoid(2) ≈ 0.88.
    double thead_bias_init = 2.0;
    /// Momentum of the running branch statistics used for kernel folding.
    double stats_momentum = 0.99;
    /// Fold only the two depthwise kernels and keep a live normalization.
    bool strict_reparam = false;

    void validate() const;
};

/// Predicted per-channel color cast, shape [N,3], in (0,1).
struct ColorCastPrediction {
    Tensor value;
};

struct EnhanceResult {
    Tensor enhanced;
    physics::TransmissionMap t;
    physics::BackgroundLight a;
    std::optional<ColorCastPrediction> color_cast;
};

/// Depth-wise large-kernel block with a parallel 3×3 branch.
struct LKBlock {
    ConvLayer pw_in;
    NormLayer pw_in_gn;
    ConvLayer dw_large;
    NormLayer dw_large_gn;
    ConvLayer dw_small;
    NormLayer dw_small_gn;
    ConvLayer pw_out;
    NormLayer pw_out_gn;
    // Present after re-parameterization.
    bool merged = false;
    ConvLayer dw_merged;
    NormLayer dw_merged_gn;  // strict mode only
};

struct ColorCastHead {
    ConvLayer conv;  // 1×1, C → 3
    NormLayer conv_gn;
    std::array<LinearLayer, 3> fc;  // 49→32, 32→16, 16→1
    std::array<NormLayer, 2> fc_gn;
};

struct UnitModuleParams {
    std::array<ConvLayer, 2> stem;
    std::array<NormLayer, 2> stem_gn;
    std::array<LKBlock, 2> lk;
    std::array<ConvLayer, 2> thead;  // second conv carries the bias
    NormLayer thead_gn;
    std::optional<ColorCastHead> color_cast;
};

class UnitModule {
public:
    UnitModule(UnitModuleConfig config, Rng& rng);

    const UnitModuleConfig& config() const { return config_; }
    UnitModuleParams& params() { return params_; }
    const UnitModuleParams& params() const { return params_; }
    bool reparameterized() const { return reparameterized_; }
    bool has_color_cast_head() const { return params_.color_cast.has_value(); }

    /// Stem then the two LK blocks: [N,3,H,W] → [N,C_s2,H/4,W/4].
    Tensor backbone(const Tensor& image, Mode mode);
    /// Upsample → conv+GN+ReLU → upsample → conv → sigmoid → clamp(t_min).
    physics::TransmissionMap thead(const Tensor& features) const;
    /// Training-only color-cast predictor.
    ColorCastPrediction color_cast(const Tensor& features, Mode mode);
    /// Full module: t from the network, A from channel means, J from the
    /// inverted formation model. The color cast is predicted in Train/Eval
    /// mode when the head is present.
    EnhanceResult enhance(const Tensor& image, Mode mode);

    /// Deployment copy: parallel depth-wise branches folded into one kernel,
    /// color-cast head dropped.
    UnitModule reparameterize() const;

    /// Learnable tensors (optionally without the training-only head).
    std::vector<NamedTensor> parameters(bool include_color_cast = true) const;
    /// Everything needed to rebuild the module: parameters, running
    /// statistics and an architecture record.
    std::vector<NamedTensor> state() const;
    /// Rebuilds a module from `state()` entries whose names start with `prefix`.
    static UnitModule from_state(const std::vector<NamedTensor>& entries, const std::string& prefix = {});

    std::int64_t inference_parameter_count() const;

private:
    UnitModule() = default;
    Tensor lk_forward(LKBlock& block, const Tensor& x, Mode mode);

    UnitModuleConfig config_;
    UnitModuleParams params_;
    bool reparameterized_ = false;
};

}  // namespace net
UNITMOD_END_NAMESPACE
