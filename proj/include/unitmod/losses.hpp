#pragma once

#include <iosfwd>
#include <string>

#include "unitmod/physics.hpp"
#include "unitmod/unit_net.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace loss {

/// How per-pixel terms are reduced inside one image before averaging over
/// the batch. Sum reproduces the per-pixel Σ literally; Mean divides by the
/// number of terms and keeps the magnitudes resolution-independent.
enum class PixelReduction { Sum, Mean };

struct LossWeights {
    double w1 = 500.0;  // transmission consistency
    double w2 = 0.01;   // saturated pixels
    double w3 = 0.01;   // total variation
    double w4 = 0.1;    // color cast
    double w5 = 0.1;    // assisting color cast

    void validate() const;
};

/// Σ ‖α·t1 − t2‖² per image, averaged over the batch.
Tensor transmission_loss(const physics::TransmissionMap& t1, const physics::TransmissionMap& t2,
                         physics::Alpha alpha, PixelReduction reduction = PixelReduction::Sum);

/// Hinge form Σ max(J−1,0) + Σ max(−J,0) over both images (second may be
/// undefined), averaged over the batch.
Tensor saturated_pixel_loss(const Tensor& j, const Tensor& j_prime,
                            PixelReduction reduction = PixelReduction::Sum);

/// Squared vertical plus horizontal neighbour differences, averaged over the batch.
Tensor total_variation_loss(const Tensor& j, PixelReduction reduction = PixelReduction::Sum);

/// Σ over (R,G),(G,B),(B,R) of squared channel-mean differences, batch mean.
Tensor color_cast_loss(const Tensor& j);

/// ‖Ĉ − A‖² per image, batch mean. A is treated as a constant label.
Tensor assisting_color_cast_loss(const net::ColorCastPrediction& predicted,
                                 const physics::BackgroundLight& label);

struct LossComponents {
    Tensor l_t;
    Tensor l_sp;
    Tensor l_tv;
    Tensor l_cc;
    Tensor l_acc;
};

struct LossReport {
    long step = 0;
    double l_t = 0, l_sp = 0, l_tv = 0, l_cc = 0, l_acc = 0;
    double l_unitmodule = 0;
    double l_detector = 0;
    double l_total = 0;

    static std::string csv_header();
    std::string csv_row() const;
};

/// w1·L_t + w2·L_sp + w3·L_tv + w4·L_cc + w5·L_acc. Undefined components
/// count as zero. Fills the per-term fields of `report`.
Tensor unit_module_loss(const LossComponents& c, const LossWeights& w, LossReport& report);

}  // namespace loss
UNITMOD_END_NAMESPACE
