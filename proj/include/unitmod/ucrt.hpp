#pragma once

#include <utility>

#include "unitmod/rng.hpp"
#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace ucrt {

constexpr double kHueCycle = 180.0;

/// H in [0,180), S and V in [0,255], stored as channels of a ...×3×H×W tensor.
struct HsvImage {
    Tensor value;
};

struct UcrtConfig {
    double hue_min = 18.0;
    double hue_max = 116.0;
    double h_jitter = 5.0;
    double sv_jitter = 30.0;
    double p_h = 0.5;
    double p_s = 0.5;
    double p_v = 0.5;

    void validate() const;
};

/// Hexcone conversion of an RGB image in [0,1] (leading axes are batch axes).
HsvImage rgb_to_hsv(const Tensor& rgb);
Tensor hsv_to_rgb(const HsvImage& hsv);

/// Plain arithmetic mean of the H channel over every pixel.
double hue_mean(const HsvImage& hsv);
double hue_mean_rgb(const Tensor& rgb);

/// What one ucrt call did.
struct UcrtTrace {
    bool h_fired = false;
    bool s_fired = false;
    bool v_fired = false;
    double delta_h = 0;  // applied shifts, after truncation
    double delta_s = 0;
    double delta_v = 0;
    double hue_in = 0;
    double hue_out = 0;
};

/// Hue-bounded HSV jitter of one image ([3,H,W] or [1,3,H,W]). Draws a fixed
/// number of values from `rng` per call.
Tensor apply(const Tensor& rgb, const UcrtConfig& config, Rng& rng, UcrtTrace* trace = nullptr);

/// Applies `apply` to each image in an N×3×H×W batch with per-image seeds.
Tensor apply_batch(const Tensor& rgb, const UcrtConfig& config, std::uint64_t seed);

}  // namespace ucrt
UNITMOD_END_NAMESPACE
