#pragma once

#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace physics {

constexpr double kDefaultTMin = 0.001;
constexpr double kDefaultAlpha = 0.90;

/// Per-image, per-channel background light A, shape [N,3] (or [N,C]).
struct BackgroundLight {
    Tensor value;
};

/// Per-pixel, per-channel transmission t, shape [N,3,H,W].
struct TransmissionMap {
    Tensor value;
};

/// Degradation strength for the self-supervised pair, strictly inside (0,1).
class Alpha {
public:
    explicit Alpha(double v = kDefaultAlpha);
    double value() const { return v_; }

private:
    double v_;
};

/// I = J·t + (1−t)·A
Tensor degrade_km(const Tensor& clean, const TransmissionMap& t, const BackgroundLight& a);

/// J = (I − (1−t)·A) / t, unclipped. Requires t ≥ t_min everywhere.
Tensor enhance_km(const Tensor& image, const TransmissionMap& t, const BackgroundLight& a,
                  double t_min = kDefaultTMin);

/// Channel means of the image.
BackgroundLight background_light(const Tensor& image);

/// J2 = α·J1 + (1−α)·A
Tensor degrade_alpha(const Tensor& image, Alpha alpha, const BackgroundLight& a);

}  // namespace physics
UNITMOD_END_NAMESPACE
