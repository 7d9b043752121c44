#include "unitmod/physics.hpp"

#include <algorithm>

#include "unitmod/ops.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace physics {

namespace {

void check_image_pair(const Tensor& image, const Tensor& t, const Tensor& a, const char* op) {
    if (image.ndim() != 4) {
        throw DimensionError(std::string(op) + ": image must be N×C×H×W, got " + shape_str(image.shape()));
    }
    if (t.shape() != image.shape()) {
        throw DimensionError(std::string(op) + ": transmission shape " + shape_str(t.shape()) +
                             " differs from image shape " + shape_str(image.shape()));
    }
    const bool a_ok = (a.ndim() == 2 || (a.ndim() == 4 && a.dim(2) == 1 && a.dim(3) == 1)) &&
                      a.dim(0) == image.dim(0) && a.dim(1) == image.dim(1);
    if (!a_ok) {
        throw DimensionError(std::string(op) + ": background light shape " + shape_str(a.shape()) +
                             " does not match image " + shape_str(image.shape()));
    }
}

}  // namespace

Alpha::Alpha(double v) : v_(v) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError("alpha must lie in (0,1), got " + std::to_string(v));
}

Tensor degrade_km(const Tensor& clean, const TransmissionMap& t, const BackgroundLight& a) {
    check_image_pair(clean, t.value, a.value, "degrade_km");
    return clean * t.value + (1.0 - t.value) * a.value;
}

Tensor enhance_km(const Tensor& image, const TransmissionMap& t, const BackgroundLight& a, double t_min) {
    check_image_pair(image, t.value, a.value, "enhance_km");
    const auto tv = t.value.data();
    const real lowest = tv.empty() ? real(1) : *std::min_element(tv.begin(), tv.end());
    if (!(lowest >= static_cast<real>(t_min))) {
        throw ContractError("enhance_km: transmission " + std::to_string(lowest) +
                            " below t_min " + std::to_string(t_min) + " (clamp before enhancing)");
    }
    return (image - (1.0 - t.value) * a.value) / t.value;
}

BackgroundLight background_light(const Tensor& image) {
    if (image.ndim() != 4) {
        throw DimensionError("background_light: image must be N×C×H×W, got " + shape_str(image.shape()));
    }
    return {ops::channel_mean(image)};
}

Tensor degrade_alpha(const Tensor& image, Alpha alpha, const BackgroundLight& a) {
    const real al = static_cast<real>(alpha.value());
    if (image.ndim() != 4 || a.value.dim(0) != image.dim(0) || a.value.dim(1) != image.dim(1)) {
        throw DimensionError("degrade_alpha: background light " + shape_str(a.value.shape()) +
                             " does not match image " + shape_str(image.shape()));
    }
    return al * image + (1 - al) * a.value;
}

}  // namespace physics
UNITMOD_END_NAMESPACE
