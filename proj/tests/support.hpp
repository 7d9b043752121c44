#pragma once

#include <algorithm>
#include <cmath>

#include "unitmod/rng.hpp"
#include "unitmod/tensor.hpp"
#include "unitmod/ucrt.hpp"

namespace unitmod::testing {

inline Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo = 0, double hi = 1) {
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<real>(rng.uniform(lo, hi));
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

/// [3,size,size] RGB image whose hues scatter ±spread around `center`
/// (H units, wrapped), with S and V drawn from [s_lo,1] and [v_lo,1].
inline Tensor hue_image(Rng& rng, double center, double spread, int size = 8, double s_lo = 0.3, double v_lo = 0.3) {
    Tensor hsv({3, size, size});
    const int n = size * size;
    for (int i = 0; i < n; ++i) {
        double h = std::fmod(center + rng.uniform(-spread, spread) + ucrt::kHueCycle, ucrt::kHueCycle);
        hsv[i] = static_cast<real>(h);
        hsv[n + i] = static_cast<real>(255.0 * rng.uniform(s_lo, 1.0));
        hsv[2 * n + i] = static_cast<real>(255.0 * rng.uniform(v_lo, 1.0));
    }
    return ucrt::hsv_to_rgb({hsv});
}

/// UnitModule parameter count from layer shapes alone: conv weights, GN
/// affine pairs, and the two depthwise branches of each large-kernel block
/// (or their merged kernel plus bias).
inline std::int64_t counted_parameters(int c1, int c, int k1, int k2, bool merged) {
    auto conv = [](std::int64_t cin, std::int64_t cout, std::int64_t k) { return cin * cout * k * k; };
    auto gn = [](std::int64_t ch) { return 2 * ch; };
    std::int64_t n = conv(3, c1, 3) + gn(c1) + conv(c1, c, 3) + gn(c);
    for (int k : {k1, k2}) {
        n += conv(c, c, 1) + gn(c) + conv(c, c, 1) + gn(c);
        n += merged ? c * k * k + c : c * k * k + gn(c) + c * 9 + gn(c);
    }
    n += conv(c, c, 3) + gn(c) + conv(c, 3, 3) + 3;
    return n;
}

/// Distance of a hue mean to [lo, hi].
inline double range_distance(double m, double lo, double hi) {
    if (m < lo) return lo - m;
    if (m > hi) return m - hi;
    return 0.0;
}

}  // namespace unitmod::testing
