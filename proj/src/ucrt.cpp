#include "unitmod/ucrt.hpp"

#include <algorithm>
#include <array>
#include <cmath>

UNITMOD_BEGIN_NAMESPACE
namespace ucrt {

namespace {

std::int64_t plane_of(const Tensor& t, const char* op) {
    const int nd = t.ndim();
    if (nd < 3 || t.dim(nd - 3) != 3) {
        throw DimensionError(std::string(op) + ": expected ...×3×H×W, got " + shape_str(t.shape()));
    }
    return static_cast<std::int64_t>(t.dim(nd - 2)) * t.dim(nd - 1);
}

double wrap_hue(double h) {
    h = std::fmod(h, kHueCycle);
    if (h < 0) h += kHueCycle;
    if (h >= kHueCycle) h = 0;
    return h;
}

double distance_to_range(double m, const UcrtConfig& c) {
    if (m < c.hue_min) return c.hue_min - m;
    if (m > c.hue_max) return m - c.hue_max;
    return 0.0;
}

HsvImage shifted(const HsvImage& hsv, double dh, double ds, double dv) {
    HsvImage out{hsv.value.clone()};
    const std::int64_t plane = plane_of(out.value, "ucrt");
    auto d = out.value.data();
    const std::int64_t images = out.value.numel() / (3 * plane);
    for (std::int64_t n = 0; n < images; ++n) {
        real* h = d.data() + n * 3 * plane;
        real* s = h + plane;
        real* v = s + plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            if (dh != 0) h[i] = static_cast<real>(wrap_hue(h[i] + dh));
            if (ds != 0) s[i] = static_cast<real>(std::clamp(s[i] + ds, 0.0, 255.0));
            if (dv != 0) v[i] = static_cast<real>(std::clamp(v[i] + dv, 0.0, 255.0));
        }
    }
    return out;
}

}  // namespace

void UcrtConfig::validate() const {
    if (!(hue_min >= 0 && hue_min < hue_max && hue_max < kHueCycle)) {
        throw ConfigError("ucrt: hue range must satisfy 0 <= min < max < 180");
    }
    if (!(h_jitter >= 0 && sv_jitter >= 0)) throw ConfigError("ucrt: jitter magnitudes must be non-negative");
    for (double p : {p_h, p_s, p_v}) {
        if (!(p >= 0 && p <= 1)) throw ConfigError("ucrt: probabilities must lie in [0,1]");
    }
}

HsvImage rgb_to_hsv(const Tensor& rgb) {
    const std::int64_t plane = plane_of(rgb, "rgb_to_hsv");
    Tensor out(rgb.shape());
    auto src = rgb.data();
    auto dst = out.data();
    const std::int64_t images = rgb.numel() / (3 * plane);
    for (std::int64_t n = 0; n < images; ++n) {
        const std::int64_t base = n * 3 * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double r = std::clamp<double>(src[base + i], 0.0, 1.0);
            const double g = std::clamp<double>(src[base + plane + i], 0.0, 1.0);
            const double b = std::clamp<double>(src[base + 2 * plane + i], 0.0, 1.0);
            const double mx = std::max({r, g, b});
            const double mn = std::min({r, g, b});
            const double delta = mx - mn;
            double h = 0.0;
            if (delta > 0) {
                if (mx == r) {
                    h = 60.0 * (g - b) / delta;
                } else if (mx == g) {
                    h = 60.0 * (b - r) / delta + 120.0;
                } else {
                    h = 60.0 * (r - g) / delta + 240.0;
                }
                h = wrap_hue(h / 2.0);
            }
            const double s = mx > 0 ? delta / mx : 0.0;
            dst[base + i] = static_cast<real>(h);
            dst[base + plane + i] = static_cast<real>(s * 255.0);
            dst[base + 2 * plane + i] = static_cast<real>(mx * 255.0);
        }
    }
    return {out};
}

Tensor hsv_to_rgb(const HsvImage& hsv) {
    const std::int64_t plane = plane_of(hsv.value, "hsv_to_rgb");
    Tensor out(hsv.value.shape());
    auto src = hsv.value.data();
    auto dst = out.data();
    const std::int64_t images = hsv.value.numel() / (3 * plane);
    for (std::int64_t n = 0; n < images; ++n) {
        const std::int64_t base = n * 3 * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double h = wrap_hue(src[base + i]) / 30.0;  // sector units, [0,6)
            const double s = std::clamp<double>(src[base + plane + i], 0.0, 255.0) / 255.0;
            const double v = std::clamp<double>(src[base + 2 * plane + i], 0.0, 255.0) / 255.0;
            const int sector = std::min(static_cast<int>(h), 5);
            const double f = h - sector;
            const double p = v * (1 - s);
            const double q = v * (1 - s * f);
            const double u = v * (1 - s * (1 - f));
            std::array<double, 3> c{};
            switch (sector) {
                case 0: c = {v, u, p}; break;
                case 1: c = {q, v, p}; break;
                case 2: c = {p, v, u}; break;
                case 3: c = {p, q, v}; break;
                case 4: c = {u, p, v}; break;
                default: c = {v, p, q}; break;
            }
            for (int k = 0; k < 3; ++k) dst[base + k * plane + i] = static_cast<real>(c[static_cast<std::size_t>(k)]);
        }
    }
    return out;
}

double hue_mean(const HsvImage& hsv) {
    const std::int64_t plane = plane_of(hsv.value, "hue_mean");
    auto d = hsv.value.data();
    const std::int64_t images = hsv.value.numel() / (3 * plane);
    if (images * plane == 0) throw DimensionError("hue_mean: empty image");
    double acc = 0.0;
    for (std::int64_t n = 0; n < images; ++n) {
        for (std::int64_t i = 0; i < plane; ++i) acc += d[n * 3 * plane + i];
    }
    return acc / static_cast<double>(images * plane);
}

double hue_mean_rgb(const Tensor& rgb) { return hue_mean(rgb_to_hsv(rgb)); }

Tensor apply(const Tensor& rgb, const UcrtConfig& config, Rng& rng, UcrtTrace* trace) {
    config.validate();
    const bool single = (rgb.ndim() == 3) || (rgb.ndim() == 4 && rgb.dim(0) == 1);
    if (!single) throw DimensionError("ucrt: expects one image, got " + shape_str(rgb.shape()));
    const HsvImage hsv = rgb_to_hsv(rgb);
    const double m0 = hue_mean(hsv);
    const bool in_range = m0 >= config.hue_min && m0 <= config.hue_max;

    const bool fire_h = rng.bernoulli(config.p_h);
    const bool fire_s = rng.bernoulli(config.p_s);
    const bool fire_v = rng.bernoulli(config.p_v);
    double dh = 0;
    if (in_range) {
        dh = rng.uniform(-config.h_jitter, config.h_jitter);
    } else {
        dh = config.h_jitter * rng.uniform_open_closed();
        if (m0 > config.hue_max) dh = -dh;
    }
    double ds = rng.uniform(-config.sv_jitter, config.sv_jitter);
    double dv = rng.uniform(-config.sv_jitter, config.sv_jitter);
    if (!fire_h) dh = 0;
    if (!fire_s) ds = 0;
    if (!fire_v) dv = 0;

    const double d0 = distance_to_range(m0, config);
    auto acceptable = [&](double m, bool h_active) {
        if (in_range) return m >= config.hue_min && m <= config.hue_max;
        const double d = distance_to_range(m, config);
        return h_active ? d < d0 : d <= d0;
    };

    // Shrink the shifts until the measured hue mean of the result obeys the
    // range rule: first the hue shift, then saturation and value.
    constexpr int kHalvings = 6;
    Tensor out;
    double m = m0;
    bool found = false;
    for (int pass = 0; pass < 2 && !found; ++pass) {
        const double h_base = pass == 0 ? dh : 0.0;
        for (int k = 0; k <= kHalvings + 1 && !found; ++k) {
            const double scale = k > kHalvings ? 0.0 : std::ldexp(1.0, -k);
            const double th = pass == 0 ? h_base * scale : 0.0;
            const double ts = pass == 0 ? ds : ds * scale;
            const double tv = pass == 0 ? dv : dv * scale;
            if (pass == 0 && k > 0 && dh == 0) break;
            Tensor candidate = hsv_to_rgb(shifted(hsv, th, ts, tv));
            const double mc = hue_mean_rgb(candidate);
            if (acceptable(mc, th != 0)) {
                out = candidate;
                m = mc;
                found = true;
                dh = th;
                ds = ts;
                dv = tv;
            }
        }
    }
    if (!found) {
        out = rgb.clone();
        dh = ds = dv = 0;
    }
    if (trace) {
        *trace = {fire_h, fire_s, fire_v, dh, ds, dv, m0, m};
    }
    return out;
}

Tensor apply_batch(const Tensor& rgb, const UcrtConfig& config, std::uint64_t seed) {
    if (rgb.ndim() != 4 || rgb.dim(1) != 3) {
        throw DimensionError("ucrt: batch must be N×3×H×W, got " + shape_str(rgb.shape()));
    }
    const int n = rgb.dim(0);
    const std::int64_t per = rgb.numel() / std::max(n, 1);
    Tensor out(rgb.shape());
    for (int i = 0; i < n; ++i) {
        Tensor one({1, 3, rgb.dim(2), rgb.dim(3)});
        std::copy_n(rgb.data().begin() + i * per, per, one.data().begin());
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        Tensor res = apply(one, config, rng);
        std::copy_n(res.data().begin(), per, out.data().begin() + i * per);
    }
    return out;
}

}  // namespace ucrt
UNITMOD_END_NAMESPACE
