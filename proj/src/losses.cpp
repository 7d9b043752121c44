#include "unitmod/losses.hpp"

#include <cstdio>
#include <sstream>

#include "unitmod/ops.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace loss {

namespace {

// Sum or mean within each image, then mean over the batch.
Tensor reduce_terms(const Tensor& terms, int batch, PixelReduction reduction) {
    if (reduction == PixelReduction::Mean) return ops::mean(terms);
    return ops::sum(terms) * (real(1) / static_cast<real>(batch));
}

void require_image(const Tensor& t, const char* op) {
    if (t.ndim() != 4) {
        throw DimensionError(std::string(op) + ": expected N×C×H×W, got " + shape_str(t.shape()));
    }
}

double value_of(const Tensor& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; }

}  // namespace

void LossWeights::validate() const {
    for (double w : {w1, w2, w3, w4, w5}) {
        if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
    }
}

Tensor transmission_loss(const physics::TransmissionMap& t1, const physics::TransmissionMap& t2,
                         physics::Alpha alpha, PixelReduction reduction) {
    require_image(t1.value, "transmission_loss");
    if (t1.value.shape() != t2.value.shape()) {
        throw DimensionError("transmission_loss: shapes " + shape_str(t1.value.shape()) + " and " +
                             shape_str(t2.value.shape()) + " differ");
    }
    Tensor diff = static_cast<real>(alpha.value()) * t1.value - t2.value;
    return reduce_terms(ops::square(diff), t1.value.dim(0), reduction);
}

Tensor saturated_pixel_loss(const Tensor& j, const Tensor& j_prime, PixelReduction reduction) {
    require_image(j, "saturated_pixel_loss");
    auto hinge = [&](const Tensor& x) {
        return reduce_terms(ops::relu(x - 1.0) + ops::relu(-x), x.dim(0), reduction);
    };
    Tensor total = hinge(j);
    if (j_prime.defined()) {
        if (j_prime.shape() != j.shape()) throw DimensionError("saturated_pixel_loss: image shapes differ");
        total = total + hinge(j_prime);
    }
    return total;
}

Tensor total_variation_loss(const Tensor& j, PixelReduction reduction) {
    require_image(j, "total_variation_loss");
    const int h = j.dim(2);
    const int w = j.dim(3);
    if (h < 2 || w < 2) throw DimensionError("total_variation_loss: needs at least 2×2 pixels");
    Tensor dv = ops::narrow(j, 2, 1, h - 1) - ops::narrow(j, 2, 0, h - 1);
    Tensor dh = ops::narrow(j, 3, 1, w - 1) - ops::narrow(j, 3, 0, w - 1);
    const int n = j.dim(0);
    return reduce_terms(ops::square(dv), n, reduction) + reduce_terms(ops::square(dh), n, reduction);
}

Tensor color_cast_loss(const Tensor& j) {
    require_image(j, "color_cast_loss");
    if (j.dim(1) != 3) {
        throw DimensionError("color_cast_loss: axis 1 must hold 3 color channels, got " + std::to_string(j.dim(1)));
    }
    Tensor m = ops::channel_mean(j);
    Tensor r = ops::narrow(m, 1, 0, 1);
    Tensor g = ops::narrow(m, 1, 1, 1);
    Tensor b = ops::narrow(m, 1, 2, 1);
    Tensor per_image = ops::square(r - g) + ops::square(g - b) + ops::square(b - r);
    return ops::mean(per_image);
}

Tensor assisting_color_cast_loss(const net::ColorCastPrediction& predicted, const physics::BackgroundLight& label) {
    if (predicted.value.shape() != label.value.shape()) {
        throw DimensionError("assisting_color_cast_loss: prediction " + shape_str(predicted.value.shape()) +
                             " vs label " + shape_str(label.value.shape()));
    }
    Tensor d = predicted.value - label.value.detach();
    return ops::sum(ops::square(d)) * (real(1) / static_cast<real>(predicted.value.dim(0)));
}

Tensor unit_module_loss(const LossComponents& c, const LossWeights& w, LossReport& report) {
    w.validate();
    report.l_t = value_of(c.l_t);
    report.l_sp = value_of(c.l_sp);
    report.l_tv = value_of(c.l_tv);
    report.l_cc = value_of(c.l_cc);
    report.l_acc = value_of(c.l_acc);
    Tensor total;
    auto accumulate = [&](const Tensor& term, double weight) {
        if (!term.defined()) return;
        Tensor scaled = term * static_cast<real>(weight);
        total = total.defined() ? total + scaled : scaled;
    };
    accumulate(c.l_t, w.w1);
    accumulate(c.l_sp, w.w2);
    accumulate(c.l_tv, w.w3);
    accumulate(c.l_cc, w.w4);
    accumulate(c.l_acc, w.w5);
    if (!total.defined()) total = Tensor::scalar(0);
    report.l_unitmodule = total.item();
    return total;
}

std::string LossReport::csv_header() {
    return "step,l_t,l_sp,l_tv,l_cc,l_acc,l_unitmodule,l_detector,l_total";
}

std::string LossReport::csv_row() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, l_t, l_sp, l_tv, l_cc,
                  l_acc, l_unitmodule, l_detector, l_total);
    return buf;
}

}  // namespace loss
UNITMOD_END_NAMESPACE
