#include "unitmod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

UNITMOD_BEGIN_NAMESPACE
namespace det {

namespace {

constexpr int kWidths[4] = {16, 32, 32, 32};
constexpr double kObjectnessPrior = -2.0;

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Target {
    int box = -1;  // index into the image's boxes, -1 for background
    double area = 0;
};

}  // namespace

ToyDetector::ToyDetector(Rng& rng, int gn_groups) {
    int in = 3;
    for (int i = 0; i < 4; ++i) {
        params_.conv[static_cast<std::size_t>(i)] = ConvLayer::make(in, kWidths[i], 3, 2, 1, 1, false, rng);
        params_.gn[static_cast<std::size_t>(i)] = NormLayer::make(kWidths[i], gn_groups, false);
        in = kWidths[i];
    }
    params_.head = ConvLayer::make(in, kOutChannels, 1, 1, 0, 1, true, rng);
    params_.head.bias[0] = static_cast<real>(kObjectnessPrior);
}

Tensor ToyDetector::forward(const Tensor& image) const {
    if (image.ndim() != 4 || image.dim(1) != 3) {
        throw DimensionError("detector: expected N×3×H×W, got " + shape_str(image.shape()));
    }
    if (image.dim(2) % kStride != 0 || image.dim(3) % kStride != 0) {
        throw ConfigError("detector: H and W must be divisible by 16, got " + shape_str(image.shape()));
    }
    Tensor x = image;
    for (std::size_t i = 0; i < 4; ++i) {
        x = ops::relu(ops::group_norm(params_.conv[i].forward(x), params_.gn[i].groups, params_.gn[i].gamma, params_.gn[i].beta, static_cast<real>(kNormEps)));
    }
    Tensor raw = params_.head.forward(x);
    Tensor logits = ops::narrow(raw, 1, 0, 1 + kNumClasses);
    Tensor offsets = ops::softplus(ops::narrow(raw, 1, 1 + kNumClasses, 4));
    return ops::concat({logits, offsets}, 1);
}

std::vector<NamedTensor> ToyDetector::parameters() const {
    StateBuilder s;
    for (std::size_t i = 0; i < 4; ++i) {
        s.conv("conv." + std::to_string(i), params_.conv[i]);
        s.norm("gn." + std::to_string(i), params_.gn[i], false);
    }
    s.conv("head", params_.head);
    return s.take();
}

void ToyDetector::load(const std::vector<NamedTensor>& entries, const std::string& prefix) {
    auto targets = parameters();
    for (auto& t : targets) t.name = prefix + t.name;
    load_into(targets, entries);
}

Tensor detector_loss(const Tensor& raw, const std::vector<std::vector<synth::Box>>& targets, DetectorLossParts* parts) {
    if (raw.ndim() != 4 || raw.dim(1) != kOutChannels) {
        throw DimensionError("detector_loss: expected N×8×GH×GW, got " + shape_str(raw.shape()));
    }
    const int n = raw.dim(0), gh = raw.dim(2), gw = raw.dim(3);
    if (static_cast<int>(targets.size()) != n) {
        throw DimensionError("detector_loss: " + std::to_string(targets.size()) + " target lists for batch of " +
                             std::to_string(n));
    }
    const std::int64_t cells = static_cast<std::int64_t>(gh) * gw;
    std::vector<Target> assign(static_cast<std::size_t>(n * cells));
    for (int b = 0; b < n; ++b) {
        const auto& boxes = targets[static_cast<std::size_t>(b)];
        for (std::size_t k = 0; k < boxes.size(); ++k) {
            const auto& bx = boxes[k];
            const int cx = std::clamp(static_cast<int>(std::floor(0.5 * (bx.x_min + bx.x_max) / kStride)), 0, gw - 1);
            const int cy = std::clamp(static_cast<int>(std::floor(0.5 * (bx.y_min + bx.y_max) / kStride)), 0, gh - 1);
            auto& slot = assign[static_cast<std::size_t>(b * cells + cy * gw + cx)];
            if (slot.box < 0 || bx.area() > slot.area) slot = {static_cast<int>(k), bx.area()};
        }
    }
    int positives = 0;
    for (const auto& s : assign) positives += s.box >= 0;

    auto v = raw.data();
    std::vector<real> grad(v.size(), real(0));
    double obj_loss = 0, cls_loss = 0, box_loss = 0;
    const double inv_cells = 1.0 / static_cast<double>(n * cells);
    const double inv_pos = positives > 0 ? 1.0 / positives : 0.0;
    auto at = [&](int b, int ch, std::int64_t cell) {
        return static_cast<std::size_t>((static_cast<std::int64_t>(b) * kOutChannels + ch) * cells + cell);
    };
    for (int b = 0; b < n; ++b) {
        for (std::int64_t cell = 0; cell < cells; ++cell) {
            const Target& tg = assign[static_cast<std::size_t>(b * cells + cell)];
            const double x = v[at(b, 0, cell)];
            const double y = tg.box >= 0 ? 1.0 : 0.0;
            obj_loss += (stable_softplus(x) - y * x) * inv_cells;
            grad[at(b, 0, cell)] = static_cast<real>((stable_sigmoid(x) - y) * inv_cells);
            if (tg.box < 0) continue;
            const auto& bx = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(tg.box)];

            double mx = -1e300;
            for (int c = 0; c < kNumClasses; ++c) mx = std::max(mx, static_cast<double>(v[at(b, 1 + c, cell)]));
            double z = 0;
            for (int c = 0; c < kNumClasses; ++c) z += std::exp(v[at(b, 1 + c, cell)] - mx);
            cls_loss += (mx + std::log(z) - v[at(b, 1 + bx.cls, cell)]) * inv_pos;
            for (int c = 0; c < kNumClasses; ++c) {
                const double p = std::exp(v[at(b, 1 + c, cell)] - mx) / z;
                grad[at(b, 1 + c, cell)] = static_cast<real>((p - (c == bx.cls ? 1.0 : 0.0)) * inv_pos);
            }

            const double ccx = (static_cast<double>(cell % gw) + 0.5) * kStride;
            const double ccy = (static_cast<double>(cell / gw) + 0.5) * kStride;
            const double want[4] = {(ccx - bx.x_min) / kStride, (ccy - bx.y_min) / kStride,
                                    (bx.x_max - ccx) / kStride, (bx.y_max - ccy) / kStride};
            for (int k = 0; k < 4; ++k) {
                const double d = v[at(b, 1 + kNumClasses + k, cell)] - want[k];
                const double ad = std::abs(d);
                box_loss += (ad < 1.0 ? 0.5 * d * d : ad - 0.5) * inv_pos;
                grad[at(b, 1 + kNumClasses + k, cell)] = static_cast<real>((ad < 1.0 ? d : (d > 0 ? 1.0 : -1.0)) * inv_pos);
            }
        }
    }
    if (parts) *parts = {obj_loss, cls_loss, box_loss, positives};
    Tensor input = raw;
    return make_op("detector_loss", {1}, {static_cast<real>(obj_loss + cls_loss + box_loss)}, {raw},
                   [input, grad = std::move(grad)](TensorImpl& out) mutable {
                       auto g = grad_target(input);
                       if (g.empty()) return;
                       const real up = out.grad[0];
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * grad[i];
                   });
}

double iou(const synth::Box& a, const synth::Box& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> nms(std::vector<Detection> candidates, double iou_thresh) {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& c : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.box.cls == c.box.cls && iou(k.box, c.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

std::vector<std::vector<Detection>> decode_and_nms(const Tensor& raw, double score_thresh, double iou_thresh) {
    if (raw.ndim() != 4 || raw.dim(1) != kOutChannels) {
        throw DimensionError("decode_and_nms: expected N×8×GH×GW, got " + shape_str(raw.shape()));
    }
    const int n = raw.dim(0), gh = raw.dim(2), gw = raw.dim(3);
    const std::int64_t cells = static_cast<std::int64_t>(gh) * gw;
    const double width = static_cast<double>(gw) * kStride, height = static_cast<double>(gh) * kStride;
    auto v = raw.data();
    std::vector<std::vector<Detection>> out(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
        std::vector<Detection> cand;
        auto at = [&](int ch, std::int64_t cell) {
            return v[static_cast<std::size_t>((static_cast<std::int64_t>(b) * kOutChannels + ch) * cells + cell)];
        };
        for (std::int64_t cell = 0; cell < cells; ++cell) {
            const double score = stable_sigmoid(at(0, cell));
            if (score < score_thresh) continue;
            int cls = 0;
            for (int c = 1; c < kNumClasses; ++c) {
                if (at(1 + c, cell) > at(1 + cls, cell)) cls = c;
            }
            const double ccx = (static_cast<double>(cell % gw) + 0.5) * kStride;
            const double ccy = (static_cast<double>(cell / gw) + 0.5) * kStride;
            synth::Box box{cls, std::clamp(ccx - at(4, cell) * kStride, 0.0, width),
                           std::clamp(ccy - at(5, cell) * kStride, 0.0, height),
                           std::clamp(ccx + at(6, cell) * kStride, 0.0, width),
                           std::clamp(ccy + at(7, cell) * kStride, 0.0, height)};
            if (!(box.x_min < box.x_max && box.y_min < box.y_max)) continue;
            cand.push_back({box, score});
        }
        out[static_cast<std::size_t>(b)] = nms(std::move(cand), iou_thresh);
    }
    return out;
}

std::string detections_csv(const std::vector<std::vector<Detection>>& per_image) {
    std::ostringstream os;
    os << "image_id,class,score,x_min,y_min,x_max,y_max\n";
    char buf[256];
    for (std::size_t i = 0; i < per_image.size(); ++i) {
        for (const auto& d : per_image[i]) {
            std::snprintf(buf, sizeof(buf), "%zu,%d,%.6f,%.3f,%.3f,%.3f,%.3f\n", i, d.box.cls, d.score, d.box.x_min,
                          d.box.y_min, d.box.x_max, d.box.y_max);
            os << buf;
        }
    }
    return os.str();
}

}  // namespace det
UNITMOD_END_NAMESPACE
