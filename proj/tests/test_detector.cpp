#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ap_oracle.hpp"
#include "support.hpp"
#include "unitmod/detector.hpp"
#include "unitmod/metrics.hpp"
#include "unitmod/synth.hpp"
#include "unitmod/train.hpp"

using namespace unitmod;
using namespace unitmod::testing;
using det::Detection;
using synth::Box;

namespace {

// Raw grid whose logits encode `boxes` confidently on a gh×gw grid.
Tensor perfect_raw(const std::vector<Box>& boxes, int gh, int gw) {
    Tensor raw({1, det::kOutChannels, gh, gw});
    const int cells = gh * gw;
    for (int i = 0; i < cells; ++i) {
        raw[i] = -40;
        raw[4 * cells + i] = raw[5 * cells + i] = raw[6 * cells + i] = raw[7 * cells + i] = 0.5f;
    }
    for (const auto& b : boxes) {
        const int cx = static_cast<int>(0.5 * (b.x_min + b.x_max) / det::kStride);
        const int cy = static_cast<int>(0.5 * (b.y_min + b.y_max) / det::kStride);
        const int cell = cy * gw + cx;
        const double ccx = (cx + 0.5) * det::kStride, ccy = (cy + 0.5) * det::kStride;
        raw[cell] = 40;
        for (int c = 0; c < det::kNumClasses; ++c) raw[(1 + c) * cells + cell] = c == b.cls ? 40.0f : -40.0f;
        raw[4 * cells + cell] = static_cast<real>((ccx - b.x_min) / det::kStride);
        raw[5 * cells + cell] = static_cast<real>((ccy - b.y_min) / det::kStride);
        raw[6 * cells + cell] = static_cast<real>((b.x_max - ccx) / det::kStride);
        raw[7 * cells + cell] = static_cast<real>((b.y_max - ccy) / det::kStride);
    }
    return raw;
}

}  // namespace

TEST_CASE("detector shapes and size") {
    Rng rng(1);
    det::ToyDetector d(rng);
    Tensor raw = d.forward(uniform_tensor({2, 3, 64, 48}, rng));
    CHECK(raw.shape() == Shape{2, 8, 4, 3});
    CHECK(d.parameter_count() < 60000);
    for (real v : raw.data()) CHECK(std::isfinite(v));
    // Box channels are non-negative distances.
    for (int b = 0; b < 2; ++b)
        for (int i = 4 * 12; i < 8 * 12; ++i) CHECK(raw[b * 96 + i] >= 0);
    CHECK_THROWS_AS(d.forward(uniform_tensor({1, 3, 40, 64}, rng)), ConfigError);
    CHECK_THROWS_AS(d.forward(uniform_tensor({1, 4, 64, 64}, rng)), DimensionError);
}

TEST_CASE("objectness loss at zero logits is ln 2") {
    Tensor raw = Tensor::zeros({2, 8, 4, 4});
    det::DetectorLossParts parts;
    det::detector_loss(raw, {{}, {}}, &parts);
    CHECK(parts.objectness == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(parts.positives == 0);
    CHECK(parts.box == 0);
    det::detector_loss(raw, {{Box{0, 2, 2, 20, 20}}, {Box{1, 30, 30, 60, 60}, Box{2, 0, 40, 10, 60}}}, &parts);
    CHECK(parts.objectness == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK(parts.positives == 3);
    CHECK(parts.classification == doctest::Approx(std::log(3.0)).epsilon(1e-6));
}

TEST_CASE("perfect logits give near-zero loss") {
    std::vector<Box> boxes{{0, 3, 5, 21, 19}, {2, 40, 36, 62, 60}};
    Tensor raw = perfect_raw(boxes, 4, 4);
    det::DetectorLossParts parts;
    const double l = det::detector_loss(raw, {boxes}, &parts).item();
    CHECK(l < 1e-6);
    CHECK(parts.positives == 2);
}

TEST_CASE("larger box wins a shared cell") {
    std::vector<Box> boxes{{0, 2, 2, 14, 14}, {1, 0, 0, 16, 16}};
    Tensor raw = perfect_raw({boxes[1]}, 4, 4);
    det::DetectorLossParts parts;
    CHECK(det::detector_loss(raw, {boxes}, &parts).item() < 1e-6);
    CHECK(parts.positives == 1);
}

TEST_CASE("loss gradient flows to the detector input") {
    Rng rng(2);
    det::ToyDetector d(rng);
    Tensor img = uniform_tensor({1, 3, 32, 32}, rng);
    img.set_requires_grad();
    det::detector_loss(d.forward(img), {{Box{0, 4, 4, 20, 20}}}).backward();
    double n = 0;
    for (real g : img.grad()) n += std::abs(g);
    CHECK(n > 0);
}

TEST_CASE("decode and nms") {
    std::vector<Box> boxes{{0, 3, 5, 21, 19}, {2, 40, 36, 62, 60}};
    auto dets = det::decode_and_nms(perfect_raw(boxes, 4, 4));
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].size() == 2);
    for (const auto& d : dets[0]) {
        const Box& want = d.box.cls == 0 ? boxes[0] : boxes[1];
        CHECK(det::iou(d.box, want) == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(d.score > 0.99);
        CHECK(d.score < 1.0 + 1e-12);
    }
    CHECK(det::decode_and_nms(perfect_raw({}, 4, 4))[0].empty());
    CHECK(det::decode_and_nms(Tensor({1, 8, 2, 2}, -5.0f))[0].empty());
}

TEST_CASE("nms examples") {
    Box b{0, 0, 0, 10, 10};
    auto kept = det::nms({{b, 0.9}, {b, 0.8}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
    CHECK(det::nms({{b, 0.9}, {Box{1, 0, 0, 10, 10}, 0.8}}, 0.5).size() == 2);

    // Overlap widths 7.5 and 10/3 give IoU 75/125 = 0.6 and (100/3)/(500/3) = 0.2.
    Box a{0, 0, 0, 10, 10};
    Box bb{0, 2.5, 0, 12.5, 10};
    Box c{0, 6.6666666666666667, 0, 16.666666666666667, 10};
    CHECK(det::iou(a, bb) == doctest::Approx(0.6));
    CHECK(det::iou(a, c) == doctest::Approx(0.2));
    auto k3 = det::nms({{bb, 0.7}, {a, 0.9}, {c, 0.5}}, 0.5);
    REQUIRE(k3.size() == 2);
    CHECK(k3[0].score == 0.9);
    CHECK(k3[1].score == 0.5);
}

TEST_CASE("iou examples") {
    CHECK(det::iou({0, 0, 0, 4, 4}, {0, 0, 0, 4, 4}) == 1);
    CHECK(det::iou({0, 0, 0, 4, 4}, {0, 4, 0, 8, 4}) == 0);
    CHECK(det::iou({0, 0, 0, 4, 4}, {0, 2, 0, 6, 4}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("average precision examples") {
    std::vector<std::vector<Box>> gt{{{0, 0, 0, 10, 10}, {1, 20, 20, 30, 30}}};
    std::vector<std::vector<Detection>> exact{{{gt[0][0], 1.0}, {gt[0][1], 1.0}}};
    auto r = metrics::average_precision(exact, gt);
    REQUIRE(r.mean.has_value());
    CHECK(*r.mean == doctest::Approx(1.0));
    CHECK_FALSE(r.per_class[2].has_value());

    auto none = metrics::average_precision({{}}, gt);
    CHECK(*none.mean == 0);

    std::vector<std::vector<Box>> two{{{0, 0, 0, 10, 10}, {0, 20, 20, 30, 30}}};
    std::vector<std::vector<Detection>> tp_fp{{{{0, 0, 0, 10, 10}, 0.9}, {{0, 40, 40, 50, 50}, 0.5}}};
    auto half = metrics::average_precision(tp_fp, two, 0.5, 1);
    auto oracle = brute_force_ap(tp_fp, two, 0.5, 1);
    CHECK(*half.mean == doctest::Approx(0.5).epsilon(0.02));
    CHECK(same_ap(half, oracle));

    CHECK(metrics::average_precision({{}, {}}, {{}, {}}).mean == std::nullopt);
    CHECK_THROWS_AS(metrics::average_precision({{}}, {{}, {}}), DimensionError);
}

TEST_CASE("average precision agrees with a brute-force evaluator") {
    Rng rng(3);
    for (int k = 0; k < 50; ++k) {
        ApCase c = random_ap_case(rng);
        INFO("case " << k);
        CHECK(same_ap(metrics::average_precision(c.dets, c.gt), brute_force_ap(c.dets, c.gt, 0.5, det::kNumClasses)));
    }
}

TEST_CASE("detections csv") {
    std::string csv = det::detections_csv({{{{1, 1, 2, 3, 4}, 0.5}}});
    CHECK(csv == "image_id,class,score,x_min,y_min,x_max,y_max\n0,1,0.500000,1.000,2.000,3.000,4.000\n");
}

TEST_CASE("overfitting one batch") {
    Rng rng(4);
    det::ToyDetector d(rng);
    auto samples = synth::generate_dataset(11, 4, 64);
    train::Batch batch = train::make_batch(samples, {0, 1, 2, 3});
    train::Sgd sgd(d.parameters());
    std::vector<double> losses;
    for (int step = 0; step < 300; ++step) {
        sgd.zero_grad();
        Tensor l = det::detector_loss(d.forward(batch.images), batch.boxes);
        losses.push_back(l.item());
        l.backward();
        sgd.step(0.02, 0.9, 0.0);
    }
    std::vector<double> window;
    for (std::size_t s = 0; s + 20 <= losses.size(); s += 20) {
        double m = 0;
        for (std::size_t i = s; i < s + 20; ++i) m += losses[i];
        window.push_back(m / 20);
    }
    MESSAGE("initial " << losses.front() << " final " << losses.back());
    for (std::size_t i = 1; i < window.size(); ++i) CHECK(window[i] < window[i - 1]);
    CHECK(losses.back() < 0.1 * losses.front());
}
