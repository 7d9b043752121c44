#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "unitmod/losses.hpp"
#include "unitmod/ops.hpp"
#include "unitmod/unit_net.hpp"

using namespace unitmod;
using namespace unitmod::testing;
using net::UnitModule;
using net::UnitModuleConfig;

namespace {

Tensor random_image(const Shape& shape, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<real>(rng.uniform());
    return t;
}

void warm_up(UnitModule& m, Rng& rng, int size = 32) {
    NoGradGuard guard;
    for (int i = 0; i < 5; ++i) m.enhance(random_image({2, 3, size, size}, rng), Mode::Train);
}

}  // namespace

TEST_CASE("config validation") {
    UnitModuleConfig c;
    CHECK_NOTHROW(c.validate());
    c.k1 = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.k2 = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.stem_c2 = 12;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.t_min = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("shapes of backbone, thead and enhance") {
    Rng rng(1);
    UnitModule m({}, rng);
    Tensor img = random_image({2, 3, 32, 48}, rng);
    Tensor f = m.backbone(img, Mode::Eval);
    CHECK(f.shape() == Shape{2, 32, 8, 12});
    auto t = m.thead(f);
    CHECK(t.value.shape() == Shape{2, 3, 32, 48});
    for (real v : t.value.data()) {
        CHECK(v >= real(0.001));
        CHECK(v <= 1);
    }
    auto r = m.enhance(img, Mode::Eval);
    CHECK(r.enhanced.shape() == img.shape());
    CHECK(r.a.value.shape() == Shape{2, 3});
    REQUIRE(r.color_cast.has_value());
    CHECK(r.color_cast->value.shape() == Shape{2, 3});
    CHECK_THROWS_AS(m.backbone(random_image({1, 3, 30, 32}, rng), Mode::Eval), ConfigError);
    CHECK_THROWS_AS(m.backbone(random_image({1, 4, 32, 32}, rng), Mode::Eval), DimensionError);
}

TEST_CASE("zero input with zero beta gives zero stem activations") {
    Rng rng(2);
    UnitModule m({}, rng);
    auto& p = m.params();
    Tensor x = Tensor::zeros({1, 3, 16, 16});
    for (int i = 0; i < 2; ++i) x = ops::relu(p.stem_gn[i].forward(p.stem[i].forward(x), Mode::Eval, 0.0));
    for (real v : x.data()) CHECK(v == 0);
}

TEST_CASE("parameter count matches the counting oracle") {
    Rng rng(3);
    UnitModule m({}, rng);
    CHECK(m.inference_parameter_count() == counted_parameters(32, 32, 9, 9, false));
    CHECK(m.inference_parameter_count() == 30723);
    UnitModule merged = m.reparameterize();
    CHECK(merged.inference_parameter_count() == counted_parameters(32, 32, 9, 9, true));
    CHECK(merged.inference_parameter_count() <= m.inference_parameter_count());
    CHECK(merged.inference_parameter_count() >= 29000);
    CHECK(merged.inference_parameter_count() <= 33000);
    UnitModuleConfig small{16, 16, 5, 7};
    UnitModule s(small, rng);
    CHECK(s.inference_parameter_count() == counted_parameters(16, 16, 5, 7, false));
    CHECK(s.parameters(true).size() > s.parameters(false).size());
}

TEST_CASE("forced thead bias gives the identity") {
    Rng rng(4);
    UnitModule m({}, rng);
    for (auto& v : m.params().thead[1].bias.data()) v = 20;
    Tensor img = random_image({2, 3, 32, 32}, rng);
    auto r = m.enhance(img, Mode::Eval);
    for (real v : r.t.value.data()) CHECK(v >= 1 - 1e-6);
    CHECK(max_abs_diff(r.enhanced, img) < 1e-6);
}

TEST_CASE("initial transmission is near 0.88") {
    Rng rng(5);
    UnitModule m({}, rng);
    auto r = m.enhance(random_image({1, 3, 32, 32}, rng), Mode::Eval);
    double mean = 0;
    for (real v : r.t.value.data()) mean += v;
    mean /= static_cast<double>(r.t.value.numel());
    CHECK(mean > 0.6);
    CHECK(mean < 0.97);
}

TEST_CASE("random init gives finite outputs") {
    Rng rng(6);
    UnitModule m({}, rng);
    for (int k = 0; k < 100; ++k) {
        auto r = m.enhance(random_image({1, 3, 32, 32}, rng), Mode::Eval);
        bool finite = true;
        for (real v : r.enhanced.data()) finite = finite && std::isfinite(v);
        for (real v : r.color_cast->value.data()) finite = finite && std::isfinite(v);
        CHECK(finite);
    }
}

TEST_CASE("color cast predictor") {
    Rng rng(7);
    UnitModule m({}, rng);
    Tensor img = random_image({3, 3, 32, 32}, rng);
    Tensor f = m.backbone(img, Mode::Eval);
    auto c = m.color_cast(f, Mode::Eval);
    CHECK(c.value.shape() == Shape{3, 3});
    for (real v : c.value.data()) {
        CHECK(v > 0);
        CHECK(v < 1);
    }
    CHECK_THROWS_AS(m.color_cast(f, Mode::Inference), ContractError);
    CHECK_FALSE(m.enhance(img, Mode::Inference).color_cast.has_value());

    auto& h = *m.params().color_cast;
    for (auto* t : {&h.fc[2].weight, &h.fc[2].bias}) {
        for (auto& v : t->data()) v = 0;
    }
    Tensor half = m.color_cast(f, Mode::Eval).value;
    for (real v : half.data()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("assisting color cast loss reaches the stem") {
    Rng rng(8);
    UnitModule m({}, rng);
    Tensor img = random_image({2, 3, 32, 32}, rng);
    auto r = m.enhance(img, Mode::Train);
    loss::assisting_color_cast_loss(*r.color_cast, r.a).backward();
    double norm = 0;
    for (real g : m.params().stem[0].weight.grad()) norm += static_cast<double>(g) * g;
    CHECK(norm > 0);
}

TEST_CASE("enhanced output depends on the image and every inference parameter") {
    Rng rng(9);
    UnitModule m({}, rng);
    warm_up(m, rng);
    Tensor img = random_image({2, 3, 32, 32}, rng);
    img.set_requires_grad();
    auto r = m.enhance(img, Mode::Eval);
    ops::sum(ops::square(r.enhanced)).backward();
    auto nonzero = [](std::span<const real> g) {
        for (real v : g)
            if (v != 0) return true;
        return false;
    };
    CHECK(nonzero(img.grad()));
    for (const auto& p : m.parameters(false)) {
        INFO(p.name);
        CHECK(nonzero(p.tensor.grad()));
    }
}

TEST_CASE("re-parameterization is functionally equivalent") {
    Rng rng(10);
    UnitModule m({}, rng);
    warm_up(m, rng);
    UnitModule merged = m.reparameterize();
    CHECK(merged.reparameterized());
    CHECK_FALSE(merged.has_color_cast_head());
    double worst = 0;
    for (int k = 0; k < 20; ++k) {
        Tensor img = random_image({1, 3, 32, 32}, rng);
        auto a = m.enhance(img, Mode::Inference);
        auto b = merged.enhance(img, Mode::Inference);
        worst = std::max(worst, max_abs_diff(a.enhanced, b.enhanced));
        worst = std::max(worst, max_abs_diff(a.t.value, b.t.value));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("a zero small branch folds to the large branch alone") {
    Rng rng(11);
    UnitModule m({}, rng);
    warm_up(m, rng);
    for (auto& b : m.params().lk) {
        for (auto& v : b.dw_small.weight.data()) v = 0;
        for (auto& v : b.dw_small_gn.beta.data()) v = 0;
        for (auto& v : b.dw_small_gn.running_mean.data()) v = 0;
    }
    UnitModule merged = m.reparameterize();
    for (int i = 0; i < 2; ++i) {
        const auto& b = m.params().lk[i];
        const auto& mb = merged.params().lk[i];
        auto [scale, shift] = b.dw_large_gn.folded_affine();
        const int ch = b.dw_large.weight.dim(0);
        const int kk = b.dw_large.kernel() * b.dw_large.kernel();
        for (int c = 0; c < ch; ++c) {
            for (int j = 0; j < kk; ++j) {
                CHECK(mb.dw_merged.weight[c * kk + j] == doctest::Approx(scale[c] * b.dw_large.weight[c * kk + j]));
            }
            CHECK(mb.dw_merged.bias[c] == doctest::Approx(shift[c]));
        }
    }
}

TEST_CASE("state round trip rebuilds an identical module") {
    Rng rng(12);
    UnitModuleConfig cfg{16, 16, 7, 5};
    UnitModule m(cfg, rng);
    warm_up(m, rng);
    UnitModule back = UnitModule::from_state(m.state());
    CHECK(back.config().k1 == 7);
    CHECK(back.config().k2 == 5);
    Tensor img = random_image({1, 3, 32, 32}, rng);
    CHECK(max_abs_diff(m.enhance(img, Mode::Eval).enhanced, back.enhance(img, Mode::Eval).enhanced) == 0);
    CHECK(max_abs_diff(m.enhance(img, Mode::Inference).enhanced, back.enhance(img, Mode::Inference).enhanced) == 0);
    UnitModule merged = m.reparameterize();
    UnitModule merged_back = UnitModule::from_state(merged.state());
    CHECK(merged_back.reparameterized());
    CHECK(max_abs_diff(merged.enhance(img, Mode::Inference).enhanced,
                       merged_back.enhance(img, Mode::Inference).enhanced) == 0);
}

TEST_CASE("eval mode has no side effects, train mode updates statistics") {
    Rng rng(13);
    UnitModule m({}, rng);
    auto snapshot = [&] {
        std::vector<real> v;
        for (const auto& e : m.state())
            for (real x : e.tensor.data()) v.push_back(x);
        return v;
    };
    const auto before = snapshot();
    Tensor img = random_image({2, 3, 32, 32}, rng);
    m.enhance(img, Mode::Eval);
    m.enhance(img, Mode::Inference);
    CHECK(snapshot() == before);
    m.enhance(img, Mode::Train);
    CHECK(snapshot() != before);
}
