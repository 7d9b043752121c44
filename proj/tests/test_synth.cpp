#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "unitmod/metrics.hpp"
#include "unitmod/physics.hpp"
#include "unitmod/synth.hpp"

using namespace unitmod;
using namespace unitmod::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("unitmod_test_synth_" + name);
    fs::remove_all(p);
    return p;
}

bool same_bytes(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("generated scenes have valid boxes") {
    Rng rng(1);
    for (int k = 0; k < 200; ++k) {
        const int size = k % 2 ? 64 : 32;
        synth::Scene s = synth::generate_scene(rng, size);
        CHECK(s.image.shape() == Shape{3, size, size});
        REQUIRE(!s.boxes.empty());
        CHECK(s.boxes.size() <= 5);
        for (const auto& b : s.boxes) {
            CHECK(b.area() >= 16);
            CHECK(b.x_min >= 0);
            CHECK(b.y_min >= 0);
            CHECK(b.x_max <= size);
            CHECK(b.y_max <= size);
            CHECK(b.cls >= 0);
            CHECK(b.cls < synth::kNumClasses);
        }
        for (real v : s.image.data()) {
            CHECK(v >= 0);
            CHECK(v <= 1);
        }
    }
}

TEST_CASE("class distribution is uniform") {
    Rng rng(2);
    std::array<int, synth::kNumClasses> counts{};
    int total = 0;
    for (int k = 0; k < 10000; ++k) {
        for (const auto& b : synth::generate_scene(rng, 32).boxes) {
            ++counts[static_cast<std::size_t>(b.cls)];
            ++total;
        }
    }
    for (int c : counts) {
        const double share = static_cast<double>(c) / total;
        CHECK(share > 1.0 / 3 - 0.05);
        CHECK(share < 1.0 / 3 + 0.05);
    }
}

TEST_CASE("samples are deterministic per seed and index") {
    synth::SyntheticSample a = synth::generate_sample(7, 3, 64);
    synth::SyntheticSample b = synth::generate_sample(7, 3, 64);
    CHECK(same_bytes(a.clean, b.clean));
    CHECK(same_bytes(a.degraded, b.degraded));
    CHECK(a.boxes == b.boxes);
    synth::SyntheticSample c = synth::generate_sample(7, 4, 64);
    CHECK_FALSE(same_bytes(a.clean, c.clean));
    auto ds = synth::generate_dataset(7, 5, 64);
    REQUIRE(ds.size() == 5);
    CHECK(same_bytes(ds[3].degraded, a.degraded));
}

TEST_CASE("degradation ground truth") {
    Rng rng(3);
    for (int k = 0; k < 20; ++k) {
        synth::Scene scene = synth::generate_scene(rng, 32);
        synth::SyntheticSample s = synth::apply_degradation(scene.image, rng);
        CHECK(s.spec.beta[0] > s.spec.beta[1]);
        CHECK(s.spec.beta[1] > s.spec.beta[2]);
        for (double a : s.spec.a) {
            CHECK(a >= 0.3);
            CHECK(a <= 0.9);
        }
        Tensor t = s.spec.transmission();
        for (real v : t.data()) {
            CHECK(v > 0);
            CHECK(v <= 1);
        }
        for (real v : s.spec.depth.data()) {
            CHECK(v >= 0);
            CHECK(v <= synth::kMaxDepth);
        }
        for (real v : s.degraded.data()) {
            CHECK(v >= 0);
            CHECK(v <= 1);
        }
        Tensor expected = physics::degrade_km(s.clean.reshape({1, 3, 32, 32}), {t}, {s.spec.background()});
        CHECK(max_abs_diff(expected, s.degraded) == 0);
    }
}

TEST_CASE("zero depth leaves the image clean, large depth gives the background light") {
    Rng rng(4);
    synth::Scene scene = synth::generate_scene(rng, 32);
    synth::SyntheticSample s = synth::apply_degradation(scene.image, rng);
    synth::DegradationSpec spec = s.spec;
    spec.depth = Tensor::zeros({1, 1, 32, 32});
    CHECK(max_abs_diff(synth::degrade_with(scene.image, spec), scene.image) < 1e-7);
    spec.depth = Tensor({1, 1, 32, 32}, 1000.0f);
    Tensor far = synth::degrade_with(scene.image, spec);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 32 * 32; ++i) CHECK(far[c * 1024 + i] == doctest::Approx(spec.a[c]).epsilon(1e-6));
}

TEST_CASE("default degradations are strong") {
    double worst = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        synth::SyntheticSample s = synth::generate_sample(5, i, 64);
        worst = std::max(worst, metrics::psnr(s.degraded, s.clean));
    }
    MESSAGE("highest PSNR(degraded, clean) over 100 samples: " << worst);
    CHECK(worst < 30);
}

TEST_CASE("background light is invariant under alpha degradation on synthetic images") {
    double worst = 0;
    for (std::uint64_t i = 0; i < 20; ++i) {
        synth::SyntheticSample s = synth::generate_sample(6, i, 32);
        Tensor j = s.degraded.reshape({1, 3, 32, 32});
        physics::BackgroundLight a = physics::background_light(j);
        Tensor a2 = physics::background_light(physics::degrade_alpha(j, physics::Alpha(0.9), a)).value;
        worst = std::max(worst, max_abs_diff(a2, a.value));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("dataset round trip") {
    const fs::path dir = scratch_dir("roundtrip");
    auto samples = synth::generate_dataset(8, 6, 32);
    synth::write_dataset(samples, dir);
    int pngs = 0;
    for (const auto& e : fs::directory_iterator(dir / "degraded")) pngs += e.path().extension() == ".png";
    CHECK(pngs == 6);
    auto back = synth::read_dataset(dir);
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(back[i].boxes == samples[i].boxes);
        CHECK(max_abs_diff(back[i].clean, samples[i].clean) <= 0.5 / 255 + 1e-6);
        CHECK(max_abs_diff(back[i].degraded, samples[i].degraded) <= 0.5 / 255 + 1e-6);
        CHECK(max_abs_diff(back[i].spec.transmission(), samples[i].spec.transmission()) <= 1.0 / 255);
        CHECK(max_abs_diff(back[i].spec.background(), samples[i].spec.background()) < 1e-6);
        CHECK(back[i].spec.beta == samples[i].spec.beta);
    }
    fs::remove_all(dir);
}

TEST_CASE("missing or corrupt manifest names the file") {
    const fs::path dir = scratch_dir("broken");
    fs::create_directories(dir);
    try {
        synth::read_dataset(dir);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("manifest.txt") != std::string::npos);
    }
    synth::write_dataset(synth::generate_dataset(9, 2, 32), dir);
    {
        std::ofstream os(dir / "manifest.txt");
        os << "count 5\n";
    }
    CHECK_THROWS_AS(synth::read_dataset(dir), IoError);
    fs::remove_all(dir);
}
