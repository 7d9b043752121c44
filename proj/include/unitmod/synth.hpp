#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "unitmod/rng.hpp"
#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace synth {

constexpr int kNumClasses = 3;  // 0 disc, 1 rectangle, 2 ring

struct Box {
    int cls = 0;
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // pixels, max exclusive

    double area() const { return (x_max - x_min) * (y_max - y_min); }
    bool operator==(const Box&) const = default;
};

/// Ground truth of one degradation: t_c(x) = exp(−β_c·depth(x)).
struct DegradationSpec {
    std::array<double, 3> a{};     // background light per channel
    std::array<double, 3> beta{};  // attenuation, β_R > β_G > β_B
    Tensor depth;                  // [1,1,H,W], values in [0,3]

    /// [1,3,H,W] transmission.
    Tensor transmission() const;
    /// [1,3] background light.
    Tensor background() const;
};

struct SyntheticSample {
    Tensor clean;     // [3,H,W]
    Tensor degraded;  // [3,H,W]
    DegradationSpec spec;
    std::vector<Box> boxes;
};

struct Scene {
    Tensor image;  // [3,H,W]
    std::vector<Box> boxes;
};

constexpr double kMaxDepth = 3.0;

/// Smooth background plus 1–5 separated colored shapes with tight boxes.
Scene generate_scene(Rng& rng, int size);

/// Draws a degradation for `clean` and applies the formation model.
SyntheticSample apply_degradation(const Tensor& clean, Rng& rng);
/// Degradation from a fixed spec.
Tensor degrade_with(const Tensor& clean, const DegradationSpec& spec);

/// Sample `index` of the dataset identified by (seed, size).
SyntheticSample generate_sample(std::uint64_t seed, std::uint64_t index, int size);
std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count, int size,
                                              std::uint64_t first_index = 0);

/// Directory layout: manifest.txt, clean/ and degraded/ PNGs, labels/ text
/// files and specs/ (depth tensors plus key=value sidecars).
void write_dataset(const std::vector<SyntheticSample>& samples, const std::filesystem::path& dir);
std::vector<SyntheticSample> read_dataset(const std::filesystem::path& dir);

std::string sample_id(std::size_t index);

}  // namespace synth
UNITMOD_END_NAMESPACE
