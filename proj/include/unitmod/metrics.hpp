#pragma once

#include <optional>
#include <vector>

#include "unitmod/detector.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace metrics {

/// 10·log10(peak² / MSE). Infinite for identical inputs.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Sum over (R,G),(G,B),(B,R) of squared channel-mean differences, averaged
/// over images.
double gray_world_deviation(const Tensor& image);

/// Clips every element to [0,1].
Tensor clip_unit(const Tensor& image);

struct ApResult {
    std::vector<std::optional<double>> per_class;  // undefined without ground truth
    std::optional<double> mean;
};

/// Per-class AP at one IoU threshold with 101-point interpolation. Matching
/// is greedy by descending score; a ground-truth box matches at most once.
ApResult average_precision(const std::vector<std::vector<det::Detection>>& detections,
                           const std::vector<std::vector<synth::Box>>& ground_truth, double iou_thresh = 0.5,
                           int num_classes = det::kNumClasses);

}  // namespace metrics
UNITMOD_END_NAMESPACE
