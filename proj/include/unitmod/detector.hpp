#pragma once

#include <array>
#include <vector>

#include "unitmod/layers.hpp"
#include "unitmod/synth.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace det {

constexpr int kStride = 16;
constexpr int kNumClasses = synth::kNumClasses;
constexpr int kOutChannels = 1 + kNumClasses + 4;  // obj, cls0..2, l, t, r, b

/// Four stride-2 conv+GN+ReLU stages (3→16→32→32→32) and a 1×1 head.
struct DetectorParams {
    std::array<ConvLayer, 4> conv;
    std::array<NormLayer, 4> gn;
    ConvLayer head;
};

struct Detection {
    synth::Box box;  // cls holds the class id
    double score = 0;
};

struct DetectorLossParts {
    double objectness = 0;
    double classification = 0;
    double box = 0;
    int positives = 0;
};

class ToyDetector {
public:
    explicit ToyDetector(Rng& rng, int gn_groups = 8);

    /// [N,3,H,W] → [N,8,H/16,W/16]; box channels are already softplus'ed.
    Tensor forward(const Tensor& image) const;

    DetectorParams& params() { return params_; }
    const DetectorParams& params() const { return params_; }
    std::vector<NamedTensor> parameters() const;
    void load(const std::vector<NamedTensor>& entries, const std::string& prefix = {});
    std::int64_t parameter_count() const { return count_elements(parameters()); }

private:
    DetectorParams params_;
};

/// Objectness BCE over all cells + class CE + smooth-L1 (beta 1, stride
/// units) over positive cells, each mean-reduced over its support. The cell
/// containing a box center is positive for it; larger boxes win ties.
Tensor detector_loss(const Tensor& raw, const std::vector<std::vector<synth::Box>>& targets,
                     DetectorLossParts* parts = nullptr);

/// Decodes cells with sigmoid(obj) ≥ score_thresh, then class-wise greedy NMS.
/// One list per image, sorted by descending score.
std::vector<std::vector<Detection>> decode_and_nms(const Tensor& raw, double score_thresh = 0.3,
                                                   double iou_thresh = 0.5);

/// Greedy NMS over one image's candidates (class-wise), score-descending output.
std::vector<Detection> nms(std::vector<Detection> candidates, double iou_thresh);

double iou(const synth::Box& a, const synth::Box& b);

/// `image_id,class,score,x_min,y_min,x_max,y_max` rows with header.
std::string detections_csv(const std::vector<std::vector<Detection>>& per_image);

}  // namespace det
UNITMOD_END_NAMESPACE
