#include "unitmod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

UNITMOD_BEGIN_NAMESPACE
namespace metrics {

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape() != b.shape()) {
        throw DimensionError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
    auto x = a.data();
    auto y = b.data();
    double se = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - y[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(x.size());
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double gray_world_deviation(const Tensor& image) {
    Tensor img = image.ndim() == 3 ? image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
    if (img.ndim() != 4 || img.dim(1) != 3) {
        throw DimensionError("gray_world_deviation: expected 3 color channels, got " + shape_str(image.shape()));
    }
    const int n = img.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(img.dim(2)) * img.dim(3);
    auto d = img.data();
    double total = 0;
    for (int b = 0; b < n; ++b) {
        double m[3] = {0, 0, 0};
        for (int c = 0; c < 3; ++c) {
            for (std::int64_t i = 0; i < plane; ++i) m[c] += d[(static_cast<std::int64_t>(b) * 3 + c) * plane + i];
            m[c] /= static_cast<double>(plane);
        }
        total += (m[0] - m[1]) * (m[0] - m[1]) + (m[1] - m[2]) * (m[1] - m[2]) + (m[2] - m[0]) * (m[2] - m[0]);
    }
    return total / n;
}

Tensor clip_unit(const Tensor& image) {
    Tensor out = image.detach().clone();
    for (auto& v : out.data()) v = std::clamp(v, real(0), real(1));
    return out;
}

ApResult average_precision(const std::vector<std::vector<det::Detection>>& detections,
                           const std::vector<std::vector<synth::Box>>& ground_truth, double iou_thresh,
                           int num_classes) {
    if (detections.size() != ground_truth.size()) {
        throw DimensionError("average_precision: detection and ground-truth image counts differ");
    }
    ApResult result;
    result.per_class.resize(static_cast<std::size_t>(num_classes));
    double sum = 0;
    int defined = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        struct Ranked {
            double score;
            std::size_t image;
            const synth::Box* box;
        };
        std::vector<Ranked> ranked;
        std::size_t total_gt = 0;
        std::vector<std::vector<char>> used(ground_truth.size());
        for (std::size_t i = 0; i < ground_truth.size(); ++i) {
            used[i].assign(ground_truth[i].size(), 0);
            for (const auto& g : ground_truth[i]) total_gt += g.cls == cls;
            for (const auto& d : detections[i]) {
                if (d.box.cls == cls) ranked.push_back({d.score, i, &d.box});
            }
        }
        if (total_gt == 0) continue;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
        std::vector<double> precision, recall;
        std::size_t tp = 0;
        for (std::size_t k = 0; k < ranked.size(); ++k) {
            const auto& r = ranked[k];
            const auto& gts = ground_truth[r.image];
            int best = -1;
            double best_iou = iou_thresh;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (gts[g].cls != cls || used[r.image][g]) continue;
                const double o = det::iou(*r.box, gts[g]);
                if (o >= best_iou) {
                    best_iou = o;
                    best = static_cast<int>(g);
                }
            }
            if (best >= 0) {
                used[r.image][static_cast<std::size_t>(best)] = 1;
                ++tp;
            }
            precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
            recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
        }
        // Precision envelope, then sampling at recall 0, 0.01, ..., 1.
        for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
        double ap = 0;
        std::size_t pos = 0;
        for (int i = 0; i <= 100; ++i) {
            const double r = i / 100.0;
            while (pos < recall.size() && recall[pos] < r) ++pos;
            ap += pos < recall.size() ? precision[pos] : 0.0;
        }
        ap /= 101.0;
        result.per_class[static_cast<std::size_t>(cls)] = ap;
        sum += ap;
        ++defined;
    }
    if (defined > 0) result.mean = sum / defined;
    return result;
}

}  // namespace metrics
UNITMOD_END_NAMESPACE
