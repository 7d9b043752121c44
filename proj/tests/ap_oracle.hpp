#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "unitmod/detector.hpp"
#include "unitmod/metrics.hpp"
#include "unitmod/rng.hpp"

namespace unitmod::testing {

/// Brute-force AP: every score cut-off is re-matched from scratch and the
/// interpolated precision at each recall level is a max over all cut-offs.
inline metrics::ApResult brute_force_ap(const std::vector<std::vector<det::Detection>>& dets,
                                        const std::vector<std::vector<synth::Box>>& gt, double iou_thresh,
                                        int num_classes) {
    metrics::ApResult res;
    res.per_class.resize(static_cast<std::size_t>(num_classes));
    double sum = 0;
    int defined = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        std::size_t total_gt = 0;
        for (const auto& g : gt)
            for (const auto& b : g) total_gt += b.cls == cls;
        if (total_gt == 0) continue;
        std::vector<double> scores;
        for (const auto& d : dets)
            for (const auto& x : d)
                if (x.box.cls == cls) scores.push_back(x.score);
        std::sort(scores.begin(), scores.end(), std::greater<>());

        // (precision, recall) for each cut-off keeping the top k detections.
        std::vector<std::pair<double, double>> points;
        for (std::size_t k = 1; k <= scores.size(); ++k) {
            const double cut = scores[k - 1];
            std::vector<std::pair<double, std::size_t>> kept;  // score, image
            std::vector<const synth::Box*> boxes;
            for (std::size_t i = 0; i < dets.size(); ++i)
                for (const auto& x : dets[i])
                    if (x.box.cls == cls && x.score >= cut) {
                        kept.push_back({x.score, i});
                        boxes.push_back(&x.box);
                    }
            std::vector<std::size_t> order(kept.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return kept[a].first > kept[b].first; });
            std::vector<std::vector<bool>> used(gt.size());
            for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);
            std::size_t tp = 0;
            for (std::size_t o : order) {
                const std::size_t img = kept[o].second;
                int best = -1;
                double best_iou = iou_thresh;
                for (std::size_t g = 0; g < gt[img].size(); ++g) {
                    if (gt[img][g].cls != cls || used[img][g]) continue;
                    const double v = det::iou(*boxes[o], gt[img][g]);
                    if (v >= best_iou) {
                        best_iou = v;
                        best = static_cast<int>(g);
                    }
                }
                if (best >= 0) {
                    used[img][static_cast<std::size_t>(best)] = true;
                    ++tp;
                }
            }
            points.push_back({static_cast<double>(tp) / static_cast<double>(kept.size()),
                              static_cast<double>(tp) / static_cast<double>(total_gt)});
        }
        double ap = 0;
        for (int i = 0; i <= 100; ++i) {
            const double r = i / 100.0;
            double p = 0;
            for (const auto& [prec, rec] : points)
                if (rec >= r) p = std::max(p, prec);
            ap += p;
        }
        ap /= 101.0;
        res.per_class[static_cast<std::size_t>(cls)] = ap;
        sum += ap;
        ++defined;
    }
    if (defined > 0) res.mean = sum / defined;
    return res;
}

struct ApCase {
    std::vector<std::vector<det::Detection>> dets;
    std::vector<std::vector<synth::Box>> gt;
};

/// Small random case on a coarse grid so that matches and misses both occur.
/// Scores are distinct.
inline ApCase random_ap_case(Rng& rng) {
    ApCase c;
    const int images = 1 + static_cast<int>(rng.below(3));
    auto box = [&](int cls) {
        const double x = 4.0 * static_cast<double>(rng.below(6));
        const double y = 4.0 * static_cast<double>(rng.below(6));
        const double w = 4.0 + 4.0 * static_cast<double>(rng.below(3));
        const double h = 4.0 + 4.0 * static_cast<double>(rng.below(3));
        return synth::Box{cls, x, y, x + w, y + h};
    };
    int serial = 0;
    for (int i = 0; i < images; ++i) {
        std::vector<synth::Box> g;
        const int ng = static_cast<int>(rng.below(4));
        for (int k = 0; k < ng; ++k) g.push_back(box(static_cast<int>(rng.below(3))));
        std::vector<det::Detection> d;
        const int nd = static_cast<int>(rng.below(6));
        for (int k = 0; k < nd; ++k) {
            synth::Box b = !g.empty() && rng.uniform() < 0.6 ? g[rng.below(g.size())] : box(static_cast<int>(rng.below(3)));
            if (rng.uniform() < 0.3) {
                b.x_min += 2;
                b.x_max += 2;
            }
            d.push_back({b, 0.05 + 0.9 * rng.uniform() + 1e-9 * ++serial});
        }
        c.gt.push_back(std::move(g));
        c.dets.push_back(std::move(d));
    }
    return c;
}

inline bool same_ap(const metrics::ApResult& a, const metrics::ApResult& b) {
    return a.per_class == b.per_class && a.mean == b.mean;
}

}  // namespace unitmod::testing
