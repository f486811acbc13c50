#pragma once

// Per-image overlap metrics on binarised masks.

#include <span>
#include <vector>

#include "asw/tensor.hpp"

namespace asw {

inline constexpr double kBinaryThreshold = 0.5;

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t pred = 0;
    std::size_t truth = 0;
};

// Values strictly above the threshold count as foreground.
inline OverlapCounts overlap(std::span<const double> pred, std::span<const double> truth,
                             double threshold = kBinaryThreshold) {
    if (pred.size() != truth.size()) throw ShapeError("overlap: prediction and ground truth differ in size");
    OverlapCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] > threshold, t = truth[i] > threshold;
        c.pred += p;
        c.truth += t;
        c.intersection += (p && t);
    }
    return c;
}

// Both empty counts as a perfect match.
inline double dice_score(const OverlapCounts& c) {
    const std::size_t denom = c.pred + c.truth;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.intersection) / static_cast<double>(denom);
}

inline double iou_score(const OverlapCounts& c) {
    const std::size_t uni = c.pred + c.truth - c.intersection;
    return uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(uni);
}

inline double dice_score(std::span<const double> pred, std::span<const double> truth) {
    return dice_score(overlap(pred, truth));
}
inline double iou_score(std::span<const double> pred, std::span<const double> truth) {
    return iou_score(overlap(pred, truth));
}

struct ImageMetrics {
    double dice = 0.0;
    double iou = 0.0;
};

struct MeanMetrics {
    double mdice = 0.0;
    double miou = 0.0;
    std::size_t count = 0;
};

inline MeanMetrics mean_metrics(std::span<const ImageMetrics> per_image) {
    MeanMetrics m;
    m.count = per_image.size();
    if (per_image.empty()) return m;
    for (const auto& im : per_image) {
        m.mdice += im.dice;
        m.miou += im.iou;
    }
    m.mdice /= static_cast<double>(m.count);
    m.miou /= static_cast<double>(m.count);
    return m;
}

// pred and truth are [N,1,H,W] (or any [N,...]) probability / binary maps.
inline std::vector<ImageMetrics> per_image_metrics(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape())
        throw ShapeError("per_image_metrics: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
    const std::size_t N = pred.dim(0), per = pred.numel() / N;
    std::vector<ImageMetrics> out;
    for (std::size_t n = 0; n < N; ++n) {
        const auto c = overlap(pred.data().subspan(n * per, per), truth.data().subspan(n * per, per));
        out.push_back({dice_score(c), iou_score(c)});
    }
    return out;
}

}  // namespace asw
