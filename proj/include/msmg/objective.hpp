#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "msmg/graph.hpp"
#include "msmg/ops.hpp"

namespace msmg {

struct LossWeights {
    double gamma_r = 0.75;
    double gamma_e = 0.25;

    void validate() const {
        if (gamma_r < 0 || gamma_e < 0)
            throw ConfigError("loss weights must be non-negative");
        if (std::abs(gamma_r + gamma_e - 1.0) > 1e-9)
            throw ConfigError("loss weights must sum to 1 (convex combination), got " +
                              std::to_string(gamma_r + gamma_e));
    }
};

// Soft Dice per sample, averaged over the batch:
//   1 - (2·Σ p·y + s) / (Σ p + Σ y + s)
// The smoothing constant keeps empty-vs-empty at exactly zero loss.
template <class T>
int dice_loss(Graph<T>& g, int pred, int target, T smooth = T(1)) {
    check_same_shape(g.value(pred), g.value(target), "dice_loss");
    const std::size_t N = g.value(pred).dim(0);
    int inter = ops::sum_per_sample(g, ops::mul(g, pred, target));
    int mass = ops::add(g, ops::sum_per_sample(g, pred), ops::sum_per_sample(g, target));
    int num = ops::add_scalar(g, ops::scale(g, inter, T(2)), smooth);
    int den = ops::add_scalar(g, mass, smooth);
    int per_sample = ops::add_scalar(g, ops::scale(g, ops::div(g, num, den), T(-1)), T(1));
    return ops::scale(g, ops::sum_per_sample(g, ops::reshape(g, per_sample, {1, N})),
                      T(1) / static_cast<T>(N));
}

template <class T>
struct CombinedLoss {
    int total = -1;
    int seg = -1;
    int edge = -1;
};

// gamma_r · Dice(s_seg, mask) + gamma_e · Dice(s_edge, edge_gt)
template <class T>
CombinedLoss<T> combined_loss(Graph<T>& g, int s_seg, int s_edge, int mask_gt, int edge_gt,
                              const LossWeights& w, T smooth = T(1)) {
    w.validate();
    CombinedLoss<T> out;
    out.seg = dice_loss(g, s_seg, mask_gt, smooth);
    out.edge = dice_loss(g, s_edge, edge_gt, smooth);
    out.total = ops::add(g, ops::scale(g, out.seg, static_cast<T>(w.gamma_r)),
                         ops::scale(g, out.edge, static_cast<T>(w.gamma_e)));
    return out;
}

// ---------------------------------------------------------------------------
// metrics (plain functions over probability maps)

// F1 at a fixed threshold. Empty-vs-empty counts as perfect; exactly one
// empty side scores zero.
template <class T>
double pixel_f1(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = 0.5) {
    check_same_shape(pred, gt, "pixel_f1");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = static_cast<double>(pred[i]) > threshold;
        const bool y = gt[i] > T(0.5);
        tp += p && y;
        fp += p && !y;
        fn += !p && y;
    }
    if (tp + fp + fn == 0) return 1.0;
    if (tp == 0) return 0.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

// ROC AUC by the Mann-Whitney rank statistic, ties counted 0.5. Undefined
// (nullopt) when the ground truth is single-class.
template <class T>
std::optional<double> pixel_auc(const Tensor<T>& pred, const Tensor<T>& gt) {
    check_same_shape(pred, gt, "pixel_auc");
    const std::size_t n = pred.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) n_pos += gt[i] > T(0.5);
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    // average ranks over tie groups
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pred[order[j + 1]] == pred[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (gt[order[k]] > T(0.5)) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Image-level manipulation score: the global maximum of the segmentation map.
template <class T>
double image_score(const Tensor<T>& s_seg) {
    double best = 0.0;
    for (const T& v : s_seg.data) best = std::max(best, static_cast<double>(v));
    return best;
}

}  // namespace msmg
