#include "ntod/assign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ntod/log.hpp"

namespace ntod {

std::vector<LevelGeometry> make_levels(std::span<const int> strides, int image_w, int image_h) {
    std::vector<LevelGeometry> levels;
    for (int s : strides) {
        if (s < 1) throw std::invalid_argument("stride must be positive");
        levels.push_back({s, (image_h + s - 1) / s, (image_w + s - 1) / s});
    }
    return levels;
}

std::vector<std::pair<int, int>> Assignment::positives(int gt) const {
    std::vector<std::pair<int, int>> out;
    for (size_t l = 0; l < gt_of.size(); ++l) {
        for (size_t i = 0; i < gt_of[l].size(); ++i) {
            if (gt_of[l][i] == gt) out.emplace_back(static_cast<int>(l), static_cast<int>(i));
        }
    }
    return out;
}

int Assignment::num_positive() const {
    int n = 0;
    for (const auto& lv : gt_of) n += static_cast<int>(std::count_if(lv.begin(), lv.end(), [](int g) { return g >= 0; }));
    return n;
}

double center_prior(const BoundingBox& gt, const LevelGeometry& level, int index, const AssignerConfig& cfg) {
    const double sigma = cfg.sigma_scale * std::sqrt(gt.w * gt.h);
    const double dx = level.cx(index) - gt.cx;
    const double dy = level.cy(index) - gt.cy;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

int level_for_box(const BoundingBox& gt, std::span<const LevelGeometry> levels, const AssignerConfig& cfg) {
    const double side = std::log2(std::sqrt(gt.w * gt.h));
    int best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (size_t l = 0; l < levels.size(); ++l) {
        const double gap = std::abs(side - std::log2(cfg.scale_per_stride * levels[l].stride));
        if (gap < best_gap) {
            best_gap = gap;
            best = static_cast<int>(l);
        }
    }
    return best;
}

Assignment assign_samples(std::span<const BoundingBox> gts, std::span<const LevelGeometry> levels,
                          const AssignerConfig& cfg) {
    if (levels.empty()) throw std::invalid_argument("assignment needs at least one feature level");
    Assignment a;
    a.gt_of.resize(levels.size());
    std::vector<std::vector<double>> best_prior(levels.size());
    for (size_t l = 0; l < levels.size(); ++l) {
        if (levels[l].size() <= 0) throw std::invalid_argument("empty feature grid");
        a.gt_of[l].assign(static_cast<size_t>(levels[l].size()), kBackground);
        best_prior[l].assign(static_cast<size_t>(levels[l].size()), -1.0);
    }

    auto nearest = [&](const BoundingBox& g, const LevelGeometry& lv) {
        const int gx = std::clamp(static_cast<int>(std::floor(g.cx / lv.stride)), 0, lv.grid_w - 1);
        const int gy = std::clamp(static_cast<int>(std::floor(g.cy / lv.stride)), 0, lv.grid_h - 1);
        return gy * lv.grid_w + gx;
    };
    auto offer = [&](int gt, int l, int idx, double prior) {
        auto& cur = a.gt_of[static_cast<size_t>(l)][static_cast<size_t>(idx)];
        double& best = best_prior[static_cast<size_t>(l)][static_cast<size_t>(idx)];
        // gts are visited in index order, so a strict comparison keeps the lower index on ties
        if (prior > best) {
            best = prior;
            cur = gt;
        }
    };

    a.level_of_gt.resize(gts.size());
    for (size_t g = 0; g < gts.size(); ++g) {
        const BoundingBox& box = gts[g];
        const int l = level_for_box(box, levels, cfg);
        a.level_of_gt[g] = l;
        const LevelGeometry& lv = levels[static_cast<size_t>(l)];
        const int x0 = std::max(0, static_cast<int>(std::floor(box.x_min() / lv.stride - 0.5)));
        const int x1 = std::min(lv.grid_w - 1, static_cast<int>(std::ceil(box.x_max() / lv.stride - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::floor(box.y_min() / lv.stride - 0.5)));
        const int y1 = std::min(lv.grid_h - 1, static_cast<int>(std::ceil(box.y_max() / lv.stride - 0.5)));
        const int near = nearest(box, lv);
        for (int gy = y0; gy <= y1; ++gy) {
            for (int gx = x0; gx <= x1; ++gx) {
                const int idx = gy * lv.grid_w + gx;
                const double px = lv.cx(idx);
                const double py = lv.cy(idx);
                const bool in_box = px >= box.x_min() && px <= box.x_max() && py >= box.y_min() && py <= box.y_max();
                const double prior = center_prior(box, lv, idx, cfg);
                if (idx == near || (in_box && prior > cfg.prior_threshold)) offer(static_cast<int>(g), l, idx, prior);
            }
        }
        const double prior = center_prior(box, lv, near, cfg);
        offer(static_cast<int>(g), l, near, prior);
    }

    // every gt keeps at least one location
    std::vector<int> count(gts.size(), 0);
    for (const auto& lv : a.gt_of) {
        for (int g : lv) {
            if (g >= 0) ++count[static_cast<size_t>(g)];
        }
    }
    for (size_t g = 0; g < gts.size(); ++g) {
        if (count[g] > 0) continue;
        const int l = a.level_of_gt[g];
        const LevelGeometry& lv = levels[static_cast<size_t>(l)];
        std::vector<std::pair<double, int>> by_distance;
        for (int idx = 0; idx < lv.size(); ++idx) {
            const double dx = lv.cx(idx) - gts[g].cx;
            const double dy = lv.cy(idx) - gts[g].cy;
            by_distance.emplace_back(dx * dx + dy * dy, idx);
        }
        std::sort(by_distance.begin(), by_distance.end());
        bool claimed = false;
        for (const auto& [d2, idx] : by_distance) {
            int& owner = a.gt_of[static_cast<size_t>(l)][static_cast<size_t>(idx)];
            if (owner == kBackground || count[static_cast<size_t>(owner)] > 1) {
                if (owner != kBackground) --count[static_cast<size_t>(owner)];
                owner = static_cast<int>(g);
                best_prior[static_cast<size_t>(l)][static_cast<size_t>(idx)] = center_prior(gts[g], lv, idx, cfg);
                ++count[g];
                claimed = true;
                break;
            }
        }
        if (!claimed) log::warn("assignment: gt " + std::to_string(g) + " has no free location");
    }
    return a;
}

}  // namespace ntod
