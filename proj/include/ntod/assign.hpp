#pragma once

#include <span>
#include <vector>

#include "ntod/annotations.hpp"

namespace ntod {

/// One feature level of the dense head. Location (y, x) sits at pixel
/// ((x + 0.5) * stride, (y + 0.5) * stride).
struct LevelGeometry {
    int stride = 4;
    int grid_h = 0;
    int grid_w = 0;

    int size() const { return grid_h * grid_w; }
    double cx(int index) const { return (index % grid_w + 0.5) * stride; }
    double cy(int index) const { return (index / grid_w + 0.5) * stride; }
};

std::vector<LevelGeometry> make_levels(std::span<const int> strides, int image_w, int image_h);

struct AssignerConfig {
    double sigma_scale = 0.5;       // sigma = sigma_scale * sqrt(w * h)
    double prior_threshold = 0.25;
    double scale_per_stride = 2.0;  // gt of side s goes to the level whose 2*stride is closest to s (log scale)
};

inline constexpr int kBackground = -1;

struct Assignment {
    std::vector<std::vector<int>> gt_of;  // [level][location] -> gt index or kBackground
    std::vector<int> level_of_gt;

    /// Positive locations of one gt as (level, location) pairs, in location order.
    std::vector<std::pair<int, int>> positives(int gt) const;
    int num_positive() const;
};

/// Gaussian center-prior assignment. A location inside a gt box on that gt's
/// level is a candidate when exp(-d^2 / (2 sigma^2)) exceeds the threshold;
/// contested locations go to the higher prior, ties to the lower gt index.
/// Every gt keeps at least its nearest location.
Assignment assign_samples(std::span<const BoundingBox> gts, std::span<const LevelGeometry> levels,
                          const AssignerConfig& cfg = {});

/// Gaussian prior of location `index` on `level` for `gt`.
double center_prior(const BoundingBox& gt, const LevelGeometry& level, int index, const AssignerConfig& cfg);

int level_for_box(const BoundingBox& gt, std::span<const LevelGeometry> levels, const AssignerConfig& cfg);

}  // namespace ntod
