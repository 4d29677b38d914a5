#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ntod/annotations.hpp"
#include "ntod/detector.hpp"

namespace ntod {

/// Side-length buckets on sqrt(w * h), in pixels.
enum class SizeBucket { very_tiny, tiny, small, medium };
inline constexpr int kSizeBucketCount = 4;
std::string_view to_string(SizeBucket b);
SizeBucket size_bucket(const BoundingBox& box);

struct EvalResult {
    double mAP = 0.0;  // mean over the IoU thresholds
    double AP50 = 0.0;
    double AP75 = 0.0;
    /// Absent when the bucket holds neither gts nor detections.
    std::array<std::optional<double>, kSizeBucketCount> bucket_ap;
    std::vector<double> per_threshold;   // class-mean AP at each threshold
    std::vector<std::optional<double>> per_class;  // threshold-mean AP, absent for excluded classes
    int64_t num_gts = 0;
    int64_t num_detections = 0;
};

nlohmann::json to_json(const EvalResult& r);

/// 0.50, 0.55, ..., 0.95
std::vector<double> coco_iou_thresholds();

/// 101-point interpolated AP from per-detection match flags already in rank order.
double interpolated_ap(std::span<const bool> matched_in_rank_order, int64_t num_gts);

/// COCO-style AP of `detections` against the annotations of `gts`. Detections are
/// ranked by score (ties by box, then class); each one greedily takes the unmatched
/// gt of its image and class with the highest IoU at or above the threshold.
/// Throws std::invalid_argument when a detection references an unknown image or class.
EvalResult compute_ap(std::span<const Detection> detections, const DetDataset& gts,
                      const std::vector<double>& iou_thresholds = coco_iou_thresholds());

/// COCO result list: [{"image_id", "category_id" (external id), "bbox": [x, y, w, h], "score"}].
std::string serialize_detections(std::span<const Detection> detections, const DetDataset& reference);
std::vector<Detection> parse_detections(std::string_view json_text, const DetDataset& reference);

}  // namespace ntod
