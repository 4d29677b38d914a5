#include "ntod/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include <nlohmann/json.hpp>

namespace ntod {

namespace {

constexpr int kRecallPoints = 101;

bool rank_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    const auto ka = std::make_tuple(a.image_id, a.box.cx, a.box.cy, a.box.w, a.box.h, a.class_id);
    const auto kb = std::make_tuple(b.image_id, b.box.cx, b.box.cy, b.box.w, b.box.h, b.class_id);
    return ka < kb;
}

struct ClassEval {
    std::optional<double> ap;  // empty when the class is excluded
};

struct GtRef {
    const Annotation* ann;
    bool ignored;
};

ClassEval eval_class(const std::vector<const Detection*>& dets, const std::map<int64_t, std::vector<GtRef>>& gts_by_image,
                     double threshold, std::optional<SizeBucket> bucket) {
    int64_t num_gts = 0;
    for (const auto& [img, list] : gts_by_image) {
        for (const auto& g : list) num_gts += g.ignored ? 0 : 1;
    }
    std::map<int64_t, std::vector<bool>> used;
    for (const auto& [img, list] : gts_by_image) used[img].assign(list.size(), false);

    std::vector<bool> flags;
    int64_t counted_dets = 0;
    for (const Detection* d : dets) {
        auto it = gts_by_image.find(d->image_id);
        int best = -1;
        double best_iou = threshold;
        bool best_ignored = true;
        if (it != gts_by_image.end()) {
            const auto& list = it->second;
            auto& u = used[d->image_id];
            // non-ignored gts take precedence over ignored ones
            for (size_t g = 0; g < list.size(); ++g) {
                if (u[g]) continue;
                if (best >= 0 && !best_ignored && list[g].ignored) continue;
                const double v = iou(d->box, list[g].ann->box);
                if (v < threshold) continue;
                const bool better = best < 0 || (best_ignored && !list[g].ignored) || v > best_iou;
                if (better) {
                    best = static_cast<int>(g);
                    best_iou = v;
                    best_ignored = list[g].ignored;
                }
            }
            if (best >= 0) u[static_cast<size_t>(best)] = true;
        }
        if (best >= 0) {
            if (best_ignored) continue;
            flags.push_back(true);
        } else {
            if (bucket && size_bucket(d->box) != *bucket) continue;
            flags.push_back(false);
        }
        ++counted_dets;
    }
    if (num_gts == 0) {
        if (counted_dets == 0) return {std::nullopt};
        return {0.0};
    }
    const std::unique_ptr<bool[]> ranked(new bool[flags.size()]);
    std::copy(flags.begin(), flags.end(), ranked.get());
    return {interpolated_ap(std::span<const bool>(ranked.get(), flags.size()), num_gts)};
}

}  // namespace

std::string_view to_string(SizeBucket b) {
    switch (b) {
        case SizeBucket::very_tiny: return "very_tiny";
        case SizeBucket::tiny: return "tiny";
        case SizeBucket::small: return "small";
        case SizeBucket::medium: return "medium";
    }
    return "unknown";
}

SizeBucket size_bucket(const BoundingBox& box) {
    const double side = std::sqrt(std::max(0.0, box.w * box.h));
    if (side <= 8.0) return SizeBucket::very_tiny;
    if (side <= 16.0) return SizeBucket::tiny;
    if (side <= 32.0) return SizeBucket::small;
    return SizeBucket::medium;
}

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

double interpolated_ap(std::span<const bool> matched, int64_t num_gts) {
    if (num_gts <= 0) return 0.0;
    const size_t n = matched.size();
    std::vector<double> precision(n), recall(n);
    int64_t tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += matched[i] ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(num_gts);
    }
    for (size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (int k = 0; k < kRecallPoints; ++k) {
        const double r = static_cast<double>(k) / (kRecallPoints - 1);
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<size_t>(it - recall.begin())];
    }
    return sum / kRecallPoints;
}

nlohmann::json to_json(const EvalResult& r) {
    nlohmann::json j{{"mAP", r.mAP}, {"AP50", r.AP50}, {"AP75", r.AP75},
                     {"num_gts", r.num_gts}, {"num_detections", r.num_detections},
                     {"per_threshold", r.per_threshold}};
    for (int b = 0; b < kSizeBucketCount; ++b) {
        const auto& v = r.bucket_ap[static_cast<size_t>(b)];
        j["AP_" + std::string(to_string(static_cast<SizeBucket>(b)))] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    }
    auto& pc = j["per_class"] = nlohmann::json::array();
    for (const auto& v : r.per_class) pc.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    return j;
}

EvalResult compute_ap(std::span<const Detection> detections, const DetDataset& gts,
                      const std::vector<double>& iou_thresholds) {
    if (iou_thresholds.empty()) throw std::invalid_argument("at least one IoU threshold is required");
    const int C = gts.num_classes();
    for (const auto& d : detections) {
        if (d.class_id < 0 || d.class_id >= C) {
            throw std::invalid_argument("detection class " + std::to_string(d.class_id) + " is out of range");
        }
        if (!gts.find_image(d.image_id)) {
            throw std::invalid_argument("detection references unknown image " + std::to_string(d.image_id));
        }
    }

    std::vector<std::vector<const Detection*>> dets_by_class(static_cast<size_t>(C));
    {
        std::vector<const Detection*> ranked;
        ranked.reserve(detections.size());
        for (const auto& d : detections) ranked.push_back(&d);
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const Detection* a, const Detection* b) { return rank_before(*a, *b); });
        for (const Detection* d : ranked) dets_by_class[static_cast<size_t>(d->class_id)].push_back(d);
    }

    EvalResult result;
    result.num_gts = static_cast<int64_t>(gts.annotations.size());
    result.num_detections = static_cast<int64_t>(detections.size());

    // mean over classes at each threshold, then over thresholds; empty when every class is excluded
    auto evaluate = [&](const std::vector<double>& thresholds, std::optional<SizeBucket> bucket,
                        std::vector<double>* per_threshold,
                        std::vector<std::optional<double>>* per_class) -> std::optional<double> {
        std::vector<std::map<int64_t, std::vector<GtRef>>> gts_by_class(static_cast<size_t>(C));
        for (const auto& a : gts.annotations) {
            const bool ignored = bucket && size_bucket(a.box) != *bucket;
            gts_by_class[static_cast<size_t>(a.class_id)][a.image_id].push_back({&a, ignored});
        }
        std::vector<std::vector<std::optional<double>>> ap(static_cast<size_t>(C));
        for (int c = 0; c < C; ++c) {
            for (double t : thresholds) {
                ap[static_cast<size_t>(c)].push_back(
                    eval_class(dets_by_class[static_cast<size_t>(c)], gts_by_class[static_cast<size_t>(c)], t, bucket).ap);
            }
        }
        bool any_class = false;
        double threshold_sum = 0.0;
        for (size_t ti = 0; ti < thresholds.size(); ++ti) {
            double sum = 0.0;
            int n = 0;
            for (int c = 0; c < C; ++c) {
                if (const auto& v = ap[static_cast<size_t>(c)][ti]) {
                    sum += *v;
                    ++n;
                }
            }
            any_class = any_class || n > 0;
            const double mean = n > 0 ? sum / n : 0.0;
            threshold_sum += mean;
            if (per_threshold) per_threshold->push_back(mean);
        }
        if (per_class) {
            for (int c = 0; c < C; ++c) {
                const auto& row = ap[static_cast<size_t>(c)];
                if (!row[0]) {
                    per_class->push_back(std::nullopt);
                    continue;
                }
                double s = 0.0;
                for (const auto& v : row) s += *v;
                per_class->push_back(s / static_cast<double>(row.size()));
            }
        }
        if (!any_class) return std::nullopt;
        return threshold_sum / static_cast<double>(thresholds.size());
    };

    result.mAP = evaluate(iou_thresholds, std::nullopt, &result.per_threshold, &result.per_class).value_or(0.0);
    auto at = [&](double t) {
        for (size_t i = 0; i < iou_thresholds.size(); ++i) {
            if (std::abs(iou_thresholds[i] - t) < 1e-9) return result.per_threshold[i];
        }
        return evaluate({t}, std::nullopt, nullptr, nullptr).value_or(0.0);
    };
    result.AP50 = at(0.5);
    result.AP75 = at(0.75);
    for (int b = 0; b < kSizeBucketCount; ++b) {
        result.bucket_ap[static_cast<size_t>(b)] =
            evaluate(iou_thresholds, static_cast<SizeBucket>(b), nullptr, nullptr);
    }
    return result;
}

std::string serialize_detections(std::span<const Detection> detections, const DetDataset& reference) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : detections) {
        if (d.class_id < 0 || d.class_id >= reference.num_classes()) {
            throw std::invalid_argument("detection class " + std::to_string(d.class_id) + " is out of range");
        }
        arr.push_back({{"image_id", d.image_id},
                       {"category_id", reference.categories[static_cast<size_t>(d.class_id)].external_id},
                       {"bbox", {d.box.x_min(), d.box.y_min(), d.box.w, d.box.h}},
                       {"score", d.score}});
    }
    return arr.dump();
}

std::vector<Detection> parse_detections(std::string_view json_text, const DetDataset& reference) {
    std::map<int64_t, int> by_external;
    for (const auto& c : reference.categories) by_external[c.external_id] = c.id;
    const auto arr = nlohmann::json::parse(json_text);
    if (!arr.is_array()) throw DatasetError("detections must be a JSON array");
    std::vector<Detection> out;
    for (size_t i = 0; i < arr.size(); ++i) {
        const auto& e = arr[i];
        try {
            Detection d;
            d.image_id = e.at("image_id").get<int64_t>();
            const int64_t cat = e.at("category_id").get<int64_t>();
            auto it = by_external.find(cat);
            if (it == by_external.end()) throw DatasetError("unknown category_id " + std::to_string(cat));
            d.class_id = it->second;
            const auto b = e.at("bbox").get<std::vector<double>>();
            if (b.size() != 4) throw DatasetError("bbox must have four numbers");
            d.box = BoundingBox::from_corner(b[0], b[1], b[2], b[3]);
            d.score = e.at("score").get<double>();
            out.push_back(d);
        } catch (const nlohmann::json::exception& ex) {
            throw DatasetError("detection " + std::to_string(i) + ": " + ex.what());
        }
    }
    return out;
}

}  // namespace ntod
