#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ntod/annotations.hpp"

namespace ntod::tls {

/// One head location; stable across epochs for a fixed image and architecture.
struct SampleKey {
    int level = 0;
    int grid_y = 0;
    int grid_x = 0;
    auto operator<=>(const SampleKey&) const = default;
};

inline constexpr int kNoGt = -1;

struct SampleRecord {
    SampleKey key;
    int assigned_gt = kNoGt;
    std::map<int, double> score_history;  // epoch -> score
    bool operator==(const SampleRecord&) const = default;
};

/// What the trainer reports for one location after a forward pass.
/// `score` is the assigned gt class score for positives and the max
/// foreground score for negatives.
struct SampleScore {
    SampleKey key;
    int assigned_gt = kNoGt;
    double score = 0.0;
};

class RegistryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrendRegistry {
public:
    int epoch() const { return epoch_; }
    void set_epoch(int epoch) { epoch_ = epoch; }

    /// Appends one history entry per sample for the current epoch. A record whose
    /// assignment changed restarts its history. Throws on a second write of the
    /// same (image, epoch).
    void record_epoch(int64_t image_id, std::span<const SampleScore> scores);

    const SampleRecord* find(int64_t image_id, const SampleKey& key) const;
    /// Score at `epoch`, if the sample was recorded then under the same assignment.
    std::optional<double> score_at(int64_t image_id, const SampleKey& key, int epoch) const;

    size_t image_count() const { return images_.size(); }
    const std::map<SampleKey, SampleRecord>* records(int64_t image_id) const;

    std::string to_json() const;

    bool operator==(const TrendRegistry&) const = default;

private:
    int epoch_ = 0;
    std::map<int64_t, std::map<SampleKey, SampleRecord>> images_;
    std::set<std::pair<int64_t, int>> written_;
};

/// 1 - s_prev/s_cur when that is >= 0, else `floor`.
double cleanliness(double s_prev, double s_cur, double floor);

/// s_j / sum(s); uniform when every score is zero.
std::vector<double> primacy(std::span<const double> scores);

double positive_weight(double c, double r, double alpha);

/// s_prev/s_cur clamped to at most 1; 1 when s_cur is 0.
double negative_weight(double s_prev, double s_cur);

/// Positive weights for one gt's sample set. `prev[j]` is empty when sample j has
/// no score from the previous epoch; when no sample has one (first epoch) the
/// weights are primacy only.
std::vector<double> positive_weights_for_gt(std::span<const std::optional<double>> prev,
                                            std::span<const double> cur, double alpha);

struct Candidate {
    SampleKey key;
    BoundingBox box;
    double score = 0.0;
};

/// The k highest scores, descending; ties go to the lower key.
std::vector<Candidate> select_topk(std::vector<Candidate> candidates, size_t k);

/// Confidence-weighted mean box of the top-k set (plain mean if all scores are 0).
BoundingBox ensemble_box(std::span<const Candidate> topk);

/// (w1*g + w2*prev + w3*ensemble) / (w1 + w2 + w3).
BoundingBox fuse_boxes(const BoundingBox& gt, const BoundingBox& theta_prev, const BoundingBox& ensemble,
                       double w1, double w2, double w3);

/// One regeneration step. w2 is the previous epoch's max top-k score (0 if none),
/// w3 the current one's.
BoundingBox rbr_fuse(const BoundingBox& gt, const BoundingBox& theta_prev, std::span<const Candidate> topk,
                     double w1, double w2);

struct RegeneratedTarget {
    int gt_index = 0;
    BoundingBox gt;     // the annotated (possibly noisy) box
    BoundingBox box;    // current regression target
    int epoch = 0;
    double last_max_score = 0.0;  // becomes w2 on the next refresh
};

/// Per-image, per-gt regression targets maintained across epochs.
class BoxRegenerator {
public:
    explicit BoxRegenerator(double w1 = 1.0, size_t k = 4);

    double w1() const { return w1_; }
    size_t k() const { return k_; }

    /// Registers the gts of an image at epoch 0 (target = gt). No-op if already known.
    void init_image(int64_t image_id, std::span<const BoundingBox> gts);
    const std::vector<RegeneratedTarget>& targets(int64_t image_id) const;
    bool has_image(int64_t image_id) const { return images_.count(image_id) > 0; }

    /// Refreshes one gt from this epoch's candidates; empty candidates carry the target over.
    void refresh(int64_t image_id, int gt_index, std::vector<Candidate> candidates, int epoch);

    std::string to_json() const;

private:
    double w1_;
    size_t k_;
    std::map<int64_t, std::vector<RegeneratedTarget>> images_;
};

}  // namespace ntod::tls
