#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ntod::clc {

/// Per-class confidence state: row = annotated class, column = predicted class.
/// Each row is an exponentially weighted average of per-image mean predictions.
class ConfidenceMatrix {
public:
    ConfidenceMatrix(int num_classes, int period);

    int num_classes() const { return classes_; }
    int period() const { return period_; }
    double beta() const { return beta_; }

    double at(int label, int pred) const { return values_[index(label, pred)]; }
    void set(int label, int pred, double v) { values_[index(label, pred)] = v; }
    std::span<const double> row(int label) const;
    int64_t rows_touched(int label) const { return touched_[static_cast<size_t>(label)]; }

    /// row(label) <- beta * row(label) + (1 - beta) * pillar
    void update(int label, std::span<const double> pillar);

    std::string to_json() const;
    static ConfidenceMatrix from_json(const std::string& text);

    bool operator==(const ConfidenceMatrix&) const = default;

private:
    size_t index(int label, int pred) const;

    int classes_;
    int period_;
    double beta_;
    std::vector<double> values_;
    std::vector<int64_t> touched_;
};

struct SampleObservation {
    std::vector<double> prediction;  // per-class sigmoid scores
    int gt_class = 0;
};

struct ConfidencePillar {
    int class_y = 0;
    std::vector<double> mean_prediction;
};

/// Identity-initialised matrix; throws std::invalid_argument for C < 2 or T < 1.
ConfidenceMatrix init_dcm(int num_classes, int period);

/// Mean prediction of the observations whose gt class is `class_y`.
/// Returns false (no pillar) when the image has no such observation.
bool confidence_pillar(std::span<const SampleObservation> observations, int class_y, ConfidencePillar& out);

void update_dcm(ConfidenceMatrix& dcm, const ConfidencePillar& pillar);

/// Updates every class row present among one image's positives.
void update_from_image(ConfidenceMatrix& dcm, std::span<const SampleObservation> positives);

/// 0 when some class i beats the gt score, the label row's entry v[y][i] and
/// its own diagonal v[i][i]; 1 otherwise. Ties never count as noisy.
int noisy_factor(const SampleObservation& obs, const ConfidenceMatrix& dcm);

struct FilterConfig {
    double warmup_fraction = 0.5;
};

/// Weight in {0,1} per positive; all ones while progress < warmup_fraction.
std::vector<double> clc_loss_weights(std::span<const SampleObservation> positives, const ConfidenceMatrix& dcm,
                                     double progress, const FilterConfig& cfg = {});

}  // namespace ntod::clc
