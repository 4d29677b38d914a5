#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ntod/annotations.hpp"

namespace ntod {

enum class NoiseKind { missing, extra, class_shift, box, mixed };

std::string_view to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(std::string_view s);

struct NoiseComponent {
    NoiseKind kind = NoiseKind::class_shift;
    double level = 0.0;
};

struct NoiseSpec {
    NoiseKind kind = NoiseKind::box;
    double level = 0.0;  // fraction in [0,1]
    uint64_t seed = 0;
    std::vector<NoiseComponent> mixed_components;

    /// Throws std::invalid_argument when the spec breaks its invariants.
    void validate() const;
};

/// Relative offsets of one box perturbation, each drawn from U(-a, a).
struct PerturbationDraw {
    double dx = 0.0;
    double dy = 0.0;
    double dw = 0.0;
    double dh = 0.0;
};

struct NoiseResult {
    DetDataset dataset;
    std::vector<int64_t> affected_ids;  // removed, shifted, perturbed or created ids, ascending
    std::vector<std::string> warnings;
};

class NoiseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// round(a * N) with ties to even.
int64_t noise_budget(double level, size_t n);

/// Counter-based substream key; every random decision is derived from one of these
/// so results do not depend on the order of images or annotations in the input.
uint64_t stream_key(uint64_t seed, uint64_t tag, int64_t a, int64_t b = 0);

PerturbationDraw draw_perturbation(double level, uint64_t seed, int64_t image_id, int64_t annotation_id);
BoundingBox apply_perturbation(const BoundingBox& box, const PerturbationDraw& d);

NoiseResult inject_missing(const DetDataset& ds, const NoiseSpec& spec);
NoiseResult inject_class_shift(const DetDataset& ds, const NoiseSpec& spec);
NoiseResult inject_extra(const DetDataset& ds, const NoiseSpec& spec);
NoiseResult inject_box_noise(const DetDataset& ds, const NoiseSpec& spec);
NoiseResult inject_mixed(const DetDataset& ds, const NoiseSpec& spec);

/// Dispatches on spec.kind.
NoiseResult inject(const DetDataset& ds, const NoiseSpec& spec);

struct OffsetHistogram {
    static constexpr int kBins = 40;  // uniform over [-1, 1]
    std::array<int64_t, kBins> counts{};
    double max_abs = 0.0;
    void add(double v);
};

struct NoiseReport {
    size_t clean_count = 0;
    size_t noisy_count = 0;
    int64_t missing = 0;
    int64_t extra = 0;
    int64_t class_shifted = 0;
    int64_t box_perturbed = 0;
    double missing_rate = 0.0;
    double extra_rate = 0.0;
    double class_shift_rate = 0.0;
    double box_rate = 0.0;
    std::vector<std::vector<int64_t>> class_confusion;  // [clean class][noisy class]
    OffsetHistogram dx, dy, dw, dh;

    std::string to_json() const;
    std::string to_table() const;
};

NoiseReport noise_report(const DetDataset& clean, const DetDataset& noisy);

}  // namespace ntod
