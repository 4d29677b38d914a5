#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ntod/detector.hpp"
#include "ntod/eval.hpp"
#include "ntod/noisegen.hpp"
#include "ntod/scene.hpp"

namespace ntod {

/// A named combination of the robustness components.
struct MethodToggles {
    std::string name = "baseline";
    bool clc = false;
    bool tlr = false;
    bool rbr = false;
};

void to_json(nlohmann::json& j, const MethodToggles& m);
void from_json(const nlohmann::json& j, MethodToggles& m);

struct SweepSpec {
    std::vector<NoiseKind> kinds{NoiseKind::missing, NoiseKind::extra, NoiseKind::class_shift, NoiseKind::box};
    std::vector<double> levels{0.0, 0.1, 0.2, 0.3, 0.4};
    std::vector<MethodToggles> methods{MethodToggles{}};
    std::vector<uint64_t> seeds{0};
    DetectorConfig detector;  // toggles are overridden per method
    int shard_index = 0;      // run only cells whose ordinal % shard_count == shard_index
    int shard_count = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SweepSpec& s);
void from_json(const nlohmann::json& j, SweepSpec& s);

struct SweepCell {
    NoiseKind kind = NoiseKind::box;  // irrelevant at level 0
    double level = 0.0;
    MethodToggles method;
    uint64_t seed = 0;

    /// Stable identifier; every level-0 cell of a method and seed shares one key.
    std::string key() const;
};

struct SweepRow {
    SweepCell cell;
    bool ok = false;
    std::string error;
    EvalResult eval;
    std::vector<EpochMetrics> epochs;
    double seconds = 0.0;
};

nlohmann::json to_json(const SweepRow& row);
SweepRow sweep_row_from_json(const nlohmann::json& j);

/// Cells of the grid in execution order, level-0 duplicates removed.
std::vector<SweepCell> enumerate_cells(const SweepSpec& spec);

/// The clean splits a sweep trains and evaluates on. Evaluation only ever sees `val`.
struct CleanSplits {
    DetDataset train;
    DetDataset val;
    SceneConfig scene;
    std::filesystem::path image_dir;
};

struct SweepOutcome {
    std::vector<SweepRow> rows;  // every row of the table, including earlier runs
    int ran = 0;
    int skipped = 0;
    int failed = 0;
};

/// Runs one cell: synthesize noise on the clean training split, train, evaluate on the clean val split.
SweepRow run_cell(const SweepCell& cell, const SweepSpec& spec, const CleanSplits& data);

/// Runs every pending cell and appends its row to `<out_dir>/results.jsonl`
/// (CSV mirror in results.csv). Cells already recorded as ok are not recomputed;
/// a failing cell is recorded as failed and the sweep moves on.
SweepOutcome run_sweep(const SweepSpec& spec, const CleanSplits& data, const std::filesystem::path& out_dir);

/// Reads a results table; missing file yields an empty table.
std::vector<SweepRow> load_results(const std::filesystem::path& jsonl);
void write_results_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& csv);

}  // namespace ntod
