#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ntod/detector.hpp"
#include "ntod/scene.hpp"
#include "ntod/sweep.hpp"

namespace ntod {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct ChartStyle {
    std::string title;
    std::string x_label;
    std::string y_label;
    int width = 640;
    int height = 420;
};

/// Line chart with markers; a one-point series renders as a single marker.
std::string render_line_chart(const std::vector<Series>& series, const ChartStyle& style);

/// Scene pixels with per-location weights painted as translucent cells.
/// `weights[level]` holds one value per location of that level.
std::string render_weight_overlay(const GrayImage& image, const std::vector<LevelGeometry>& levels,
                                  const LocationWeights& weights, const std::string& title);

/// Per-sweep-row chart data: mAP against noise level, one series per (kind, method), averaged over seeds.
std::vector<Series> noise_impact_series(const std::vector<SweepRow>& rows);

/// Per-row IoU(target, clean box) by epoch for rows that tracked it.
std::vector<Series> target_iou_series(const std::vector<SweepRow>& rows);

/// A weight dump written next to sweep or train outputs.
struct WeightDump {
    int64_t image_id = 0;
    int epoch = 0;
    std::string label;
    ImageInfo image;
    SceneConfig scene;
    std::vector<int> strides;
    LocationWeights weights;
};

nlohmann::json to_json(const WeightDump& d);
WeightDump weight_dump_from_json(const nlohmann::json& j);

/// IoU curves supplied directly, e.g. from a pinned-prediction regeneration run:
/// {"series": [{"name": ..., "x": [...], "y": [...]}]}.
std::vector<Series> series_from_json(const nlohmann::json& j);

/// Writes noise_impact.svg, target_iou.svg and one overlay per `*.weights.json` dump in
/// `artifacts_dir`, plus any `*.curves.json` file as an extra chart. Returns the files written.
/// Throws std::invalid_argument on an empty table.
std::vector<std::filesystem::path> plot_report(const std::vector<SweepRow>& rows,
                                               const std::filesystem::path& artifacts_dir,
                                               const std::filesystem::path& out_dir);

}  // namespace ntod
