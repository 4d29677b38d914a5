#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ntod/sweep.hpp"

using namespace ntod;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("ntod_sweep_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

CleanSplits tiny_splits(int num_classes = 3) {
    CleanSplits d;
    d.scene.image_size = 32;
    d.scene.num_classes = num_classes;
    d.scene.min_objects = 1;
    d.scene.max_objects = 3;
    d.scene.seed = 5;
    d.train = make_benchmark(d.scene, 0, 4);
    d.val = make_benchmark(d.scene, 1000, 2);
    return d;
}

SweepSpec tiny_spec(int num_classes = 3) {
    SweepSpec s;
    s.kinds = {NoiseKind::class_shift, NoiseKind::box};
    s.levels = {0.0, 0.3};
    s.detector.channels = {4, 4, 4, 4};
    s.detector.num_classes = num_classes;
    s.detector.epochs = 1;
    s.detector.warmup_iters = 1;
    return s;
}

size_t line_count(const std::filesystem::path& p) {
    std::ifstream in(p);
    size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

}  // namespace

TEST(SweepCells, LevelZeroIsSharedAcrossKinds) {
    SweepSpec s = tiny_spec();
    s.methods = {{"baseline", false, false, false}, {"clc", true, false, false}};
    s.seeds = {0, 1};
    const auto cells = enumerate_cells(s);
    EXPECT_EQ(cells.size(), 2u * 2u * 3u);
    std::set<std::string> keys;
    for (const auto& c : cells) keys.insert(c.key());
    EXPECT_EQ(keys.size(), cells.size());
    EXPECT_TRUE(keys.count("clean/clc/seed1"));
    EXPECT_TRUE(keys.count("box@0.3000/baseline/seed0"));
}

TEST(SweepSpec, ValidationRejectsBadGrids) {
    SweepSpec s = tiny_spec();
    s.methods = {{"a", false, false, false}, {"a", true, false, false}};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = tiny_spec();
    s.kinds = {NoiseKind::mixed};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = tiny_spec();
    s.levels = {1.5};
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = tiny_spec();
    s.shard_count = 2;
    s.shard_index = 2;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = tiny_spec();
    const SweepSpec back = nlohmann::json(s).get<SweepSpec>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(s));
}

TEST(SweepRun, ResumeSkipsFinishedCells) {
    const auto dir = fresh_dir("resume");
    const CleanSplits data = tiny_splits();
    const SweepSpec spec = tiny_spec();
    const SweepOutcome first = run_sweep(spec, data, dir);
    EXPECT_EQ(first.ran, 3);
    EXPECT_EQ(first.failed, 0);
    EXPECT_EQ(line_count(dir / "results.jsonl"), 3u);
    EXPECT_TRUE(std::filesystem::exists(dir / "results.csv"));

    const SweepOutcome second = run_sweep(spec, data, dir);
    EXPECT_EQ(second.ran, 0);
    EXPECT_EQ(second.skipped, 3);
    EXPECT_EQ(line_count(dir / "results.jsonl"), 3u);
    ASSERT_EQ(second.rows.size(), first.rows.size());
    for (size_t i = 0; i < first.rows.size(); ++i) EXPECT_EQ(second.rows[i].eval.mAP, first.rows[i].eval.mAP);
}

TEST(SweepRun, FailedCellIsRecordedAndRetried) {
    const auto dir = fresh_dir("failed");
    const CleanSplits data = tiny_splits(1);
    SweepSpec spec = tiny_spec(1);
    spec.kinds = {NoiseKind::box};
    spec.methods = {{"baseline", false, false, false}, {"clc", true, false, false}};
    const SweepOutcome out = run_sweep(spec, data, dir);
    EXPECT_EQ(out.ran, 4);
    EXPECT_EQ(out.failed, 2);
    for (const auto& r : out.rows) {
        EXPECT_EQ(r.ok, r.cell.method.name == "baseline") << r.cell.key();
        if (!r.ok) EXPECT_NE(r.error.find("two classes"), std::string::npos);
    }
    const SweepOutcome again = run_sweep(spec, data, dir);
    EXPECT_EQ(again.ran, 2);
    EXPECT_EQ(again.skipped, 2);
}

TEST(SweepRun, ShardsPartitionTheGrid) {
    const auto dir = fresh_dir("shards");
    const CleanSplits data = tiny_splits();
    SweepSpec spec = tiny_spec();
    spec.shard_count = 2;
    spec.shard_index = 0;
    const int a = run_sweep(spec, data, dir).ran;
    spec.shard_index = 1;
    const SweepOutcome b = run_sweep(spec, data, dir);
    EXPECT_EQ(a + b.ran, 3);
    EXPECT_EQ(b.rows.size(), 3u);
}

TEST(SweepRun, CellsAreDeterministic) {
    const CleanSplits data = tiny_splits();
    const SweepSpec spec = tiny_spec();
    const SweepCell cell{NoiseKind::box, 0.3, {}, 4};
    const SweepRow a = run_cell(cell, spec, data);
    const SweepRow b = run_cell(cell, spec, data);
    ASSERT_TRUE(a.ok) << a.error;
    EXPECT_EQ(a.eval.mAP, b.eval.mAP);
    EXPECT_EQ(a.epochs[0].cls_loss, b.epochs[0].cls_loss);
}

TEST(SweepResults, TornLinesAreSkipped) {
    const auto dir = fresh_dir("torn");
    std::filesystem::create_directories(dir);
    SweepRow row;
    row.cell = {NoiseKind::missing, 0.1, {}, 2};
    row.ok = true;
    row.eval.mAP = 0.25;
    {
        std::ofstream out(dir / "results.jsonl");
        out << to_json(row).dump() << "\n" << R"({"cell": {"kind": "box", )" << "\n";
    }
    const auto rows = load_results(dir / "results.jsonl");
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].cell.key(), row.cell.key());
    EXPECT_EQ(rows[0].eval.mAP, 0.25);
    EXPECT_TRUE(load_results(dir / "absent.jsonl").empty());
}
