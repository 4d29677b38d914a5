#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ntod/assign.hpp"

using namespace ntod;

namespace {

std::vector<LevelGeometry> levels32(std::vector<int> strides = {4}) { return make_levels(strides, 32, 32); }

int at(const Assignment& a, const LevelGeometry& lv, int l, int gy, int gx) {
    return a.gt_of[static_cast<size_t>(l)][static_cast<size_t>(gy * lv.grid_w + gx)];
}

}  // namespace

TEST(MakeLevels, GridCoversImage) {
    const auto lv = make_levels(std::vector<int>{4, 8}, 30, 18);
    EXPECT_EQ(lv[0].grid_w, 8);
    EXPECT_EQ(lv[0].grid_h, 5);
    EXPECT_EQ(lv[1].grid_w, 4);
    EXPECT_DOUBLE_EQ(lv[0].cx(9), 6.0);
    EXPECT_DOUBLE_EQ(lv[0].cy(9), 6.0);
    EXPECT_THROW(make_levels(std::vector<int>{0}, 8, 8), std::invalid_argument);
}

TEST(Assign, SingleCenteredGtOwnsItsNearestLocation) {
    const auto lv = levels32();
    const std::vector<BoundingBox> gts{{14.0, 14.0, 2.0, 2.0}};
    const Assignment a = assign_samples(gts, lv);
    EXPECT_EQ(at(a, lv[0], 0, 3, 3), 0);
    EXPECT_EQ(a.num_positive(), 1);
    EXPECT_EQ(a.positives(0), (std::vector<std::pair<int, int>>{{0, 3 * 8 + 3}}));
}

TEST(Assign, DistantGtsHaveDisjointPositives) {
    const auto lv = levels32();
    const std::vector<BoundingBox> gts{{6.0, 6.0, 8.0, 8.0}, {26.0, 26.0, 8.0, 8.0}};
    const Assignment a = assign_samples(gts, lv);
    const auto p0 = a.positives(0), p1 = a.positives(1);
    EXPECT_FALSE(p0.empty());
    EXPECT_FALSE(p1.empty());
    for (const auto& x : p0) EXPECT_EQ(std::count(p1.begin(), p1.end(), x), 0);
}

TEST(Assign, OverlapGoesToHigherPrior) {
    // sigma = 4 for both. Location (x=14, y=10): prior_A = exp(-16/32) = 0.607,
    // prior_B = exp(-4/32) = 0.882, so B wins; (x=10, y=10) is A's center.
    const auto lv = levels32();
    const std::vector<BoundingBox> gts{{10.0, 10.0, 8.0, 8.0}, {16.0, 10.0, 8.0, 8.0}};
    const Assignment a = assign_samples(gts, lv);
    EXPECT_NEAR(center_prior(gts[0], lv[0], 2 * 8 + 3, {}), std::exp(-0.5), 1e-15);
    EXPECT_NEAR(center_prior(gts[1], lv[0], 2 * 8 + 3, {}), std::exp(-0.125), 1e-15);
    EXPECT_EQ(at(a, lv[0], 0, 2, 3), 1);
    EXPECT_EQ(at(a, lv[0], 0, 2, 2), 0);
    EXPECT_EQ(at(a, lv[0], 0, 1, 3), 1);  // (14, 6): 0.368 vs 0.535
}

TEST(Assign, TieGoesToLowerIndexButBothKeepAPositive) {
    const auto lv = levels32();
    const std::vector<BoundingBox> gts{{12.0, 12.0, 8.0, 8.0}, {12.0, 12.0, 8.0, 8.0}};
    const Assignment a = assign_samples(gts, lv);
    EXPECT_EQ(a.positives(1).size(), 1u);
    EXPECT_GE(a.positives(0).size(), 2u);
}

TEST(Assign, SizePicksTheLevel) {
    const auto lv = levels32({4, 8});
    EXPECT_EQ(level_for_box({10, 10, 6, 6}, lv, {}), 0);
    EXPECT_EQ(level_for_box({10, 10, 16, 16}, lv, {}), 1);
    const std::vector<BoundingBox> gts{{16.0, 16.0, 16.0, 16.0}};
    const Assignment a = assign_samples(gts, lv);
    EXPECT_EQ(a.level_of_gt[0], 1);
    for (int g : a.gt_of[0]) EXPECT_EQ(g, kBackground);
}

TEST(Assign, EveryGtHasAPositiveUnderCrowding) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> pos(0.0, 32.0), sz(1.0, 16.0);
    const auto lv = levels32({4, 8});
    for (int t = 0; t < 300; ++t) {
        std::vector<BoundingBox> gts;
        for (int k = 0; k < 1 + t % 20; ++k) gts.push_back({pos(rng), pos(rng), sz(rng), sz(rng)});
        const Assignment a = assign_samples(gts, lv);
        int total = 0;
        for (size_t g = 0; g < gts.size(); ++g) {
            const auto p = a.positives(static_cast<int>(g));
            EXPECT_FALSE(p.empty()) << "trial " << t << " gt " << g;
            total += static_cast<int>(p.size());
        }
        EXPECT_EQ(total, a.num_positive());
    }
}

TEST(Assign, NoLevelsIsAnError) {
    EXPECT_THROW(assign_samples(std::vector<BoundingBox>{}, std::vector<LevelGeometry>{}), std::invalid_argument);
    const auto lv = levels32();
    EXPECT_EQ(assign_samples(std::vector<BoundingBox>{}, lv).num_positive(), 0);
}
