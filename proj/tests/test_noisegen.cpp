#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "ntod/annotations.hpp"
#include "ntod/noisegen.hpp"
#include "ntod/scene.hpp"

using namespace ntod;

namespace {

// N annotations spread over a grid of 128x128 images, boxes well inside the borders.
DetDataset grid_dataset(int n, int classes, int per_image = 10) {
    DetDataset ds;
    for (int c = 0; c < classes; ++c) ds.categories.push_back({c, "c" + std::to_string(c), c});
    const int images = (n + per_image - 1) / per_image;
    for (int i = 0; i < images; ++i) ds.images.push_back({i, 128, 128, "img" + std::to_string(i)});
    for (int k = 0; k < n; ++k) {
        const int slot = k % per_image;
        ds.annotations.push_back({k, k / per_image,
                                  {24.0 + 8.0 * (slot % 5), 40.0 + 40.0 * (slot / 5), 6.0 + slot % 4, 5.0 + slot % 3},
                                  k % classes});
    }
    return ds;
}

NoiseSpec spec(NoiseKind kind, double level, uint64_t seed = 7) {
    NoiseSpec s;
    s.kind = kind;
    s.level = level;
    s.seed = seed;
    return s;
}

int64_t half_even(double x) {
    // independent round-half-to-even
    const double f = std::floor(x);
    const double diff = x - f;
    if (diff < 0.5) return static_cast<int64_t>(f);
    if (diff > 0.5) return static_cast<int64_t>(f) + 1;
    return static_cast<int64_t>(f) % 2 == 0 ? static_cast<int64_t>(f) : static_cast<int64_t>(f) + 1;
}

double ks_uniform(std::vector<double> v, double lo, double hi) {
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    double d = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        const double f = (v[i] - lo) / (hi - lo);
        d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
    }
    return d;
}

}  // namespace

TEST(NoiseBudget, RoundsHalfToEven) {
    EXPECT_EQ(noise_budget(0.25, 10), 2);
    EXPECT_EQ(noise_budget(0.5, 5), 2);
    EXPECT_EQ(noise_budget(0.5, 7), 4);
    EXPECT_EQ(noise_budget(0.3, 1000), 300);
    for (size_t n : {0u, 1u, 3u, 17u, 250u, 10000u}) {
        for (double a : {0.0, 0.1, 0.2, 0.3, 0.4, 1.0}) EXPECT_EQ(noise_budget(a, n), half_even(a * n)) << a << " " << n;
    }
}

TEST(NoiseSpecValidation, RejectsBrokenSpecs) {
    EXPECT_THROW(spec(NoiseKind::box, 1.5).validate(), std::invalid_argument);
    EXPECT_THROW(spec(NoiseKind::box, -0.1).validate(), std::invalid_argument);
    NoiseSpec mixed = spec(NoiseKind::mixed, 0.0);
    EXPECT_THROW(mixed.validate(), std::invalid_argument);
    mixed.mixed_components = {{NoiseKind::box, 0.1}, {NoiseKind::box, 0.2}};
    EXPECT_THROW(mixed.validate(), std::invalid_argument);
    NoiseSpec stray = spec(NoiseKind::box, 0.1);
    stray.mixed_components = {{NoiseKind::box, 0.1}};
    EXPECT_THROW(stray.validate(), std::invalid_argument);
}

TEST(InjectMissing, RemovesExactBudget) {
    const DetDataset ds = grid_dataset(1000, 4);
    const NoiseResult r = inject_missing(ds, spec(NoiseKind::missing, 0.30));
    EXPECT_EQ(r.dataset.annotations.size(), 700u);
    EXPECT_EQ(r.affected_ids.size(), 300u);
    std::set<int64_t> kept;
    for (const auto& a : r.dataset.annotations) kept.insert(a.id);
    for (int64_t id : r.affected_ids) EXPECT_FALSE(kept.count(id));
}

TEST(InjectMissing, ZeroLevelIsIdentity) {
    const DetDataset ds = grid_dataset(50, 3);
    const NoiseResult r = inject_missing(ds, spec(NoiseKind::missing, 0.0));
    EXPECT_EQ(r.dataset, ds);
    EXPECT_TRUE(r.affected_ids.empty());
}

TEST(InjectMissing, FixedSeedRemovesFrozenIds) {
    DetDataset ds;
    ds.categories = {{0, "a", 0}, {1, "b", 1}};
    ds.images = {{1, 64, 64, "x"}, {2, 64, 64, "y"}};
    for (int k = 0; k < 10; ++k) ds.annotations.push_back({100 + k, 1 + k % 2, {20.0 + k, 20.0, 6, 6}, k % 2});
    for (int run = 0; run < 3; ++run) {
        const NoiseResult r = inject_missing(ds, spec(NoiseKind::missing, 0.25, 7));
        EXPECT_EQ(r.affected_ids, (std::vector<int64_t>{100, 109}));
    }
}

TEST(InjectMissing, FullLevelEmptiesWithWarning) {
    const DetDataset ds = grid_dataset(20, 2);
    const NoiseResult r = inject_missing(ds, spec(NoiseKind::missing, 1.0));
    EXPECT_TRUE(r.dataset.annotations.empty());
    EXPECT_FALSE(r.warnings.empty());
}

TEST(InjectClassShift, ShiftsExactlyBudgetToOtherClasses) {
    const DetDataset ds = grid_dataset(100, 8);
    const NoiseResult r = inject_class_shift(ds, spec(NoiseKind::class_shift, 0.40));
    int shifted = 0;
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& before = ds.annotations[i];
        const auto& after = r.dataset.annotations[i];
        EXPECT_EQ(before.box, after.box);
        if (after.provenance == Provenance::class_shifted) {
            ++shifted;
            EXPECT_NE(after.class_id, before.class_id);
            EXPECT_GE(after.class_id, 0);
            EXPECT_LT(after.class_id, 8);
        } else {
            EXPECT_EQ(after.class_id, before.class_id);
        }
    }
    EXPECT_EQ(shifted, 40);
    EXPECT_EQ(r.affected_ids.size(), 40u);
}

TEST(InjectClassShift, TwoClassesAlwaysFlip) {
    const DetDataset ds = grid_dataset(60, 2);
    const NoiseResult r = inject_class_shift(ds, spec(NoiseKind::class_shift, 0.5));
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        if (r.dataset.annotations[i].provenance == Provenance::class_shifted) {
            EXPECT_EQ(r.dataset.annotations[i].class_id, 1 - ds.annotations[i].class_id);
        }
    }
}

TEST(InjectClassShift, ZeroLevelIsIdentityAndSingleClassIsRejected) {
    const DetDataset ds = grid_dataset(30, 3);
    EXPECT_EQ(inject_class_shift(ds, spec(NoiseKind::class_shift, 0.0)).dataset, ds);
    EXPECT_THROW(inject_class_shift(grid_dataset(30, 1), spec(NoiseKind::class_shift, 0.2)), NoiseError);
}

TEST(InjectClassShift, NewClassIsUniformOverTheOthers) {
    DetDataset ds = grid_dataset(20000, 5);
    for (auto& a : ds.annotations) a.class_id = 0;
    const NoiseResult r = inject_class_shift(ds, spec(NoiseKind::class_shift, 1.0));
    std::vector<int> counts(5, 0);
    for (const auto& a : r.dataset.annotations) ++counts[static_cast<size_t>(a.class_id)];
    EXPECT_EQ(counts[0], 0);
    // chi-square with 3 dof, 0.999 quantile is 16.27
    double chi = 0.0;
    for (int c = 1; c < 5; ++c) chi += std::pow(counts[static_cast<size_t>(c)] - 5000.0, 2) / 5000.0;
    EXPECT_LT(chi, 16.27);
}

TEST(InjectExtra, AppendsBudgetInsideImages) {
    const DetDataset ds = grid_dataset(1000, 4);
    const NoiseResult r = inject_extra(ds, spec(NoiseKind::extra, 0.10));
    EXPECT_EQ(r.dataset.annotations.size(), 1100u);
    std::set<int64_t> ids;
    int extra = 0;
    for (const auto& a : r.dataset.annotations) {
        EXPECT_TRUE(ids.insert(a.id).second) << "duplicate id " << a.id;
        if (a.provenance != Provenance::extra) continue;
        ++extra;
        const ImageInfo* img = r.dataset.find_image(a.image_id);
        ASSERT_NE(img, nullptr);
        EXPECT_GE(a.box.x_min(), 0.0);
        EXPECT_GE(a.box.y_min(), 0.0);
        EXPECT_LE(a.box.x_max(), img->width);
        EXPECT_LE(a.box.y_max(), img->height);
        EXPECT_GE(a.box.w, 2.0);
        EXPECT_LE(a.box.w, 16.0);
        EXPECT_GE(a.box.h, 2.0);
        EXPECT_LE(a.box.h, 16.0);
    }
    EXPECT_EQ(extra, 100);
    EXPECT_NO_THROW(r.dataset.validate());
}

TEST(InjectExtra, ImagesArePickedInProportionToTheirAnnotations) {
    DetDataset ds;
    ds.categories = {{0, "a", 0}};
    ds.images = {{0, 64, 64, "a"}, {1, 64, 64, "b"}, {2, 64, 64, "c"}};
    int64_t id = 0;
    for (int k = 0; k < 100; ++k) ds.annotations.push_back({id++, 0, {32, 32, 4, 4}, 0});
    for (int k = 0; k < 300; ++k) ds.annotations.push_back({id++, 1, {32, 32, 4, 4}, 0});
    const NoiseResult r = inject_extra(ds, spec(NoiseKind::extra, 1.0));
    std::map<int64_t, int> per_image;
    for (const auto& a : r.dataset.annotations) {
        if (a.provenance == Provenance::extra) ++per_image[a.image_id];
    }
    EXPECT_EQ(per_image[2], 0);
    EXPECT_NEAR(per_image[1] / 400.0, 0.75, 0.07);
}

TEST(InjectExtra, LogUniformSides) {
    const DetDataset ds = grid_dataset(20000, 3);
    const NoiseResult r = inject_extra(ds, spec(NoiseKind::extra, 1.0));
    std::vector<double> logs;
    for (const auto& a : r.dataset.annotations) {
        if (a.provenance == Provenance::extra) logs.push_back(std::log(a.box.w));
    }
    EXPECT_LT(ks_uniform(logs, std::log(2.0), std::log(16.0)), 0.015);
}

TEST(InjectExtra, ZeroLevelIsIdentityAndEmptyImageListFails) {
    const DetDataset ds = grid_dataset(40, 2);
    EXPECT_EQ(inject_extra(ds, spec(NoiseKind::extra, 0.0)).dataset, ds);
    DetDataset empty;
    empty.categories = {{0, "a", 0}};
    EXPECT_THROW(inject_extra(empty, spec(NoiseKind::extra, 0.2)), NoiseError);
}

TEST(InjectBoxNoise, PerturbationFormula) {
    const BoundingBox b = apply_perturbation({10, 10, 8, 4}, {0.1, -0.2, 0.3, 0.0});
    EXPECT_NEAR(b.cx, 10.8, 1e-12);
    EXPECT_NEAR(b.cy, 9.2, 1e-12);
    EXPECT_NEAR(b.w, 10.4, 1e-12);
    EXPECT_NEAR(b.h, 4.0, 1e-12);
}

TEST(InjectBoxNoise, EveryBoxPerturbedWithinBounds) {
    const DetDataset ds = grid_dataset(500, 3);
    const double a = 0.3;
    const NoiseResult r = inject_box_noise(ds, spec(NoiseKind::box, a));
    EXPECT_EQ(r.affected_ids.size(), ds.annotations.size());
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& c = ds.annotations[i];
        const auto& n = r.dataset.annotations[i];
        EXPECT_EQ(n.provenance, Provenance::box_perturbed);
        const auto d = draw_perturbation(a, 7, c.image_id, c.id);
        for (double v : {d.dx, d.dy, d.dw, d.dh}) EXPECT_LT(std::abs(v), a);
        // grid boxes never touch a border, so nothing is clamped here
        EXPECT_NEAR(n.box.cx, c.box.cx + d.dx * c.box.w, 1e-9);
        EXPECT_NEAR(n.box.cy, c.box.cy + d.dy * c.box.h, 1e-9);
        EXPECT_NEAR(n.box.w, (1 + d.dw) * c.box.w, 1e-9);
        EXPECT_NEAR(n.box.h, (1 + d.dh) * c.box.h, 1e-9);
        EXPECT_LT(std::abs(n.box.cx - c.box.cx), a * c.box.w);
        EXPECT_GT(n.box.w / c.box.w, 1 - a);
        EXPECT_LT(n.box.w / c.box.w, 1 + a);
    }
}

TEST(InjectBoxNoise, ZeroLevelIsIdentityAndFullLevelRejected) {
    const DetDataset ds = grid_dataset(30, 2);
    EXPECT_EQ(inject_box_noise(ds, spec(NoiseKind::box, 0.0)).dataset, ds);
    EXPECT_THROW(inject_box_noise(ds, spec(NoiseKind::box, 1.0)), std::invalid_argument);
}

TEST(InjectBoxNoise, OffsetsAreUniform) {
    const DetDataset ds = grid_dataset(100000, 2);
    const double a = 0.4;
    std::vector<double> dx, dw;
    for (const auto& ann : ds.annotations) {
        const auto d = draw_perturbation(a, 11, ann.image_id, ann.id);
        dx.push_back(d.dx);
        dw.push_back(d.dw);
    }
    EXPECT_LT(ks_uniform(dx, -a, a), 0.01);
    EXPECT_LT(ks_uniform(dw, -a, a), 0.01);
}

TEST(InjectBoxNoise, ClampsToImage) {
    DetDataset ds;
    ds.categories = {{0, "a", 0}};
    ds.images = {{0, 32, 32, "a"}};
    ds.annotations = {{0, 0, {1.0, 1.0, 2.0, 2.0}, 0}};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const NoiseResult r = inject_box_noise(ds, spec(NoiseKind::box, 0.9, seed));
        const auto& b = r.dataset.annotations[0].box;
        EXPECT_GE(b.x_min(), 0.0);
        EXPECT_GE(b.y_min(), 0.0);
        EXPECT_GE(b.w, 1.0 - 1e-12);
        EXPECT_GE(b.h, 1.0 - 1e-12);
    }
}

TEST(InjectMixed, ClassShiftThenBox) {
    const DetDataset ds = grid_dataset(100, 4);
    NoiseSpec s = spec(NoiseKind::mixed, 0.0);
    s.mixed_components = {{NoiseKind::box, 0.2}, {NoiseKind::class_shift, 0.2}};
    const NoiseResult r = inject_mixed(ds, s);
    int shifted = 0, perturbed = 0;
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& n = r.dataset.annotations[i];
        if (n.class_id != ds.annotations[i].class_id) ++shifted;
        if (!(n.box == ds.annotations[i].box)) ++perturbed;
        if (n.class_id != ds.annotations[i].class_id) {
            EXPECT_EQ(n.provenance, Provenance::both_shifted_and_perturbed);
        } else {
            EXPECT_EQ(n.provenance, Provenance::box_perturbed);
        }
    }
    EXPECT_EQ(shifted, 20);
    EXPECT_EQ(perturbed, 100);
}

TEST(InjectMixed, EmptyComponentsRejected) {
    EXPECT_THROW(inject_mixed(grid_dataset(10, 2), spec(NoiseKind::mixed, 0.0)), std::invalid_argument);
}

TEST(InjectMixed, ShiftNeverTouchesCoordinatesInEitherOrder) {
    const DetDataset ds = grid_dataset(200, 5);
    const auto shift_then_box =
        inject_box_noise(inject_class_shift(ds, spec(NoiseKind::class_shift, 0.3)).dataset, spec(NoiseKind::box, 0.3));
    const auto box_then_shift =
        inject_class_shift(inject_box_noise(ds, spec(NoiseKind::box, 0.3)).dataset, spec(NoiseKind::class_shift, 0.3));
    ASSERT_EQ(shift_then_box.dataset.annotations.size(), box_then_shift.dataset.annotations.size());
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        EXPECT_EQ(shift_then_box.dataset.annotations[i].box, box_then_shift.dataset.annotations[i].box);
        EXPECT_EQ(shift_then_box.dataset.annotations[i].class_id, box_then_shift.dataset.annotations[i].class_id);
    }
}

TEST(NoiseProperties, DeterministicByteIdenticalOutput) {
    const DetDataset ds = grid_dataset(300, 4);
    for (NoiseKind k : {NoiseKind::missing, NoiseKind::extra, NoiseKind::class_shift, NoiseKind::box}) {
        const auto a = serialize_dataset(inject(ds, spec(k, 0.3, 99)).dataset);
        const auto b = serialize_dataset(inject(ds, spec(k, 0.3, 99)).dataset);
        EXPECT_EQ(a, b) << to_string(k);
        const auto c = serialize_dataset(inject(ds, spec(k, 0.3, 100)).dataset);
        EXPECT_NE(a, c) << to_string(k);
    }
}

TEST(NoiseProperties, PermutingInputOrderKeepsAffectedIds) {
    const DetDataset ds = grid_dataset(400, 4);
    DetDataset shuffled = ds;
    std::mt19937_64 rng(1);
    std::shuffle(shuffled.images.begin(), shuffled.images.end(), rng);
    std::shuffle(shuffled.annotations.begin(), shuffled.annotations.end(), rng);
    for (NoiseKind k : {NoiseKind::missing, NoiseKind::class_shift, NoiseKind::box, NoiseKind::extra}) {
        const auto a = inject(ds, spec(k, 0.25));
        const auto b = inject(shuffled, spec(k, 0.25));
        EXPECT_EQ(a.affected_ids, b.affected_ids) << to_string(k);
        std::map<int64_t, Annotation> by_id;
        for (const auto& x : a.dataset.annotations) by_id[x.id] = x;
        for (const auto& y : b.dataset.annotations) EXPECT_EQ(by_id.at(y.id), y) << to_string(k);
    }
}

TEST(NoiseReport, RatesAreCountedExactly) {
    const DetDataset ds = grid_dataset(1000, 4);
    const auto shift = inject(ds, spec(NoiseKind::class_shift, 0.3));
    const NoiseReport rep = noise_report(ds, shift.dataset);
    EXPECT_DOUBLE_EQ(rep.class_shift_rate, 0.3);
    EXPECT_EQ(rep.missing, 0);
    int64_t off_diagonal = 0;
    for (size_t i = 0; i < rep.class_confusion.size(); ++i) {
        for (size_t j = 0; j < rep.class_confusion.size(); ++j) off_diagonal += i == j ? 0 : rep.class_confusion[i][j];
    }
    EXPECT_EQ(off_diagonal, 300);

    const NoiseReport same = noise_report(ds, ds);
    EXPECT_EQ(same.missing_rate, 0.0);
    EXPECT_EQ(same.extra_rate, 0.0);
    EXPECT_EQ(same.class_shift_rate, 0.0);
    EXPECT_EQ(same.box_rate, 0.0);

    const NoiseReport miss = noise_report(ds, inject(ds, spec(NoiseKind::missing, 0.2)).dataset);
    EXPECT_EQ(miss.missing, 200);
    const NoiseReport extra = noise_report(ds, inject(ds, spec(NoiseKind::extra, 0.1)).dataset);
    EXPECT_EQ(extra.extra, 100);
}

TEST(NoiseReport, BoxOffsetsStayBelowLevel) {
    SceneConfig scene;
    scene.seed = 4;
    const DetDataset ds = make_benchmark(scene, 0, 200);
    const NoiseReport rep = noise_report(ds, inject(ds, spec(NoiseKind::box, 0.2)).dataset);
    EXPECT_EQ(rep.box_perturbed, static_cast<int64_t>(ds.annotations.size()));
    EXPECT_LT(rep.dx.max_abs, 0.2);
    EXPECT_LT(rep.dy.max_abs, 0.2);
    const auto j = nlohmann::json::parse(rep.to_json());
    EXPECT_EQ(j.at("counts").at("box"), rep.box_perturbed);
    EXPECT_NE(rep.to_table().find("box"), std::string::npos);
}

TEST(NoiseReport, MismatchedImageSetsFail) {
    DetDataset a = grid_dataset(20, 2);
    DetDataset b = a;
    b.images.pop_back();
    EXPECT_THROW(noise_report(a, b), NoiseError);
}

TEST(NoiseCli, KindNamesRoundTrip) {
    for (NoiseKind k : {NoiseKind::missing, NoiseKind::extra, NoiseKind::class_shift, NoiseKind::box, NoiseKind::mixed}) {
        EXPECT_EQ(noise_kind_from_string(to_string(k)), k);
    }
    EXPECT_THROW(noise_kind_from_string("gaussian"), std::invalid_argument);
}
