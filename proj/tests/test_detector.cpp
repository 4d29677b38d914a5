#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "ntod/detector.hpp"
#include "ntod/noisegen.hpp"

using namespace ntod;

namespace {

DetectorConfig tiny_config() {
    DetectorConfig cfg;
    cfg.channels = {4, 6, 6, 6};
    cfg.head_channels = 4;
    cfg.epochs = 2;
    cfg.optimizer = "adam";
    cfg.lr = 0.005;
    cfg.warmup_iters = 2;
    cfg.lr_steps = {1};
    return cfg;
}

SceneConfig tiny_scene() {
    SceneConfig sc;
    sc.image_size = 32;
    sc.min_objects = 1;
    sc.max_objects = 3;
    sc.seed = 2;
    return sc;
}

GrayImage random_image(int size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GrayImage img{size, size, std::vector<float>(static_cast<size_t>(size * size))};
    for (auto& p : img.pixels) p = static_cast<float>(u(rng));
    return img;
}

// Reference suppression: repeatedly take the best remaining box, drop same-class
// boxes overlapping it above the threshold.
std::vector<Detection> brute_force_nms(std::vector<Detection> dets, double thr) {
    std::vector<Detection> kept;
    std::vector<bool> gone(dets.size(), false);
    while (true) {
        int best = -1;
        for (size_t i = 0; i < dets.size(); ++i) {
            if (!gone[i] && (best < 0 || dets[i].score > dets[static_cast<size_t>(best)].score)) best = static_cast<int>(i);
        }
        if (best < 0) break;
        const Detection d = dets[static_cast<size_t>(best)];
        kept.push_back(d);
        for (size_t i = 0; i < dets.size(); ++i) {
            if (!gone[i] && dets[i].class_id == d.class_id && iou(dets[i].box, d.box) > thr) gone[i] = true;
        }
        gone[static_cast<size_t>(best)] = true;
    }
    return kept;
}

struct LossFixture {
    Model model;
    GrayImage image;
    std::vector<LevelGeometry> levels;
    ImageTargets targets;
    LocationWeights weights;

    explicit LossFixture(DetectorConfig cfg) : model(cfg), image(random_image(16, 5)), levels(model.levels(16, 16)) {
        targets.boxes = {{5.0, 6.0, 6.0, 5.0}, {11.0, 10.0, 7.0, 8.0}};
        targets.classes = {0, 2};
        targets.assignment = assign_samples(targets.boxes, levels, cfg.assigner);
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (const auto& lv : levels) {
            weights.emplace_back(static_cast<size_t>(lv.size()));
            for (double& w : weights.back()) w = u(rng);
        }
        weights[0][0] = 0.0;
    }

    double loss() {
        const auto out = model.forward(image);
        return detection_loss(out, levels, targets, weights, model.config(), nullptr).total;
    }
};

double rel_error(double a, double b) { return std::abs(a - b) / std::max(1e-7, std::abs(a) + std::abs(b)); }

}  // namespace

TEST(DetectorConfig, JsonRoundTripAndValidation) {
    DetectorConfig cfg = tiny_config();
    cfg.clc = true;
    cfg.rbr_k = 7;
    cfg.focal.alpha = 0.3;
    const DetectorConfig back = nlohmann::json(cfg).get<DetectorConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(cfg));
    EXPECT_EQ(back.rbr_k, 7);

    DetectorConfig bad = tiny_config();
    bad.strides = {8};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.channels = {4, 4};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.rbr_w1 = 0.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.optimizer = "rmsprop";
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(DetectionLoss, GradientWrtHeadOutputsMatchesFiniteDifferences) {
    LossFixture f(tiny_config());
    auto out = f.model.forward(f.image);
    // move log-distances into a range where boxes overlap their targets
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& lv : out) {
        for (Eigen::Index i = 0; i < lv.reg.size(); ++i) lv.reg.data()[i] = 0.2 + 0.5 * u(rng);
        for (Eigen::Index i = 0; i < lv.cls.size(); ++i) lv.cls.data()[i] = 2.0 * u(rng);
    }
    std::vector<LevelOutput> grads;
    const DetectorConfig& cfg = f.model.config();
    detection_loss(out, f.levels, f.targets, f.weights, cfg, &grads);
    const double h = 1e-6;
    double worst = 0.0;
    for (size_t l = 0; l < out.size(); ++l) {
        for (nn::Mat LevelOutput::*m : {&LevelOutput::cls, &LevelOutput::reg}) {
            nn::Mat& x = out[l].*m;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                const double keep = x.data()[i];
                x.data()[i] = keep + h;
                const double up = detection_loss(out, f.levels, f.targets, f.weights, cfg, nullptr).total;
                x.data()[i] = keep - h;
                const double down = detection_loss(out, f.levels, f.targets, f.weights, cfg, nullptr).total;
                x.data()[i] = keep;
                const double fd = (up - down) / (2 * h);
                worst = std::max(worst, rel_error((grads[l].*m).data()[i], fd));
            }
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(DetectionLoss, GradientWrtParametersMatchesFiniteDifferences) {
    LossFixture f(tiny_config());
    // the default head init yields gradients near 1e-9 in early layers, below what
    // central differences resolve, so rescale every parameter
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0.0, 0.3);
    for (nn::Param* p : f.model.params()) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = n(rng);
    }
    f.model.zero_grad();
    const auto out = f.model.forward(f.image);
    std::vector<LevelOutput> grads;
    detection_loss(out, f.levels, f.targets, f.weights, f.model.config(), &grads);
    f.model.backward(grads);

    const double h = 1e-5;
    double worst = 0.0;
    int checked = 0;
    for (nn::Param* p : f.model.params()) {
        const nn::Mat analytic = p->grad;
        // a strided sample keeps the run short while touching every tensor
        for (Eigen::Index i = 0; i < p->value.size(); i += 1 + p->value.size() / 12) {
            const double keep = p->value.data()[i];
            p->value.data()[i] = keep + h;
            const double up = f.loss();
            p->value.data()[i] = keep - h;
            const double down = f.loss();
            p->value.data()[i] = keep;
            const double fd = (up - down) / (2 * h);
            if (std::abs(fd) + std::abs(analytic.data()[i]) < 1e-9) continue;
            worst = std::max(worst, rel_error(analytic.data()[i], fd));
            ++checked;
        }
    }
    EXPECT_GT(checked, 50);
    EXPECT_LT(worst, 1e-4);
}

TEST(DetectionLoss, ZeroWeightsSilenceClassification) {
    LossFixture f(tiny_config());
    for (auto& lv : f.weights) std::fill(lv.begin(), lv.end(), 0.0);
    const auto out = f.model.forward(f.image);
    std::vector<LevelOutput> grads;
    const LossValue v = detection_loss(out, f.levels, f.targets, f.weights, f.model.config(), &grads);
    EXPECT_EQ(v.cls, 0.0);
    EXPECT_GT(v.reg, 0.0);
    for (const auto& g : grads) EXPECT_EQ(g.cls.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(v.num_pos, f.targets.assignment.num_positive());
}

TEST(Nms, IdenticalBoxesKeepOne) {
    const BoundingBox b{10, 10, 4, 4};
    const auto kept = nms({{0, b, 1, 0.9}, {0, b, 1, 0.8}, {0, b, 2, 0.7}}, 0.5, 3000);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept[0].score, 0.9);
    EXPECT_EQ(kept[1].class_id, 2);
}

TEST(Nms, MatchesBruteForceOnRandomBoxes) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> pos(0.0, 30.0), sz(2.0, 12.0), score(0.0, 1.0);
    std::uniform_int_distribution<int> cls(0, 2);
    for (int t = 0; t < 20; ++t) {
        std::vector<Detection> dets;
        for (int i = 0; i < 50; ++i) dets.push_back({0, {pos(rng), pos(rng), sz(rng), sz(rng)}, cls(rng), score(rng)});
        const auto kept = nms(dets, 0.5, 3000);
        const auto ref = brute_force_nms(dets, 0.5);
        ASSERT_EQ(kept.size(), ref.size());
        for (size_t i = 0; i < kept.size(); ++i) {
            EXPECT_EQ(kept[i].box, ref[i].box);
            EXPECT_EQ(kept[i].class_id, ref[i].class_id);
        }
        EXPECT_EQ(nms(dets, 0.5, 5).size(), std::min<size_t>(5, ref.size()));
    }
}

TEST(Predict, BlankImageGivesNoDetections) {
    Model model(tiny_config());
    const GrayImage blank{32, 32, std::vector<float>(32 * 32, 0.4f)};
    EXPECT_TRUE(predict(model, blank, 3).empty());
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    const auto dir = std::filesystem::temp_directory_path() / "ntod_test_ckpt";
    std::filesystem::create_directories(dir);
    DetectorConfig cfg = tiny_config();
    cfg.seed = 31;
    Model model(cfg);
    model.save(dir / "m.bin");
    Model back = Model::load(dir / "m.bin");
    EXPECT_EQ(nlohmann::json(back.config()), nlohmann::json(cfg));
    const GrayImage img = random_image(32, 8);
    const auto a = model.forward(img);
    const auto b = back.forward(img);
    for (size_t l = 0; l < a.size(); ++l) {
        EXPECT_EQ(a[l].cls, b[l].cls);
        EXPECT_EQ(a[l].reg, b[l].reg);
    }
    {
        std::ofstream junk(dir / "junk.bin");
        junk << "not a checkpoint";
    }
    EXPECT_ANY_THROW(Model::load(dir / "junk.bin"));
}

TEST(Train, AllTogglesOffIsBitIdenticalAcrossRuns) {
    const SceneConfig sc = tiny_scene();
    const DetDataset ds = make_benchmark(sc, 0, 6);
    DetectorConfig cfg = tiny_config();
    TrainOptions opts;
    opts.scene = sc;
    std::vector<double> weights_seen;
    opts.on_weights = [&](int64_t, int, const LocationWeights& w) {
        for (const auto& lv : w) weights_seen.insert(weights_seen.end(), lv.begin(), lv.end());
    };
    const TrainResult a = train(ds, cfg, opts);
    for (double w : weights_seen) ASSERT_EQ(w, 1.0);
    const TrainResult b = train(ds, cfg, opts);

    auto pa = const_cast<Model&>(a.model).params();
    auto pb = const_cast<Model&>(b.model).params();
    ASSERT_EQ(pa.size(), pb.size());
    for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    ASSERT_EQ(a.epochs.size(), 2u);
    EXPECT_EQ(a.epochs[1].cls_loss, b.epochs[1].cls_loss);
    EXPECT_EQ(a.epochs[0].filtered, 0);
}

TEST(Train, EnabledMechanismsKeepWeightsBoundedAndFinite) {
    const SceneConfig sc = tiny_scene();
    const DetDataset clean = make_benchmark(sc, 0, 6);
    NoiseSpec ns;
    ns.kind = NoiseKind::box;
    ns.level = 0.4;
    const DetDataset noisy = inject(clean, ns).dataset;
    DetectorConfig cfg = tiny_config();
    cfg.epochs = 4;
    cfg.clc = cfg.tlr = cfg.rbr = true;
    cfg.tlr_rescale = false;
    TrainOptions opts;
    opts.scene = sc;
    opts.reference = &clean;
    bool below_one = false;
    opts.on_weights = [&](int64_t, int, const LocationWeights& w) {
        for (const auto& lv : w) {
            for (double x : lv) {
                ASSERT_TRUE(std::isfinite(x));
                ASSERT_GE(x, 0.0);
                ASSERT_LE(x, 1.0);
                below_one |= x < 1.0;
            }
        }
    };
    const TrainResult r = train(noisy, cfg, opts);
    EXPECT_TRUE(below_one);
    for (const auto& m : r.epochs) {
        EXPECT_TRUE(std::isfinite(m.cls_loss));
        EXPECT_GE(m.target_iou, 0.0);
        EXPECT_LE(m.target_iou, 1.0);
    }
}

// With rbr on, the groups only average 1 if labels are assigned against the annotated boxes.
TEST(Train, RescaledPositiveWeightsAverageOnePerAnnotatedGt) {
    const SceneConfig sc = tiny_scene();
    const DetDataset clean = make_benchmark(sc, 0, 4);
    NoiseSpec ns;
    ns.kind = NoiseKind::box;
    ns.level = 0.3;
    const DetDataset noisy = inject(clean, ns).dataset;
    DetectorConfig cfg = tiny_config();
    cfg.epochs = 3;
    cfg.tlr = true;
    cfg.rbr = true;
    const Model probe(cfg);
    TrainOptions opts;
    opts.scene = sc;
    int groups = 0;
    bool uneven = false;
    opts.on_weights = [&](int64_t image_id, int, const LocationWeights& w) {
        std::vector<BoundingBox> boxes;
        for (const auto& a : noisy.annotations) {
            if (a.image_id == image_id) boxes.push_back(a.box);
        }
        const auto levels = probe.levels(sc.image_size, sc.image_size);
        const Assignment as = assign_samples(boxes, levels, cfg.assigner);
        std::map<int, std::vector<double>> by_gt;
        for (size_t l = 0; l < levels.size(); ++l) {
            for (size_t loc = 0; loc < w[l].size(); ++loc) {
                if (as.gt_of[l][loc] >= 0) by_gt[as.gt_of[l][loc]].push_back(w[l][loc]);
            }
        }
        for (const auto& [gt, ws] : by_gt) {
            double sum = 0.0;
            for (double x : ws) sum += x;
            EXPECT_NEAR(sum / static_cast<double>(ws.size()), 1.0, 1e-9);
            uneven |= ws.size() > 1 && *std::max_element(ws.begin(), ws.end()) > 1.0 + 1e-9;
            ++groups;
        }
    };
    train(noisy, cfg, opts);
    EXPECT_GT(groups, 0);
    EXPECT_TRUE(uneven);
}

TEST(Train, PinnedCandidatesDriveTargetsToTheFixedPoint) {
    // With every candidate pinned to the clean box at score s, each refresh follows
    // theta_n = (w1 g + w2 theta_{n-1} + s B) / (w1 + w2 + s), w2 = 0 at the first
    // refresh and s afterwards.
    const SceneConfig sc = tiny_scene();
    const DetDataset clean = make_benchmark(sc, 0, 3);
    NoiseSpec ns;
    ns.kind = NoiseKind::box;
    ns.level = 0.4;
    ns.seed = 3;
    const DetDataset noisy = inject(clean, ns).dataset;

    DetectorConfig cfg = tiny_config();
    cfg.rbr = true;
    cfg.epochs = 6;
    const double s = 0.6;
    std::map<int64_t, const Annotation*> clean_by_id;
    for (const auto& a : clean.annotations) clean_by_id[a.id] = &a;
    std::map<int64_t, std::vector<const Annotation*>> noisy_by_image;
    for (const auto& a : noisy.annotations) noisy_by_image[a.image_id].push_back(&a);

    TrainOptions opts;
    opts.scene = sc;
    opts.candidate_override = [&](int64_t image_id, int gt, std::vector<tls::Candidate> c) {
        const BoundingBox target = clean_by_id.at(noisy_by_image.at(image_id)[static_cast<size_t>(gt)]->id)->box;
        for (auto& x : c) {
            x.box = target;
            x.score = s;
        }
        return c;
    };
    double last_mean_iou = -1.0;
    opts.reference = &clean;
    opts.on_epoch = [&](const EpochMetrics& m) {
        EXPECT_GE(m.target_iou, last_mean_iou - 1e-12);
        last_mean_iou = m.target_iou;
    };
    const TrainResult r = train(noisy, cfg, opts);

    for (const auto& [image_id, anns] : noisy_by_image) {
        const auto& targets = r.regenerator.targets(image_id);
        for (size_t g = 0; g < anns.size(); ++g) {
            const BoundingBox gt = anns[g]->box;
            const BoundingBox b = clean_by_id.at(anns[g]->id)->box;
            double theta = gt.cx;
            for (int n = 1; n <= cfg.epochs; ++n) {
                const double w2 = n == 1 ? 0.0 : s;
                theta = (cfg.rbr_w1 * gt.cx + w2 * theta + s * b.cx) / (cfg.rbr_w1 + w2 + s);
            }
            EXPECT_NEAR(targets[g].box.cx, theta, 1e-9);
        }
    }
}
