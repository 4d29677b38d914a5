#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ntod/annotations.hpp"
#include "ntod/assign.hpp"
#include "ntod/clc.hpp"
#include "ntod/losses.hpp"
#include "ntod/nn.hpp"
#include "ntod/scene.hpp"
#include "ntod/tls.hpp"

namespace ntod {

struct DetectorConfig {
    std::vector<int> strides{4, 8};
    std::vector<int> channels{16, 32, 32, 32};  // the four backbone convolutions
    int head_channels = 32;                     // 0: heads are plain 1x1 convolutions
    int num_classes = 6;

    FocalParams focal;
    double cls_weight = 1.0;
    double reg_weight = 1.0;

    int epochs = 12;
    std::string optimizer = "adam";  // "sgd" or "adam"
    double lr = 0.005;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int warmup_iters = 300;
    std::vector<int> lr_steps{8, 11};  // epochs after which lr is multiplied by lr_gamma
    double lr_gamma = 0.1;
    double grad_clip = 10.0;

    AssignerConfig assigner;

    bool clc = false;
    bool tlr = false;
    bool rbr = false;
    int clc_period = 100;
    double clc_warmup = 0.5;
    double tlr_alpha = 0.5;
    bool tlr_rescale = true;  // scale each gt's positive weights to mean 1
    double rbr_w1 = 1.0;
    int rbr_k = 4;
    bool rbr_assign_to_target = false;  // true: labels are assigned against the regenerated boxes

    double score_threshold = 0.05;
    double nms_iou = 0.5;
    int nms_pre = 1000;
    int max_detections = 3000;

    uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

/// Raw head outputs of one level: class logits (C x L) and log-distances (4 x L).
struct LevelOutput {
    nn::Mat cls;
    nn::Mat reg;
};

/// Distances (l, t, r, b) in pixels from a raw regression column.
Ltrb decode_distances(const nn::Mat& reg, int location, int stride);

class Model {
public:
    explicit Model(const DetectorConfig& cfg);

    const DetectorConfig& config() const { return cfg_; }
    std::vector<LevelGeometry> levels(int width, int height) const;

    std::vector<LevelOutput> forward(const GrayImage& image);
    void backward(const std::vector<LevelOutput>& grads);
    std::vector<nn::Param*> params();
    void zero_grad();

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

private:
    DetectorConfig cfg_;
    std::vector<nn::Conv2d> backbone_;
    std::vector<nn::Relu> backbone_relu_;
    std::vector<nn::Conv2d> tower_;
    std::vector<nn::Relu> tower_relu_;
    std::vector<nn::Conv2d> cls_head_;
    std::vector<nn::Conv2d> reg_head_;
};

/// Per-image training targets.
struct ImageTargets {
    std::vector<BoundingBox> boxes;  // regression targets
    std::vector<int> classes;
    Assignment assignment;
};

/// Per-location classification loss weights, [level][location].
using LocationWeights = std::vector<std::vector<double>>;

struct LossValue {
    double cls = 0.0;
    double reg = 0.0;
    double total = 0.0;
    int num_pos = 0;
};

/// Weighted focal + GIoU loss for one image. Weights are constants. When `grads`
/// is non-null it is resized and filled with dL/d(raw outputs).
LossValue detection_loss(const std::vector<LevelOutput>& out, std::span<const LevelGeometry> levels,
                         const ImageTargets& targets, const LocationWeights& weights, const DetectorConfig& cfg,
                         std::vector<LevelOutput>* grads);

struct Detection {
    int64_t image_id = 0;
    BoundingBox box;
    int class_id = 0;
    double score = 0.0;
};

/// Class-wise greedy suppression; a box is dropped when its IoU with a kept box of
/// the same class exceeds `iou_threshold`. Output sorted by score.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, size_t max_keep);

std::vector<Detection> predict(Model& model, const GrayImage& image, int64_t image_id = 0);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double cls_loss = 0.0;
    double reg_loss = 0.0;
    int64_t positives = 0;
    int64_t filtered = 0;  // positives zeroed by label correction
    double mean_pos_weight = 1.0;
    double mean_neg_weight = 1.0;
    double target_iou = -1.0;  // mean IoU(regression target, reference box), -1 without reference
    double seconds = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainOptions {
    SceneConfig scene;                  // used to render generator-keyed images
    std::filesystem::path image_dir;    // base directory for file-backed images
    const DetDataset* reference = nullptr;  // clean annotations for target diagnostics (matched by id)
    std::function<void(const EpochMetrics&)> on_epoch;
    /// Test hook: replaces the candidates used for box regeneration of one gt.
    std::function<std::vector<tls::Candidate>(int64_t image_id, int gt_index, std::vector<tls::Candidate>)>
        candidate_override;
    /// Called once per image and epoch with the final classification weights.
    std::function<void(int64_t image_id, int epoch, const LocationWeights&)> on_weights;
    std::filesystem::path divergence_dump;  // written when the loss becomes non-finite
};

struct TrainResult {
    Model model;
    std::vector<EpochMetrics> epochs;
    clc::ConfidenceMatrix dcm;
    tls::TrendRegistry registry;
    tls::BoxRegenerator regenerator;
};

TrainResult train(const DetDataset& dataset, const DetectorConfig& cfg, const TrainOptions& opts = {});

/// Runs predict() over every image of `dataset`.
std::vector<Detection> predict_dataset(Model& model, const DetDataset& dataset, const SceneConfig& scene,
                                       const std::filesystem::path& image_dir = {});

}  // namespace ntod
