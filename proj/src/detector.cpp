#include "ntod/detector.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"
#include "ntod/noisegen.hpp"

namespace ntod {

using nlohmann::json;

namespace {

constexpr double kMaxLogDistance = 6.0;
constexpr size_t kFirstLevelConv = 2;  // backbone conv producing the stride-4 level
constexpr uint64_t kTagInit = 0x696e6974;
constexpr uint64_t kTagShuffle = 0x73687566;
constexpr char kCheckpointMagic[8] = {'N', 'T', 'O', 'D', 'C', 'K', 'P', '1'};

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

nn::FeatureMap to_input(const GrayImage& image) {
    nn::FeatureMap x = nn::FeatureMap::zeros(1, image.height, image.width);
    for (size_t i = 0; i < image.pixels.size(); ++i) {
        x.data(0, static_cast<Eigen::Index>(i)) = (static_cast<double>(image.pixels[i]) - 0.5) / 0.25;
    }
    return x;
}

}  // namespace

void DetectorConfig::validate() const {
    if (strides.empty()) throw std::invalid_argument("at least one feature level is required");
    if (channels.size() != 4) throw std::invalid_argument("the backbone has exactly four convolutions");
    if (strides.size() > 2) throw std::invalid_argument("the backbone exposes at most two feature levels");
    if (strides[0] != 4 || (strides.size() == 2 && strides[1] != 8)) {
        throw std::invalid_argument("feature strides must be {4} or {4, 8}");
    }
    if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
    if (epochs < 1) throw std::invalid_argument("epochs must be positive");
    if (optimizer != "sgd" && optimizer != "adam") throw std::invalid_argument("optimizer must be sgd or adam");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (clc_period < 1) throw std::invalid_argument("clc_period must be >= 1");
    if (!(tlr_alpha >= 0.0 && tlr_alpha <= 1.0)) throw std::invalid_argument("tlr_alpha must lie in [0, 1]");
    if (!(rbr_w1 > 0.0)) throw std::invalid_argument("rbr_w1 must be positive");
    if (rbr_k < 1) throw std::invalid_argument("rbr_k must be positive");
    if (clc && num_classes < 2) throw std::invalid_argument("label correction needs at least two classes");
}

void to_json(json& j, const DetectorConfig& c) {
    j = json{{"strides", c.strides},
             {"channels", c.channels},
             {"head_channels", c.head_channels},
             {"num_classes", c.num_classes},
             {"focal_gamma", c.focal.gamma},
             {"focal_alpha", c.focal.alpha},
             {"cls_weight", c.cls_weight},
             {"reg_weight", c.reg_weight},
             {"epochs", c.epochs},
             {"optimizer", c.optimizer},
             {"lr", c.lr},
             {"momentum", c.momentum},
             {"weight_decay", c.weight_decay},
             {"warmup_iters", c.warmup_iters},
             {"lr_steps", c.lr_steps},
             {"lr_gamma", c.lr_gamma},
             {"grad_clip", c.grad_clip},
             {"assign_sigma_scale", c.assigner.sigma_scale},
             {"assign_prior_threshold", c.assigner.prior_threshold},
             {"assign_scale_per_stride", c.assigner.scale_per_stride},
             {"clc", c.clc},
             {"tlr", c.tlr},
             {"rbr", c.rbr},
             {"clc_period", c.clc_period},
             {"clc_warmup", c.clc_warmup},
             {"alpha", c.tlr_alpha},
             {"tlr_rescale", c.tlr_rescale},
             {"k", c.rbr_k},
             {"w1", c.rbr_w1},
             {"rbr_assign_to_target", c.rbr_assign_to_target},
             {"score_threshold", c.score_threshold},
             {"nms_iou", c.nms_iou},
             {"nms_pre", c.nms_pre},
             {"max_detections", c.max_detections},
             {"seed", c.seed}};
}

void from_json(const json& j, DetectorConfig& c) {
    const DetectorConfig d;
    c.strides = j.value("strides", d.strides);
    c.channels = j.value("channels", d.channels);
    c.head_channels = j.value("head_channels", d.head_channels);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.focal.gamma = j.value("focal_gamma", d.focal.gamma);
    c.focal.alpha = j.value("focal_alpha", d.focal.alpha);
    c.cls_weight = j.value("cls_weight", d.cls_weight);
    c.reg_weight = j.value("reg_weight", d.reg_weight);
    c.epochs = j.value("epochs", d.epochs);
    c.optimizer = j.value("optimizer", d.optimizer);
    c.lr = j.value("lr", d.lr);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
    c.lr_steps = j.value("lr_steps", d.lr_steps);
    c.lr_gamma = j.value("lr_gamma", d.lr_gamma);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.assigner.sigma_scale = j.value("assign_sigma_scale", d.assigner.sigma_scale);
    c.assigner.prior_threshold = j.value("assign_prior_threshold", d.assigner.prior_threshold);
    c.assigner.scale_per_stride = j.value("assign_scale_per_stride", d.assigner.scale_per_stride);
    c.clc = j.value("clc", d.clc);
    c.tlr = j.value("tlr", d.tlr);
    c.rbr = j.value("rbr", d.rbr);
    c.clc_period = j.value("clc_period", d.clc_period);
    c.clc_warmup = j.value("clc_warmup", d.clc_warmup);
    c.tlr_alpha = j.value("alpha", d.tlr_alpha);
    c.tlr_rescale = j.value("tlr_rescale", d.tlr_rescale);
    c.rbr_k = j.value("k", d.rbr_k);
    c.rbr_w1 = j.value("w1", d.rbr_w1);
    c.rbr_assign_to_target = j.value("rbr_assign_to_target", d.rbr_assign_to_target);
    c.score_threshold = j.value("score_threshold", d.score_threshold);
    c.nms_iou = j.value("nms_iou", d.nms_iou);
    c.nms_pre = j.value("nms_pre", d.nms_pre);
    c.max_detections = j.value("max_detections", d.max_detections);
    c.seed = j.value("seed", d.seed);
}

Ltrb decode_distances(const nn::Mat& reg, int location, int stride) {
    auto dist = [&](int row) {
        const double raw = std::clamp(reg(row, location), -kMaxLogDistance, kMaxLogDistance);
        return stride * std::exp(raw);
    };
    return {dist(0), dist(1), dist(2), dist(3)};
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const DetectorConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto& ch = cfg_.channels;
    backbone_.emplace_back("backbone.0", 1, ch[0], 3, 2);
    backbone_.emplace_back("backbone.1", ch[0], ch[1], 3, 2);
    backbone_.emplace_back("backbone.2", ch[1], ch[2], 3, 1);
    backbone_.emplace_back("backbone.3", ch[2], ch[3], 3, 2);
    backbone_relu_.resize(backbone_.size());

    const std::vector<int> level_channels{ch[2], ch[3]};
    for (size_t l = 0; l < cfg_.strides.size(); ++l) {
        int in = level_channels[l];
        const std::string prefix = "head" + std::to_string(l);
        if (cfg_.head_channels > 0) {
            tower_.emplace_back(prefix + ".tower", in, cfg_.head_channels, 3, 1);
            in = cfg_.head_channels;
        }
        cls_head_.emplace_back(prefix + ".cls", in, cfg_.num_classes, 1, 1);
        reg_head_.emplace_back(prefix + ".reg", in, 4, 1, 1);
    }
    tower_relu_.resize(tower_.size());

    std::mt19937_64 rng(stream_key(cfg_.seed, kTagInit, 0));
    for (auto& c : backbone_) c.init_he(rng);
    for (auto& c : tower_) c.init_he(rng);
    const double prior_bias = -std::log((1.0 - 0.01) / 0.01);
    for (auto& c : cls_head_) {
        std::normal_distribution<double> small(0.0, 0.01);
        for (Eigen::Index i = 0; i < c.weight().value.size(); ++i) c.weight().value.data()[i] = small(rng);
        c.bias().value.setConstant(prior_bias);
    }
    for (auto& c : reg_head_) {
        std::normal_distribution<double> small(0.0, 0.01);
        for (Eigen::Index i = 0; i < c.weight().value.size(); ++i) c.weight().value.data()[i] = small(rng);
        c.bias().value.setZero();
    }
}

std::vector<LevelGeometry> Model::levels(int width, int height) const {
    return make_levels(cfg_.strides, width, height);
}

std::vector<LevelOutput> Model::forward(const GrayImage& image) {
    nn::FeatureMap x = to_input(image);
    std::vector<nn::FeatureMap> feats;
    for (size_t i = 0; i < backbone_.size(); ++i) {
        x = backbone_[i].forward(x);
        backbone_relu_[i].forward(x);
        if (i >= kFirstLevelConv) feats.push_back(x);
        if (i == kFirstLevelConv && cfg_.strides.size() == 1) break;
    }
    std::vector<LevelOutput> out(cfg_.strides.size());
    for (size_t l = 0; l < out.size(); ++l) {
        nn::FeatureMap f = feats[l];
        if (!tower_.empty()) {
            f = tower_[l].forward(f);
            tower_relu_[l].forward(f);
        }
        out[l].cls = cls_head_[l].forward(f).data;
        out[l].reg = reg_head_[l].forward(f).data;
    }
    return out;
}

void Model::backward(const std::vector<LevelOutput>& grads) {
    std::vector<nn::FeatureMap> level_grads;
    for (size_t l = 0; l < grads.size(); ++l) {
        nn::FeatureMap gc{cfg_.num_classes, 0, 0, grads[l].cls};
        nn::FeatureMap gr{4, 0, 0, grads[l].reg};
        nn::FeatureMap g = cls_head_[l].backward(gc);
        g.data += reg_head_[l].backward(gr).data;
        if (!tower_.empty()) {
            tower_relu_[l].backward(g);
            g = tower_[l].backward(g);
        }
        level_grads.push_back(std::move(g));
    }
    nn::FeatureMap g = level_grads[0];
    if (level_grads.size() == 2) {
        nn::FeatureMap g3 = level_grads[1];
        backbone_relu_[3].backward(g3);
        g.data += backbone_[3].backward(g3).data;
    }
    for (int i = 2; i >= 0; --i) {
        backbone_relu_[static_cast<size_t>(i)].backward(g);
        g = backbone_[static_cast<size_t>(i)].backward(g);
    }
}

std::vector<nn::Param*> Model::params() {
    std::vector<nn::Param*> p;
    auto add = [&](nn::Conv2d& c) {
        p.push_back(&c.weight());
        p.push_back(&c.bias());
    };
    for (auto& c : backbone_) add(c);
    for (auto& c : tower_) add(c);
    for (auto& c : cls_head_) add(c);
    for (auto& c : reg_head_) add(c);
    return p;
}

void Model::zero_grad() {
    for (auto* p : params()) p->grad.setZero();
}

void Model::save(const std::filesystem::path& path) const {
    auto& self = const_cast<Model&>(*this);
    json header;
    header["config"] = cfg_;
    header["params"] = json::array();
    for (auto* p : self.params()) {
        header["params"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto* p : self.params()) {
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(p->value.size())));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw std::runtime_error(path.string() + " is not a checkpoint");
    }
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const json header = json::parse(text);
    Model model(header.at("config").get<DetectorConfig>());
    auto params = model.params();
    const auto& described = header.at("params");
    if (described.size() != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (described[i].at("rows").get<Eigen::Index>() != params[i]->value.rows() ||
            described[i].at("cols").get<Eigen::Index>() != params[i]->value.cols()) {
            throw std::runtime_error("checkpoint shape mismatch for " + params[i]->name);
        }
        in.read(reinterpret_cast<char*>(params[i]->value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(params[i]->value.size())));
    }
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    return model;
}

// ---------------------------------------------------------------------------
// Loss

LossValue detection_loss(const std::vector<LevelOutput>& out, std::span<const LevelGeometry> levels,
                         const ImageTargets& targets, const LocationWeights& weights, const DetectorConfig& cfg,
                         std::vector<LevelOutput>* grads) {
    LossValue v;
    v.num_pos = targets.assignment.num_positive();
    const double norm = std::max(1, v.num_pos);
    if (grads) {
        grads->resize(out.size());
        for (size_t l = 0; l < out.size(); ++l) {
            (*grads)[l].cls = nn::Mat::Zero(out[l].cls.rows(), out[l].cls.cols());
            (*grads)[l].reg = nn::Mat::Zero(out[l].reg.rows(), out[l].reg.cols());
        }
    }
    const int C = static_cast<int>(out.empty() ? 0 : out[0].cls.rows());
    for (size_t l = 0; l < out.size(); ++l) {
        const auto& gt_of = targets.assignment.gt_of[l];
        const LevelGeometry& lv = levels[l];
        for (int loc = 0; loc < lv.size(); ++loc) {
            const int gt = gt_of[static_cast<size_t>(loc)];
            const double w = weights[l][static_cast<size_t>(loc)];
            const int cls = gt >= 0 ? targets.classes[static_cast<size_t>(gt)] : -1;
            if (w != 0.0) {
                for (int c = 0; c < C; ++c) {
                    double g = 0.0;
                    const double fl = focal_loss(out[l].cls(c, loc), c == cls, cfg.focal, grads ? &g : nullptr);
                    v.cls += w * fl / norm;
                    if (grads) (*grads)[l].cls(c, loc) = cfg.cls_weight * w * g / norm;
                }
            }
            if (gt < 0) continue;
            const Ltrb d = decode_distances(out[l].reg, loc, lv.stride);
            Ltrb g;
            v.reg += giou_loss(lv.cx(loc), lv.cy(loc), d, targets.boxes[static_cast<size_t>(gt)], grads ? &g : nullptr) /
                     norm;
            if (grads) {
                const double dist[4] = {d.l, d.t, d.r, d.b};
                const double dg[4] = {g.l, g.t, g.r, g.b};
                for (int k = 0; k < 4; ++k) {
                    const double raw = out[l].reg(k, loc);
                    const bool active = raw > -kMaxLogDistance && raw < kMaxLogDistance;
                    (*grads)[l].reg(k, loc) = active ? cfg.reg_weight * dg[k] * dist[k] / norm : 0.0;
                }
            }
        }
    }
    v.total = cfg.cls_weight * v.cls + cfg.reg_weight * v.reg;
    return v;
}

// ---------------------------------------------------------------------------
// Inference

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, size_t max_keep) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    std::map<int, std::vector<size_t>> kept_by_class;
    for (const auto& d : dets) {
        if (kept.size() >= max_keep) break;
        auto& same = kept_by_class[d.class_id];
        const bool suppressed = std::any_of(same.begin(), same.end(),
                                            [&](size_t k) { return iou(kept[k].box, d.box) > iou_threshold; });
        if (suppressed) continue;
        same.push_back(kept.size());
        kept.push_back(d);
    }
    return kept;
}

std::vector<Detection> predict(Model& model, const GrayImage& image, int64_t image_id) {
    const DetectorConfig& cfg = model.config();
    const auto out = model.forward(image);
    const auto levels = model.levels(image.width, image.height);
    std::vector<Detection> candidates;
    for (size_t l = 0; l < out.size(); ++l) {
        const LevelGeometry& lv = levels[l];
        // keep the nms_pre locations with the highest max-class score
        std::vector<std::pair<double, int>> best;
        for (int loc = 0; loc < lv.size(); ++loc) {
            best.emplace_back(out[l].cls.col(loc).maxCoeff(), loc);
        }
        const size_t pre = std::min(best.size(), static_cast<size_t>(std::max(cfg.nms_pre, 0)));
        std::partial_sort(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(pre), best.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        for (size_t k = 0; k < pre; ++k) {
            const int loc = best[k].second;
            const BoundingBox box = decode_ltrb(lv.cx(loc), lv.cy(loc), decode_distances(out[l].reg, loc, lv.stride));
            for (int c = 0; c < cfg.num_classes; ++c) {
                const double s = sigmoid(out[l].cls(c, loc));
                if (s > cfg.score_threshold) candidates.push_back({image_id, box, c, s});
            }
        }
    }
    return nms(std::move(candidates), cfg.nms_iou, static_cast<size_t>(std::max(cfg.max_detections, 0)));
}

std::vector<Detection> predict_dataset(Model& model, const DetDataset& dataset, const SceneConfig& scene,
                                       const std::filesystem::path& image_dir) {
    std::vector<Detection> all;
    for (const auto& img : dataset.images) {
        const GrayImage pixels = load_image(img, scene, image_dir);
        auto dets = predict(model, pixels, img.id);
        all.insert(all.end(), dets.begin(), dets.end());
    }
    return all;
}

// ---------------------------------------------------------------------------
// Training

json to_json(const EpochMetrics& m) {
    return json{{"epoch", m.epoch},
                {"lr", m.lr},
                {"cls_loss", m.cls_loss},
                {"reg_loss", m.reg_loss},
                {"positives", m.positives},
                {"filtered", m.filtered},
                {"mean_pos_weight", m.mean_pos_weight},
                {"mean_neg_weight", m.mean_neg_weight},
                {"target_iou", m.target_iou},
                {"seconds", m.seconds}};
}

namespace {

class Optimizer {
public:
    Optimizer(const DetectorConfig& cfg, std::vector<nn::Param*> params) : cfg_(cfg), params_(std::move(params)) {
        for (auto* p : params_) {
            m_.push_back(nn::Mat::Zero(p->value.rows(), p->value.cols()));
            if (cfg_.optimizer == "adam") v_.push_back(nn::Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void step(double lr) {
        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto* p : params_) sq += p->grad.squaredNorm();
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) {
                for (auto* p : params_) p->grad *= cfg_.grad_clip / norm;
            }
        }
        ++t_;
        for (size_t i = 0; i < params_.size(); ++i) {
            nn::Param& p = *params_[i];
            nn::Mat g = p.grad + cfg_.weight_decay * p.value;
            if (cfg_.optimizer == "adam") {
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                m_[i] = b1 * m_[i] + (1.0 - b1) * g;
                v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
            } else {
                m_[i] = cfg_.momentum * m_[i] + g;
                p.value -= lr * m_[i];
            }
        }
    }

private:
    const DetectorConfig& cfg_;
    std::vector<nn::Param*> params_;
    std::vector<nn::Mat> m_;
    std::vector<nn::Mat> v_;
    int64_t t_ = 0;
};

double learning_rate(const DetectorConfig& cfg, int epoch, int64_t iter) {
    double lr = cfg.lr;
    for (int s : cfg.lr_steps) {
        if (epoch >= s) lr *= cfg.lr_gamma;
    }
    if (iter < cfg.warmup_iters) {
        const double ratio = 0.1 + 0.9 * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
        lr *= ratio;
    }
    return lr;
}

struct PendingCandidates {
    std::map<int, std::vector<tls::Candidate>> per_gt;
};

void dump_divergence(const std::filesystem::path& path, int64_t image_id, const LocationWeights& w,
                     const LossValue& loss) {
    if (path.empty()) return;
    json j;
    j["image_id"] = image_id;
    j["cls_loss"] = std::isfinite(loss.cls) ? json(loss.cls) : json("non-finite");
    j["reg_loss"] = std::isfinite(loss.reg) ? json(loss.reg) : json("non-finite");
    j["weights"] = w;
    std::ofstream(path) << j.dump();
}

}  // namespace

TrainResult train(const DetDataset& dataset, const DetectorConfig& cfg, const TrainOptions& opts) {
    cfg.validate();
    dataset.validate();
    if (dataset.num_classes() != cfg.num_classes) {
        throw std::invalid_argument("dataset has " + std::to_string(dataset.num_classes()) +
                                    " classes, detector expects " + std::to_string(cfg.num_classes));
    }
    TrainResult result{Model(cfg), {}, clc::ConfidenceMatrix(std::max(cfg.num_classes, 1), cfg.clc_period), {},
                       tls::BoxRegenerator(cfg.rbr_w1, static_cast<size_t>(cfg.rbr_k))};
    if (cfg.num_classes >= 2) result.dcm = clc::init_dcm(cfg.num_classes, cfg.clc_period);
    Model& model = result.model;
    Optimizer optimizer(cfg, model.params());

    // per-image data
    std::unordered_map<int64_t, std::vector<const Annotation*>> anns_by_image;
    for (const auto& a : dataset.annotations) anns_by_image[a.image_id].push_back(&a);
    std::unordered_map<int64_t, const Annotation*> reference_by_id;
    if (opts.reference) {
        for (const auto& a : opts.reference->annotations) reference_by_id[a.id] = &a;
    }
    std::vector<GrayImage> pixels;
    pixels.reserve(dataset.images.size());
    for (const auto& img : dataset.images) pixels.push_back(load_image(img, opts.scene, opts.image_dir));

    const int64_t total_iters = static_cast<int64_t>(dataset.images.size()) * cfg.epochs;
    int64_t iter = 0;
    std::vector<size_t> order(dataset.images.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        result.registry.set_epoch(epoch);
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 shuffle_rng(stream_key(cfg.seed, kTagShuffle, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochMetrics m;
        m.epoch = epoch + 1;
        double pos_weight_sum = 0.0, neg_weight_sum = 0.0;
        int64_t neg_count = 0;
        std::map<int64_t, PendingCandidates> pending;

        for (size_t oi : order) {
            const ImageInfo& info = dataset.images[oi];
            const GrayImage& image = pixels[oi];
            const auto levels = model.levels(image.width, image.height);
            const auto& anns = anns_by_image[info.id];

            std::vector<BoundingBox> gt_boxes;
            ImageTargets targets;
            for (const auto* a : anns) {
                gt_boxes.push_back(a->box);
                targets.classes.push_back(a->class_id);
            }
            if (cfg.rbr) {
                result.regenerator.init_image(info.id, gt_boxes);
                for (const auto& t : result.regenerator.targets(info.id)) targets.boxes.push_back(t.box);
            } else {
                targets.boxes = gt_boxes;
            }
            targets.assignment = assign_samples(cfg.rbr_assign_to_target ? targets.boxes : gt_boxes, levels, cfg.assigner);

            model.zero_grad();
            const auto out = model.forward(image);
            const double lr = learning_rate(cfg, epoch, iter);
            m.lr = lr;

            // scores per location: assigned-class score for positives, max foreground otherwise
            LocationWeights weights(levels.size());
            std::vector<tls::SampleScore> scores;
            std::vector<clc::SampleObservation> observations;
            std::vector<std::pair<int, int>> observation_loc;
            std::map<int, std::vector<std::pair<int, int>>> pos_by_gt;
            for (size_t l = 0; l < levels.size(); ++l) {
                weights[l].assign(static_cast<size_t>(levels[l].size()), 1.0);
                for (int loc = 0; loc < levels[l].size(); ++loc) {
                    const int gt = targets.assignment.gt_of[l][static_cast<size_t>(loc)];
                    const tls::SampleKey key{static_cast<int>(l), loc / levels[l].grid_w, loc % levels[l].grid_w};
                    double s;
                    if (gt >= 0) {
                        s = sigmoid(out[l].cls(targets.classes[static_cast<size_t>(gt)], loc));
                        pos_by_gt[gt].emplace_back(static_cast<int>(l), loc);
                        if (cfg.clc) {
                            clc::SampleObservation obs;
                            obs.gt_class = targets.classes[static_cast<size_t>(gt)];
                            obs.prediction.resize(static_cast<size_t>(cfg.num_classes));
                            for (int c = 0; c < cfg.num_classes; ++c) {
                                obs.prediction[static_cast<size_t>(c)] = sigmoid(out[l].cls(c, loc));
                            }
                            observations.push_back(std::move(obs));
                            observation_loc.emplace_back(static_cast<int>(l), loc);
                        }
                    } else {
                        s = sigmoid(out[l].cls.col(loc).maxCoeff());
                        if (cfg.tlr) {
                            const auto* rec = result.registry.find(info.id, key);
                            if (rec && rec->assigned_gt == tls::kNoGt) {
                                auto prev = rec->score_history.find(epoch - 1);
                                if (prev != rec->score_history.end()) {
                                    weights[l][static_cast<size_t>(loc)] = tls::negative_weight(prev->second, s);
                                }
                            }
                        }
                        neg_weight_sum += weights[l][static_cast<size_t>(loc)];
                        ++neg_count;
                    }
                    scores.push_back({key, gt >= 0 ? gt : tls::kNoGt, s});
                }
            }

            if (cfg.tlr) {
                for (const auto& [gt, locs] : pos_by_gt) {
                    std::vector<std::optional<double>> prev;
                    std::vector<double> cur;
                    for (const auto& [l, loc] : locs) {
                        const tls::SampleKey key{l, loc / levels[static_cast<size_t>(l)].grid_w,
                                                 loc % levels[static_cast<size_t>(l)].grid_w};
                        const auto* rec = result.registry.find(info.id, key);
                        std::optional<double> p;
                        if (rec && rec->assigned_gt == gt) {
                            auto it = rec->score_history.find(epoch - 1);
                            if (it != rec->score_history.end()) p = it->second;
                        }
                        prev.push_back(p);
                        cur.push_back(sigmoid(out[static_cast<size_t>(l)].cls(targets.classes[static_cast<size_t>(gt)], loc)));
                    }
                    auto w = tls::positive_weights_for_gt(prev, cur, cfg.tlr_alpha);
                    if (cfg.tlr_rescale) {
                        const double total = std::accumulate(w.begin(), w.end(), 0.0);
                        if (total > 0.0) {
                            for (double& x : w) x *= static_cast<double>(w.size()) / total;
                        }
                    }
                    for (size_t j = 0; j < locs.size(); ++j) {
                        weights[static_cast<size_t>(locs[j].first)][static_cast<size_t>(locs[j].second)] = w[j];
                    }
                }
            }

            if (cfg.clc) {
                const double progress = static_cast<double>(iter) / static_cast<double>(std::max<int64_t>(total_iters, 1));
                const auto w = clc::clc_loss_weights(observations, result.dcm, progress, {cfg.clc_warmup});
                for (size_t k = 0; k < w.size(); ++k) {
                    const auto [l, loc] = observation_loc[k];
                    weights[static_cast<size_t>(l)][static_cast<size_t>(loc)] *= w[k];
                    if (w[k] == 0.0) ++m.filtered;
                }
                clc::update_from_image(result.dcm, observations);
            }

            for (const auto& [gt, locs] : pos_by_gt) {
                for (const auto& [l, loc] : locs) pos_weight_sum += weights[static_cast<size_t>(l)][static_cast<size_t>(loc)];
            }

            result.registry.record_epoch(info.id, scores);
            if (opts.on_weights) opts.on_weights(info.id, epoch + 1, weights);

            std::vector<LevelOutput> grads;
            const LossValue loss = detection_loss(out, levels, targets, weights, cfg, &grads);
            if (!std::isfinite(loss.total)) {
                dump_divergence(opts.divergence_dump, info.id, weights, loss);
                throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(epoch + 1) + ", image " +
                                       std::to_string(info.id));
            }
            model.backward(grads);
            optimizer.step(lr);
            ++iter;

            m.cls_loss += loss.cls;
            m.reg_loss += loss.reg;
            m.positives += loss.num_pos;

            if (cfg.rbr) {
                auto& pend = pending[info.id];
                for (const auto& [gt, locs] : pos_by_gt) {
                    auto& cands = pend.per_gt[gt];
                    for (const auto& [l, loc] : locs) {
                        const auto& lv = levels[static_cast<size_t>(l)];
                        const BoundingBox box = decode_ltrb(lv.cx(loc), lv.cy(loc),
                                                            decode_distances(out[static_cast<size_t>(l)].reg, loc, lv.stride));
                        const double s = sigmoid(out[static_cast<size_t>(l)].cls(targets.classes[static_cast<size_t>(gt)], loc));
                        cands.push_back({{l, loc / lv.grid_w, loc % lv.grid_w}, box, s});
                    }
                }
            }
        }

        if (cfg.rbr) {
            for (auto& [image_id, pend] : pending) {
                for (auto& [gt, cands] : pend.per_gt) {
                    auto use = opts.candidate_override ? opts.candidate_override(image_id, gt, std::move(cands))
                                                       : std::move(cands);
                    result.regenerator.refresh(image_id, gt, std::move(use), epoch + 1);
                }
            }
        }

        const double n_img = std::max<double>(1.0, static_cast<double>(dataset.images.size()));
        m.cls_loss /= n_img;
        m.reg_loss /= n_img;
        m.mean_pos_weight = m.positives > 0 ? pos_weight_sum / static_cast<double>(m.positives) : 1.0;
        m.mean_neg_weight = neg_count > 0 ? neg_weight_sum / static_cast<double>(neg_count) : 1.0;
        if (opts.reference && cfg.rbr) {
            double sum = 0.0;
            int64_t n = 0;
            for (const auto& img : dataset.images) {
                if (!result.regenerator.has_image(img.id)) continue;
                const auto& anns = anns_by_image[img.id];
                const auto& tg = result.regenerator.targets(img.id);
                for (size_t i = 0; i < anns.size(); ++i) {
                    auto it = reference_by_id.find(anns[i]->id);
                    if (it == reference_by_id.end()) continue;
                    sum += iou(tg[i].box, it->second->box);
                    ++n;
                }
            }
            if (n > 0) m.target_iou = sum / static_cast<double>(n);
        }
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log::debug("epoch " + std::to_string(m.epoch) + " cls " + std::to_string(m.cls_loss) + " reg " +
                   std::to_string(m.reg_loss) + " (" + std::to_string(m.seconds) + " s)");
        result.epochs.push_back(m);
        if (opts.on_epoch) opts.on_epoch(m);
    }
    return result;
}

}  // namespace ntod
