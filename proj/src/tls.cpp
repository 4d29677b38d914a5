#include "ntod/tls.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ntod::tls {

void TrendRegistry::record_epoch(int64_t image_id, std::span<const SampleScore> scores) {
    if (!written_.emplace(image_id, epoch_).second) {
        throw RegistryError("image " + std::to_string(image_id) + " already recorded for epoch " +
                            std::to_string(epoch_));
    }
    auto& recs = images_[image_id];
    for (const auto& s : scores) {
        auto& rec = recs[s.key];
        if (rec.score_history.empty() || rec.assigned_gt != s.assigned_gt) {
            rec.key = s.key;
            rec.assigned_gt = s.assigned_gt;
            rec.score_history.clear();
        }
        rec.score_history[epoch_] = s.score;
    }
}

const SampleRecord* TrendRegistry::find(int64_t image_id, const SampleKey& key) const {
    auto img = images_.find(image_id);
    if (img == images_.end()) return nullptr;
    auto it = img->second.find(key);
    return it == img->second.end() ? nullptr : &it->second;
}

std::optional<double> TrendRegistry::score_at(int64_t image_id, const SampleKey& key, int epoch) const {
    const SampleRecord* rec = find(image_id, key);
    if (!rec) return std::nullopt;
    auto it = rec->score_history.find(epoch);
    if (it == rec->score_history.end()) return std::nullopt;
    return it->second;
}

const std::map<SampleKey, SampleRecord>* TrendRegistry::records(int64_t image_id) const {
    auto it = images_.find(image_id);
    return it == images_.end() ? nullptr : &it->second;
}

std::string TrendRegistry::to_json() const {
    nlohmann::json j;
    j["epoch"] = epoch_;
    j["images"] = nlohmann::json::array();
    for (const auto& [image_id, recs] : images_) {
        nlohmann::json img;
        img["image_id"] = image_id;
        img["samples"] = nlohmann::json::array();
        for (const auto& [key, rec] : recs) {
            nlohmann::json hist = nlohmann::json::array();
            for (const auto& [epoch, score] : rec.score_history) hist.push_back({epoch, score});
            img["samples"].push_back({{"level", key.level},
                                      {"y", key.grid_y},
                                      {"x", key.grid_x},
                                      {"gt", rec.assigned_gt},
                                      {"history", hist}});
        }
        j["images"].push_back(std::move(img));
    }
    return j.dump();
}

double cleanliness(double s_prev, double s_cur, double floor) {
    if (!(s_cur > 0.0)) return floor;
    const double trend = 1.0 - s_prev / s_cur;
    return trend >= 0.0 ? trend : floor;
}

std::vector<double> primacy(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("primacy needs at least one sample");
    const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
    std::vector<double> r(scores.size());
    if (!(total > 0.0)) {
        std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(scores.size()));
        return r;
    }
    for (size_t j = 0; j < scores.size(); ++j) r[j] = scores[j] / total;
    return r;
}

double positive_weight(double c, double r, double alpha) { return alpha * c + (1.0 - alpha) * r; }

double negative_weight(double s_prev, double s_cur) {
    if (!(s_cur > 0.0)) return 1.0;
    const double ratio = s_prev / s_cur;
    return ratio > 1.0 ? 1.0 : ratio;
}

std::vector<double> positive_weights_for_gt(std::span<const std::optional<double>> prev,
                                            std::span<const double> cur, double alpha) {
    if (prev.size() != cur.size()) throw std::invalid_argument("history and score lengths differ");
    const auto r = primacy(cur);
    const bool any_history = std::any_of(prev.begin(), prev.end(), [](const auto& p) { return p.has_value(); });
    if (!any_history) return r;

    // lowest strictly positive trend in the set; uniform share if there is none
    double floor = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < cur.size(); ++j) {
        if (!prev[j] || !(cur[j] > 0.0)) continue;
        const double trend = 1.0 - *prev[j] / cur[j];
        if (trend > 0.0) floor = std::min(floor, trend);
    }
    if (!std::isfinite(floor)) floor = 1.0 / static_cast<double>(cur.size());

    std::vector<double> w(cur.size());
    for (size_t j = 0; j < cur.size(); ++j) {
        const double c = prev[j] ? cleanliness(*prev[j], cur[j], floor) : floor;
        w[j] = positive_weight(c, r[j], alpha);
    }
    return w;
}

std::vector<Candidate> select_topk(std::vector<Candidate> candidates, size_t k) {
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.key < b.key;
    });
    if (candidates.size() > k) candidates.resize(k);
    return candidates;
}

BoundingBox ensemble_box(std::span<const Candidate> topk) {
    if (topk.empty()) throw std::invalid_argument("ensemble of an empty top-k set");
    double total = 0.0;
    for (const auto& c : topk) total += c.score;
    BoundingBox out{0.0, 0.0, 0.0, 0.0};
    for (const auto& c : topk) {
        const double wgt = total > 0.0 ? c.score / total : 1.0 / static_cast<double>(topk.size());
        out.cx += wgt * c.box.cx;
        out.cy += wgt * c.box.cy;
        out.w += wgt * c.box.w;
        out.h += wgt * c.box.h;
    }
    return out;
}

BoundingBox fuse_boxes(const BoundingBox& gt, const BoundingBox& theta_prev, const BoundingBox& ensemble,
                       double w1, double w2, double w3) {
    const double total = w1 + w2 + w3;
    if (!(total > 0.0)) throw std::invalid_argument("fusion weights must have a positive sum");
    auto mix = [&](double g, double p, double e) { return (w1 * g + w2 * p + w3 * e) / total; };
    return {mix(gt.cx, theta_prev.cx, ensemble.cx), mix(gt.cy, theta_prev.cy, ensemble.cy),
            mix(gt.w, theta_prev.w, ensemble.w), mix(gt.h, theta_prev.h, ensemble.h)};
}

BoundingBox rbr_fuse(const BoundingBox& gt, const BoundingBox& theta_prev, std::span<const Candidate> topk,
                     double w1, double w2) {
    if (!(w1 > 0.0)) throw std::invalid_argument("gt weight w1 must be positive");
    if (topk.empty()) return theta_prev;
    double w3 = 0.0;
    for (const auto& c : topk) w3 = std::max(w3, c.score);
    return fuse_boxes(gt, theta_prev, ensemble_box(topk), w1, w2, w3);
}

BoxRegenerator::BoxRegenerator(double w1, size_t k) : w1_(w1), k_(k) {
    if (!(w1 > 0.0)) throw std::invalid_argument("gt weight w1 must be positive");
    if (k == 0) throw std::invalid_argument("top-k size must be positive");
}

void BoxRegenerator::init_image(int64_t image_id, std::span<const BoundingBox> gts) {
    if (images_.count(image_id)) return;
    auto& v = images_[image_id];
    for (size_t i = 0; i < gts.size(); ++i) {
        v.push_back({static_cast<int>(i), gts[i], gts[i], 0, 0.0});
    }
}

const std::vector<RegeneratedTarget>& BoxRegenerator::targets(int64_t image_id) const {
    auto it = images_.find(image_id);
    if (it == images_.end()) throw std::out_of_range("no regeneration state for image " + std::to_string(image_id));
    return it->second;
}

void BoxRegenerator::refresh(int64_t image_id, int gt_index, std::vector<Candidate> candidates, int epoch) {
    auto& t = images_.at(image_id).at(static_cast<size_t>(gt_index));
    if (candidates.empty()) return;
    const auto topk = select_topk(std::move(candidates), k_);
    double w3 = 0.0;
    for (const auto& c : topk) w3 = std::max(w3, c.score);
    t.box = rbr_fuse(t.gt, t.box, topk, w1_, t.last_max_score);
    t.last_max_score = w3;
    t.epoch = epoch;
}

std::string BoxRegenerator::to_json() const {
    nlohmann::json j;
    j["w1"] = w1_;
    j["k"] = k_;
    j["images"] = nlohmann::json::array();
    for (const auto& [image_id, targets] : images_) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& t : targets) {
            arr.push_back({{"gt_index", t.gt_index},
                           {"epoch", t.epoch},
                           {"gt", {t.gt.cx, t.gt.cy, t.gt.w, t.gt.h}},
                           {"target", {t.box.cx, t.box.cy, t.box.w, t.box.h}},
                           {"max_score", t.last_max_score}});
        }
        j["images"].push_back({{"image_id", image_id}, {"targets", arr}});
    }
    return j.dump();
}

}  // namespace ntod::tls
