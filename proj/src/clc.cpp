#include "ntod/clc.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ntod::clc {

ConfidenceMatrix::ConfidenceMatrix(int num_classes, int period)
    : classes_(num_classes),
      period_(period),
      beta_(period >= 1 ? 1.0 - 1.0 / static_cast<double>(period) : 0.0),
      values_(static_cast<size_t>(std::max(num_classes, 0)) * static_cast<size_t>(std::max(num_classes, 0)), 0.0),
      touched_(static_cast<size_t>(std::max(num_classes, 0)), 0) {
    if (num_classes < 1) throw std::invalid_argument("confidence matrix needs at least one class");
    if (period < 1) throw std::invalid_argument("EWMA period T must be >= 1");
}

size_t ConfidenceMatrix::index(int label, int pred) const {
    if (label < 0 || label >= classes_ || pred < 0 || pred >= classes_) {
        throw std::out_of_range("confidence matrix index out of range");
    }
    return static_cast<size_t>(label) * static_cast<size_t>(classes_) + static_cast<size_t>(pred);
}

std::span<const double> ConfidenceMatrix::row(int label) const {
    return std::span<const double>(values_).subspan(index(label, 0), static_cast<size_t>(classes_));
}

void ConfidenceMatrix::update(int label, std::span<const double> pillar) {
    if (pillar.size() != static_cast<size_t>(classes_)) {
        throw std::invalid_argument("confidence pillar length must equal the class count");
    }
    const size_t base = index(label, 0);
    for (size_t k = 0; k < pillar.size(); ++k) {
        values_[base + k] = beta_ * values_[base + k] + (1.0 - beta_) * pillar[k];
    }
    touched_[static_cast<size_t>(label)] += 1;
}

std::string ConfidenceMatrix::to_json() const {
    nlohmann::json j;
    j["num_classes"] = classes_;
    j["period"] = period_;
    j["values"] = values_;
    j["rows_touched"] = touched_;
    return j.dump();
}

ConfidenceMatrix ConfidenceMatrix::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ConfidenceMatrix m(j.at("num_classes").get<int>(), j.at("period").get<int>());
    auto values = j.at("values").get<std::vector<double>>();
    auto touched = j.at("rows_touched").get<std::vector<int64_t>>();
    if (values.size() != m.values_.size() || touched.size() != m.touched_.size()) {
        throw std::invalid_argument("confidence matrix blob has the wrong shape");
    }
    m.values_ = std::move(values);
    m.touched_ = std::move(touched);
    return m;
}

ConfidenceMatrix init_dcm(int num_classes, int period) {
    if (num_classes < 2) throw std::invalid_argument("label correction needs at least two classes");
    if (period < 1) throw std::invalid_argument("EWMA period T must be >= 1");
    ConfidenceMatrix m(num_classes, period);
    for (int k = 0; k < num_classes; ++k) m.set(k, k, 1.0);
    return m;
}

bool confidence_pillar(std::span<const SampleObservation> observations, int class_y, ConfidencePillar& out) {
    size_t count = 0;
    std::vector<double> sum;
    for (const auto& obs : observations) {
        if (obs.gt_class != class_y) continue;
        if (sum.empty()) sum.assign(obs.prediction.size(), 0.0);
        if (obs.prediction.size() != sum.size()) throw std::invalid_argument("prediction lengths differ");
        for (size_t k = 0; k < sum.size(); ++k) sum[k] += obs.prediction[k];
        ++count;
    }
    if (count == 0) return false;
    for (double& v : sum) v /= static_cast<double>(count);
    out.class_y = class_y;
    out.mean_prediction = std::move(sum);
    return true;
}

void update_dcm(ConfidenceMatrix& dcm, const ConfidencePillar& pillar) {
    dcm.update(pillar.class_y, pillar.mean_prediction);
}

void update_from_image(ConfidenceMatrix& dcm, std::span<const SampleObservation> positives) {
    std::vector<bool> present(static_cast<size_t>(dcm.num_classes()), false);
    for (const auto& obs : positives) present.at(static_cast<size_t>(obs.gt_class)) = true;
    ConfidencePillar pillar;
    for (int y = 0; y < dcm.num_classes(); ++y) {
        if (present[static_cast<size_t>(y)] && confidence_pillar(positives, y, pillar)) update_dcm(dcm, pillar);
    }
}

int noisy_factor(const SampleObservation& obs, const ConfidenceMatrix& dcm) {
    const int C = dcm.num_classes();
    if (obs.prediction.size() != static_cast<size_t>(C)) {
        throw std::invalid_argument("prediction length must equal the class count");
    }
    const int y = obs.gt_class;
    const double p_y = obs.prediction[static_cast<size_t>(y)];
    for (int i = 0; i < C; ++i) {
        const double p_i = obs.prediction[static_cast<size_t>(i)];
        if (p_i > p_y && p_i > dcm.at(y, i) && p_i > dcm.at(i, i)) return 0;
    }
    return 1;
}

std::vector<double> clc_loss_weights(std::span<const SampleObservation> positives, const ConfidenceMatrix& dcm,
                                     double progress, const FilterConfig& cfg) {
    std::vector<double> w(positives.size(), 1.0);
    if (progress < cfg.warmup_fraction) return w;
    for (size_t k = 0; k < positives.size(); ++k) w[k] = noisy_factor(positives[k], dcm);
    return w;
}

}  // namespace ntod::clc
