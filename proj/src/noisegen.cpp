#include "ntod/noisegen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"

namespace ntod {
namespace {

// Stream tags keep the random decisions of different injectors independent.
constexpr uint64_t kTagSelectMissing = 0x6d697373;
constexpr uint64_t kTagSelectShift = 0x73686674;
constexpr uint64_t kTagShiftClass = 0x636c7373;
constexpr uint64_t kTagBox = 0x62786e73;
constexpr uint64_t kTagExtra = 0x65787472;

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void require_kind(const NoiseSpec& spec, NoiseKind kind) {
    spec.validate();
    if (spec.kind != kind) {
        throw std::invalid_argument("noise spec kind is " + std::string(to_string(spec.kind)) + ", expected " +
                                    std::string(to_string(kind)));
    }
}

/// Picks exactly `count` annotation indices, uniformly without replacement.
std::vector<size_t> sample_annotations(const DetDataset& ds, int64_t count, uint64_t seed, uint64_t tag) {
    std::vector<std::pair<uint64_t, size_t>> keyed;
    keyed.reserve(ds.annotations.size());
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& a = ds.annotations[i];
        keyed.emplace_back(stream_key(seed, tag, a.image_id, a.id), i);
    }
    std::sort(keyed.begin(), keyed.end(), [&](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first < y.first;
        return ds.annotations[x.second].id < ds.annotations[y.second].id;
    });
    std::vector<size_t> picked;
    for (int64_t k = 0; k < count; ++k) picked.push_back(keyed[static_cast<size_t>(k)].second);
    std::sort(picked.begin(), picked.end());
    return picked;
}

double uniform_open(std::mt19937_64& rng, double a) {
    if (a <= 0.0) return 0.0;
    std::uniform_real_distribution<double> u(-a, a);
    double v;
    do {
        v = u(rng);
    } while (v <= -a || v >= a);
    return v;
}

Provenance with_box(Provenance p) {
    if (p == Provenance::class_shifted || p == Provenance::both_shifted_and_perturbed) {
        return Provenance::both_shifted_and_perturbed;
    }
    if (p == Provenance::extra) return Provenance::extra;
    return Provenance::box_perturbed;
}

Provenance with_shift(Provenance p) {
    if (p == Provenance::box_perturbed || p == Provenance::both_shifted_and_perturbed) {
        return Provenance::both_shifted_and_perturbed;
    }
    if (p == Provenance::extra) return Provenance::extra;
    return Provenance::class_shifted;
}

void finish(NoiseResult& r) {
    std::sort(r.affected_ids.begin(), r.affected_ids.end());
    for (const auto& w : r.warnings) log::warn(w);
}

NoiseResult class_shift_impl(const DetDataset& ds, uint64_t seed, int64_t budget) {
    const int C = ds.num_classes();
    NoiseResult r{ds, {}, {}};
    if (budget == 0) return r;
    if (C < 2) throw NoiseError("class shift needs at least two foreground classes");
    for (size_t idx : sample_annotations(ds, budget, seed, kTagSelectShift)) {
        auto& a = r.dataset.annotations[idx];
        std::mt19937_64 rng(stream_key(seed, kTagShiftClass, a.image_id, a.id));
        std::uniform_int_distribution<int> pick(0, C - 2);
        const int draw = pick(rng);
        a.class_id = draw >= a.class_id ? draw + 1 : draw;
        a.provenance = with_shift(a.provenance);
        r.affected_ids.push_back(a.id);
    }
    return r;
}

NoiseResult box_impl(const DetDataset& ds, double level, uint64_t seed) {
    if (level >= 1.0) throw std::invalid_argument("box noise level must be < 1");
    NoiseResult r{ds, {}, {}};
    if (level <= 0.0) return r;
    std::unordered_map<int64_t, const ImageInfo*> images;
    for (const auto& img : ds.images) images[img.id] = &img;
    int64_t clamped = 0;
    for (auto& a : r.dataset.annotations) {
        const auto d = draw_perturbation(level, seed, a.image_id, a.id);
        a.box = apply_perturbation(a.box, d);
        const ImageInfo* img = images.at(a.image_id);
        if (clamp_to_image(a.box, img->width, img->height)) ++clamped;
        a.provenance = with_box(a.provenance);
        r.affected_ids.push_back(a.id);
    }
    if (clamped > 0) {
        r.warnings.push_back("box noise: " + std::to_string(clamped) + " boxes clamped to image bounds");
    }
    return r;
}

NoiseResult missing_impl(const DetDataset& ds, uint64_t seed, int64_t budget) {
    NoiseResult r{ds, {}, {}};
    if (budget == 0) return r;
    const auto picked = sample_annotations(ds, budget, seed, kTagSelectMissing);
    std::vector<bool> drop(ds.annotations.size(), false);
    for (size_t idx : picked) {
        drop[idx] = true;
        r.affected_ids.push_back(ds.annotations[idx].id);
    }
    r.dataset.annotations.clear();
    for (size_t i = 0; i < ds.annotations.size(); ++i) {
        if (!drop[i]) r.dataset.annotations.push_back(ds.annotations[i]);
    }
    if (r.dataset.annotations.empty() && !ds.annotations.empty()) {
        r.warnings.push_back("missing-label noise removed every annotation");
    }
    return r;
}

NoiseResult extra_impl(const DetDataset& ds, uint64_t seed, int64_t budget) {
    NoiseResult r{ds, {}, {}};
    if (budget == 0) return r;
    if (ds.images.empty()) throw NoiseError("extra-label noise needs at least one image");
    const int C = ds.num_classes();
    if (C < 1) throw NoiseError("extra-label noise needs at least one category");

    std::vector<const ImageInfo*> images;
    for (const auto& img : ds.images) images.push_back(&img);
    std::sort(images.begin(), images.end(), [](auto* a, auto* b) { return a->id < b->id; });
    std::map<int64_t, double> per_image;
    for (const auto& a : ds.annotations) per_image[a.image_id] += 1.0;
    std::vector<double> weights;
    double total = 0.0;
    for (auto* img : images) {
        weights.push_back(per_image.count(img->id) ? per_image[img->id] : 0.0);
        total += weights.back();
    }
    if (total <= 0.0) std::fill(weights.begin(), weights.end(), 1.0);

    int64_t next_id = 0;
    for (const auto& a : ds.annotations) next_id = std::max(next_id, a.id + 1);

    const double log_lo = std::log(2.0);
    const double log_hi = std::log(16.0);
    for (int64_t e = 0; e < budget; ++e) {
        std::mt19937_64 rng(stream_key(seed, kTagExtra, e));
        std::discrete_distribution<size_t> pick_image(weights.begin(), weights.end());
        const ImageInfo* img = images[pick_image(rng)];
        std::uniform_real_distribution<double> log_size(log_lo, log_hi);
        const double w = std::min(std::exp(log_size(rng)), static_cast<double>(img->width));
        const double h = std::min(std::exp(log_size(rng)), static_cast<double>(img->height));
        std::uniform_real_distribution<double> ux(0.5 * w, img->width - 0.5 * w);
        std::uniform_real_distribution<double> uy(0.5 * h, img->height - 0.5 * h);
        std::uniform_int_distribution<int> pick_class(0, C - 1);
        Annotation a;
        a.id = next_id + e;
        a.image_id = img->id;
        a.box = {ux(rng), uy(rng), w, h};
        a.class_id = pick_class(rng);
        a.provenance = Provenance::extra;
        r.dataset.annotations.push_back(a);
        r.affected_ids.push_back(a.id);
    }
    return r;
}

}  // namespace

std::string_view to_string(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::missing: return "missing";
        case NoiseKind::extra: return "extra";
        case NoiseKind::class_shift: return "class_shift";
        case NoiseKind::box: return "box";
        case NoiseKind::mixed: return "mixed";
    }
    return "box";
}

NoiseKind noise_kind_from_string(std::string_view s) {
    for (auto k : {NoiseKind::missing, NoiseKind::extra, NoiseKind::class_shift, NoiseKind::box, NoiseKind::mixed}) {
        if (to_string(k) == s) return k;
    }
    throw std::invalid_argument("unknown noise kind '" + std::string(s) + "'");
}

void NoiseSpec::validate() const {
    if (!(level >= 0.0 && level <= 1.0)) throw std::invalid_argument("noise level must lie in [0, 1]");
    if (kind == NoiseKind::mixed) {
        if (mixed_components.empty()) throw std::invalid_argument("mixed noise needs at least one component");
        std::set<NoiseKind> seen;
        for (const auto& c : mixed_components) {
            if (c.kind == NoiseKind::mixed) throw std::invalid_argument("mixed noise cannot nest");
            if (!seen.insert(c.kind).second) throw std::invalid_argument("duplicate kind in mixed noise");
            if (!(c.level >= 0.0 && c.level <= 1.0)) throw std::invalid_argument("noise level must lie in [0, 1]");
        }
    } else if (!mixed_components.empty()) {
        throw std::invalid_argument("mixed_components is only valid for kind = mixed");
    }
}

int64_t noise_budget(double level, size_t n) {
    return static_cast<int64_t>(std::nearbyint(level * static_cast<double>(n)));
}

uint64_t stream_key(uint64_t seed, uint64_t tag, int64_t a, int64_t b) {
    uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ tag);
    h = splitmix64(h ^ static_cast<uint64_t>(a));
    h = splitmix64(h ^ static_cast<uint64_t>(b));
    return h;
}

PerturbationDraw draw_perturbation(double level, uint64_t seed, int64_t image_id, int64_t annotation_id) {
    std::mt19937_64 rng(stream_key(seed, kTagBox, image_id, annotation_id));
    PerturbationDraw d;
    d.dx = uniform_open(rng, level);
    d.dy = uniform_open(rng, level);
    d.dw = uniform_open(rng, level);
    d.dh = uniform_open(rng, level);
    return d;
}

BoundingBox apply_perturbation(const BoundingBox& box, const PerturbationDraw& d) {
    return {box.cx + d.dx * box.w, box.cy + d.dy * box.h, (1.0 + d.dw) * box.w, (1.0 + d.dh) * box.h};
}

NoiseResult inject_missing(const DetDataset& ds, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::missing);
    auto r = missing_impl(ds, spec.seed, noise_budget(spec.level, ds.annotations.size()));
    finish(r);
    return r;
}

NoiseResult inject_class_shift(const DetDataset& ds, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::class_shift);
    if (ds.num_classes() < 2) throw NoiseError("class shift needs at least two foreground classes");
    auto r = class_shift_impl(ds, spec.seed, noise_budget(spec.level, ds.annotations.size()));
    finish(r);
    return r;
}

NoiseResult inject_extra(const DetDataset& ds, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::extra);
    const int64_t budget = noise_budget(spec.level, ds.annotations.size());
    if (ds.images.empty() && spec.level > 0.0) throw NoiseError("extra-label noise needs at least one image");
    auto r = extra_impl(ds, spec.seed, budget);
    finish(r);
    return r;
}

NoiseResult inject_box_noise(const DetDataset& ds, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::box);
    auto r = box_impl(ds, spec.level, spec.seed);
    finish(r);
    return r;
}

NoiseResult inject_mixed(const DetDataset& ds, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::mixed);
    // fixed application order; each component's budget is taken from the clean count
    static constexpr std::array kOrder{NoiseKind::class_shift, NoiseKind::box, NoiseKind::missing, NoiseKind::extra};
    const size_t n = ds.annotations.size();
    NoiseResult acc{ds, {}, {}};
    std::set<int64_t> affected;
    for (NoiseKind kind : kOrder) {
        auto it = std::find_if(spec.mixed_components.begin(), spec.mixed_components.end(),
                               [&](const NoiseComponent& c) { return c.kind == kind; });
        if (it == spec.mixed_components.end()) continue;
        NoiseResult step;
        switch (kind) {
            case NoiseKind::class_shift:
                if (acc.dataset.num_classes() < 2 && it->level > 0.0) {
                    throw NoiseError("class shift needs at least two foreground classes");
                }
                step = class_shift_impl(acc.dataset, spec.seed, noise_budget(it->level, n));
                break;
            case NoiseKind::box: step = box_impl(acc.dataset, it->level, spec.seed); break;
            case NoiseKind::missing:
                step = missing_impl(acc.dataset, spec.seed,
                                    std::min<int64_t>(noise_budget(it->level, n),
                                                      static_cast<int64_t>(acc.dataset.annotations.size())));
                break;
            case NoiseKind::extra: step = extra_impl(acc.dataset, spec.seed, noise_budget(it->level, n)); break;
            case NoiseKind::mixed: break;
        }
        acc.dataset = std::move(step.dataset);
        affected.insert(step.affected_ids.begin(), step.affected_ids.end());
        acc.warnings.insert(acc.warnings.end(), step.warnings.begin(), step.warnings.end());
    }
    acc.affected_ids.assign(affected.begin(), affected.end());
    finish(acc);
    return acc;
}

NoiseResult inject(const DetDataset& ds, const NoiseSpec& spec) {
    switch (spec.kind) {
        case NoiseKind::missing: return inject_missing(ds, spec);
        case NoiseKind::extra: return inject_extra(ds, spec);
        case NoiseKind::class_shift: return inject_class_shift(ds, spec);
        case NoiseKind::box: return inject_box_noise(ds, spec);
        case NoiseKind::mixed: return inject_mixed(ds, spec);
    }
    throw std::invalid_argument("unknown noise kind");
}

void OffsetHistogram::add(double v) {
    max_abs = std::max(max_abs, std::abs(v));
    int bin = static_cast<int>(std::floor((v + 1.0) / 2.0 * kBins));
    counts[static_cast<size_t>(std::clamp(bin, 0, kBins - 1))] += 1;
}

NoiseReport noise_report(const DetDataset& clean, const DetDataset& noisy) {
    std::set<int64_t> clean_images;
    std::set<int64_t> noisy_images;
    for (const auto& img : clean.images) clean_images.insert(img.id);
    for (const auto& img : noisy.images) noisy_images.insert(img.id);
    if (clean_images != noisy_images) throw NoiseError("clean and noisy datasets cover different image sets");

    NoiseReport rep;
    rep.clean_count = clean.annotations.size();
    rep.noisy_count = noisy.annotations.size();
    const size_t C = static_cast<size_t>(std::max(clean.num_classes(), noisy.num_classes()));
    rep.class_confusion.assign(C, std::vector<int64_t>(C, 0));

    std::unordered_map<int64_t, const Annotation*> by_id;
    for (const auto& a : noisy.annotations) by_id[a.id] = &a;
    std::set<int64_t> clean_ids;
    for (const auto& c : clean.annotations) {
        clean_ids.insert(c.id);
        auto it = by_id.find(c.id);
        if (it == by_id.end()) {
            ++rep.missing;
            continue;
        }
        const Annotation& n = *it->second;
        rep.class_confusion[static_cast<size_t>(c.class_id)][static_cast<size_t>(n.class_id)] += 1;
        if (n.class_id != c.class_id) ++rep.class_shifted;
        if (!(n.box == c.box)) {
            ++rep.box_perturbed;
            rep.dx.add((n.box.cx - c.box.cx) / c.box.w);
            rep.dy.add((n.box.cy - c.box.cy) / c.box.h);
            rep.dw.add(n.box.w / c.box.w - 1.0);
            rep.dh.add(n.box.h / c.box.h - 1.0);
        }
    }
    for (const auto& n : noisy.annotations) {
        if (!clean_ids.count(n.id)) ++rep.extra;
    }
    if (rep.clean_count > 0) {
        const double N = static_cast<double>(rep.clean_count);
        rep.missing_rate = rep.missing / N;
        rep.extra_rate = rep.extra / N;
        rep.class_shift_rate = rep.class_shifted / N;
        rep.box_rate = rep.box_perturbed / N;
    }
    return rep;
}

std::string NoiseReport::to_json() const {
    nlohmann::json j;
    j["clean_count"] = clean_count;
    j["noisy_count"] = noisy_count;
    j["counts"] = {{"missing", missing}, {"extra", extra}, {"class_shift", class_shifted}, {"box", box_perturbed}};
    j["rates"] = {{"missing", missing_rate},
                  {"extra", extra_rate},
                  {"class_shift", class_shift_rate},
                  {"box", box_rate}};
    j["class_confusion"] = class_confusion;
    auto hist = [](const OffsetHistogram& h) {
        return nlohmann::json{{"range", {-1.0, 1.0}}, {"counts", h.counts}, {"max_abs", h.max_abs}};
    };
    j["box_offsets"] = {{"dx", hist(dx)}, {"dy", hist(dy)}, {"dw", hist(dw)}, {"dh", hist(dh)}};
    return j.dump(2);
}

std::string NoiseReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "annotations: clean " << clean_count << ", noisy " << noisy_count << '\n';
    os << "kind         count     rate\n";
    auto row = [&](const char* name, int64_t n, double rate) {
        os << std::left << std::setw(12) << name << std::right << std::setw(6) << n << "   " << rate << '\n';
    };
    row("missing", missing, missing_rate);
    row("extra", extra, extra_rate);
    row("class_shift", class_shifted, class_shift_rate);
    row("box", box_perturbed, box_rate);
    os << "max |offset|: dx " << dx.max_abs << "  dy " << dy.max_abs << "  dw " << dw.max_abs << "  dh "
       << dh.max_abs << '\n';
    return os.str();
}

}  // namespace ntod
