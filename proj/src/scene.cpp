#include "ntod/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"
#include "ntod/noisegen.hpp"

namespace ntod {
namespace {

constexpr uint64_t kTagScene = 0x7363656e;
constexpr int kSuper = 4;  // supersampling per axis

bool inside(Shape shape, double u, double v) {
    // u, v in [-0.5, 0.5] box-normalised coordinates, v grows downwards
    switch (shape) {
        case Shape::disk: return u * u + v * v <= 0.25;
        case Shape::square:
        case Shape::bar: return true;
        case Shape::cross: return std::abs(u) <= 1.0 / 6.0 || std::abs(v) <= 1.0 / 6.0;
        case Shape::triangle: return std::abs(u) <= 0.5 * (v + 0.5);
        case Shape::ring: {
            const double r2 = u * u + v * v;
            return r2 <= 0.25 && r2 >= 0.09;
        }
        case Shape::diamond: return std::abs(u) + std::abs(v) <= 0.5;
        case Shape::frame: return !(std::abs(u) < 0.22 && std::abs(v) < 0.22);
    }
    return false;
}

void paint(GrayImage& img, const BoundingBox& box, Shape shape, float intensity) {
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x_min())));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y_min())));
    const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(box.x_max())));
    const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(box.y_max())));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    const double px = x + (sx + 0.5) / kSuper;
                    const double py = y + (sy + 0.5) / kSuper;
                    const double u = (px - box.cx) / box.w;
                    const double v = (py - box.cy) / box.h;
                    if (std::abs(u) <= 0.5 && std::abs(v) <= 0.5 && inside(shape, u, v)) ++hits;
                }
            }
            if (hits == 0) continue;
            const float cov = static_cast<float>(hits) / (kSuper * kSuper);
            float& p = img.pixels[static_cast<size_t>(y) * static_cast<size_t>(img.width) + static_cast<size_t>(x)];
            p = (1.0f - cov) * p + cov * intensity;
        }
    }
}

}  // namespace

std::string_view shape_name(int class_id) {
    static constexpr std::string_view names[kShapeCount] = {"disk",     "square", "cross",   "bar",
                                                            "triangle", "ring",   "diamond", "frame"};
    if (class_id < 0 || class_id >= kShapeCount) throw std::out_of_range("no shape for class id");
    return names[class_id];
}

void SceneConfig::validate() const {
    if (image_size < 16 || image_size % 8 != 0) throw std::invalid_argument("image_size must be a multiple of 8, >= 16");
    if (num_classes < 1 || num_classes > kShapeCount) {
        throw std::invalid_argument("num_classes must lie in [1, " + std::to_string(kShapeCount) + "]");
    }
    if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("bad objects_per_image range");
    if (!(min_size >= 2.0) || max_size < min_size) throw std::invalid_argument("bad size range");
    if (max_size > 16.0) throw std::invalid_argument("max_size must not exceed 16 px (tiny-object regime)");
    if (!class_frequency.empty() && class_frequency.size() != static_cast<size_t>(num_classes)) {
        throw std::invalid_argument("class_frequency must have one entry per class");
    }
    if (!(max_overlap_iou >= 0.0 && max_overlap_iou < 0.3)) {
        throw std::invalid_argument("max_overlap_iou must lie in [0, 0.3)");
    }
}

std::vector<double> SceneConfig::frequencies() const {
    std::vector<double> f = class_frequency;
    if (f.empty()) {
        double p = 1.0;
        for (int k = 0; k < num_classes; ++k, p *= 0.7) f.push_back(p);
    }
    double total = 0.0;
    for (double v : f) total += v;
    for (double& v : f) v /= total;
    return f;
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},
                       {"num_classes", c.num_classes},
                       {"min_objects", c.min_objects},
                       {"max_objects", c.max_objects},
                       {"min_size", c.min_size},
                       {"max_size", c.max_size},
                       {"class_frequency", c.class_frequency},
                       {"clutter_level", c.clutter_level},
                       {"pixel_noise", c.pixel_noise},
                       {"max_overlap_iou", c.max_overlap_iou},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
    SceneConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.min_objects = j.value("min_objects", d.min_objects);
    c.max_objects = j.value("max_objects", d.max_objects);
    c.min_size = j.value("min_size", d.min_size);
    c.max_size = j.value("max_size", d.max_size);
    c.class_frequency = j.value("class_frequency", d.class_frequency);
    c.clutter_level = j.value("clutter_level", d.clutter_level);
    c.pixel_noise = j.value("pixel_noise", d.pixel_noise);
    c.max_overlap_iou = j.value("max_overlap_iou", d.max_overlap_iou);
    c.seed = j.value("seed", d.seed);
}

Scene generate_scene(const SceneConfig& cfg, int64_t index) {
    cfg.validate();
    std::mt19937_64 rng(stream_key(cfg.seed, kTagScene, index));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int S = cfg.image_size;

    Scene scene;
    scene.image.width = S;
    scene.image.height = S;
    scene.image.pixels.assign(static_cast<size_t>(S) * static_cast<size_t>(S), 0.0f);

    // background: base level plus a few broad blobs
    const double base = 0.3 + 0.2 * unit(rng);
    struct Blob { double x, y, sigma, amp; };
    std::vector<Blob> blobs(4);
    for (auto& b : blobs) {
        b = {unit(rng) * S, unit(rng) * S, 8.0 + 22.0 * unit(rng), cfg.clutter_level * (2.0 * unit(rng) - 1.0)};
    }
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            double v = base;
            for (const auto& b : blobs) {
                const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
                v += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
            }
            scene.image.pixels[static_cast<size_t>(y * S + x)] = static_cast<float>(v);
        }
    }

    std::uniform_int_distribution<int> count_dist(cfg.min_objects, cfg.max_objects);
    const int wanted = count_dist(rng);
    const auto freq = cfg.frequencies();
    std::discrete_distribution<int> class_dist(freq.begin(), freq.end());
    const double log_lo = std::log(cfg.min_size);
    const double log_hi = std::log(cfg.max_size);

    for (int k = 0; k < wanted; ++k) {
        const int cls = class_dist(rng);
        const Shape shape = static_cast<Shape>(cls);
        const double size = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
        double w = size;
        double h = size;
        if (shape == Shape::bar) {
            const double thin = std::max(2.0, size / 3.0);
            if (unit(rng) < 0.5) h = thin; else w = thin;
        }
        const double polarity = unit(rng) < 0.5 ? -1.0 : 1.0;
        const double contrast = 0.25 + 0.2 * unit(rng);
        bool placed = false;
        for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
            const double cx = 1.0 + 0.5 * w + unit(rng) * (S - 2.0 - w);
            const double cy = 1.0 + 0.5 * h + unit(rng) * (S - 2.0 - h);
            const BoundingBox box{cx, cy, w, h};
            const bool clash = std::any_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
                return iou(o.box, box) > cfg.max_overlap_iou;
            });
            if (clash) continue;
            const size_t pix = static_cast<size_t>(std::clamp(static_cast<int>(cy), 0, S - 1) * S +
                                                   std::clamp(static_cast<int>(cx), 0, S - 1));
            const float local = scene.image.pixels[pix];
            const float value = static_cast<float>(std::clamp(local + polarity * contrast, 0.0, 1.0));
            paint(scene.image, box, shape, value);
            scene.objects.push_back({box, cls});
            placed = true;
        }
        if (!placed) log::debug("scene " + std::to_string(index) + ": could not place object " + std::to_string(k));
    }

    if (cfg.pixel_noise > 0.0) {
        std::normal_distribution<double> noise(0.0, cfg.pixel_noise);
        for (auto& p : scene.image.pixels) p = static_cast<float>(std::clamp(p + noise(rng), 0.0, 1.0));
    } else {
        for (auto& p : scene.image.pixels) p = std::clamp(p, 0.0f, 1.0f);
    }
    return scene;
}

std::string scene_key(uint64_t seed, int64_t index) {
    return "tinyshapes:" + std::to_string(seed) + ":" + std::to_string(index);
}

DetDataset make_benchmark(const SceneConfig& cfg, int64_t first_index, int64_t count) {
    cfg.validate();
    DetDataset ds;
    for (int k = 0; k < cfg.num_classes; ++k) ds.categories.push_back({k, std::string(shape_name(k)), k});
    for (int64_t idx = first_index; idx < first_index + count; ++idx) {
        const Scene scene = generate_scene(cfg, idx);
        ds.images.push_back({idx, cfg.image_size, cfg.image_size, scene_key(cfg.seed, idx)});
        for (size_t k = 0; k < scene.objects.size(); ++k) {
            Annotation a;
            a.id = idx * 1000 + static_cast<int64_t>(k);
            a.image_id = idx;
            a.box = scene.objects[k].box;
            a.class_id = scene.objects[k].class_id;
            ds.annotations.push_back(a);
        }
    }
    return ds;
}

GrayImage load_image(const ImageInfo& info, const SceneConfig& cfg, const std::filesystem::path& base_dir) {
    static constexpr std::string_view prefix = "tinyshapes:";
    if (info.file_name.rfind(prefix, 0) == 0) {
        const std::string rest = info.file_name.substr(prefix.size());
        const auto colon = rest.find(':');
        if (colon == std::string::npos) throw std::invalid_argument("bad generator key " + info.file_name);
        SceneConfig c = cfg;
        c.seed = std::stoull(rest.substr(0, colon));
        const int64_t index = std::stoll(rest.substr(colon + 1));
        c.image_size = info.width;
        return generate_scene(c, index).image;
    }
    return read_pgm(base_dir / info.file_name);
}

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error(path.string() + " is not a binary PGM");
    auto next_int = [&]() {
        int v = 0;
        while (in >> std::ws && in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
        }
        in >> v;
        return v;
    };
    GrayImage img;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    in.get();
    if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 255) {
        throw std::runtime_error(path.string() + ": unsupported PGM header");
    }
    std::vector<unsigned char> raw(static_cast<size_t>(img.width) * static_cast<size_t>(img.height));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated PGM");
    img.pixels.resize(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
    return img;
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    for (float p : img.pixels) out.put(static_cast<char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
}

}  // namespace ntod
