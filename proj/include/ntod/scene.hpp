#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ntod/annotations.hpp"

namespace ntod {

/// Single-channel image, intensities in [0,1], row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    float at(int x, int y) const { return pixels[static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)]; }
    bool operator==(const GrayImage&) const = default;
};

enum class Shape { disk, square, cross, bar, triangle, ring, diamond, frame };
inline constexpr int kShapeCount = 8;
std::string_view shape_name(int class_id);

struct SceneConfig {
    int image_size = 128;
    int num_classes = 6;
    int min_objects = 4;
    int max_objects = 10;
    double min_size = 4.0;
    double max_size = 16.0;
    std::vector<double> class_frequency;  // empty: geometric long tail with ratio 0.7
    double clutter_level = 0.15;
    double pixel_noise = 0.03;
    double max_overlap_iou = 0.1;
    uint64_t seed = 0;

    /// Throws std::invalid_argument on inconsistent settings (e.g. max_size > 16).
    void validate() const;
    std::vector<double> frequencies() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct SceneObject {
    BoundingBox box;
    int class_id = 0;
};

struct Scene {
    GrayImage image;
    std::vector<SceneObject> objects;
};

/// Deterministic in (cfg.seed, index).
Scene generate_scene(const SceneConfig& cfg, int64_t index);

/// Generator key stored as the image file name, e.g. "tinyshapes:7:42".
std::string scene_key(uint64_t seed, int64_t index);

/// Clean benchmark split: images [first_index, first_index + count). Image ids equal
/// the scene index, annotation ids are index * 1000 + k.
DetDataset make_benchmark(const SceneConfig& cfg, int64_t first_index, int64_t count);

/// Resolves an image entry: generator keys are re-rendered from `cfg` (with the
/// key's seed), anything else is read as a binary PGM relative to `base_dir`.
GrayImage load_image(const ImageInfo& info, const SceneConfig& cfg, const std::filesystem::path& base_dir = {});

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& img, const std::filesystem::path& path);

}  // namespace ntod
