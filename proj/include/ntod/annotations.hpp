#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ntod {

/// Axis-aligned box in center form, pixel units.
struct BoundingBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 1.0;
    double h = 1.0;

    static BoundingBox from_corner(double x_min, double y_min, double w, double h) {
        return {x_min + 0.5 * w, y_min + 0.5 * h, w, h};
    }

    double x_min() const { return cx - 0.5 * w; }
    double y_min() const { return cy - 0.5 * h; }
    double x_max() const { return cx + 0.5 * w; }
    double y_max() const { return cy + 0.5 * h; }
    double area() const { return w * h; }

    bool operator==(const BoundingBox&) const = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Clamp the box to [0,width]x[0,height] and enforce a 1-pixel minimum side.
/// Returns true when the box had to be changed.
bool clamp_to_image(BoundingBox& box, double width, double height);

enum class Provenance { clean, class_shifted, box_perturbed, extra, both_shifted_and_perturbed };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct Annotation {
    int64_t id = 0;
    int64_t image_id = 0;
    BoundingBox box;
    int class_id = 0;
    Provenance provenance = Provenance::clean;

    bool operator==(const Annotation&) const = default;
};

/// `id` is the contiguous class index in [0, C-1]; `external_id` is the id
/// used in the file (COCO files often start at 1).
struct Category {
    int id = 0;
    std::string name;
    int external_id = 0;
    bool operator==(const Category&) const = default;
};

struct ImageInfo {
    int64_t id = 0;
    int width = 0;
    int height = 0;
    std::string file_name;  // path or generator key
    bool operator==(const ImageInfo&) const = default;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when an annotation points at an image or category that does not exist.
class IntegrityError : public DatasetError {
public:
    IntegrityError(const std::string& what, std::vector<int64_t> ids)
        : DatasetError(what), ids_(std::move(ids)) {}
    const std::vector<int64_t>& ids() const { return ids_; }

private:
    std::vector<int64_t> ids_;
};

struct DetDataset {
    std::vector<Category> categories;
    std::vector<ImageInfo> images;
    std::vector<Annotation> annotations;

    int num_classes() const { return static_cast<int>(categories.size()); }
    const ImageInfo* find_image(int64_t image_id) const;

    /// Throws IntegrityError on dangling image/category references, duplicate
    /// annotation ids or category ids outside [0, C-1].
    void validate() const;

    bool operator==(const DetDataset&) const = default;
};

DetDataset load_dataset(const std::filesystem::path& path);
DetDataset parse_dataset(std::string_view json_text);

/// Writes the COCO-style file and, next to it, `<path>.provenance.json`
/// holding the non-clean provenance flags.
void save_dataset(const DetDataset& ds, const std::filesystem::path& path);
std::string serialize_dataset(const DetDataset& ds);
std::string serialize_provenance(const DetDataset& ds);

std::filesystem::path provenance_path(const std::filesystem::path& dataset_path);

}  // namespace ntod
