#include "ntod/annotations.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"

namespace ntod {

using nlohmann::json;

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
    const double ih = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

bool clamp_to_image(BoundingBox& box, double width, double height) {
    auto clamp_axis = [](double lo, double hi, double limit) {
        lo = std::clamp(lo, 0.0, limit);
        hi = std::clamp(hi, 0.0, limit);
        if (hi - lo < 1.0) {
            // grow around the midpoint, then shift back inside the image
            const double mid = 0.5 * (lo + hi);
            lo = mid - 0.5;
            hi = mid + 0.5;
            if (lo < 0.0) { hi -= lo; lo = 0.0; }
            if (hi > limit) { lo -= hi - limit; hi = limit; }
            lo = std::max(lo, 0.0);
        }
        return std::pair{lo, hi};
    };
    const auto [x0, x1] = clamp_axis(box.x_min(), box.x_max(), width);
    const auto [y0, y1] = clamp_axis(box.y_min(), box.y_max(), height);
    if (x0 == box.x_min() && x1 == box.x_max() && y0 == box.y_min() && y1 == box.y_max()) return false;
    box = BoundingBox::from_corner(x0, y0, x1 - x0, y1 - y0);
    return true;
}

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::clean: return "clean";
        case Provenance::class_shifted: return "class_shifted";
        case Provenance::box_perturbed: return "box_perturbed";
        case Provenance::extra: return "extra";
        case Provenance::both_shifted_and_perturbed: return "both_shifted_and_perturbed";
    }
    return "clean";
}

Provenance provenance_from_string(std::string_view s) {
    for (auto p : {Provenance::clean, Provenance::class_shifted, Provenance::box_perturbed,
                   Provenance::extra, Provenance::both_shifted_and_perturbed}) {
        if (to_string(p) == s) return p;
    }
    throw DatasetError("unknown provenance '" + std::string(s) + "'");
}

const ImageInfo* DetDataset::find_image(int64_t image_id) const {
    for (const auto& img : images) {
        if (img.id == image_id) return &img;
    }
    return nullptr;
}

void DetDataset::validate() const {
    std::set<int64_t> image_ids;
    for (const auto& img : images) {
        if (!image_ids.insert(img.id).second) {
            throw IntegrityError("duplicate image id " + std::to_string(img.id), {img.id});
        }
    }
    std::set<int> class_ids;
    for (const auto& c : categories) class_ids.insert(c.id);
    const int C = num_classes();
    for (int k = 0; k < C; ++k) {
        if (!class_ids.count(k)) {
            throw IntegrityError("category ids must be exactly 0..C-1", {k});
        }
    }

    std::vector<int64_t> dangling_images;
    std::vector<int64_t> dangling_classes;
    std::vector<int64_t> duplicates;
    std::unordered_set<int64_t> seen;
    for (const auto& a : annotations) {
        if (!image_ids.count(a.image_id)) dangling_images.push_back(a.image_id);
        if (a.class_id < 0 || a.class_id >= C) dangling_classes.push_back(a.class_id);
        if (!seen.insert(a.id).second) duplicates.push_back(a.id);
    }
    for (auto* ids : {&dangling_images, &dangling_classes, &duplicates}) {
        std::sort(ids->begin(), ids->end());
        ids->erase(std::unique(ids->begin(), ids->end()), ids->end());
    }
    auto join = [](const std::vector<int64_t>& ids) {
        std::ostringstream os;
        for (size_t i = 0; i < ids.size(); ++i) os << (i ? ", " : "") << ids[i];
        return os.str();
    };
    if (!dangling_images.empty()) {
        throw IntegrityError("annotations reference missing image ids: " + join(dangling_images),
                             dangling_images);
    }
    if (!dangling_classes.empty()) {
        throw IntegrityError("annotations reference missing category ids: " + join(dangling_classes),
                             dangling_classes);
    }
    if (!duplicates.empty()) {
        throw IntegrityError("duplicate annotation ids: " + join(duplicates), duplicates);
    }
}

namespace {

const json& require_key(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
        throw DatasetError("missing key '" + std::string(key) + "' in " + where);
    }
    return obj.at(key);
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
    const json& v = require_key(obj, key, where);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw DatasetError("key '" + std::string(key) + "' in " + where + " has the wrong type");
    }
}

const json& require_array(const json& root, const char* key) {
    const json& v = require_key(root, key, "top level");
    if (!v.is_array()) throw DatasetError("key '" + std::string(key) + "' must be an array");
    return v;
}

void apply_provenance(DetDataset& ds, const std::filesystem::path& sidecar) {
    std::ifstream in(sidecar);
    if (!in) return;
    json side;
    try {
        side = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DatasetError("provenance sidecar is not valid JSON: " + std::string(e.what()));
    }
    for (auto& a : ds.annotations) {
        const auto key = std::to_string(a.id);
        if (side.contains(key)) a.provenance = provenance_from_string(side.at(key).get<std::string>());
    }
}

}  // namespace

DetDataset parse_dataset(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw DatasetError("annotation file is not valid JSON: " + std::string(e.what()));
    }
    DetDataset ds;

    const json& cats = require_array(root, "categories");
    for (size_t i = 0; i < cats.size(); ++i) {
        const std::string where = "categories[" + std::to_string(i) + "]";
        Category c;
        c.external_id = get_as<int>(cats[i], "id", where);
        c.name = get_as<std::string>(cats[i], "name", where);
        ds.categories.push_back(std::move(c));
    }
    std::sort(ds.categories.begin(), ds.categories.end(),
              [](const Category& a, const Category& b) { return a.external_id < b.external_id; });
    std::map<int, int> class_index;
    for (size_t k = 0; k < ds.categories.size(); ++k) {
        ds.categories[k].id = static_cast<int>(k);
        if (!class_index.emplace(ds.categories[k].external_id, static_cast<int>(k)).second) {
            throw IntegrityError("duplicate category id " + std::to_string(ds.categories[k].external_id),
                                 {ds.categories[k].external_id});
        }
    }

    const json& imgs = require_array(root, "images");
    for (size_t i = 0; i < imgs.size(); ++i) {
        const std::string where = "images[" + std::to_string(i) + "]";
        ImageInfo img;
        img.id = get_as<int64_t>(imgs[i], "id", where);
        img.width = get_as<int>(imgs[i], "width", where);
        img.height = get_as<int>(imgs[i], "height", where);
        img.file_name = get_as<std::string>(imgs[i], "file_name", where);
        ds.images.push_back(std::move(img));
    }

    const json& anns = require_array(root, "annotations");
    std::vector<int64_t> missing_categories;
    for (size_t i = 0; i < anns.size(); ++i) {
        const std::string where = "annotations[" + std::to_string(i) + "]";
        Annotation a;
        a.id = get_as<int64_t>(anns[i], "id", where);
        a.image_id = get_as<int64_t>(anns[i], "image_id", where);
        const int external_class = get_as<int>(anns[i], "category_id", where);
        const auto cls = class_index.find(external_class);
        if (cls == class_index.end()) {
            missing_categories.push_back(external_class);
            continue;
        }
        a.class_id = cls->second;
        const auto bbox = get_as<std::vector<double>>(anns[i], "bbox", where);
        if (bbox.size() != 4) throw DatasetError("key 'bbox' in " + where + " must have 4 entries");
        a.box = BoundingBox::from_corner(bbox[0], bbox[1], bbox[2], bbox[3]);
        if (a.box.w <= 0.0 || a.box.h <= 0.0) {
            log::warn("annotation " + std::to_string(a.id) + " has a degenerate box; clamped to 1 px");
            const double x0 = bbox[0];
            const double y0 = bbox[1];
            a.box = BoundingBox::from_corner(x0, y0, std::max(bbox[2], 1.0), std::max(bbox[3], 1.0));
        }
        ds.annotations.push_back(a);
    }
    if (!missing_categories.empty()) {
        std::sort(missing_categories.begin(), missing_categories.end());
        missing_categories.erase(std::unique(missing_categories.begin(), missing_categories.end()),
                                 missing_categories.end());
        std::string ids;
        for (auto id : missing_categories) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
        throw IntegrityError("annotations reference missing category ids: " + ids, missing_categories);
    }
    ds.validate();
    return ds;
}

DetDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open annotation file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    DetDataset ds = parse_dataset(buf.str());
    apply_provenance(ds, provenance_path(path));
    return ds;
}

std::string serialize_dataset(const DetDataset& ds) {
    json root;
    root["images"] = json::array();
    for (const auto& img : ds.images) {
        root["images"].push_back(
            {{"id", img.id}, {"width", img.width}, {"height", img.height}, {"file_name", img.file_name}});
    }
    root["annotations"] = json::array();
    for (const auto& a : ds.annotations) {
        root["annotations"].push_back({{"id", a.id},
                                       {"image_id", a.image_id},
                                       {"bbox", {a.box.x_min(), a.box.y_min(), a.box.w, a.box.h}},
                                       {"category_id", ds.categories.at(a.class_id).external_id}});
    }
    root["categories"] = json::array();
    for (const auto& c : ds.categories) root["categories"].push_back({{"id", c.external_id}, {"name", c.name}});
    return root.dump();
}

std::string serialize_provenance(const DetDataset& ds) {
    json side = json::object();
    for (const auto& a : ds.annotations) {
        if (a.provenance != Provenance::clean) side[std::to_string(a.id)] = std::string(to_string(a.provenance));
    }
    return side.dump(1);
}

std::filesystem::path provenance_path(const std::filesystem::path& dataset_path) {
    return dataset_path.string() + ".provenance.json";
}

void save_dataset(const DetDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    auto write = [](const std::filesystem::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw DatasetError("cannot write " + p.string());
        out << text;
        if (!out) throw DatasetError("write failed for " + p.string());
    };
    write(path, serialize_dataset(ds));
    write(provenance_path(path), serialize_provenance(ds));
}

}  // namespace ntod
