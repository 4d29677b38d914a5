#include "ntod/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"

namespace ntod {

using nlohmann::json;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

}  // namespace

std::string render_line_chart(const std::vector<Series>& series, const ChartStyle& style) {
    const double left = 60, right = 170, top = 40, bottom = 50;
    const double pw = style.width - left - right;
    const double ph = style.height - top - bottom;

    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << style.width << "\" height=\"" << style.height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << style.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(style.title) << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0;
        const double yv = y0 + (y1 - y0) * k / 4.0;
        os << "<text x=\"" << sx(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
           << "</text>\n";
        os << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy(yv) << "\" y2=\"" << sy(yv)
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv)
           << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << style.height - 10 << "\" text-anchor=\"middle\">"
       << escape(style.x_label) << "</text>\n";
    os << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << escape(style.y_label) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % std::size(kPalette)];
        const size_t n = std::min(s.x.size(), s.y.size());
        if (n > 1) {
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
            for (size_t i = 0; i < n; ++i) os << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
            os << "\"/>\n";
        }
        for (size_t i = 0; i < n; ++i) {
            os << "<circle cx=\"" << sx(s.x[i]) << "\" cy=\"" << sy(s.y[i]) << "\" r=\"3.5\" fill=\"" << color
               << "\"/>\n";
        }
        const double ly = top + 14 + 18 * static_cast<double>(si);
        os << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string render_weight_overlay(const GrayImage& image, const std::vector<LevelGeometry>& levels,
                                  const LocationWeights& weights, const std::string& title) {
    constexpr int kScale = 4;
    const int panel_w = image.width * kScale;
    const int panel_h = image.height * kScale;
    const int gap = 16;
    const int n = static_cast<int>(std::min(levels.size(), weights.size()));
    const int width = std::max(1, n) * (panel_w + gap) + gap;
    const int height = panel_h + 60;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"12\" shape-rendering=\"crispEdges\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << gap << "\" y=\"20\" font-size=\"14\">" << escape(title) << "</text>\n";
    for (int l = 0; l < n; ++l) {
        const int ox = gap + l * (panel_w + gap);
        const int oy = 36;
        os << "<g transform=\"translate(" << ox << ',' << oy << ")\">\n";
        for (int y = 0; y < image.height; ++y) {
            for (int x = 0; x < image.width; ++x) {
                const int v = std::clamp(static_cast<int>(std::lround(image.at(x, y) * 255.0)), 0, 255);
                os << "<rect x=\"" << x * kScale << "\" y=\"" << y * kScale << "\" width=\"" << kScale
                   << "\" height=\"" << kScale << "\" fill=\"rgb(" << v << ',' << v << ',' << v << ")\"/>";
            }
            os << '\n';
        }
        const LevelGeometry& lv = levels[static_cast<size_t>(l)];
        const auto& w = weights[static_cast<size_t>(l)];
        const int cell = lv.stride * kScale;
        for (int loc = 0; loc < lv.size() && loc < static_cast<int>(w.size()); ++loc) {
            const double wv = w[static_cast<size_t>(loc)];
            if (std::abs(wv - 1.0) < 1e-12) continue;
            // below 1 shades blue, above 1 shades red
            const double strength = std::clamp(std::abs(1.0 - wv), 0.0, 1.0);
            const char* color = wv < 1.0 ? "#2060ff" : "#ff3020";
            os << "<rect x=\"" << (loc % lv.grid_w) * cell << "\" y=\"" << (loc / lv.grid_w) * cell << "\" width=\""
               << cell << "\" height=\"" << cell << "\" fill=\"" << color << "\" fill-opacity=\""
               << fmt(0.15 + 0.6 * strength) << "\"/>\n";
        }
        os << "<text x=\"0\" y=\"" << panel_h + 16 << "\">stride " << lv.stride << "</text>\n";
        os << "</g>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<Series> noise_impact_series(const std::vector<SweepRow>& rows) {
    // (kind, method) -> level -> mAP values; clean rows join every kind of their method
    std::map<std::string, std::vector<double>> clean;
    std::map<std::pair<std::string, std::string>, std::map<double, std::vector<double>>> grouped;
    for (const auto& r : rows) {
        if (!r.ok) continue;
        if (r.cell.level == 0.0) {
            clean[r.cell.method.name].push_back(r.eval.mAP);
        } else {
            grouped[{std::string(to_string(r.cell.kind)), r.cell.method.name}][r.cell.level].push_back(r.eval.mAP);
        }
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    std::vector<Series> out;
    for (auto& [key, by_level] : grouped) {
        if (auto it = clean.find(key.second); it != clean.end()) by_level[0.0] = it->second;
        Series s;
        s.name = key.first + " / " + key.second;
        for (const auto& [level, values] : by_level) {
            s.x.push_back(level);
            s.y.push_back(mean(values));
        }
        out.push_back(std::move(s));
    }
    if (grouped.empty()) {
        for (const auto& [method, values] : clean) out.push_back({"clean / " + method, {0.0}, {mean(values)}});
    }
    return out;
}

std::vector<Series> target_iou_series(const std::vector<SweepRow>& rows) {
    std::vector<Series> out;
    for (const auto& r : rows) {
        if (!r.ok) continue;
        Series s;
        s.name = r.cell.key();
        for (const auto& e : r.epochs) {
            if (e.target_iou < 0.0) continue;
            s.x.push_back(e.epoch);
            s.y.push_back(e.target_iou);
        }
        if (!s.x.empty()) out.push_back(std::move(s));
    }
    return out;
}

json to_json(const WeightDump& d) {
    return json{{"image_id", d.image_id},
                {"epoch", d.epoch},
                {"label", d.label},
                {"image", {{"id", d.image.id}, {"width", d.image.width}, {"height", d.image.height},
                           {"file_name", d.image.file_name}}},
                {"scene", d.scene},
                {"strides", d.strides},
                {"weights", d.weights}};
}

WeightDump weight_dump_from_json(const json& j) {
    WeightDump d;
    d.image_id = j.at("image_id").get<int64_t>();
    d.epoch = j.value("epoch", 0);
    d.label = j.value("label", std::string());
    const auto& img = j.at("image");
    d.image.id = img.at("id").get<int64_t>();
    d.image.width = img.at("width").get<int>();
    d.image.height = img.at("height").get<int>();
    d.image.file_name = img.at("file_name").get<std::string>();
    d.scene = j.at("scene").get<SceneConfig>();
    d.strides = j.at("strides").get<std::vector<int>>();
    d.weights = j.at("weights").get<LocationWeights>();
    return d;
}

std::vector<Series> series_from_json(const json& j) {
    std::vector<Series> out;
    for (const auto& s : j.at("series")) {
        out.push_back({s.value("name", std::string()), s.at("x").get<std::vector<double>>(),
                       s.at("y").get<std::vector<double>>()});
    }
    return out;
}

std::vector<std::filesystem::path> plot_report(const std::vector<SweepRow>& rows,
                                               const std::filesystem::path& artifacts_dir,
                                               const std::filesystem::path& out_dir) {
    if (rows.empty()) throw std::invalid_argument("results table is empty");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;

    const auto impact = out_dir / "noise_impact.svg";
    write_file(impact, render_line_chart(noise_impact_series(rows), {"mAP vs. noise level", "noise level", "mAP"}));
    written.push_back(impact);

    const auto iou_series = target_iou_series(rows);
    if (!iou_series.empty()) {
        const auto path = out_dir / "target_iou.svg";
        write_file(path, render_line_chart(iou_series, {"regression target vs. clean box", "epoch", "mean IoU"}));
        written.push_back(path);
    }

    bool any_dump = false;
    if (!artifacts_dir.empty() && std::filesystem::is_directory(artifacts_dir)) {
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(artifacts_dir)) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            const std::string name = p.filename().string();
            auto ends_with = [&](const std::string& suffix) {
                return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
            };
            try {
                if (ends_with(".weights.json")) {
                    std::ifstream in(p);
                    const WeightDump d = weight_dump_from_json(json::parse(in));
                    const GrayImage img = load_image(d.image, d.scene, artifacts_dir);
                    const auto levels = make_levels(d.strides, img.width, img.height);
                    const auto out = out_dir / (name.substr(0, name.size() - 13) + ".overlay.svg");
                    const std::string title = (d.label.empty() ? "" : d.label + ", ") + "image " +
                                              std::to_string(d.image_id) + ", epoch " + std::to_string(d.epoch);
                    write_file(out, render_weight_overlay(img, levels, d.weights, title));
                    written.push_back(out);
                    any_dump = true;
                } else if (ends_with(".curves.json")) {
                    std::ifstream in(p);
                    const json j = json::parse(in);
                    const auto out = out_dir / (name.substr(0, name.size() - 12) + ".svg");
                    write_file(out, render_line_chart(series_from_json(j),
                                                      {j.value("title", std::string("IoU with clean box")),
                                                       j.value("x_label", std::string("iteration")),
                                                       j.value("y_label", std::string("IoU"))}));
                    written.push_back(out);
                }
            } catch (const std::exception& e) {
                log::warn("skipping " + p.string() + ": " + e.what());
            }
        }
    }
    if (!any_dump) log::warn("no weight dumps found; skipping sample-weight overlays");
    return written;
}

}  // namespace ntod
