#include "ntod/sweep.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ntod/log.hpp"

namespace ntod {

using nlohmann::json;

void to_json(json& j, const MethodToggles& m) {
    j = json{{"name", m.name}, {"clc", m.clc}, {"tlr", m.tlr}, {"rbr", m.rbr}};
}

void from_json(const json& j, MethodToggles& m) {
    m.name = j.value("name", std::string("baseline"));
    m.clc = j.value("clc", false);
    m.tlr = j.value("tlr", false);
    m.rbr = j.value("rbr", false);
}

void SweepSpec::validate() const {
    if (levels.empty() || methods.empty() || seeds.empty()) {
        throw std::invalid_argument("sweep needs at least one level, method and seed");
    }
    const bool any_noisy = std::any_of(levels.begin(), levels.end(), [](double l) { return l > 0.0; });
    if (any_noisy && kinds.empty()) throw std::invalid_argument("sweep needs at least one noise kind");
    for (double l : levels) {
        if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("noise levels must lie in [0, 1]");
    }
    if (std::find(kinds.begin(), kinds.end(), NoiseKind::mixed) != kinds.end()) {
        throw std::invalid_argument("mixed noise is not a sweep axis; run it through synthesize");
    }
    std::set<std::string> names;
    for (const auto& m : methods) {
        if (!names.insert(m.name).second) throw std::invalid_argument("duplicate method name " + m.name);
    }
    if (shard_count < 1 || shard_index < 0 || shard_index >= shard_count) {
        throw std::invalid_argument("shard_index must lie in [0, shard_count)");
    }
    detector.validate();
}

void to_json(json& j, const SweepSpec& s) {
    std::vector<std::string> kinds;
    for (auto k : s.kinds) kinds.emplace_back(to_string(k));
    j = json{{"kinds", kinds},   {"levels", s.levels},           {"methods", s.methods},
             {"seeds", s.seeds}, {"detector", s.detector},       {"shard_index", s.shard_index},
             {"shard_count", s.shard_count}};
}

void from_json(const json& j, SweepSpec& s) {
    const SweepSpec d;
    s = d;
    if (j.contains("kinds")) {
        s.kinds.clear();
        for (const auto& k : j.at("kinds")) s.kinds.push_back(noise_kind_from_string(k.get<std::string>()));
    }
    s.levels = j.value("levels", d.levels);
    if (j.contains("methods")) s.methods = j.at("methods").get<std::vector<MethodToggles>>();
    s.seeds = j.value("seeds", d.seeds);
    if (j.contains("detector")) s.detector = j.at("detector").get<DetectorConfig>();
    s.shard_index = j.value("shard_index", 0);
    s.shard_count = j.value("shard_count", 1);
}

std::string SweepCell::key() const {
    std::ostringstream os;
    if (level == 0.0) {
        os << "clean";
    } else {
        os << to_string(kind) << '@' << std::fixed << std::setprecision(4) << level;
    }
    os << '/' << method.name << "/seed" << seed;
    return os.str();
}

json to_json(const SweepRow& row) {
    json epochs = json::array();
    for (const auto& e : row.epochs) epochs.push_back(to_json(e));
    return json{{"key", row.cell.key()},
                {"kind", row.cell.level == 0.0 ? std::string("none") : std::string(to_string(row.cell.kind))},
                {"level", row.cell.level},
                {"method", row.cell.method},
                {"seed", row.cell.seed},
                {"status", row.ok ? "ok" : "failed"},
                {"error", row.error},
                {"eval", row.ok ? to_json(row.eval) : json(nullptr)},
                {"epochs", epochs},
                {"seconds", row.seconds}};
}

SweepRow sweep_row_from_json(const json& j) {
    SweepRow row;
    const std::string kind = j.at("kind").get<std::string>();
    row.cell.level = j.at("level").get<double>();
    row.cell.kind = kind == "none" ? NoiseKind::box : noise_kind_from_string(kind);
    row.cell.method = j.at("method").get<MethodToggles>();
    row.cell.seed = j.at("seed").get<uint64_t>();
    row.ok = j.at("status").get<std::string>() == "ok";
    row.error = j.value("error", std::string());
    row.seconds = j.value("seconds", 0.0);
    if (row.ok) {
        const auto& e = j.at("eval");
        row.eval.mAP = e.at("mAP").get<double>();
        row.eval.AP50 = e.at("AP50").get<double>();
        row.eval.AP75 = e.at("AP75").get<double>();
        row.eval.num_gts = e.value("num_gts", int64_t{0});
        row.eval.num_detections = e.value("num_detections", int64_t{0});
        row.eval.per_threshold = e.value("per_threshold", std::vector<double>{});
        for (int b = 0; b < kSizeBucketCount; ++b) {
            const std::string name = "AP_" + std::string(to_string(static_cast<SizeBucket>(b)));
            if (e.contains(name) && !e.at(name).is_null()) row.eval.bucket_ap[static_cast<size_t>(b)] = e.at(name).get<double>();
        }
        if (e.contains("per_class")) {
            for (const auto& v : e.at("per_class")) {
                row.eval.per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
            }
        }
    }
    for (const auto& e : j.value("epochs", json::array())) {
        EpochMetrics m;
        m.epoch = e.at("epoch").get<int>();
        m.lr = e.value("lr", 0.0);
        m.cls_loss = e.value("cls_loss", 0.0);
        m.reg_loss = e.value("reg_loss", 0.0);
        m.positives = e.value("positives", int64_t{0});
        m.filtered = e.value("filtered", int64_t{0});
        m.mean_pos_weight = e.value("mean_pos_weight", 1.0);
        m.mean_neg_weight = e.value("mean_neg_weight", 1.0);
        m.target_iou = e.value("target_iou", -1.0);
        m.seconds = e.value("seconds", 0.0);
        row.epochs.push_back(m);
    }
    return row;
}

std::vector<SweepCell> enumerate_cells(const SweepSpec& spec) {
    std::vector<SweepCell> cells;
    std::set<std::string> seen;
    for (uint64_t seed : spec.seeds) {
        for (const auto& method : spec.methods) {
            for (double level : spec.levels) {
                const std::vector<NoiseKind> kinds = level == 0.0 ? std::vector<NoiseKind>{NoiseKind::box} : spec.kinds;
                for (NoiseKind kind : kinds) {
                    SweepCell c{kind, level, method, seed};
                    if (seen.insert(c.key()).second) cells.push_back(c);
                }
            }
        }
    }
    return cells;
}

SweepRow run_cell(const SweepCell& cell, const SweepSpec& spec, const CleanSplits& data) {
    SweepRow row;
    row.cell = cell;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        DetDataset noisy = data.train;
        if (cell.level > 0.0) {
            NoiseSpec ns;
            ns.kind = cell.kind;
            ns.level = cell.level;
            ns.seed = cell.seed;
            NoiseResult nr = inject(data.train, ns);
            noisy = std::move(nr.dataset);
        }
        DetectorConfig cfg = spec.detector;
        cfg.clc = cell.method.clc;
        cfg.tlr = cell.method.tlr;
        cfg.rbr = cell.method.rbr;
        cfg.seed = cell.seed;
        TrainOptions opts;
        opts.scene = data.scene;
        opts.image_dir = data.image_dir;
        opts.reference = &data.train;
        TrainResult tr = train(noisy, cfg, opts);
        const auto dets = predict_dataset(tr.model, data.val, data.scene, data.image_dir);
        row.eval = compute_ap(dets, data.val);
        row.epochs = std::move(tr.epochs);
        row.ok = true;
    } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

std::vector<SweepRow> load_results(const std::filesystem::path& jsonl) {
    std::vector<SweepRow> rows;
    std::ifstream in(jsonl);
    if (!in) return rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            rows.push_back(sweep_row_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            // a torn final line from an interrupted run is dropped
            log::warn(jsonl.string() + ":" + std::to_string(line_no) + ": skipping unreadable row (" + e.what() + ")");
        }
    }
    return rows;
}

void write_results_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& csv) {
    const std::filesystem::path tmp = csv.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << "key,kind,level,method,clc,tlr,rbr,seed,status,mAP,AP50,AP75,AP_vt,AP_t,AP_s,AP_m,seconds\n";
        out << std::setprecision(6);
        for (const auto& r : rows) {
            out << r.cell.key() << ',' << (r.cell.level == 0.0 ? "none" : std::string(to_string(r.cell.kind))) << ','
                << r.cell.level << ',' << r.cell.method.name << ',' << r.cell.method.clc << ',' << r.cell.method.tlr
                << ',' << r.cell.method.rbr << ',' << r.cell.seed << ',' << (r.ok ? "ok" : "failed");
            if (r.ok) {
                out << ',' << r.eval.mAP << ',' << r.eval.AP50 << ',' << r.eval.AP75;
                for (const auto& b : r.eval.bucket_ap) {
                    out << ',';
                    if (b) out << *b;
                }
            } else {
                out << ",,,,,,,";
            }
            out << ',' << r.seconds << '\n';
        }
    }
    std::filesystem::rename(tmp, csv);
}

SweepOutcome run_sweep(const SweepSpec& spec, const CleanSplits& data, const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);
    const auto jsonl = out_dir / "results.jsonl";
    const auto csv = out_dir / "results.csv";

    SweepOutcome outcome;
    std::map<std::string, SweepRow> table;
    for (auto& r : load_results(jsonl)) {
        const std::string k = r.cell.key();
        auto it = table.find(k);
        if (it == table.end() || r.ok || !it->second.ok) table[k] = std::move(r);
    }

    const auto cells = enumerate_cells(spec);
    for (size_t i = 0; i < cells.size(); ++i) {
        if (static_cast<int>(i % static_cast<size_t>(spec.shard_count)) != spec.shard_index) continue;
        const SweepCell& cell = cells[i];
        const std::string k = cell.key();
        if (auto it = table.find(k); it != table.end() && it->second.ok) {
            ++outcome.skipped;
            continue;
        }
        log::info("sweep cell " + std::to_string(i + 1) + "/" + std::to_string(cells.size()) + ": " + k);
        SweepRow row = run_cell(cell, spec, data);
        ++outcome.ran;
        if (!row.ok) {
            ++outcome.failed;
            log::error("cell " + k + " failed: " + row.error);
        }
        {
            std::ofstream out(jsonl, std::ios::app);
            out << to_json(row).dump() << '\n';
            out.flush();
            if (!out) throw std::runtime_error("cannot append to " + jsonl.string());
        }
        table[k] = std::move(row);
        std::vector<SweepRow> snapshot;
        for (const auto& [key, r] : table) snapshot.push_back(r);
        write_results_csv(snapshot, csv);
    }
    for (auto& [key, r] : table) outcome.rows.push_back(std::move(r));
    if (outcome.ran == 0) write_results_csv(outcome.rows, csv);
    return outcome;
}

}  // namespace ntod
