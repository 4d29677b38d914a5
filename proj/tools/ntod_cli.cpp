#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ntod/annotations.hpp"
#include "ntod/detector.hpp"
#include "ntod/eval.hpp"
#include "ntod/log.hpp"
#include "ntod/noisegen.hpp"
#include "ntod/plot.hpp"
#include "ntod/scene.hpp"
#include "ntod/sweep.hpp"

using namespace ntod;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitPartial = 2;

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

SceneConfig load_scene(const std::string& path) {
    if (path.empty()) return {};
    SceneConfig cfg = read_json(path).get<SceneConfig>();
    cfg.validate();
    return cfg;
}

DetectorConfig load_detector(const std::string& path) {
    if (path.empty()) return {};
    return read_json(path).get<DetectorConfig>();
}

// "class_shift=0.2,box=0.1"
std::vector<NoiseComponent> parse_mix(const std::string& text) {
    std::vector<NoiseComponent> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("mix entries look like kind=level, got " + item);
        out.push_back({noise_kind_from_string(item.substr(0, eq)), std::stod(item.substr(eq + 1))});
    }
    return out;
}

struct GenerateArgs {
    fs::path out;
    int64_t train_count = 600;
    int64_t val_count = 150;
    int64_t val_first = 100000;
    std::string scene;
    uint64_t seed = 0;
    bool render = false;
};

int run_generate(const GenerateArgs& a) {
    SceneConfig scene = load_scene(a.scene);
    scene.seed = a.seed;
    scene.validate();
    fs::create_directories(a.out);
    DetDataset train = make_benchmark(scene, 0, a.train_count);
    DetDataset val = make_benchmark(scene, a.val_first, a.val_count);
    if (a.render) {
        fs::create_directories(a.out / "images");
        for (auto* ds : {&train, &val}) {
            for (auto& img : ds->images) {
                const GrayImage pixels = load_image(img, scene);
                img.file_name = "images/" + std::to_string(img.id) + ".pgm";
                write_pgm(pixels, a.out / img.file_name);
            }
        }
    }
    save_dataset(train, a.out / "train.json");
    save_dataset(val, a.out / "val.json");
    write_text(a.out / "scene.json", json(scene).dump(2));
    std::cout << "wrote " << train.images.size() << " train / " << val.images.size() << " val images to "
              << a.out.string() << "\n";
    return kExitOk;
}

struct SynthesizeArgs {
    fs::path in;
    fs::path out;
    std::string kind = "box";
    double level = 0.0;
    uint64_t seed = 0;
    std::string mix;
    fs::path report;
};

int run_synthesize(const SynthesizeArgs& a) {
    const DetDataset clean = load_dataset(a.in);
    NoiseSpec spec;
    spec.kind = noise_kind_from_string(a.kind);
    spec.level = a.level;
    spec.seed = a.seed;
    if (!a.mix.empty()) {
        spec.kind = NoiseKind::mixed;
        spec.mixed_components = parse_mix(a.mix);
    }
    const NoiseResult r = inject(clean, spec);
    save_dataset(r.dataset, a.out);
    const NoiseReport report = noise_report(clean, r.dataset);
    std::cout << report.to_table();
    if (!a.report.empty()) write_text(a.report, report.to_json());
    return kExitOk;
}

struct TrainArgs {
    fs::path data;
    fs::path out;
    std::string scene;
    std::string config;
    fs::path reference;
    fs::path metrics;
    fs::path dump_dir;
    int64_t dump_image = -1;
    bool clc = false, tlr = false, rbr = false;
    int epochs = 0;
    int64_t seed = -1;
};

int run_train(const TrainArgs& a) {
    const DetDataset data = load_dataset(a.data);
    DetectorConfig cfg = load_detector(a.config);
    cfg.clc = cfg.clc || a.clc;
    cfg.tlr = cfg.tlr || a.tlr;
    cfg.rbr = cfg.rbr || a.rbr;
    if (a.epochs > 0) cfg.epochs = a.epochs;
    if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
    if (cfg.num_classes != data.num_classes()) {
        log::info("setting num_classes to " + std::to_string(data.num_classes()) + " from the dataset");
        cfg.num_classes = data.num_classes();
    }

    TrainOptions opts;
    opts.scene = load_scene(a.scene);
    opts.image_dir = a.data.parent_path();
    opts.divergence_dump = a.out.string() + ".diverged.json";
    DetDataset reference;
    if (!a.reference.empty()) {
        reference = load_dataset(a.reference);
        opts.reference = &reference;
    }
    std::ofstream metrics;
    if (!a.metrics.empty()) metrics.open(a.metrics, std::ios::trunc);
    opts.on_epoch = [&](const EpochMetrics& m) {
        std::printf("epoch %2d  lr %.5f  cls %.4f  reg %.4f  pos-w %.3f  neg-w %.3f  filtered %lld  %.1fs\n", m.epoch,
                    m.lr, m.cls_loss, m.reg_loss, m.mean_pos_weight, m.mean_neg_weight,
                    static_cast<long long>(m.filtered), m.seconds);
        std::fflush(stdout);
        if (metrics) metrics << to_json(m).dump() << '\n' << std::flush;
    };
    if (!a.dump_dir.empty()) {
        const int64_t target = a.dump_image >= 0 ? a.dump_image : data.images.at(0).id;
        const ImageInfo* info = data.find_image(target);
        if (!info) throw std::invalid_argument("--dump-image " + std::to_string(target) + " is not in the dataset");
        fs::create_directories(a.dump_dir);
        opts.on_weights = [&, target, info](int64_t image_id, int epoch, const LocationWeights& w) {
            if (image_id != target || epoch != cfg.epochs) return;
            WeightDump d{image_id, epoch, a.out.stem().string(), *info, opts.scene, cfg.strides, w};
            if (!fs::exists(a.dump_dir / d.image.file_name) && d.image.file_name.rfind("tinyshapes:", 0) != 0) {
                d.image.file_name = fs::absolute(opts.image_dir / d.image.file_name).string();
            }
            write_text(a.dump_dir / (a.out.stem().string() + ".weights.json"), to_json(d).dump());
        };
    }
    TrainResult r = train(data, cfg, opts);
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    r.model.save(a.out);
    std::cout << "saved " << a.out.string() << "\n";
    return kExitOk;
}

struct EvalArgs {
    fs::path model;
    fs::path detections;
    fs::path data;
    std::string scene;
    fs::path out;
    fs::path save_detections;
};

int run_eval(const EvalArgs& a) {
    const DetDataset gts = load_dataset(a.data);
    std::vector<Detection> dets;
    if (!a.detections.empty()) {
        std::ifstream in(a.detections);
        if (!in) throw std::runtime_error("cannot open " + a.detections.string());
        std::stringstream buf;
        buf << in.rdbuf();
        dets = parse_detections(buf.str(), gts);
    } else if (!a.model.empty()) {
        Model model = Model::load(a.model);
        dets = predict_dataset(model, gts, load_scene(a.scene), a.data.parent_path());
    } else {
        throw std::invalid_argument("eval needs --model or --detections");
    }
    if (!a.save_detections.empty()) write_text(a.save_detections, serialize_detections(dets, gts));
    const EvalResult r = compute_ap(dets, gts);
    std::printf("mAP %.4f  AP50 %.4f  AP75 %.4f", r.mAP, r.AP50, r.AP75);
    const char* names[] = {"vt", "t", "s", "m"};
    for (int b = 0; b < kSizeBucketCount; ++b) {
        if (const auto& v = r.bucket_ap[static_cast<size_t>(b)]) std::printf("  AP_%s %.4f", names[b], *v);
    }
    std::printf("\n");
    if (!a.out.empty()) write_text(a.out, to_json(r).dump(2));
    return kExitOk;
}

struct SweepArgs {
    fs::path spec;
    fs::path data_dir;
    fs::path out;
    int shard_index = -1;
    int shard_count = 0;
};

int run_sweep_cmd(const SweepArgs& a) {
    SweepSpec spec = read_json(a.spec).get<SweepSpec>();
    if (a.shard_count > 0) {
        spec.shard_count = a.shard_count;
        spec.shard_index = a.shard_index;
    }
    CleanSplits data;
    data.train = load_dataset(a.data_dir / "train.json");
    data.val = load_dataset(a.data_dir / "val.json");
    data.scene = fs::exists(a.data_dir / "scene.json") ? load_scene((a.data_dir / "scene.json").string()) : SceneConfig{};
    data.image_dir = a.data_dir;
    spec.detector.num_classes = data.train.num_classes();
    const SweepOutcome out = run_sweep(spec, data, a.out);
    std::cout << "ran " << out.ran << ", skipped " << out.skipped << ", failed " << out.failed << "; table at "
              << (a.out / "results.csv").string() << "\n";
    return out.failed > 0 ? kExitPartial : kExitOk;
}

struct PlotArgs {
    fs::path results;
    fs::path artifacts;
    fs::path out;
};

int run_plot(const PlotArgs& a) {
    const auto rows = load_results(a.results);
    for (const auto& p : plot_report(rows, a.artifacts, a.out)) std::cout << p.string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tiny-object detection under annotation noise"};
    app.require_subcommand(1);
    std::string level = "info";
    app.add_option("--log-level", level, "debug, info, warn, error or off")->check(
        CLI::IsMember({"debug", "info", "warn", "error", "off"}));

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Render the synthetic benchmark (clean train/val splits)");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--train", gen.train_count, "Training images");
    g->add_option("--val", gen.val_count, "Validation images");
    g->add_option("--val-first", gen.val_first, "Scene index of the first validation image");
    g->add_option("--scene", gen.scene, "Scene config JSON");
    g->add_option("--seed", gen.seed, "Scene seed");
    g->add_flag("--render", gen.render, "Write PGM files instead of generator keys");

    SynthesizeArgs syn;
    auto* s = app.add_subcommand("synthesize", "Inject annotation noise into a clean dataset");
    s->add_option("--in", syn.in, "Clean dataset")->required()->check(CLI::ExistingFile);
    s->add_option("--out", syn.out, "Noisy dataset")->required();
    s->add_option("--kind", syn.kind, "missing, extra, class_shift or box");
    s->add_option("--level", syn.level, "Noise level in [0, 1]");
    s->add_option("--seed", syn.seed, "Noise seed");
    s->add_option("--mix", syn.mix, "Mixed noise, e.g. class_shift=0.2,box=0.1");
    s->add_option("--report", syn.report, "Write the noise report as JSON");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the detector");
    t->add_option("--data", tr.data, "Training dataset")->required()->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--scene", tr.scene, "Scene config JSON");
    t->add_option("--config", tr.config, "Detector config JSON");
    t->add_option("--reference", tr.reference, "Clean annotations for target diagnostics");
    t->add_option("--metrics", tr.metrics, "Per-epoch metrics JSONL");
    t->add_option("--dump-weights", tr.dump_dir, "Directory for the final-epoch weight dump");
    t->add_option("--dump-image", tr.dump_image, "Image id of the weight dump");
    t->add_option("--epochs", tr.epochs, "Override the epoch count");
    t->add_option("--seed", tr.seed, "Override the training seed");
    t->add_flag("--clc", tr.clc, "Enable class-label correction");
    t->add_flag("--tlr", tr.tlr, "Enable trend-guided reweighting");
    t->add_flag("--rbr", tr.rbr, "Enable box regeneration");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate against clean annotations");
    e->add_option("--data", ev.data, "Clean evaluation dataset")->required()->check(CLI::ExistingFile);
    e->add_option("--model", ev.model, "Checkpoint")->check(CLI::ExistingFile);
    e->add_option("--detections", ev.detections, "COCO-style detection list")->check(CLI::ExistingFile);
    e->add_option("--scene", ev.scene, "Scene config JSON");
    e->add_option("--out", ev.out, "Write the result as JSON");
    e->add_option("--save-detections", ev.save_detections, "Write model detections as JSON");

    SweepArgs sw;
    auto* w = app.add_subcommand("sweep", "Run a noise x method x seed grid");
    w->add_option("--spec", sw.spec, "Sweep spec JSON")->required()->check(CLI::ExistingFile);
    w->add_option("--data-dir", sw.data_dir, "Directory written by generate")->required()->check(CLI::ExistingDirectory);
    w->add_option("--out", sw.out, "Results directory")->required();
    w->add_option("--shard-index", sw.shard_index, "Shard to run");
    w->add_option("--shard-count", sw.shard_count, "Number of shards");

    PlotArgs pl;
    auto* p = app.add_subcommand("plot", "Render SVG figures from a results table");
    p->add_option("--results", pl.results, "results.jsonl")->required()->check(CLI::ExistingFile);
    p->add_option("--artifacts", pl.artifacts, "Directory with weight dumps and curve files");
    p->add_option("--out", pl.out, "Figure directory")->required();

    CLI11_PARSE(app, argc, argv);

    const std::map<std::string, log::Level> levels{{"debug", log::Level::debug}, {"info", log::Level::info},
                                                   {"warn", log::Level::warn},   {"error", log::Level::error},
                                                   {"off", log::Level::off}};
    log::set_level(levels.at(level));

    try {
        if (*g) return run_generate(gen);
        if (*s) return run_synthesize(syn);
        if (*t) return run_train(tr);
        if (*e) return run_eval(ev);
        if (*w) return run_sweep_cmd(sw);
        if (*p) return run_plot(pl);
    } catch (const std::exception& ex) {
        log::error(ex.what());
        return kExitError;
    }
    return kExitError;
}
