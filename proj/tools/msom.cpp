// msom: command-line front end for the segmentation pipeline.
//
// Every run ends with exactly one JSON line on stdout:
//   {"command": ..., "status": "ok" | "error", "exit": code, ...}
// Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "msom/bench.hpp"
#include "msom/error.hpp"
#include "msom/glocal.hpp"
#include "msom/io.hpp"
#include "msom/raster.hpp"
#include "msom/render.hpp"
#include "msom/superpixel.hpp"
#include "msom/synth.hpp"
#include "msom/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msom;

namespace {

enum class Level { debug, info, warn, error, quiet };

struct Globals {
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool deterministic = false;
    std::string log_level = "info";
    Level level = Level::info;
};

Globals g;

// JSON-lines log records on stderr.
void log(Level l, const std::string& msg, json extra = json::object()) {
    if (l < g.level) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    extra["level"] = names[static_cast<int>(l)];
    extra["msg"] = msg;
    std::cerr << extra.dump() << '\n';
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v <= 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw UsageError("bad size '" + item + "' in '" + s + "'");
        }
    }
    if (out.empty()) throw UsageError("empty size list");
    return out;
}

std::array<double, 3> parse_ratios(const std::string& s) {
    std::array<double, 3> r{};
    std::stringstream ss(s);
    std::size_t k = 0;
    for (std::string item; std::getline(ss, item, ',');) {
        if (k == 3) throw UsageError("--ratios takes three values");
        try {
            r[k++] = std::stod(item);
        } catch (const std::exception&) {
            throw UsageError("bad ratio '" + item + "'");
        }
    }
    if (k != 3) throw UsageError("--ratios takes three values");
    return r;
}

void require_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw DataError(std::string(what) + " not found: " + p.string());
}

// Train configuration with precedence flag > config file > default.
struct TrainFlags {
    std::string config;
    std::optional<std::size_t> batch_size, epochs, hidden, n_sp, n_max, max_steps, d_state;
    std::optional<double> lr, alpha, beta, compactness;
    bool no_superpixels = false;

    void attach(CLI::App* c) {
        c->add_option("--config", config, "JSON file whose keys mirror the train config");
        c->add_option("--batch-size", batch_size, "Patches per step [32]");
        c->add_option("--epochs", epochs, "Training epochs [50]");
        c->add_option("--hidden", hidden, "Hidden width D [64]");
        c->add_option("--d-state", d_state, "Scan state size [16]");
        c->add_option("--lr", lr, "Adam learning rate [0.001]");
        c->add_option("--alpha", alpha, "Local loss weight [0.7]");
        c->add_option("--beta", beta, "Global loss weight [0.3]");
        c->add_option("--nsp", n_sp, "Superpixel target per patch [500]");
        c->add_option("--n-max", n_max, "Token capacity per patch [600]");
        c->add_option("--compactness", compactness, "SLIC compactness [10]");
        c->add_option("--max-steps", max_steps, "Stop after this many optimizer steps, 0 = no cap [0]");
        c->add_flag("--no-superpixels", no_superpixels, "Use every pixel as its own token");
    }

    TrainConfig resolve() const {
        TrainConfig c;
        if (!config.empty()) {
            require_file(config, "config file");
            c = TrainConfig::from_json(io::read_json_file(config));
        }
        if (batch_size) c.batch_size = *batch_size;
        if (epochs) c.epochs = *epochs;
        if (hidden) c.hidden = *hidden;
        if (d_state) c.d_state = *d_state;
        if (lr) c.lr = *lr;
        if (alpha) c.alpha = *alpha;
        if (beta) c.beta = *beta;
        if (n_sp) c.n_sp_target = *n_sp;
        if (n_max) c.n_max = *n_max;
        if (compactness) c.compactness = *compactness;
        if (max_steps) c.max_steps = *max_steps;
        if (no_superpixels) c.superpixels = false;
        if (g.seed_given) c.seed = g.seed;
        c.validate();
        return c;
    }
};

struct Dataset {
    DatasetManifest manifest;
    std::size_t classes = 0;
};

Dataset open_manifest(const fs::path& p) {
    require_file(p, "manifest");
    Dataset d;
    d.manifest = read_manifest(p);
    d.classes = d.manifest.scheme.size();
    return d;
}

std::vector<Sample> samples_for(const Dataset& d, const fs::path& manifest_path, Split s, const TrainConfig& c,
                                const std::string& sp_cache) {
    return prepare_samples(load_split(d.manifest, manifest_path, s), c, sp_cache);
}

json summary(const MetricSummary& m) { return {{"oa", m.oa}, {"aa", m.aa}, {"kappa", m.kappa}, {"miou", m.miou}}; }

// ---- subcommands ------------------------------------------------------------

json cmd_synth(const fs::path& out, SynthConfig sc, std::size_t H, std::size_t W) {
    if (out.empty()) throw UsageError("synth needs --out");
    sc.seed = g.seed;
    const Scene s = synth_scene(sc, H, W);
    fs::create_directories(out);
    write_scene_bands(out / "scene.bands", s);
    write_scene_raster(out / "scene.labels", H, W, s.labels);
    return {{"bands", (out / "scene.bands").string()}, {"labels", (out / "scene.labels").string()},
            {"classes", sc.classes}};
}

json cmd_ingest(const std::string& scene, const std::string& labels, const std::string& valid, std::size_t size,
                double dominance, const std::string& ratios, std::size_t classes, const fs::path& out) {
    if (out.empty()) throw UsageError("ingest needs --out");
    require_file(scene, "scene");
    require_file(labels, "label raster");
    if (!valid.empty()) require_file(valid, "validity raster");
    if (classes == 0 || classes > 13) throw UsageError("--classes must be in 1..13");
    const Scene s = read_scene(scene, labels, valid);
    ExtractOptions eo;
    eo.size = size;
    eo.dominance = dominance;
    auto patches = extract_patches(s, eo);
    for (const auto& p : patches) p.validate(classes);
    DatasetManifest m = split_dataset(patches, parse_ratios(ratios), g.seed, ClassScheme::land_cover_prefix(classes));
    fs::create_directories(out / "patches");
    for (std::size_t i = 0; i < patches.size(); ++i) write_patch(out / "patches" / (patches[i].patch_id + ".patch"), patches[i]);
    for (auto& e : m.entries) e.path = "patches/" + e.patch_id + ".patch";
    write_manifest(out / "manifest.json", m);
    if (m.too_few_patches) log(Level::warn, "fewer than 3 patches kept; all assigned to train");
    const auto sizes = m.split_sizes();
    return {{"manifest", (out / "manifest.json").string()},
            {"patches", patches.size()},
            {"train", sizes[0]},
            {"val", sizes[1]},
            {"test", sizes[2]}};
}

json cmd_segment(const std::string& patch, const std::string& manifest, const SlicOptions& o, const fs::path& out,
                 const std::string& png) {
    if (out.empty()) throw UsageError("segment needs --out");
    if (patch.empty() == manifest.empty()) throw UsageError("segment takes exactly one of --patch or --manifest");
    auto one = [&](const Patch& p, const fs::path& dest) {
        SlicOptions so = o;
        so.seed = g.seed;
        auto m = slic(pca_project(p, 3), so);
        write_superpixels(dest, m);
        return m;
    };
    if (!patch.empty()) {
        require_file(patch, "patch");
        const Patch p = read_patch(patch);
        const auto m = one(p, out);
        if (!png.empty()) render_boundaries(png, p, m);
        return {{"out", out.string()},
                {"n_sp", m.n_sp},
                {"reduction_factor", reduction_factor(p.height, p.width, m.n_sp)}};
    }
    const Dataset d = open_manifest(manifest);
    fs::create_directories(out);
    std::size_t count = 0, total_sp = 0;
    const fs::path base = fs::path(manifest).parent_path();
    for (const auto& e : d.manifest.entries) {
        fs::path pp(e.path);
        if (pp.is_relative()) pp = base / pp;
        const auto m = one(read_patch(pp), out / (e.patch_id + ".sp"));
        ++count;
        total_sp += m.n_sp;
    }
    return {{"out", out.string()},
            {"patches", count},
            {"mean_n_sp", count ? static_cast<double>(total_sp) / static_cast<double>(count) : 0.0}};
}

json cmd_train(const std::string& manifest, const TrainFlags& flags, const std::string& sp_cache, const fs::path& out) {
    if (out.empty()) throw UsageError("train needs --out");
    const TrainConfig c = flags.resolve();
    const Dataset d = open_manifest(manifest);
    auto tr = samples_for(d, manifest, Split::train, c, sp_cache);
    auto va = samples_for(d, manifest, Split::val, c, sp_cache);
    if (tr.empty()) throw DataError("manifest " + manifest + " has an empty train split");
    if (va.empty()) throw DataError("manifest " + manifest + " has an empty val split");
    fs::create_directories(out);
    io::write_json_file(out / "train_config.json", c.to_json());
    log(Level::info, "training", {{"train", tr.size()}, {"val", va.size()}, {"epochs", c.epochs}});
    auto r = fit(tr, va, c, d.classes, out);
    for (const auto& e : r.epochs) log(Level::debug, "epoch", e.to_json());
    json s = {{"epochs", r.epochs.size()},
              {"steps", r.step_losses.size()},
              {"best_epoch", r.best_epoch},
              {"best_val_oa", r.best_val_oa},
              {"final_val", summary(r.epochs.back().val)}};
    io::write_json_file(out / "summary.json", s);
    s["out"] = out.string();
    return s;
}

// Rebuilds the training-time preprocessing recorded in a checkpoint.
struct Loaded {
    GLocalParams params;
    Normalizer norm;
    TrainConfig config;
};

Loaded open_checkpoint(const fs::path& ckpt) {
    require_file(ckpt, "checkpoint");
    json meta;
    Loaded l;
    l.params = load_checkpoint(ckpt, &meta);
    try {
        l.norm = Normalizer::from_json(meta.at("normalizer"));
        l.config = TrainConfig::from_json(meta.at("train_config"));
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + ckpt.string() + " lacks training metadata: " + e.what());
    }
    return l;
}

void write_f32_map(const fs::path& p, const Tensor& t) {
    auto out = io::open_out(p);
    json shape = json::array();
    for (auto d : t.shape()) shape.push_back(d);
    io::write_header(out, {{"dtype", "f32le"}, {"shape", shape}});
    io::write_f32(out, t.data());
}

json cmd_infer(const fs::path& ckpt, const std::string& patch, const std::string& sp, const fs::path& out) {
    if (out.empty()) throw UsageError("infer needs --out-maps");
    const Loaded l = open_checkpoint(ckpt);
    require_file(patch, "patch");
    Sample s;
    s.patch = read_patch(patch);
    if (!sp.empty()) {
        require_file(sp, "superpixel map");
        s.sp = read_superpixels(sp);
    } else {
        s.sp = compute_superpixels(s.patch, l.config);
    }
    std::vector<Sample> one{s};
    std::vector<std::size_t> idx{0};
    const std::size_t K = l.params.config.classes;
    one[0].patch.labels.clear();
    Batch b = make_batch(one, idx, l.norm, l.params.config.n_max, K);
    auto o = forward(b.x, b.maps, l.params);
    fs::create_directories(out);
    const auto scheme = ClassScheme::land_cover_prefix(K);
    const std::size_t H = s.patch.height, W = s.patch.width;
    const std::pair<const char*, const Tensor*> maps[] = {
        {"local", &o.m_local}, {"global", &o.m_global_up}, {"final", &o.m_final}};
    for (auto [name, t] : maps) {
        write_f32_map(out / (std::string("logits_") + name + ".f32"), *t);
        const auto cls = predict_classes(*t);
        write_scene_raster(out / (std::string("classes_") + name + ".u8"), H, W, cls);
        render_classes(out / (std::string("classes_") + name + ".png"), cls, H, W, scheme);
    }
    return {{"out", out.string()}, {"n_sp", s.sp.n_sp}, {"classes", K}};
}

json cmd_eval(const fs::path& ckpt, const std::string& manifest, const std::string& split, const std::string& sp_cache,
              const fs::path& out) {
    if (out.empty()) throw UsageError("eval needs --out");
    const Split sp = split_from_string(split);
    const Loaded l = open_checkpoint(ckpt);
    const Dataset d = open_manifest(manifest);
    if (d.classes != l.params.config.classes)
        throw DataError("checkpoint has " + std::to_string(l.params.config.classes) + " classes, manifest has " +
                        std::to_string(d.classes));
    auto samples = samples_for(d, manifest, sp, l.config, sp_cache);
    if (samples.empty()) throw DataError("manifest " + manifest + " has an empty " + split + " split");
    const auto e = evaluate(l.params, samples, l.norm, l.config);
    json report = {{"split", split},
                   {"patches", samples.size()},
                   {"final", metrics_json(e.final, &d.manifest.scheme)},
                   {"local", metrics_json(e.local, &d.manifest.scheme)},
                   {"global", metrics_json(e.global, &d.manifest.scheme)}};
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_json_file(out, report);
    return {{"out", out.string()}, {"split", split}, {"final", summary(summarize(e.final))}};
}

json cmd_ablate(const std::string& manifest, const TrainFlags& flags, const std::string& split, const fs::path& out) {
    if (out.empty()) throw UsageError("ablate needs --out");
    const TrainConfig c = flags.resolve();
    const Dataset d = open_manifest(manifest);
    const auto tr = load_split(d.manifest, manifest, Split::train);
    const auto va = load_split(d.manifest, manifest, Split::val);
    const auto te = load_split(d.manifest, manifest, split_from_string(split));
    fs::create_directories(out);
    const auto rows = ablation_suite(tr, va, te, c, d.classes, out);
    const json j = {{"split", split}, {"rows", ablation_json(rows)}};
    io::write_json_file(out / "ablation.json", j);
    auto csv = io::open_out(out / "ablation.csv");
    csv.precision(9);
    csv << "variant,oa,miou,kappa,sequence_length\n";
    for (const auto& r : rows)
        csv << r.variant << ',' << r.metrics.oa << ',' << r.metrics.miou << ',' << r.metrics.kappa << ','
            << r.sequence_length << '\n';
    return {{"out", out.string()}, {"rows", j["rows"]}};
}

json cmd_sweep(const std::string& manifest, const TrainFlags& flags, const std::string& sp_cache, const fs::path& out) {
    if (out.empty()) throw UsageError("sweep needs --out");
    const TrainConfig c = flags.resolve();
    const Dataset d = open_manifest(manifest);
    auto tr = samples_for(d, manifest, Split::train, c, sp_cache);
    auto va = samples_for(d, manifest, Split::val, c, sp_cache);
    const auto rows = loss_ratio_sweep(tr, va, c, d.classes);
    json j = json::array();
    for (const auto& r : rows) {
        json row = summary(r.val);
        row["ratio"] = r.label;
        row["alpha"] = r.alpha;
        row["beta"] = r.beta;
        j.push_back(row);
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_json_file(out, {{"rows", j}});
    return {{"out", out.string()}, {"rows", j}};
}

json cmd_bench(const std::string& sizes, std::size_t nsp, std::size_t repeats, std::size_t hidden, const fs::path& out) {
    if (out.empty()) throw UsageError("bench needs --out");
    BenchOptions o;
    o.sizes.clear();
    for (auto s : parse_sizes(sizes)) o.sizes.emplace_back(s, s);
    o.n_sp_target = nsp;
    o.repeats = repeats;
    o.hidden = hidden;
    o.seed = g.seed;
    const auto r = run_bench(o);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_bench(out, r);
    return {{"out", out.string()}, {"rows", r.to_json()["rows"]}};
}

json cmd_render(const std::string& raster, std::size_t classes, const fs::path& out) {
    if (out.empty()) throw UsageError("render needs --out");
    if (classes == 0 || classes > 13) throw UsageError("--classes must be in 1..13");
    require_file(raster, "class raster");
    std::size_t H = 0, W = 0;
    const auto r = read_scene_raster(raster, H, W);
    render_classes(out, r, H, W, ClassScheme::land_cover_prefix(classes));
    return {{"out", out.string()}, {"height", H}, {"width", W}};
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return 1;
    if (dynamic_cast<const NumericError*>(&e)) return 3;
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "msom: superpixel-token state-space segmentation of multiband patches.\n"
        "Configuration precedence: command-line flag > --config file > built-in default.\n"
        "Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure."};
    app.fallthrough();
    app.require_subcommand(1);
    app.add_option("--seed", g.seed, "Seed for splits, initialization and shuffling [0]");
    app.add_flag("--deterministic", g.deterministic,
                 "Single-worker execution; every run is already deterministic given --seed");
    app.add_option("--log-level", g.log_level, "debug, info, warn, error or quiet [info]")
        ->check(CLI::IsMember({"debug", "info", "warn", "error", "quiet"}));

    fs::path out;
    std::string manifest, sp_cache, patch, sp, split = "test", png;
    TrainFlags tflags;

    auto* synth = app.add_subcommand("synth", "Write a synthetic labelled scene (Voronoi regions, class spectra + noise)");
    SynthConfig sc;
    std::size_t sh = 128, sw = 128;
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--height", sh, "Scene height [128]");
    synth->add_option("--width", sw, "Scene width [128]");
    synth->add_option("--classes", sc.classes, "Number of classes [3]");
    synth->add_option("--channels", sc.channels, "Number of bands [4]");
    synth->add_option("--cell", sc.size, "Reference tile side for region density [32]");
    synth->add_option("--regions", sc.regions, "Regions per reference tile [6]");
    synth->add_option("--noise", sc.noise, "Per-pixel noise standard deviation [0.5]");
    synth->add_option("--separation", sc.separation, "Minimum distance between class spectra [2]");

    auto* ingest = app.add_subcommand("ingest", "Cut a labelled scene into patches and split train/val/test");
    std::string scene, labels, valid, ratios = "0.1,0.1,0.8";
    std::size_t psize = 128, classes = 13;
    double dominance = 0.5;
    ingest->add_option("--scene", scene, "Scene band file")->required();
    ingest->add_option("--labels", labels, "Scene label raster")->required();
    ingest->add_option("--valid", valid, "Optional validity raster (non-zero = valid)");
    ingest->add_option("--size", psize, "Patch side [128]");
    ingest->add_option("--dominance", dominance, "Required share of the dominant class [0.5]");
    ingest->add_option("--ratios", ratios, "train,val,test fractions [0.1,0.1,0.8]");
    ingest->add_option("--classes", classes, "Classes in the scheme (prefix of the 13-class palette) [13]");
    ingest->add_option("--out", out, "Output directory")->required();

    auto* segment = app.add_subcommand("segment", "SLIC superpixels for one patch or every patch of a manifest");
    SlicOptions so;
    segment->add_option("--patch", patch, "Patch file");
    segment->add_option("--manifest", manifest, "Segment every manifest entry into <out>/<patch_id>.sp");
    segment->add_option("--nsp", so.n_sp_target, "Superpixel target [500]");
    segment->add_option("--compactness", so.compactness, "Compactness m [10]");
    segment->add_option("--iters", so.iters, "Iterations [10]");
    segment->add_option("--out", out, "Output file (--patch) or directory (--manifest)")->required();
    segment->add_option("--png", png, "Boundary overlay PNG (with --patch)");

    auto* train = app.add_subcommand("train", "Train and write train_log.jsonl, best.ckpt, final.ckpt");
    train->add_option("--manifest", manifest, "Dataset manifest")->required();
    train->add_option("--sp-cache", sp_cache, "Directory of precomputed <patch_id>.sp maps");
    train->add_option("--out", out, "Output directory")->required();
    tflags.attach(train);

    auto* infer = app.add_subcommand("infer", "Logit maps and class rasters for one patch");
    fs::path ckpt;
    infer->add_option("--ckpt", ckpt, "Checkpoint")->required();
    infer->add_option("--patch", patch, "Patch file")->required();
    infer->add_option("--sp", sp, "Superpixel map (computed from the checkpoint settings when absent)");
    infer->add_option("--out-maps", out, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Confusion matrix and OA/AA/Kappa/mIoU on a split");
    eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
    eval->add_option("--manifest", manifest, "Dataset manifest")->required();
    eval->add_option("--split", split, "train, val or test [test]");
    eval->add_option("--sp-cache", sp_cache, "Directory of precomputed <patch_id>.sp maps");
    eval->add_option("--out", out, "Report JSON")->required();

    auto* ablate = app.add_subcommand("ablate", "local / global / voting / no-superpixel table");
    ablate->add_option("--manifest", manifest, "Dataset manifest")->required();
    ablate->add_option("--split", split, "Split the table is computed on [test]");
    ablate->add_option("--out", out, "Output directory")->required();
    tflags.attach(ablate);

    auto* sweep = app.add_subcommand("sweep", "Loss-ratio sweep over 70:30 60:40 50:50 40:60 30:70 100:0 0:100");
    sweep->add_option("--manifest", manifest, "Dataset manifest")->required();
    sweep->add_option("--sp-cache", sp_cache, "Directory of precomputed <patch_id>.sp maps");
    sweep->add_option("--out", out, "Report JSON")->required();
    tflags.attach(sweep);

    auto* bench = app.add_subcommand("bench", "Scan time at pixel versus superpixel sequence length");
    std::string sizes = "32,64,128";
    std::size_t nsp = 500, repeats = 5, hidden = 64;
    bench->add_option("--sizes", sizes, "Square patch sides [32,64,128]");
    bench->add_option("--nsp", nsp, "Superpixel sequence length [500]");
    bench->add_option("--repeats", repeats, "Timed runs per length, at least 3 [5]");
    bench->add_option("--hidden", hidden, "Hidden width D [64]");
    bench->add_option("--out", out, "Report JSON (CSV written alongside)")->required();

    auto* render = app.add_subcommand("render", "Class raster to palette PNG");
    std::string raster;
    std::size_t rclasses = 13;
    render->add_option("--raster", raster, "u8 class raster")->required();
    render->add_option("--classes", rclasses, "Classes in the scheme [13]");
    render->add_option("--out", out, "PNG file")->required();

    std::string command = "msom";
    auto finish = [&](int code, const json& detail) {
        json line = {{"command", command}, {"status", code == 0 ? "ok" : "error"}, {"exit", code}};
        for (auto& [k, v] : detail.items()) line[k] = v;
        std::cout << line.dump() << std::endl;
        return code;
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << '\n';
        return finish(1, {{"error", e.what()}});
    }
    g.seed_given = app.count("--seed") > 0;
    g.level = g.log_level == "debug"  ? Level::debug
              : g.log_level == "warn"  ? Level::warn
              : g.log_level == "error" ? Level::error
              : g.log_level == "quiet" ? Level::quiet
                                       : Level::info;
    command = app.get_subcommands().front()->get_name();

    const auto t0 = std::chrono::steady_clock::now();
    try {
        json detail;
        if (synth->parsed()) detail = cmd_synth(out, sc, sh, sw);
        else if (ingest->parsed()) detail = cmd_ingest(scene, labels, valid, psize, dominance, ratios, classes, out);
        else if (segment->parsed()) detail = cmd_segment(patch, manifest, so, out, png);
        else if (train->parsed()) detail = cmd_train(manifest, tflags, sp_cache, out);
        else if (infer->parsed()) detail = cmd_infer(ckpt, patch, sp, out);
        else if (eval->parsed()) detail = cmd_eval(ckpt, manifest, split, sp_cache, out);
        else if (ablate->parsed()) detail = cmd_ablate(manifest, tflags, split, out);
        else if (sweep->parsed()) detail = cmd_sweep(manifest, tflags, sp_cache, out);
        else if (bench->parsed()) detail = cmd_bench(sizes, nsp, repeats, hidden, out);
        else if (render->parsed()) detail = cmd_render(raster, rclasses, out);
        detail["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return finish(0, detail);
    } catch (const Error& e) {
        log(Level::error, e.what());
        return finish(exit_code(e), {{"error", e.what()}});
    } catch (const fs::filesystem_error& e) {
        log(Level::error, e.what());
        return finish(2, {{"error", e.what()}});
    } catch (const json::exception& e) {
        log(Level::error, e.what());
        return finish(2, {{"error", e.what()}});
    }
}
