#include "polygonizer/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "polygonizer/checkpoint.hpp"
#include "polygonizer/data.hpp"
#include "polygonizer/error.hpp"
#include "polygonizer/evaluate.hpp"
#include "polygonizer/metrics.hpp"
#include "polygonizer/perturb.hpp"
#include "polygonizer/train.hpp"

namespace polygonizer {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::Io, "cannot open config " + path.string());
    try {
        json j = json::parse(f);
        if (!j.is_object()) throw Error(ErrorCode::Schema, path.string() + ": config must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Schema, path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f || !f.write(text.data(), static_cast<std::streamsize>(text.size()))) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
}

template <typename T>
T section(const json& file, const char* key, T value) {
    if (file.contains(key)) {
        try {
            value = file.at(key).get<T>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::Schema, std::string("config key '") + key + "': " + e.what());
        }
    }
    return value;
}

std::vector<double> parse_levels(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw Error(ErrorCode::Usage, "bad level '" + item + "' in --levels");
        out.push_back(v);
    }
    if (out.empty()) throw Error(ErrorCode::Usage, "--levels is empty");
    return out;
}

std::string base64(const std::string& bytes) {
    static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
        if (i + 2 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 2]);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? kAlphabet[v & 63] : '=';
    }
    return out;
}

// 24-bit bottom-up BMP; browsers render it from a data URI.
std::string bmp_bytes(const Image& image) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    const std::size_t row = (3 * w + 3) / 4 * 4;
    const std::size_t size = 54 + row * h;
    std::string b(size, '\0');
    auto put = [&](std::size_t at, std::uint32_t v, int n) {
        for (int i = 0; i < n; ++i) b[at + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    };
    b[0] = 'B';
    b[1] = 'M';
    put(2, static_cast<std::uint32_t>(size), 4);
    put(10, 54, 4);
    put(14, 40, 4);
    put(18, static_cast<std::uint32_t>(w), 4);
    put(22, static_cast<std::uint32_t>(h), 4);
    put(26, 1, 2);
    put(28, 24, 2);
    put(34, static_cast<std::uint32_t>(row * h), 4);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t base = 54 + (h - 1 - y) * row;
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const float v = std::clamp(image.data[(c * h + y) * w + x], 0.0f, 1.0f);
                b[base + 3 * x + (2 - c)] = static_cast<char>(static_cast<int>(std::lround(v * 255.0f)));
            }
        }
    }
    return b;
}

std::string svg_points(const PolygonRing& ring) {
    std::string s;
    char buf[64];
    for (std::size_t i = 0; i <= ring.size(); ++i) {
        const Point2 p = ring.vertices[i % ring.size()];
        std::snprintf(buf, sizeof buf, "%s%.6g,%.6g", i ? " " : "", p.x, p.y);
        s += buf;
    }
    return s;
}

std::string overlay_svg(const Image& image, const std::optional<PolygonRing>& gt, const std::optional<PolygonRing>& pred) {
    const std::size_t d = image.dim(1);
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << d << "\" height=\"" << d << "\" viewBox=\"0 0 " << d
      << ' ' << d << "\">\n";
    o << "<image width=\"" << d << "\" height=\"" << d
      << "\" style=\"image-rendering:pixelated\" href=\"data:image/bmp;base64," << base64(bmp_bytes(image)) << "\"/>\n";
    if (gt && gt->size() > 0) {
        o << "<polyline class=\"ground-truth\" fill=\"none\" stroke=\"#00c853\" stroke-width=\"0.6\" points=\""
          << svg_points(*gt) << "\"><title>ground truth</title></polyline>\n";
    }
    if (pred && pred->size() > 0) {
        o << "<polyline class=\"prediction\" fill=\"none\" stroke=\"#ff1744\" stroke-width=\"0.6\" points=\""
          << svg_points(*pred) << "\"><title>prediction</title></polyline>\n";
    }
    o << "</svg>\n";
    return o.str();
}

json geojson_ring(const PolygonRing& ring) {
    json coords = json::array();
    for (std::size_t i = 0; i <= ring.size(); ++i) {
        const Point2 p = ring.vertices[i % ring.size()];
        coords.push_back({p.x, p.y});
    }
    return json{{"type", "Polygon"}, {"coordinates", json::array({coords})}};
}

json echo(const std::string& command, const json& config) {
    return json{{"command", command}, {"version", kVersion}, {"config", config}, {"seed", config.at("seed")}};
}

struct Common {
    std::uint64_t seed = 0;
    std::string out;
    std::string config_path;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;

    void attach(CLI::App* app, bool out_required) {
        seed_opt = app->add_option("--seed", seed, "Random seed");
        out_opt = app->add_option("--out", out, "Output path");
        if (out_required) out_opt->required();
        app->add_option("--config", config_path, "JSON config (same schema as the echoed config)");
    }
    json file() const { return config_path.empty() ? json::object() : read_json_file(config_path); }
    // Flag beats config file beats default.
    std::uint64_t effective_seed(const json& f) const {
        return seed_opt->count() ? seed : section<std::uint64_t>(f, "seed", 0);
    }
    std::string effective_out(const json& f) const { return out_opt->count() ? out : section<std::string>(f, "out", out); }
};

std::unique_ptr<Predictor> make_predictor(const std::string& kind, const std::string& checkpoint, int grid,
                                          std::optional<LoadedCheckpoint>& holder) {
    if (kind == "ground-truth") return std::make_unique<GroundTruthPredictor>(grid);
    if (kind != "model") throw Error(ErrorCode::Usage, "--predictor must be 'model' or 'ground-truth'");
    if (checkpoint.empty()) throw Error(ErrorCode::Usage, "--checkpoint is required");
    holder.emplace(load_checkpoint(checkpoint));
    return std::make_unique<ModelPredictor>(holder->model);
}

// ---- generate ----

struct GenerateArgs {
    Common common;
    std::size_t n = 0;
    int size = 0;
    CLI::Option* n_opt = nullptr;
    CLI::Option* size_opt = nullptr;
};

void cmd_generate(const GenerateArgs& a, std::ostream& out) {
    const json f = a.common.file();
    SceneConfig scene = section(f, "scene", SceneConfig{});
    std::size_t n = a.n_opt->count() ? a.n : section<std::size_t>(f, "n", 0);
    if (a.size_opt->count()) scene.image_size = a.size;
    scene.seed = a.common.effective_seed(f);
    const std::string dir = a.common.effective_out(f);
    if (n == 0) throw Error(ErrorCode::Usage, "--n must be at least 1");
    if (dir.empty()) throw Error(ErrorCode::Usage, "--out is required");
    scene.validate();

    const json config{{"n", n}, {"out", dir}, {"scene", scene}, {"seed", scene.seed}};
    const json header = echo("generate", config);
    out << header.dump() << '\n';
    const Dataset ds = generate_dataset(scene, n);
    save_dataset(ds, dir, header);
    out << json{{"samples", ds.samples.size()}, {"grid_size", ds.grid_size}}.dump() << '\n';
}

// ---- train ----

struct TrainArgs {
    Common common;
    std::string data, log;
    int epochs = 0, batch = 0;
    double lr = 0.0;
    std::uint64_t max_steps = 0;
    CLI::Option *epochs_opt = nullptr, *batch_opt = nullptr, *lr_opt = nullptr, *steps_opt = nullptr;
    CLI::Option *data_opt = nullptr, *log_opt = nullptr;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
    const json f = a.common.file();
    const std::string data = a.data_opt->count() ? a.data : section<std::string>(f, "data", "");
    const std::string ckpt = a.common.effective_out(f);
    if (data.empty()) throw Error(ErrorCode::Usage, "--data is required");
    if (ckpt.empty()) throw Error(ErrorCode::Usage, "--out is required");
    std::string log = a.log_opt->count() ? a.log : section<std::string>(f, "log", "");
    if (log.empty()) log = ckpt + ".log.jsonl";

    const Dataset ds = load_dataset(data);
    ModelConfig model_cfg = section(f, "model", ModelConfig::desk());
    if (!(f.contains("model") && f["model"].contains("input_size"))) model_cfg.input_size = ds.grid_size;
    TrainConfig tc = section(f, "training", TrainConfig{});
    if (a.epochs_opt->count()) tc.epochs = a.epochs;
    if (a.batch_opt->count()) tc.batch_size = a.batch;
    if (a.lr_opt->count()) tc.learning_rate = a.lr;
    if (a.steps_opt->count()) tc.max_steps = a.max_steps;
    const std::uint64_t seed = a.common.effective_seed(f);
    model_cfg.seed = seed;
    tc.seed = seed;
    model_cfg.validate();
    tc.validate();
    if (ds.grid_size != model_cfg.input_size) {
        throw Error(ErrorCode::GridMismatch, "dataset grid_size " + std::to_string(ds.grid_size) +
                                                 " != model input_size " + std::to_string(model_cfg.input_size));
    }

    const json config{{"data", data}, {"log", log},        {"model", model_cfg},
                      {"out", ckpt},  {"seed", seed},      {"training", tc}};
    const json header = echo("train", config);
    out << header.dump() << '\n';

    Polygonizer<float> model(model_cfg);
    auto opt = tc::make_adam_state(model.params().all());
    std::string log_text = header.dump() + '\n';
    const TrainResult r = train(model, opt, ds, tc, [&](const EpochStats& s) {
        const std::string line = json(s).dump();
        log_text += line + '\n';
        out << line << '\n';
    });
    const json summary{{"steps", r.steps}, {"skipped_overflow", r.skipped_overflow}, {"epochs", r.epochs.size()}};
    log_text += summary.dump() + '\n';
    write_text(log, log_text);
    save_checkpoint(ckpt, model, &opt, json{{"run", header}, {"result", summary}});
    out << summary.dump() << '\n';
}

// ---- infer ----

struct InferArgs {
    Common common;
    std::string checkpoint, data, svg, predictor = "model";
    std::vector<std::string> images;
};

void cmd_infer(const InferArgs& a, std::ostream& out) {
    const json f = a.common.file();
    const std::string geo = a.common.effective_out(f);
    if (geo.empty()) throw Error(ErrorCode::Usage, "--out is required");
    if (a.data.empty() == a.images.empty()) throw Error(ErrorCode::Usage, "give exactly one of --data or --images");

    std::optional<Dataset> ds;
    if (!a.data.empty()) ds = load_dataset(a.data);
    std::optional<LoadedCheckpoint> holder;
    std::unique_ptr<Predictor> predictor = make_predictor(a.predictor, a.checkpoint, ds ? ds->grid_size : 0, holder);
    const int d = predictor->grid_size();
    const json config{{"checkpoint", a.checkpoint}, {"data", a.data},    {"images", a.images}, {"out", geo},
                      {"predictor", a.predictor},   {"seed", a.common.effective_seed(f)}, {"svg", a.svg}};
    const json header = echo("infer", config);
    out << header.dump() << '\n';

    // Model-frame samples plus the scale mapping them back to source pixels.
    std::vector<Sample> samples;
    std::vector<double> back_scale;
    bool have_gt = false;
    if (ds) {
        if (ds->grid_size != d) {
            throw Error(ErrorCode::GridMismatch, "dataset grid_size " + std::to_string(ds->grid_size) +
                                                     " != model input_size " + std::to_string(d));
        }
        samples = std::move(ds->samples);
        back_scale.assign(samples.size(), 1.0);
        have_gt = true;
    } else {
        for (const std::string& path : a.images) {
            const Image raw = read_ppm(path);
            const Padded p = pad_to_square(raw, 0.0f);
            Sample s;
            s.id = fs::path(path).stem().string();
            s.image = resize(p.image, static_cast<std::size_t>(d), static_cast<std::size_t>(d));
            back_scale.push_back(static_cast<double>(p.image.dim(1)) / d);
            samples.push_back(std::move(s));
        }
    }

    const std::vector<Prediction> preds = predict_all(*predictor, samples);
    json features = json::array();
    std::size_t failed = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Prediction& p = preds[i];
        json props{{"id", samples[i].id},
                   {"n_vertices", p.ring ? p.ring->size() : 0},
                   {"terminated", p.terminated},
                   {"failed", !p.ring.has_value()}};
        if (!p.failure.empty()) props["failure"] = p.failure;
        failed += p.ring ? 0 : 1;
        json geometry = nullptr;
        if (p.ring) geometry = geojson_ring(scale_translate(*p.ring, back_scale[i], {0.0, 0.0}));
        features.push_back({{"type", "Feature"}, {"geometry", geometry}, {"properties", props}});
        if (!a.svg.empty()) {
            std::optional<PolygonRing> gt;
            if (have_gt) gt = samples[i].ring;
            write_text(fs::path(a.svg) / (samples[i].id + ".svg"), overlay_svg(samples[i].image, gt, p.ring));
        }
    }
    const json doc{{"type", "FeatureCollection"}, {"polygonizer", header}, {"features", features}};
    write_text(geo, doc.dump(1) + '\n');
    out << json{{"features", samples.size()}, {"failed", failed}}.dump() << '\n';
}

// ---- eval / perturb-eval ----

struct EvalArgs {
    Common common;
    std::string checkpoint, data, predictor = "model", kind, levels;
    CLI::Option *data_opt = nullptr, *ckpt_opt = nullptr;
};

void cmd_eval(const EvalArgs& a, bool perturbed, std::ostream& out) {
    const json f = a.common.file();
    const std::string data = a.data_opt->count() ? a.data : section<std::string>(f, "data", "");
    const std::string ckpt = a.ckpt_opt->count() ? a.checkpoint : section<std::string>(f, "checkpoint", "");
    const std::string dst = a.common.effective_out(f);
    if (data.empty()) throw Error(ErrorCode::Usage, "--data is required");
    if (dst.empty()) throw Error(ErrorCode::Usage, "--out is required");
    const MetricsConfig mc = section(f, "metrics", MetricsConfig{});
    const std::uint64_t seed = a.common.effective_seed(f);

    const Dataset ds = load_dataset(data);
    std::optional<LoadedCheckpoint> holder;
    std::unique_ptr<Predictor> predictor = make_predictor(a.predictor, ckpt, ds.grid_size, holder);

    json config{{"checkpoint", ckpt}, {"data", data}, {"metrics", mc},
                {"out", dst},         {"predictor", a.predictor}, {"seed", seed}};
    std::vector<MetricsRow> rows;
    std::optional<PerturbKind> kind;
    std::vector<double> levels;
    if (perturbed) {
        kind = parse_perturb_kind(a.kind);
        levels = parse_levels(a.levels);
        config["kind"] = to_string(*kind);
        config["levels"] = levels;
    }
    const json header = echo(perturbed ? "perturb-eval" : "eval", config);
    out << header.dump() << '\n';

    if (perturbed) {
        rows = sweep(*predictor, ds, *kind, levels, seed, mc);
    } else {
        if (ds.grid_size != predictor->grid_size()) {
            throw Error(ErrorCode::GridMismatch, "dataset grid_size " + std::to_string(ds.grid_size) +
                                                     " != model input_size " + std::to_string(predictor->grid_size()));
        }
        const Evaluation ev = evaluate(*predictor, ds.samples, mc);
        rows.push_back(summarize("none", ev.scores, ev.pairs, mc));
    }
    json doc = metrics_document(config, rows);
    doc["command"] = header["command"];
    doc["software_version"] = kVersion;
    doc["seed"] = seed;
    write_text(dst, doc.dump(1) + '\n');
    for (const MetricsRow& r : rows) out << json(r).dump() << '\n';
}

void report(std::ostream& err, std::string_view code, const std::string& message) {
    err << json{{"error", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Building footprint polygonizer", "polygonizer"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    GenerateArgs gen;
    CLI::App* g = app.add_subcommand("generate", "Write a synthetic dataset directory");
    gen.common.attach(g, false);
    gen.n_opt = g->add_option("--n", gen.n, "Number of samples");
    gen.size_opt = g->add_option("--size", gen.size, "Image side in pixels (grid size)");

    TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "Train a model and write a PLGZ checkpoint");
    tr.common.attach(t, false);
    tr.data_opt = t->add_option("--data", tr.data, "Dataset directory");
    tr.log_opt = t->add_option("--log", tr.log, "JSON-lines training log (default <out>.log.jsonl)");
    tr.epochs_opt = t->add_option("--epochs", tr.epochs, "Epochs");
    tr.batch_opt = t->add_option("--batch-size", tr.batch, "Minibatch size");
    tr.lr_opt = t->add_option("--lr", tr.lr, "Adam learning rate");
    tr.steps_opt = t->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");

    InferArgs inf;
    CLI::App* i = app.add_subcommand("infer", "Predict polygons and write GeoJSON (and SVG overlays)");
    inf.common.attach(i, false);
    i->add_option("--checkpoint", inf.checkpoint, "PLGZ checkpoint");
    i->add_option("--data", inf.data, "Dataset directory");
    i->add_option("--images", inf.images, "PPM images");
    i->add_option("--svg", inf.svg, "Directory for per-sample SVG overlays");
    i->add_option("--predictor", inf.predictor, "model | ground-truth");

    EvalArgs ev;
    CLI::App* e = app.add_subcommand("eval", "Score greedy predictions on a dataset");
    ev.common.attach(e, false);
    ev.ckpt_opt = e->add_option("--checkpoint", ev.checkpoint, "PLGZ checkpoint");
    ev.data_opt = e->add_option("--data", ev.data, "Dataset directory");
    e->add_option("--predictor", ev.predictor, "model | ground-truth");

    EvalArgs pe;
    CLI::App* p = app.add_subcommand("perturb-eval", "Score predictions under input perturbations");
    pe.common.attach(p, false);
    pe.ckpt_opt = p->add_option("--checkpoint", pe.checkpoint, "PLGZ checkpoint");
    pe.data_opt = p->add_option("--data", pe.data, "Dataset directory");
    p->add_option("--predictor", pe.predictor, "model | ground-truth");
    p->add_option("--kind", pe.kind, "erase | downsample | rotate")->required();
    p->add_option("--levels", pe.levels, "Comma-separated levels")->required();

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp&) {
            out << app.help();
            return 0;
        } catch (const CLI::CallForVersion&) {
            out << kVersion << '\n';
            return 0;
        } catch (const CLI::ParseError& pe_err) {
            std::string msg = pe_err.what();
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            throw Error(ErrorCode::Usage, msg);
        }
        if (g->parsed()) cmd_generate(gen, out);
        if (t->parsed()) cmd_train(tr, out);
        if (i->parsed()) cmd_infer(inf, out);
        if (e->parsed()) cmd_eval(ev, false, out);
        if (p->parsed()) cmd_eval(pe, true, out);
        return 0;
    } catch (const Error& ex) {
        report(err, to_string(ex.code()), ex.what());
        return ex.code() == ErrorCode::Usage ? 2 : 1;
    } catch (const std::exception& ex) {
        report(err, "internal", ex.what());
        return 1;
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"polygonizer"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace polygonizer
