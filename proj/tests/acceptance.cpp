// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,...] [--cache DIR]
//
// Trained checkpoints are cached in DIR (default: the build directory) keyed by
// their configuration, so reruns skip training.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "polygonizer/checkpoint.hpp"
#include "polygonizer/cli.hpp"
#include "polygonizer/codec.hpp"
#include "polygonizer/data.hpp"
#include "polygonizer/evaluate.hpp"
#include "polygonizer/gradcheck.hpp"
#include "polygonizer/metrics.hpp"
#include "polygonizer/model.hpp"
#include "polygonizer/ops.hpp"
#include "polygonizer/train.hpp"

using namespace polygonizer;
using namespace polygonizer::tc;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Clock {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void progress(const std::string& line) { std::cerr << "  .. " << line << std::endl; }

fs::path g_cache;

// ---------------------------------------------------------------- 1

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.data) v = u(rng);
    return t;
}

Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng) {
    Tensor<double> t = random_tensor(std::move(shape), rng);
    for (double& v : t.data) v += v < 0 ? -0.1 : 0.1;
    return t;
}

Var project(Tape<double>& t, Var y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return weighted_sum(t, y, random_tensor(t.shape(y), rng));
}

Outcome gradient_correctness() {
    Clock clock;
    std::mt19937_64 rng(2);
    struct Case {
        std::string name;
        GraphFn graph;
        std::vector<Tensor<double>> inputs;
    };
    const std::vector<int> ids{1, 3, 1, 0};
    const std::vector<int> targets{2, 0, 5};
    const std::vector<double> weights{0.5, 1.0, 0.25};
    std::vector<Case> cases;
    cases.push_back({"embedding",
                     [&](Tape<double>& t, std::span<const Var> in) {
                         return project(t, embedding(t, in[0], std::span<const int>(ids)));
                     },
                     {random_tensor({5, 4}, rng)}});
    cases.push_back({"linear",
                     [](Tape<double>& t, std::span<const Var> in) { return project(t, linear(t, in[0], in[1], in[2])); },
                     {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)}});
    cases.push_back({"relu", [](Tape<double>& t, std::span<const Var> in) { return project(t, relu(t, in[0])); },
                     {away_from_zero({3, 5}, rng)}});
    cases.push_back({"tanh", [](Tape<double>& t, std::span<const Var> in) { return project(t, tanh(t, in[0])); },
                     {random_tensor({3, 5}, rng, -2, 2)}});
    cases.push_back({"sigmoid",
                     [](Tape<double>& t, std::span<const Var> in) { return project(t, sigmoid(t, in[0])); },
                     {random_tensor({3, 5}, rng, -3, 3)}});
    cases.push_back({"add+scale",
                     [](Tape<double>& t, std::span<const Var> in) {
                         return project(t, scale(t, add(t, in[0], in[1]), 1.7));
                     },
                     {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}});
    cases.push_back({"concat+slice",
                     [](Tape<double>& t, std::span<const Var> in) {
                         const Var c = concat(t, in[0], in[1], 1);
                         return add(t, project(t, c), project(t, slice(t, c, 1, 1, 4), 7));
                     },
                     {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}});
    cases.push_back({"conv2d",
                     [](Tape<double>& t, std::span<const Var> in) {
                         return project(t, conv2d(t, in[0], in[1], in[2], 1, 1));
                     },
                     {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)}});
    cases.push_back({"conv2d/stride2",
                     [](Tape<double>& t, std::span<const Var> in) {
                         return project(t, conv2d(t, in[0], in[1], in[2], 2, 1));
                     },
                     {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}});
    cases.push_back({"max_pool2x2",
                     [](Tape<double>& t, std::span<const Var> in) { return project(t, max_pool2x2(t, in[0])); },
                     {random_tensor({2, 2, 4, 6}, rng)}});
    cases.push_back({"upsample2x",
                     [](Tape<double>& t, std::span<const Var> in) { return project(t, upsample2x(t, in[0])); },
                     {random_tensor({2, 3, 3}, rng)}});
    cases.push_back({"spatial_to_sequence",
                     [](Tape<double>& t, std::span<const Var> in) { return project(t, spatial_to_sequence(t, in[0])); },
                     {random_tensor({2, 3, 2, 4}, rng)}});
    cases.push_back({"softmax_nll",
                     [&](Tape<double>& t, std::span<const Var> in) {
                         return softmax_nll(t, in[0], std::span<const int>(targets), std::span<const double>(weights));
                     },
                     {random_tensor({3, 6}, rng, -3, 3)}});
    cases.push_back({"lstm_cell",
                     [](Tape<double>& t, std::span<const Var> in) {
                         const auto [h, c] = lstm_cell(t, in[0], in[1], in[2], in[3], in[4], in[5]);
                         return add(t, project(t, h, 1), project(t, c, 2));
                     },
                     {random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng),
                      random_tensor({16, 3}, rng), random_tensor({16, 4}, rng), random_tensor({16}, rng)}});
    cases.push_back({"additive_attention",
                     [](Tape<double>& t, std::span<const Var> in) {
                         const auto [ctx, w] = additive_attention(t, in[0], in[1], in[2], in[3], in[4]);
                         return add(t, project(t, ctx, 1), project(t, w, 2));
                     },
                     {random_tensor({2, 3}, rng), random_tensor({2, 5, 4}, rng), random_tensor({6, 3}, rng),
                      random_tensor({6, 4}, rng), random_tensor({6}, rng)}});

    double worst = 0.0;
    std::string worst_name;
    for (Case& c : cases) {
        const GradCheckResult r = grad_check(c.graph, std::move(c.inputs), 1e-5);
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            worst_name = c.name;
        }
    }

    // Composed decode_step graph over every parameter of a small 3-layer model.
    ModelConfig mc;
    mc.input_size = 8;
    mc.stem_channels = 2;
    mc.stage_channels = {2, 3};
    mc.blocks_per_stage = {1, 1};
    mc.feature_dim = 4;
    mc.embed_dim = mc.hidden_dim = 4;
    mc.attention_dim = 3;
    mc.lstm_layers = 3;
    mc.max_seq_len = 10;
    mc.seed = 3;
    Polygonizer<double> model(mc);
    Tensor<double> a = random_tensor({3, 8, 8}, rng, 0, 1), b = random_tensor({3, 8, 8}, rng, 0, 1);
    const Tensor<double>* batch[] = {&a, &b};
    const Tensor<double> images = model.stack(batch);
    auto params = model.params().all();
    const GradCheckResult composed = grad_check_parameters(
        [&](Tape<double>& t) {
            Polygonizer<double>::Bound bound(model, t);
            const auto enc = model.encode(bound, t.constant(images));
            auto state = model.initial_state(bound, 2);
            Var total;
            const std::vector<std::vector<int>> prev{{8, 8}, {3, 0}, {5, 7}};
            for (int p = 0; p < 3; ++p) {
                const auto out = model.decode_step(bound, prev[static_cast<std::size_t>(p)], p, state, enc);
                total = total.valid() ? add(t, total, project(t, out.logits, 10 + p)) : project(t, out.logits, 10);
            }
            return total;
        },
        params, {}, 1e-5);
    const double secs = clock.seconds();
    const bool pass = worst < 1e-4 && composed.max_relative_error < 1e-4 &&
                      composed.entries_checked == model.params().total_elements() && secs < 120.0;
    return {pass, fmt("%zu primitives max rel err %.2e (%s); decode_step %.2e over %zu entries; %.1fs", cases.size(),
                      worst, worst_name.c_str(), composed.max_relative_error, composed.entries_checked, secs)};
}

// ---------------------------------------------------------------- 2

Outcome codec_soundness() {
    Clock clock;
    const TokenVocabulary v(64);
    std::mt19937_64 rng(21);
    double worst = 0.0;
    std::size_t mismatches = 0;
    for (int i = 0; i < 1000; ++i) {
        const PolygonRing r = oracle::random_convex(rng, 0.0, 63.999, 4 + i % 9);
        worst = std::max(worst, roundtrip_error(r, v));
    }
    for (int i = 0; i < 1000; ++i) {
        const TokenSequence s = encode_polygon(oracle::random_convex(rng, 0.0, 63.999, 4 + i % 9), v);
        mismatches += encode_polygon(decode_tokens(s, v).ring, v) == s ? 0 : 1;
    }
    const double secs = clock.seconds();
    return {worst <= 0.71 && mismatches == 0 && secs < 10.0,
            fmt("max displacement %.4f px; %zu/1000 sequences changed by encode(decode); %.2fs", worst, mismatches, secs)};
}

// ---------------------------------------------------------------- 3

Outcome metric_oracles() {
    std::mt19937_64 rng(31);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const PolygonRing a = oracle::random_convex(rng, 0, 64);
        const PolygonRing b = oracle::random_convex(rng, 0, 64);
        worst = std::max(worst, std::abs(iou(a, b) - oracle::convex_iou(a, b)));
    }
    const PolygonRing unit{{{0, 0}, {1, 0}, {1, 1}, {0, 1}}};
    const PolygonRing shifted{{{0.5, 0.5}, {1.5, 0.5}, {1.5, 1.5}, {0.5, 1.5}}};
    const double seventh = iou(unit, shifted);
    const PolygonRing sq{{{10, 10}, {30, 10}, {30, 30}, {10, 30}}};
    const double mta = max_tangent_angle_error(sq, rotate_ring(sq, 45.0, {20, 20}));
    const double ciou = c_iou(0.9, 8, 4);
    const bool pass = worst <= 0.01 && std::abs(seventh - 1.0 / 7.0) <= 0.01 && std::abs(mta - 45.0) <= 1.0 && ciou == 0.6;
    return {pass, fmt("max |IoU - exact| %.4f over 100 pairs; shifted square %.4f; MTA %.3f deg; C-IoU %.15g (== 0.6: %s)", worst,
                      seventh, mta, ciou, ciou == 0.6 ? "yes" : "no")};
}

// ---------------------------------------------------------------- 4/5 shared

double mean_greedy_iou(const Polygonizer<float>& model, const Dataset& ds, MetricsRow* row = nullptr) {
    const ModelPredictor predictor(model);
    const MetricsConfig mc;
    const Evaluation ev = evaluate(predictor, ds.samples, mc);
    const MetricsRow r = summarize("none", ev.scores, ev.pairs, mc);
    if (row) *row = r;
    return r.iou;
}

// ---------------------------------------------------------------- 4

Outcome overfit() {
    Clock clock;
    SceneConfig scene;
    scene.seed = 11;
    const Dataset ds = generate_dataset(scene, 32);
    Polygonizer<float> model(ModelConfig::desk());
    auto opt = make_adam_state(model.params().all());
    TrainConfig tc;
    tc.batch_size = 32;
    tc.learning_rate = 1e-3;
    tc.seed = 11;
    tc.epochs = 100;  // one step per epoch at batch 32
    std::uint64_t steps = 0;
    double acc = 0.0, miou = 0.0;
    while (steps < 2000) {
        tc.seed = 11 + steps;
        steps += train(model, opt, ds, tc).steps;
        acc = teacher_forced_accuracy(model, ds).accuracy();
        miou = mean_greedy_iou(model, ds);
        progress(fmt("c4 step %llu tf-acc %.4f greedy IoU %.4f (%.0fs)", static_cast<unsigned long long>(steps), acc,
                     miou, clock.seconds()));
        if (acc >= 0.95 && miou >= 0.85) break;
    }
    const double secs = clock.seconds();
    return {acc >= 0.95 && miou >= 0.85 && steps <= 2000 && secs < 1800.0,
            fmt("after %llu steps: teacher-forced accuracy %.4f, greedy mean IoU %.4f; %.0fs",
                static_cast<unsigned long long>(steps), acc, miou, secs)};
}

// ---------------------------------------------------------------- 5/6

struct Generalization {
    TrainConfig train;
    SceneConfig train_scene, heldout_scene;
    std::size_t n_train = 2048, n_heldout = 256;
};

Generalization generalization_setup() {
    Generalization g;
    g.train.batch_size = 32;
    g.train.learning_rate = 1e-3;
    g.train.epochs = 60;
    g.train.seed = 5;
    g.train_scene.seed = 101;
    g.heldout_scene.seed = 202;
    return g;
}

Polygonizer<float> generalization_model(const Generalization& g, const Dataset& train_set) {
    const json key{{"model", ModelConfig::desk()}, {"train", g.train}, {"scene", g.train_scene}, {"n", g.n_train},
                   {"version", kVersion}};
    const fs::path path = g_cache / ("acceptance_c5_" + std::to_string(std::hash<std::string>{}(key.dump())) + ".plgz");
    if (fs::exists(path)) {
        LoadedCheckpoint ck = load_checkpoint(path);
        if (ck.training == key) {
            progress("c5 using cached checkpoint " + path.string());
            return std::move(ck.model);
        }
    }
    Clock clock;
    ModelConfig mc = ModelConfig::desk();
    mc.seed = g.train.seed;
    Polygonizer<float> model(mc);
    auto opt = make_adam_state(model.params().all());
    train(model, opt, train_set, g.train, [&](const EpochStats& s) {
        progress(fmt("c5 epoch %d loss %.4f tf-acc %.4f (%.0fs)", s.epoch, s.mean_loss, s.token_accuracy,
                     clock.seconds()));
    });
    save_checkpoint(path, model, nullptr, key);
    return model;
}

struct Trained {
    std::optional<Polygonizer<float>> model;
    Dataset heldout;
};

Trained& generalization_state() {
    static Trained state;
    if (!state.model) {
        const Generalization g = generalization_setup();
        const Dataset train_set = generate_dataset(g.train_scene, g.n_train);
        state.model.emplace(generalization_model(g, train_set));
        state.heldout = generate_dataset(g.heldout_scene, g.n_heldout);
    }
    return state;
}

Outcome generalization() {
    Trained& s = generalization_state();
    MetricsRow row;
    const double miou = mean_greedy_iou(*s.model, s.heldout, &row);
    const bool pass = miou >= 0.70 && row.n_ratio >= 0.8 && row.n_ratio <= 1.2 && row.mta_median_deg <= 15.0;
    return {pass, fmt("held-out %zu: mean IoU %.4f, N ratio %.4f, median MTA %.2f deg (mean %.2f), AP %.4f, failed %zu",
                      row.n_samples, miou, row.n_ratio, row.mta_median_deg, row.mta_deg, row.apar.ap, row.n_failed)};
}

Outcome perturbation_trend() {
    Trained& s = generalization_state();
    const ModelPredictor predictor(*s.model);
    const MetricsConfig mc;
    const std::vector<double> down{2, 4, 8};
    const std::vector<double> rot{15, 45, 60, 90, 120};
    const auto drows = sweep(predictor, s.heldout, PerturbKind::Downsample, down, 1, mc);
    const auto rrows = sweep(predictor, s.heldout, PerturbKind::Rotate, rot, 1, mc);
    bool monotone = true;
    for (std::size_t i = 1; i < drows.size(); ++i) monotone = monotone && drows[i].iou <= drows[i - 1].iou + 0.02;
    std::size_t best = 0;
    for (std::size_t i = 1; i < rrows.size(); ++i) best = rrows[i].iou > rrows[best].iou ? i : best;
    std::string detail = "downsample IoU";
    for (const auto& r : drows) detail += fmt(" %g:%.4f", r.level.get<double>(), r.iou);
    detail += "; rotate IoU";
    for (const auto& r : rrows) detail += fmt(" %g:%.4f", r.level.get<double>(), r.iou);
    return {monotone && best == 0, detail};
}

// ---------------------------------------------------------------- 7

Outcome determinism() {
    const fs::path dir = g_cache / "acceptance_c7";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto p = [&](const std::string& n) { return (dir / n).string(); };
    auto run = [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        if (code != 0) throw std::runtime_error(err.str());
        return out.str();
    };
    auto slurp = [](const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    run({"generate", "--n", "48", "--seed", "3", "--out", p("data")});
    const std::vector<std::vector<std::string>> commands{
        {"train", "--data", p("data"), "--out", p("m.plgz"), "--epochs", "2", "--batch-size", "16", "--seed", "4"},
        {"eval", "--checkpoint", p("m.plgz"), "--data", p("data"), "--out", p("e.json"), "--seed", "4"},
        {"perturb-eval", "--checkpoint", p("m.plgz"), "--data", p("data"), "--kind", "rotate", "--levels", "15,90",
         "--out", p("p.json"), "--seed", "4"},
        {"perturb-eval", "--checkpoint", p("m.plgz"), "--data", p("data"), "--kind", "erase", "--levels", "0.1,0.3",
         "--out", p("q.json"), "--seed", "4"}};
    const std::vector<std::vector<std::string>> files{
        {p("m.plgz"), p("m.plgz.log.jsonl")}, {p("e.json")}, {p("p.json")}, {p("q.json")}};
    std::vector<std::string> first, first_stdout;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        first_stdout.push_back(run(commands[i]));
        for (const auto& f : files[i]) first.push_back(slurp(f));
    }
    std::size_t k = 0, same = 0, total = 0;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        same += run(commands[i]) == first_stdout[i] ? 1 : 0;
        ++total;
        for (const auto& f : files[i]) {
            same += slurp(f) == first[k++] ? 1 : 0;
            ++total;
        }
    }
    return {same == total, fmt("%zu/%zu outputs byte-identical across reruns (train, eval, perturb-eval)", same, total)};
}

// ---------------------------------------------------------------- 8

Outcome architecture_shape() {
    Polygonizer<float> model(ModelConfig::full_scale());
    Tape<float> tape(false);
    Polygonizer<float>::Bound bound(model, tape);
    const std::size_t d = static_cast<std::size_t>(model.config().input_size);
    const Tensor<float> input({1, 3, d, d}, 0.5f);
    const Var fmap = model.encode_image(bound, tape.constant(input));
    const Shape shape = tape.shape(fmap);
    bool no_grads = true;
    for (const auto* p : model.params().all()) no_grads = no_grads && p->grad.empty();
    const bool pass = shape == Shape{1, 512, 28, 28} && !tape.recording() && no_grads;
    return {pass, fmt("input %zux%zu -> encoder output %s; tape recording=%d; gradient buffers allocated=%d", d, d,
                      shape_string(shape).c_str(), tape.recording() ? 1 : 0, no_grads ? 0 : 1)};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    g_cache = POLYGONIZER_ACCEPTANCE_CACHE;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string item;
            while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
        } else if (a == "--cache" && i + 1 < argc) {
            g_cache = argv[++i];
        } else {
            std::cerr << "usage: acceptance [--only 1,2,...] [--cache DIR]\n";
            return 2;
        }
    }
    fs::create_directories(g_cache);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"codec soundness", codec_soundness},
        {"metric oracle equivalence", metric_oracles},
        {"overfit capability", overfit},
        {"generalization at desk scale", generalization},
        {"perturbation trend", perturbation_trend},
        {"determinism", determinism},
        {"architecture shape", architecture_shape},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i + 1);
        if (!only.empty() && !only.count(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
                  << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
