#include "polygonizer/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

namespace polygonizer {

Prediction to_prediction(TokenSequence tokens, const TokenVocabulary& vocab) {
    Prediction p;
    p.tokens = std::move(tokens);
    try {
        DecodedRing d = decode_tokens(p.tokens, vocab);
        p.ring = std::move(d.ring);
        p.terminated = d.terminated;
    } catch (const Error& e) {
        p.failure = std::string(to_string(e.code()));
        p.terminated = !p.tokens.tokens.empty() && p.tokens.tokens.back() == vocab.stop_id();
    }
    return p;
}

std::vector<Prediction> ModelPredictor::predict(std::span<const Sample* const> samples) const {
    std::vector<const Image*> images;
    images.reserve(samples.size());
    for (const Sample* s : samples) images.push_back(&s->image);
    std::vector<Prediction> out;
    for (TokenSequence& seq : model_->greedy_infer(images)) out.push_back(to_prediction(std::move(seq), model_->vocab()));
    return out;
}

std::vector<Prediction> GroundTruthPredictor::predict(std::span<const Sample* const> samples) const {
    std::vector<Prediction> out;
    for (const Sample* s : samples) {
        try {
            out.push_back(to_prediction(encode_polygon(s->ring, vocab_), vocab_));
        } catch (const Error&) {
            // Rings pushed out of the frame (rotation) are replayed verbatim.
            Prediction p;
            p.ring = s->ring;
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::size_t worker_count() {
    if (const char* env = std::getenv("POLYGONIZER_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(begin, end) over fixed kEvalChunk-sized ranges on up to `workers` threads.
template <typename Fn>
void for_each_chunk(std::size_t n, std::size_t workers, Fn fn) {
    const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t c = next++; c < chunks; c = next++) {
            try {
                fn(c * kEvalChunk, std::min(n, (c + 1) * kEvalChunk));
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(chunks, 1));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(work);
    work();
    for (std::thread& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<Prediction> predict_all(const Predictor& predictor, std::span<const Sample> samples,
                                    std::size_t workers) {
    std::vector<Prediction> out(samples.size());
    for_each_chunk(samples.size(), workers, [&](std::size_t begin, std::size_t end) {
        std::vector<const Sample*> batch;
        for (std::size_t i = begin; i < end; ++i) batch.push_back(&samples[i]);
        std::vector<Prediction> preds = predictor.predict(batch);
        std::move(preds.begin(), preds.end(), out.begin() + static_cast<std::ptrdiff_t>(begin));
    });
    return out;
}

Evaluation evaluate(const Predictor& predictor, std::span<const Sample> samples, const MetricsConfig& config,
                    std::size_t workers) {
    const std::size_t n = samples.size();
    Evaluation ev;
    ev.predictions = predict_all(predictor, samples, workers);
    ev.pairs.resize(n);
    ev.scores.resize(n);
    for_each_chunk(n, workers, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            EvalPair& pair = ev.pairs[i];
            pair.id = samples[i].id;
            pair.gt = samples[i].ring;
            pair.pred = ev.predictions[i].ring;
            pair.terminated = ev.predictions[i].terminated;
            ev.scores[i] = score_pair(pair, config);
        }
    });
    return ev;
}

std::vector<MetricsRow> sweep(const Predictor& predictor, const Dataset& dataset, PerturbKind kind,
                              std::span<const double> levels, std::uint64_t seed, const MetricsConfig& config,
                              std::size_t workers) {
    if (dataset.grid_size != predictor.grid_size()) {
        throw Error(ErrorCode::GridMismatch, "dataset grid_size " + std::to_string(dataset.grid_size) +
                                                 " != model input_size " + std::to_string(predictor.grid_size()));
    }
    const Fill fill = channel_means(dataset);
    std::vector<MetricsRow> rows;
    for (double level : levels) {
        const PerturbationSpec spec{kind, level, seed};
        spec.validate();
        std::vector<Sample> perturbed;
        perturbed.reserve(dataset.samples.size());
        for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
            perturbed.push_back(apply_perturbation(dataset.samples[i], spec, fill, i));
        }
        const Evaluation ev = evaluate(predictor, perturbed, config, workers);
        rows.push_back(summarize(level, ev.scores, ev.pairs, config));
    }
    return rows;
}

}  // namespace polygonizer
