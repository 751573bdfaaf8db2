#pragma once

#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "polygonizer/data.hpp"
#include "polygonizer/metrics.hpp"
#include "polygonizer/model.hpp"
#include "polygonizer/perturb.hpp"

namespace polygonizer {

struct Prediction {
    TokenSequence tokens;
    std::optional<PolygonRing> ring;  // empty when decoding failed
    bool terminated = true;
    std::string failure;  // error code name when decoding failed
};

/// Maps decoded tokens to a scored prediction; codec errors become failures.
Prediction to_prediction(TokenSequence tokens, const TokenVocabulary& vocab);

class Predictor {
public:
    virtual ~Predictor() = default;
    virtual int grid_size() const = 0;
    /// Must be safe to call concurrently.
    virtual std::vector<Prediction> predict(std::span<const Sample* const> samples) const = 0;
};

class ModelPredictor final : public Predictor {
public:
    explicit ModelPredictor(const Polygonizer<float>& model) : model_(&model) {}
    int grid_size() const override { return model_->config().input_size; }
    std::vector<Prediction> predict(std::span<const Sample* const> samples) const override;

private:
    const Polygonizer<float>* model_;
};

/// Replays each sample's own ground truth through the codec: a perfect
/// predictor for harness tests.
class GroundTruthPredictor final : public Predictor {
public:
    explicit GroundTruthPredictor(int grid_size) : vocab_(grid_size) {}
    int grid_size() const override { return vocab_.grid_size(); }
    std::vector<Prediction> predict(std::span<const Sample* const> samples) const override;

private:
    TokenVocabulary vocab_;
};

/// Samples per predictor call. Fixed so results do not depend on the worker count.
inline constexpr std::size_t kEvalChunk = 16;

/// Worker count from POLYGONIZER_THREADS, else the hardware concurrency.
std::size_t worker_count();

/// Predictions in sample order, computed in kEvalChunk batches on `workers` threads.
std::vector<Prediction> predict_all(const Predictor& predictor, std::span<const Sample> samples,
                                    std::size_t workers = worker_count());

struct Evaluation {
    std::vector<Prediction> predictions;
    std::vector<EvalPair> pairs;
    std::vector<PairScore> scores;
};

Evaluation evaluate(const Predictor& predictor, std::span<const Sample> samples, const MetricsConfig& config,
                    std::size_t workers = worker_count());

/// One metrics row per level, in the given order. Fill values for erase and
/// rotate are the per-channel means of the unperturbed samples.
std::vector<MetricsRow> sweep(const Predictor& predictor, const Dataset& dataset, PerturbKind kind,
                              std::span<const double> levels, std::uint64_t seed, const MetricsConfig& config,
                              std::size_t workers = worker_count());

}  // namespace polygonizer
