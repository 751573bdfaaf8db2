#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "polygonizer/adam.hpp"
#include "polygonizer/data.hpp"
#include "polygonizer/model.hpp"

namespace polygonizer {

struct TrainConfig {
    int epochs = 250;
    int batch_size = 32;
    double learning_rate = 2e-4;
    /// Global gradient-norm clip; 0 disables clipping.
    double clip_norm = 0.0;
    /// Stops after this many optimizer steps; 0 means no limit.
    std::uint64_t max_steps = 0;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;       // mean over the epoch's batches
    double token_accuracy = 0.0;  // teacher-forced argmax hits / predicted tokens
    std::uint64_t step = 0;       // optimizer steps completed so far
};

void to_json(nlohmann::json& j, const EpochStats& s);

struct TrainResult {
    std::vector<EpochStats> epochs;
    std::size_t skipped_overflow = 0;
    std::uint64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Teacher-forced minibatch training with Adam. Samples whose token sequence
/// exceeds max_seq_len are skipped and counted. Epoch order is a pure
/// function of (seed, epoch).
TrainResult train(Polygonizer<float>& model, tc::AdamState<float>& optimizer, const Dataset& dataset,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

struct TokenAccuracy {
    std::size_t predicted = 0;
    std::size_t correct = 0;
    double mean_loss = 0.0;

    double accuracy() const { return predicted == 0 ? 0.0 : double(correct) / double(predicted); }
};

/// Teacher-forced loss and next-token accuracy without updating parameters.
TokenAccuracy teacher_forced_accuracy(Polygonizer<float>& model, const Dataset& dataset,
                                      int batch_size = 32);

}  // namespace polygonizer
