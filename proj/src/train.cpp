#include "polygonizer/train.hpp"

#include <algorithm>
#include <numeric>

namespace polygonizer {

using json = nlohmann::json;

namespace {

struct Prepared {
    std::vector<const Image*> images;
    std::vector<TokenSequence> sequences;
    std::size_t skipped = 0;
};

Prepared prepare(const Polygonizer<float>& model, const Dataset& dataset) {
    if (dataset.grid_size != model.config().input_size) {
        throw Error(ErrorCode::GridMismatch, "dataset grid_size " + std::to_string(dataset.grid_size) +
                                                 " != model input_size " +
                                                 std::to_string(model.config().input_size));
    }
    Prepared p;
    const auto limit = static_cast<std::size_t>(model.config().max_seq_len);
    for (const Sample& s : dataset.samples) {
        TokenSequence seq = encode_polygon(s.ring, model.vocab());
        if (seq.size() > limit) {
            ++p.skipped;
            continue;
        }
        p.images.push_back(&s.image);
        p.sequences.push_back(std::move(seq));
    }
    return p;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "train config: epochs must be at least 1");
    if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "train config: batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "train config: learning_rate must be positive");
    if (clip_norm < 0.0) throw Error(ErrorCode::InvalidArgument, "train config: clip_norm must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"learning_rate", c.learning_rate},
             {"clip_norm", c.clip_norm},
             {"max_steps", c.max_steps},
             {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const EpochStats& s) {
    j = json{{"epoch", s.epoch}, {"mean_loss", s.mean_loss}, {"token_accuracy", s.token_accuracy}, {"step", s.step}};
}

TrainResult train(Polygonizer<float>& model, tc::AdamState<float>& optimizer, const Dataset& dataset,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    const Prepared data = prepare(model, dataset);
    if (data.sequences.empty()) throw Error(ErrorCode::InvalidArgument, "no trainable samples in dataset");

    TrainResult result;
    result.skipped_overflow = data.skipped;
    auto params = model.params().all();
    std::vector<std::size_t> order(data.sequences.size());
    const auto batch_size = static_cast<std::size_t>(config.batch_size);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng = sample_rng(config.seed, static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        std::size_t predicted = 0;
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            if (config.max_steps != 0 && result.steps >= config.max_steps) break;
            const std::size_t end = std::min(order.size(), begin + batch_size);
            std::vector<const Image*> images;
            std::vector<TokenSequence> seqs;
            for (std::size_t k = begin; k < end; ++k) {
                images.push_back(data.images[order[k]]);
                seqs.push_back(data.sequences[order[k]]);
            }
            model.params().zero_grad();
            tc::Tape<float> tape;
            const typename Polygonizer<float>::Bound bound(model, tape);
            const auto r = model.teacher_forced_loss(bound, tape.constant(model.stack(images)), seqs);
            tape.backward(r.loss);
            if (config.clip_norm > 0.0) tc::clip_grad_norm(params, config.clip_norm);
            tc::adam_step(params, optimizer, config.learning_rate);
            ++result.steps;

            loss_sum += static_cast<double>(tape.value(r.loss).data[0]) * static_cast<double>(r.predicted);
            predicted += r.predicted;
            correct += r.correct;
        }
        if (predicted == 0) break;
        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = loss_sum / static_cast<double>(predicted);
        stats.token_accuracy = static_cast<double>(correct) / static_cast<double>(predicted);
        stats.step = result.steps;
        result.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
        if (config.max_steps != 0 && result.steps >= config.max_steps) break;
    }
    return result;
}

TokenAccuracy teacher_forced_accuracy(Polygonizer<float>& model, const Dataset& dataset, int batch_size) {
    const Prepared data = prepare(model, dataset);
    TokenAccuracy acc;
    double loss_sum = 0.0;
    const auto bs = static_cast<std::size_t>(std::max(batch_size, 1));
    for (std::size_t begin = 0; begin < data.sequences.size(); begin += bs) {
        const std::size_t end = std::min(data.sequences.size(), begin + bs);
        const std::vector<const Image*> images(data.images.begin() + static_cast<std::ptrdiff_t>(begin),
                                               data.images.begin() + static_cast<std::ptrdiff_t>(end));
        const std::vector<TokenSequence> seqs(data.sequences.begin() + static_cast<std::ptrdiff_t>(begin),
                                              data.sequences.begin() + static_cast<std::ptrdiff_t>(end));
        tc::Tape<float> tape(false);
        const typename Polygonizer<float>::Bound bound(model, tape);
        const auto r = model.teacher_forced_loss(bound, tape.constant(model.stack(images)), seqs);
        loss_sum += static_cast<double>(tape.value(r.loss).data[0]) * static_cast<double>(r.predicted);
        acc.predicted += r.predicted;
        acc.correct += r.correct;
    }
    acc.mean_loss = acc.predicted == 0 ? 0.0 : loss_sum / static_cast<double>(acc.predicted);
    return acc;
}

}  // namespace polygonizer
