#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "polygonizer/adam.hpp"
#include "polygonizer/codec.hpp"
#include "polygonizer/ops.hpp"

namespace polygonizer {

struct ModelConfig {
    int input_size = 64;
    int in_channels = 3;
    int stem_channels = 16;
    bool stem_pool = true;
    std::vector<int> stage_channels{16, 32, 64};
    std::vector<int> blocks_per_stage{2, 2, 2};
    int feature_dim = 64;
    int embed_dim = 128;
    int hidden_dim = 128;
    int attention_dim = 64;
    int lstm_layers = 3;
    int max_seq_len = 26;
    double pos_encoding_scale = 0.1;
    std::uint64_t seed = 0;

    /// Input pixels per feature-map cell along each axis.
    int downsampling() const;
    int feature_size() const;
    int vocab_size() const { return input_size + 2; }
    void validate() const;

    /// Miniature of the full encoder/decoder for laptop-scale runs.
    static ModelConfig desk();
    /// 224-pixel input, 512-wide features on a 28x28 grid.
    static ModelConfig full_scale();

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Fixed 2-D sinusoidal encoding [channels, size, size]: the first half of the
/// channels encodes the row, the second half the column.
tc::Tensor<double> positional_encoding(int channels, int size);

template <typename T>
class Polygonizer {
public:
    using Var = tc::Var;

    /// Creates and randomly initializes every parameter from config.seed.
    explicit Polygonizer(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    const TokenVocabulary& vocab() const { return vocab_; }
    tc::ParameterStore<T>& params() { return params_; }
    const tc::ParameterStore<T>& params() const { return params_; }

    template <typename U>
    Polygonizer<U> cast() const;

    // Per-tape view of the parameters. Create one per tape.
    class Bound {
    public:
        Bound(Polygonizer& model, tc::Tape<T>& tape);
        Var operator[](std::size_t index) const { return vars_[index]; }
        tc::Tape<T>& tape() const { return *tape_; }

    private:
        tc::Tape<T>* tape_;
        std::vector<Var> vars_;
    };

    struct Encoded {
        Var feature_map;  // [B, df, Hf, Wf], positional encoding included
        Var values;       // [B, Hf*Wf, df]
        Var keys;         // [B, Hf*Wf, da]
        std::size_t batch = 0;
    };

    struct DecoderState {
        std::vector<Var> h;
        std::vector<Var> c;
    };

    struct StepOutput {
        Var logits;     // [B, D+2]
        Var attention;  // [B, Hf*Wf]
    };

    /// images: [B, 3, D, D] in [0, 1].
    Var encode_image(const Bound& bound, Var images) const;
    Encoded encode(const Bound& bound, Var images) const;
    DecoderState initial_state(const Bound& bound, std::size_t batch) const;

    /// One decoder step for every batch row. `prev_tokens` holds one id per row.
    StepOutput decode_step(const Bound& bound, std::span<const int> prev_tokens, int position,
                           DecoderState& state, const Encoded& encoded) const;

    struct LossResult {
        Var loss;  // mean NLL over every predicted token in the batch
        std::size_t predicted = 0;
        std::size_t correct = 0;  // argmax hits under teacher forcing
    };

    LossResult teacher_forced_loss(const Bound& bound, Var images,
                                   std::span<const TokenSequence> sequences) const;

    /// Batched greedy decoding; ties go to the smaller token id. Every output
    /// sequence starts with <s> and has at most max_seq_len tokens.
    std::vector<TokenSequence> greedy_infer(std::span<const tc::Tensor<T>* const> images) const;

    /// Stacks [3, D, D] images into a [B, 3, D, D] tensor.
    tc::Tensor<T> stack(std::span<const tc::Tensor<T>* const> images) const;

    Polygonizer(const Polygonizer&) = delete;
    Polygonizer& operator=(const Polygonizer&) = delete;
    Polygonizer(Polygonizer&&) noexcept = default;
    Polygonizer& operator=(Polygonizer&&) noexcept = default;

private:
    struct Uninitialized {};
    Polygonizer(ModelConfig config, Uninitialized);
    void build();
    void initialize();

    struct Block {
        std::size_t conv1_w, conv1_b, conv2_w, conv2_b;
        std::size_t shortcut_w = SIZE_MAX, shortcut_b = SIZE_MAX;
    };
    struct LstmLayer {
        std::size_t w_ih, w_hh, bias;
    };

    std::size_t add_param(const std::string& name, tc::Shape shape);
    Var residual_block(const Bound& bound, const Block& block, Var x) const;

    ModelConfig config_;
    TokenVocabulary vocab_;
    tc::ParameterStore<T> params_;
    tc::Tensor<T> positional_;

    std::size_t stem_w_ = 0, stem_b_ = 0;
    std::vector<std::vector<Block>> stages_;
    std::size_t proj_w_ = 0, proj_b_ = 0;
    std::size_t token_emb_ = 0, dim_emb_ = 0, pos_emb_ = 0;
    std::size_t att_wq_ = 0, att_wk_ = 0, att_v_ = 0;
    std::vector<LstmLayer> lstm_;
    std::size_t head_w_ = 0, head_b_ = 0;

    template <typename U>
    friend class Polygonizer;
};

/// Index of the largest entry, smallest index on ties.
template <typename T>
int argmax(std::span<const T> values);

}  // namespace polygonizer
