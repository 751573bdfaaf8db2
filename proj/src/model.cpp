#include "polygonizer/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace polygonizer {

using tc::Shape;
using tc::Tape;
using tc::Tensor;
using tc::Var;

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::InvalidArgument, "model config: " + what);
}

}  // namespace

int ModelConfig::downsampling() const {
    const int stages = static_cast<int>(stage_channels.size());
    // Every stage after the first opens with a 2x2 max-pool; the deepest stage
    // is upsampled once before concatenation.
    int factor = stem_pool ? 2 : 1;
    for (int s = 1; s < stages - 1; ++s) factor *= 2;
    return factor;
}

int ModelConfig::feature_size() const { return input_size / downsampling(); }

void ModelConfig::validate() const {
    require(input_size >= 8, "input_size must be at least 8");
    require(in_channels >= 1 && stem_channels >= 1, "channel counts must be positive");
    require(stage_channels.size() >= 2, "need at least two encoder stages");
    require(blocks_per_stage.size() == stage_channels.size(),
            "blocks_per_stage must have one entry per stage");
    for (std::size_t s = 0; s < stage_channels.size(); ++s) {
        require(stage_channels[s] >= 1 && blocks_per_stage[s] >= 1,
                "every stage needs positive channels and at least one block");
    }
    require(input_size % (downsampling() * 2) == 0,
            "input_size must be divisible by the encoder's total pooling factor");
    require(feature_dim >= 2 && feature_dim % 4 == 0,
            "feature_dim must be a positive multiple of 4");
    require(embed_dim == hidden_dim, "embed_dim must equal hidden_dim");
    require(hidden_dim >= 1 && attention_dim >= 1, "hidden and attention sizes must be positive");
    require(lstm_layers >= 1, "lstm_layers must be at least 1");
    require(max_seq_len >= 2, "max_seq_len must be at least 2");
    require(std::isfinite(pos_encoding_scale), "pos_encoding_scale must be finite");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
    ModelConfig c;
    c.input_size = 224;
    c.stem_channels = 64;
    c.stage_channels = {64, 128, 256, 512};
    c.blocks_per_stage = {2, 2, 2, 2};
    c.feature_dim = 512;
    c.embed_dim = 512;
    c.hidden_dim = 512;
    c.attention_dim = 512;
    c.max_seq_len = 130;
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_size", c.input_size},
                       {"in_channels", c.in_channels},
                       {"stem_channels", c.stem_channels},
                       {"stem_pool", c.stem_pool},
                       {"stage_channels", c.stage_channels},
                       {"blocks_per_stage", c.blocks_per_stage},
                       {"feature_dim", c.feature_dim},
                       {"embed_dim", c.embed_dim},
                       {"hidden_dim", c.hidden_dim},
                       {"attention_dim", c.attention_dim},
                       {"lstm_layers", c.lstm_layers},
                       {"max_seq_len", c.max_seq_len},
                       {"pos_encoding_scale", c.pos_encoding_scale},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.input_size = j.value("input_size", d.input_size);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.stem_channels = j.value("stem_channels", d.stem_channels);
    c.stem_pool = j.value("stem_pool", d.stem_pool);
    c.stage_channels = j.value("stage_channels", d.stage_channels);
    c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
    c.attention_dim = j.value("attention_dim", d.attention_dim);
    c.lstm_layers = j.value("lstm_layers", d.lstm_layers);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.pos_encoding_scale = j.value("pos_encoding_scale", d.pos_encoding_scale);
    c.seed = j.value("seed", d.seed);
}

Tensor<double> positional_encoding(int channels, int size) {
    const int half = channels / 2;
    Tensor<double> pe({static_cast<std::size_t>(channels), static_cast<std::size_t>(size),
                       static_cast<std::size_t>(size)});
    for (int ch = 0; ch < channels; ++ch) {
        const bool rows = ch < half;
        const int k = (rows ? ch : ch - half) / 2;
        const bool use_cos = ch % 2 == 1;
        const double freq = 1.0 / std::pow(10000.0, 2.0 * k / static_cast<double>(half));
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double arg = (rows ? y : x) * freq;
                pe.data[(static_cast<std::size_t>(ch) * size + y) * size + x] =
                    use_cos ? std::cos(arg) : std::sin(arg);
            }
        }
    }
    return pe;
}

template <typename T>
int argmax(std::span<const T> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

template <typename T>
Polygonizer<T>::Polygonizer(ModelConfig config) : Polygonizer(std::move(config), Uninitialized{}) {
    initialize();
}

template <typename T>
Polygonizer<T>::Polygonizer(ModelConfig config, Uninitialized)
    : config_((config.validate(), std::move(config))), vocab_(config_.input_size) {
    build();
}

template <typename T>
std::size_t Polygonizer<T>::add_param(const std::string& name, Shape shape) {
    params_.create(name, std::move(shape));
    return params_.size() - 1;
}

template <typename T>
void Polygonizer<T>::build() {
    const auto u = [](int v) { return static_cast<std::size_t>(v); };
    const ModelConfig& c = config_;
    stem_w_ = add_param("encoder.stem.weight", {u(c.stem_channels), u(c.in_channels), 3, 3});
    stem_b_ = add_param("encoder.stem.bias", {u(c.stem_channels)});
    int in = c.stem_channels;
    stages_.clear();
    for (std::size_t s = 0; s < c.stage_channels.size(); ++s) {
        const int out = c.stage_channels[s];
        std::vector<Block> blocks;
        for (int b = 0; b < c.blocks_per_stage[s]; ++b) {
            const std::string p = "encoder.stage" + std::to_string(s) + ".block" + std::to_string(b);
            Block blk{};
            blk.conv1_w = add_param(p + ".conv1.weight", {u(out), u(in), 3, 3});
            blk.conv1_b = add_param(p + ".conv1.bias", {u(out)});
            blk.conv2_w = add_param(p + ".conv2.weight", {u(out), u(out), 3, 3});
            blk.conv2_b = add_param(p + ".conv2.bias", {u(out)});
            if (in != out) {
                blk.shortcut_w = add_param(p + ".shortcut.weight", {u(out), u(in), 1, 1});
                blk.shortcut_b = add_param(p + ".shortcut.bias", {u(out)});
            }
            blocks.push_back(blk);
            in = out;
        }
        stages_.push_back(std::move(blocks));
    }
    const std::size_t n = c.stage_channels.size();
    const int concat_channels = c.stage_channels[n - 2] + c.stage_channels[n - 1];
    proj_w_ = add_param("encoder.project.weight", {u(c.feature_dim), u(concat_channels), 1, 1});
    proj_b_ = add_param("encoder.project.bias", {u(c.feature_dim)});

    token_emb_ = add_param("decoder.token_embedding", {u(c.vocab_size()), u(c.embed_dim)});
    dim_emb_ = add_param("decoder.dimension_embedding", {u(kNumTokenDims), u(c.embed_dim)});
    pos_emb_ = add_param("decoder.position_embedding", {u(c.max_seq_len), u(c.embed_dim)});
    att_wq_ = add_param("decoder.attention.query", {u(c.attention_dim), u(c.hidden_dim)});
    att_wk_ = add_param("decoder.attention.key", {u(c.attention_dim), u(c.feature_dim)});
    att_v_ = add_param("decoder.attention.score", {u(c.attention_dim)});
    lstm_.clear();
    for (int l = 0; l < c.lstm_layers; ++l) {
        const int din = l == 0 ? c.embed_dim + c.feature_dim : c.hidden_dim;
        const std::string p = "decoder.lstm" + std::to_string(l);
        LstmLayer layer{};
        layer.w_ih = add_param(p + ".w_ih", {4 * u(c.hidden_dim), u(din)});
        layer.w_hh = add_param(p + ".w_hh", {4 * u(c.hidden_dim), u(c.hidden_dim)});
        layer.bias = add_param(p + ".bias", {4 * u(c.hidden_dim)});
        lstm_.push_back(layer);
    }
    head_w_ = add_param("decoder.head.weight", {u(c.vocab_size()), u(c.hidden_dim)});
    head_b_ = add_param("decoder.head.bias", {u(c.vocab_size())});

    const Tensor<double> pe = positional_encoding(c.feature_dim, c.feature_size());
    positional_ = Tensor<T>(pe.shape);
    for (std::size_t i = 0; i < pe.size(); ++i) {
        positional_.data[i] = static_cast<T>(c.pos_encoding_scale * pe.data[i]);
    }
}

template <typename T>
void Polygonizer<T>::initialize() {
    std::mt19937_64 rng(config_.seed);
    auto params = params_.all();
    auto normal = [&rng](Tensor<T>& t, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (T& v : t.data) v = static_cast<T>(dist(rng));
    };
    auto uniform = [&rng](Tensor<T>& t, double bound) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (T& v : t.data) v = static_cast<T>(dist(rng));
    };
    auto fan_in = [](const Tensor<T>& t) {
        return static_cast<double>(t.size() / t.dim(0));
    };
    auto he = [&](std::size_t idx, double gain) {
        Tensor<T>& w = params[idx]->value;
        normal(w, gain * std::sqrt(2.0 / fan_in(w)));
    };

    he(stem_w_, 1.0);
    for (const auto& stage : stages_) {
        for (const Block& blk : stage) {
            he(blk.conv1_w, 1.0);
            // Residual branches start small so the unnormalized stack stays
            // close to identity at initialization.
            he(blk.conv2_w, 0.1);
            if (blk.shortcut_w != SIZE_MAX) he(blk.shortcut_w, 1.0);
        }
    }
    he(proj_w_, 0.5);

    normal(params[token_emb_]->value, 0.1);
    normal(params[dim_emb_]->value, 0.1);
    normal(params[pos_emb_]->value, 0.1);
    uniform(params[att_wq_]->value, 1.0 / std::sqrt(config_.hidden_dim));
    uniform(params[att_wk_]->value, 1.0 / std::sqrt(config_.feature_dim));
    uniform(params[att_v_]->value, 1.0 / std::sqrt(config_.attention_dim));
    const double lstm_bound = 1.0 / std::sqrt(config_.hidden_dim);
    for (const LstmLayer& layer : lstm_) {
        uniform(params[layer.w_ih]->value, lstm_bound);
        uniform(params[layer.w_hh]->value, lstm_bound);
        Tensor<T>& b = params[layer.bias]->value;
        const std::size_t dh = static_cast<std::size_t>(config_.hidden_dim);
        for (std::size_t k = dh; k < 2 * dh; ++k) b.data[k] = T(1);
    }
    uniform(params[head_w_]->value, 0.1 / std::sqrt(config_.hidden_dim));
}

template <typename T>
template <typename U>
Polygonizer<U> Polygonizer<T>::cast() const {
    Polygonizer<U> out(config_, typename Polygonizer<U>::Uninitialized{});
    auto dst = out.params().all();
    auto src = params_.all();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
}

template <typename T>
Polygonizer<T>::Bound::Bound(Polygonizer& model, Tape<T>& tape) : tape_(&tape) {
    auto params = model.params_.all();
    vars_.reserve(params.size());
    for (tc::Parameter<T>* p : params) vars_.push_back(tape.param(*p));
}

template <typename T>
Tensor<T> Polygonizer<T>::stack(std::span<const Tensor<T>* const> images) const {
    const auto d = static_cast<std::size_t>(config_.input_size);
    const auto ch = static_cast<std::size_t>(config_.in_channels);
    const Shape expected{ch, d, d};
    Tensor<T> out({images.size(), ch, d, d});
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b]->shape != expected) {
            throw Error(ErrorCode::Shape, "image shape " + tc::shape_string(images[b]->shape) +
                                              ", model expects " + tc::shape_string(expected));
        }
        std::copy(images[b]->data.begin(), images[b]->data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(b * ch * d * d));
    }
    return out;
}

template <typename T>
Var Polygonizer<T>::residual_block(const Bound& bound, const Block& blk, Var x) const {
    Tape<T>& t = bound.tape();
    Var y = tc::relu(t, tc::conv2d(t, x, bound[blk.conv1_w], bound[blk.conv1_b], 1, 1));
    y = tc::conv2d(t, y, bound[blk.conv2_w], bound[blk.conv2_b], 1, 1);
    Var shortcut = x;
    if (blk.shortcut_w != SIZE_MAX) {
        shortcut = tc::conv2d(t, x, bound[blk.shortcut_w], bound[blk.shortcut_b], 1, 0);
    }
    return tc::relu(t, tc::add(t, y, shortcut));
}

template <typename T>
Var Polygonizer<T>::encode_image(const Bound& bound, Var images) const {
    Tape<T>& t = bound.tape();
    const Shape& s = t.shape(images);
    const auto d = static_cast<std::size_t>(config_.input_size);
    if (s.size() != 4 || s[1] != static_cast<std::size_t>(config_.in_channels) || s[2] != d ||
        s[3] != d) {
        throw Error(ErrorCode::Shape, "encoder input " + tc::shape_string(s) + ", expected [B," +
                                          std::to_string(config_.in_channels) + "," +
                                          std::to_string(d) + "," + std::to_string(d) + "]");
    }
    const std::size_t batch = s[0];

    Var x = tc::relu(t, tc::conv2d(t, images, bound[stem_w_], bound[stem_b_], 1, 1));
    if (config_.stem_pool) x = tc::max_pool2x2(t, x);
    std::vector<Var> outputs;
    for (std::size_t st = 0; st < stages_.size(); ++st) {
        if (st > 0) x = tc::max_pool2x2(t, x);
        for (const Block& blk : stages_[st]) x = residual_block(bound, blk, x);
        outputs.push_back(x);
    }
    const std::size_t n = outputs.size();
    const Var deep = tc::upsample2x(t, outputs[n - 1]);
    const Var merged = tc::concat(t, outputs[n - 2], deep, 1);
    const Var projected = tc::conv2d(t, merged, bound[proj_w_], bound[proj_b_], 1, 0);

    Tensor<T> pe({batch, positional_.dim(0), positional_.dim(1), positional_.dim(2)});
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy(positional_.data.begin(), positional_.data.end(),
                  pe.data.begin() + static_cast<std::ptrdiff_t>(b * positional_.size()));
    }
    return tc::add(t, projected, t.constant(std::move(pe)));
}

template <typename T>
typename Polygonizer<T>::Encoded Polygonizer<T>::encode(const Bound& bound, Var images) const {
    Tape<T>& t = bound.tape();
    Encoded enc;
    enc.feature_map = encode_image(bound, images);
    enc.batch = t.shape(images)[0];
    enc.values = tc::spatial_to_sequence(t, enc.feature_map);
    enc.keys = tc::linear(t, enc.values, bound[att_wk_], Var{});
    return enc;
}

template <typename T>
typename Polygonizer<T>::DecoderState Polygonizer<T>::initial_state(const Bound& bound,
                                                                    std::size_t batch) const {
    Tape<T>& t = bound.tape();
    DecoderState state;
    const Shape s{batch, static_cast<std::size_t>(config_.hidden_dim)};
    for (int l = 0; l < config_.lstm_layers; ++l) {
        state.h.push_back(t.constant(Tensor<T>(s)));
        state.c.push_back(t.constant(Tensor<T>(s)));
    }
    return state;
}

template <typename T>
typename Polygonizer<T>::StepOutput Polygonizer<T>::decode_step(const Bound& bound,
                                                                std::span<const int> prev_tokens,
                                                                int position, DecoderState& state,
                                                                const Encoded& encoded) const {
    if (position < 0 || position >= config_.max_seq_len) {
        throw Error(ErrorCode::SequenceOverflow, "decode position " + std::to_string(position) +
                                                     " outside [0, " +
                                                     std::to_string(config_.max_seq_len) + ")");
    }
    if (prev_tokens.size() != encoded.batch) {
        throw Error(ErrorCode::Shape, std::to_string(prev_tokens.size()) + " tokens for batch " +
                                          std::to_string(encoded.batch));
    }
    Tape<T>& t = bound.tape();
    const std::vector<int> dims(encoded.batch, static_cast<int>(input_dim(position)));
    const std::vector<int> positions(encoded.batch, position);
    Var input = tc::embedding(t, bound[token_emb_], prev_tokens);
    input = tc::add(t, input, tc::embedding(t, bound[dim_emb_], std::span<const int>(dims)));
    input = tc::add(t, input, tc::embedding(t, bound[pos_emb_], std::span<const int>(positions)));

    const auto [context, weights] = tc::attention_projected(
        t, state.h.back(), encoded.keys, encoded.values, bound[att_wq_], bound[att_v_]);
    Var x = tc::concat(t, input, context, 1);
    for (std::size_t l = 0; l < lstm_.size(); ++l) {
        const auto [h, c] = tc::lstm_cell(t, x, state.h[l], state.c[l], bound[lstm_[l].w_ih],
                                          bound[lstm_[l].w_hh], bound[lstm_[l].bias]);
        state.h[l] = h;
        state.c[l] = c;
        x = h;
    }
    return {tc::linear(t, x, bound[head_w_], bound[head_b_]), weights};
}

template <typename T>
typename Polygonizer<T>::LossResult Polygonizer<T>::teacher_forced_loss(
    const Bound& bound, Var images, std::span<const TokenSequence> sequences) const {
    Tape<T>& t = bound.tape();
    const std::size_t batch = sequences.size();
    if (batch == 0 || t.shape(images).empty() || t.shape(images)[0] != batch) {
        throw Error(ErrorCode::Shape, "teacher forcing needs one sequence per image");
    }
    std::size_t longest = 0;
    std::size_t predicted = 0;
    for (const TokenSequence& seq : sequences) {
        if (seq.size() < 2 || seq.tokens.front() != vocab_.start_id()) {
            throw Error(ErrorCode::MalformedSequence, "teacher forcing needs <s> ... sequences");
        }
        if (seq.size() > static_cast<std::size_t>(config_.max_seq_len)) {
            throw Error(ErrorCode::SequenceOverflow,
                        "sequence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len " +
                            std::to_string(config_.max_seq_len));
        }
        longest = std::max(longest, seq.size());
        predicted += seq.size() - 1;
    }

    const Encoded enc = encode(bound, images);
    DecoderState state = initial_state(bound, batch);
    LossResult result;
    result.predicted = predicted;
    const T weight = T(1) / static_cast<T>(predicted);
    std::vector<int> prev(batch);
    std::vector<int> targets(batch);
    std::vector<T> weights(batch);
    Var total;
    for (std::size_t p = 0; p + 1 < longest; ++p) {
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& tok = sequences[b].tokens;
            const bool active = p + 1 < tok.size();
            // Finished rows keep stepping with a zero loss weight.
            prev[b] = active ? tok[p] : vocab_.stop_id();
            targets[b] = active ? tok[p + 1] : 0;
            weights[b] = active ? weight : T(0);
        }
        const StepOutput step = decode_step(bound, prev, static_cast<int>(p), state, enc);
        const auto& logits = t.value(step.logits).data;
        const auto vocab = static_cast<std::size_t>(vocab_.vocab_size());
        for (std::size_t b = 0; b < batch; ++b) {
            if (weights[b] == T(0)) continue;
            const std::span<const T> row(logits.data() + b * vocab, vocab);
            if (argmax(row) == targets[b]) ++result.correct;
        }
        const Var loss = tc::softmax_nll(t, step.logits, std::span<const int>(targets),
                                         std::span<const T>(weights));
        total = total.valid() ? tc::add(t, total, loss) : loss;
    }
    result.loss = total;
    return result;
}

template <typename T>
std::vector<TokenSequence> Polygonizer<T>::greedy_infer(
    std::span<const Tensor<T>* const> images) const {
    if (images.empty()) return {};
    // Parameters are only read: a non-recording tape never writes gradients.
    auto& self = const_cast<Polygonizer&>(*this);
    Tape<T> tape(false);
    const Bound bound(self, tape);
    const Var input = tape.constant(stack(images));
    const Encoded enc = encode(bound, input);
    const std::size_t batch = images.size();
    DecoderState state = initial_state(bound, batch);
    std::vector<std::vector<int>> tokens(batch, std::vector<int>{vocab_.start_id()});
    std::vector<bool> done(batch, false);
    std::vector<int> prev(batch);
    const auto vocab = static_cast<std::size_t>(vocab_.vocab_size());
    std::size_t remaining = batch;
    for (int p = 0; p + 1 < config_.max_seq_len && remaining > 0; ++p) {
        for (std::size_t b = 0; b < batch; ++b) prev[b] = done[b] ? vocab_.stop_id() : tokens[b].back();
        const StepOutput step = decode_step(bound, prev, p, state, enc);
        const auto& logits = tape.value(step.logits).data;
        for (std::size_t b = 0; b < batch; ++b) {
            if (done[b]) continue;
            const int next = argmax(std::span<const T>(logits.data() + b * vocab, vocab));
            tokens[b].push_back(next);
            if (next == vocab_.stop_id()) {
                done[b] = true;
                --remaining;
            }
        }
    }
    std::vector<TokenSequence> out;
    out.reserve(batch);
    for (auto& seq : tokens) out.push_back(make_sequence(std::move(seq), vocab_));
    return out;
}

template class Polygonizer<float>;
template class Polygonizer<double>;
template Polygonizer<double> Polygonizer<float>::cast<double>() const;
template Polygonizer<float> Polygonizer<double>::cast<float>() const;
template Polygonizer<float> Polygonizer<float>::cast<float>() const;
template int argmax<float>(std::span<const float>);
template int argmax<double>(std::span<const double>);

}  // namespace polygonizer
