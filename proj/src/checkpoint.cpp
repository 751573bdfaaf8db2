#include "polygonizer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace polygonizer {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint8_t kDtypeF32 = 0;

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    template <typename U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    std::string take() { return std::move(out_); }
    std::size_t size() const { return out_.size(); }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& data, std::string origin) : data_(data), origin_(std::move(origin)) {}

    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) fail("truncated at byte " + std::to_string(pos_));
    }
    template <typename U>
    U le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    float f32_at(std::size_t at) const {
        std::uint32_t v = 0;
        for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[at + i])) << (8 * i);
        return std::bit_cast<float>(v);
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return data_.size(); }
    [[noreturn]] void fail(const std::string& what) const {
        throw Error(ErrorCode::Schema, origin_ + ": checkpoint " + what);
    }

private:
    const std::string& data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::string name;
    const tc::Buffer<float>* values;
    tc::Shape shape;
};

}  // namespace

std::string checkpoint_bytes(const Polygonizer<float>& model, const tc::AdamState<float>* optimizer,
                             const json& training) {
    std::vector<Entry> entries;
    const auto params = model.params().all();
    for (const auto* p : params) entries.push_back({p->name, &p->value.data, p->value.shape});
    json opt = nullptr;
    if (optimizer) {
        if (optimizer->m.size() != params.size() || optimizer->v.size() != params.size()) {
            throw Error(ErrorCode::Shape, "optimizer state does not match the model parameters");
        }
        opt = json{{"beta1", optimizer->config.beta1},
                   {"beta2", optimizer->config.beta2},
                   {"epsilon", optimizer->config.epsilon},
                   {"step", optimizer->step}};
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back({"adam.m/" + params[i]->name, &optimizer->m[i], params[i]->value.shape});
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back({"adam.v/" + params[i]->name, &optimizer->v[i], params[i]->value.shape});
        }
    }
    const std::string blob = json{{"model", model.config()}, {"training", training}, {"optimizer", opt}}.dump();

    Writer w;
    w.bytes(kCheckpointMagic, 4);
    w.le<std::uint32_t>(kCheckpointVersion);
    w.le<std::uint64_t>(blob.size());
    w.bytes(blob.data(), blob.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    for (const Entry& e : entries) {
        w.le<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
        w.bytes(e.name.data(), e.name.size());
        w.le<std::uint8_t>(kDtypeF32);
        w.le<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
        for (std::size_t d : e.shape) w.le<std::uint64_t>(d);
        const std::uint64_t nbytes = e.values->size() * sizeof(float);
        w.le<std::uint64_t>(offset);
        w.le<std::uint64_t>(nbytes);
        offset += nbytes;
    }
    for (const Entry& e : entries) {
        for (float v : *e.values) w.f32(v);
    }
    return w.take();
}

void save_checkpoint(const fs::path& path, const Polygonizer<float>& model, const tc::AdamState<float>* optimizer,
                     const json& training) {
    const std::string bytes = checkpoint_bytes(model, optimizer, training);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f || !f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
        throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
    }
}

LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
    Reader r(bytes, origin);
    if (r.str(4) != std::string(kCheckpointMagic, 4)) r.fail("magic is not PLGZ");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) r.fail("version " + std::to_string(version) + " is not supported");
    const auto blob_len = r.le<std::uint64_t>();
    json blob;
    ModelConfig config;
    try {
        blob = json::parse(r.str(blob_len));
        config = blob.at("model").get<ModelConfig>();
    } catch (const json::exception& e) {
        r.fail(std::string("config blob: ") + e.what());
    }

    struct TableEntry {
        tc::Shape shape;
        std::uint64_t offset, nbytes;
    };
    std::map<std::string, TableEntry> table;
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.le<std::uint32_t>());
        if (r.le<std::uint8_t>() != kDtypeF32) r.fail("tensor " + name + " has an unsupported dtype");
        TableEntry e;
        const auto rank = r.le<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.le<std::uint64_t>());
        e.offset = r.le<std::uint64_t>();
        e.nbytes = r.le<std::uint64_t>();
        if (!table.emplace(std::move(name), std::move(e)).second) r.fail("has a duplicate tensor name");
    }
    const std::size_t data_start = r.pos();

    Polygonizer<float> model(config);
    auto fill = [&](const std::string& name, const tc::Shape& shape, tc::Buffer<float>& dst) {
        const auto it = table.find(name);
        if (it == table.end()) r.fail("is missing tensor " + name);
        const TableEntry& e = it->second;
        if (e.shape != shape) {
            r.fail("tensor " + name + " has shape " + tc::shape_string(e.shape) + ", expected " + tc::shape_string(shape));
        }
        if (e.nbytes != tc::numel(shape) * sizeof(float) || data_start + e.offset + e.nbytes > r.size()) {
            r.fail("tensor " + name + " has an invalid data range");
        }
        dst.resize(tc::numel(shape));
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = r.f32_at(data_start + e.offset + 4 * k);
    };
    auto params = model.params().all();
    for (auto* p : params) fill(p->name, p->value.shape, p->value.data);

    std::optional<tc::AdamState<float>> optimizer;
    const json& opt = blob.contains("optimizer") ? blob["optimizer"] : json(nullptr);
    if (!opt.is_null()) {
        tc::AdamState<float> state;
        try {
            state.config = {opt.at("beta1").get<double>(), opt.at("beta2").get<double>(), opt.at("epsilon").get<double>()};
            state.step = opt.at("step").get<std::uint64_t>();
        } catch (const json::exception& e) {
            r.fail(std::string("optimizer blob: ") + e.what());
        }
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            fill("adam.m/" + params[i]->name, params[i]->value.shape, state.m[i]);
            fill("adam.v/" + params[i]->name, params[i]->value.shape, state.v[i]);
        }
        optimizer = std::move(state);
    }
    return LoadedCheckpoint{std::move(model), std::move(optimizer), blob.value("training", json::object())};
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str(), path.string());
}

}  // namespace polygonizer
