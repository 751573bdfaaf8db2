#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <string>
#include <vector>

#include "polygonizer/error.hpp"

namespace polygonizer::tc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

// 64-byte alignment keeps Eigen's vectorized loops peeling the same way on every run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

// Dense row-major array.
template <typename T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, const std::vector<T>& values) : Tensor(std::move(s), Buffer<T>(values.begin(), values.end())) {}
    Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw Error(ErrorCode::Shape, "tensor data length " + std::to_string(data.size()) +
                                              " does not match shape " + shape_string(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape, Buffer<U>(data.begin(), data.end()));
    }
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    // Empty until the first backward pass touches the parameter.
    std::vector<T> grad;

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

// Owns parameters in creation order; pointers stay stable.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& create(std::string name, Shape shape) {
        for (const auto& p : params_) {
            if (p->name == name) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
        }
        auto p = std::make_unique<Parameter<T>>();
        p->name = std::move(name);
        p->value = Tensor<T>(std::move(shape));
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Parameter<T>* find(const std::string& name) {
        for (auto& p : params_) {
            if (p->name == name) return p.get();
        }
        return nullptr;
    }

    const Parameter<T>* find(const std::string& name) const {
        for (const auto& p : params_) {
            if (p->name == name) return p.get();
        }
        return nullptr;
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<const Parameter<T>*> all() const {
        std::vector<const Parameter<T>*> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
};

}  // namespace polygonizer::tc
