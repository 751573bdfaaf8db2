#include "polygonizer/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace polygonizer::tc {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MapRow = Eigen::Map<RowVec<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowVec<T>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw Error(ErrorCode::Shape, op + ": " + detail);
}

template <typename T>
CMapR<T> cmat(const Buffer<T>& data, std::size_t rows, std::size_t cols) {
    return CMapR<T>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapR<T> mat(Buffer<T>& data, std::size_t rows, std::size_t cols) {
    return MapR<T>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
CMapR<T> cmat(const T* data, std::size_t rows, std::size_t cols) {
    return CMapR<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapR<T> mat(T* data, std::size_t rows, std::size_t cols) {
    return MapR<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct Spatial {
    std::size_t batch, channels, height, width;
    bool batched;
};

Spatial spatial_dims(const Shape& s, const std::string& op) {
    if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
    if (s.size() == 3) return {1, s[0], s[1], s[2], false};
    shape_error(op, "expected [B,C,H,W] or [C,H,W], got " + shape_string(s));
}

Shape spatial_shape(const Spatial& d, std::size_t c, std::size_t h, std::size_t w) {
    if (d.batched) return {d.batch, c, h, w};
    return {c, h, w};
}

template <typename T>
void accumulate(Buffer<T>& dst, const Buffer<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* col) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* row = col + ((c * kh + ki) * kw + kj) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oy * out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
                        std::fill(dst, dst + out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * height + static_cast<std::size_t>(iy)) * width;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                                      ? T(0)
                                      : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* dx) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* row = col + ((c * kh + ki) * kw + kj) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                    T* dst = dx + (c * height + static_cast<std::size_t>(iy)) * width;
                    const T* src = row + oy * out_w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
    const Shape xs = tape.shape(x);
    const Shape& ws = tape.shape(weight);
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[1]) {
        shape_error("linear", "input " + shape_string(xs) + " vs weight " + shape_string(ws));
    }
    const std::size_t out = ws[0];
    const std::size_t in = ws[1];
    const std::size_t rows = numel(xs) / in;
    const bool has_bias = bias.valid();
    if (has_bias && tape.shape(bias) != Shape{out}) {
        shape_error("linear", "bias " + shape_string(tape.shape(bias)));
    }

    Shape ys = xs;
    ys.back() = out;
    Tensor<T> y(ys);
    auto Y = mat(y.data, rows, out);
    Y.noalias() = cmat(tape.value(x).data, rows, in) * cmat(tape.value(weight).data, out, in).transpose();
    if (has_bias) Y.rowwise() += CMapRow<T>(tape.value(bias).data.data(), static_cast<Eigen::Index>(out));

    auto backward = [x, weight, bias, has_bias, rows, in, out](Tape<T>& t, std::uint32_t self) {
        const auto GY = cmat(t.grad_buffer(self), rows, out);
        if (t.requires_grad(x)) {
            mat(t.grad_buffer(x), rows, in).noalias() += GY * cmat(t.value(weight).data, out, in);
        }
        if (t.requires_grad(weight)) {
            mat(t.grad_buffer(weight), out, in).noalias() +=
                GY.transpose() * cmat(t.value(x).data, rows, in);
        }
        if (has_bias && t.requires_grad(bias)) {
            MapRow<T>(t.grad_buffer(bias).data(), static_cast<Eigen::Index>(out)) +=
                GY.colwise().sum();
        }
    };
    if (has_bias) return tape.push(std::move(y), {x, weight, bias}, backward);
    return tape.push(std::move(y), {x, weight}, backward);
}

template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids) {
    const Shape& ts = tape.shape(table);
    if (ts.size() != 2) shape_error("embedding", "table " + shape_string(ts));
    const std::size_t vocab = ts[0];
    const std::size_t width = ts[1];
    std::vector<int> rows(ids.begin(), ids.end());
    for (int id : rows) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw Error(ErrorCode::OutOfRange, "embedding id " + std::to_string(id) +
                                                   " outside [0, " + std::to_string(vocab) + ")");
        }
    }
    Tensor<T> y({rows.size(), width});
    const auto& tv = tape.value(table).data;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                    y.data.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    return tape.push(std::move(y), {table}, [table, rows, width](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        auto& gt = t.grad_buffer(table);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const std::size_t base = static_cast<std::size_t>(rows[r]) * width;
            for (std::size_t k = 0; k < width; ++k) gt[base + k] += gy[r * width + k];
        }
    });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    Tensor<T> y = tape.value(x);
    for (T& v : y.data) v = v > T(0) ? v : T(0);
    return tape.push(std::move(y), {x}, [x](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& xv = t.value(x).data;
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (xv[i] > T(0)) gx[i] += gy[i];
        }
    });
}

template <typename T>
Var tanh(Tape<T>& tape, Var x) {
    Tensor<T> y = tape.value(x);
    auto Y = mat(y.data, 1, y.size());
    Y = Y.array().tanh().matrix();
    return tape.push(std::move(y), {x}, [x](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& yv = t.value(Var{self}).data;
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (T(1) - yv[i] * yv[i]);
    });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
    Tensor<T> y = tape.value(x);
    for (T& v : y.data) v = T(1) / (T(1) + std::exp(-v));
    return tape.push(std::move(y), {x}, [x](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& yv = t.value(Var{self}).data;
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    if (tape.shape(a) != tape.shape(b)) {
        shape_error("add", shape_string(tape.shape(a)) + " vs " + shape_string(tape.shape(b)));
    }
    Tensor<T> y = tape.value(a);
    const auto& bv = tape.value(b).data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv[i];
    return tape.push(std::move(y), {a, b}, [a, b](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        if (t.requires_grad(a)) accumulate(t.grad_buffer(a), gy);
        if (t.requires_grad(b)) accumulate(t.grad_buffer(b), gy);
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
    Tensor<T> y = tape.value(x);
    for (T& v : y.data) v *= factor;
    return tape.push(std::move(y), {x}, [x, factor](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
    });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    if (numel(shape) != tape.value(x).size()) {
        shape_error("reshape", shape_string(tape.shape(x)) + " -> " + shape_string(shape));
    }
    Tensor<T> y(std::move(shape), tape.value(x).data);
    return tape.push(std::move(y), {x}, [x](Tape<T>& t, std::uint32_t self) {
        accumulate(t.grad_buffer(x), t.grad_buffer(self));
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x).data;
    T total = T(0);
    for (T v : xv) total += v;
    return tape.push(Tensor<T>({1}, {total}), {x}, [x](Tape<T>& t, std::uint32_t self) {
        const T g = t.grad_buffer(self)[0];
        for (T& v : t.grad_buffer(x)) v += g;
    });
}

template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights) {
    const auto& xv = tape.value(x).data;
    if (weights.size() != xv.size()) {
        shape_error("weighted_sum", shape_string(tape.shape(x)) + " vs " + shape_string(weights.shape));
    }
    T total = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * weights.data[i];
    return tape.push(
        Tensor<T>({1}, {total}), {x},
        [x](Tape<T>& t, std::uint32_t self) {
            const T g = t.grad_buffer(self)[0];
            const auto& w = t.saved(self)[0].data;
            auto& gx = t.grad_buffer(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
        },
        {weights});
}

template <typename T>
Var concat(Tape<T>& tape, Var a, Var b, std::size_t axis) {
    const Shape& as = tape.shape(a);
    const Shape& bs = tape.shape(b);
    bool ok = as.size() == bs.size() && axis < as.size();
    for (std::size_t i = 0; ok && i < as.size(); ++i) ok = i == axis || as[i] == bs[i];
    if (!ok) {
        shape_error("concat", shape_string(as) + " vs " + shape_string(bs) + " on axis " +
                                  std::to_string(axis));
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
    const std::size_t ca = as[axis] * inner;
    const std::size_t cb = bs[axis] * inner;
    Shape ys = as;
    ys[axis] += bs[axis];
    Tensor<T> y(ys);
    const auto& av = tape.value(a).data;
    const auto& bv = tape.value(b).data;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * ca), ca,
                    y.data.begin() + static_cast<std::ptrdiff_t>(o * (ca + cb)));
        std::copy_n(bv.begin() + static_cast<std::ptrdiff_t>(o * cb), cb,
                    y.data.begin() + static_cast<std::ptrdiff_t>(o * (ca + cb) + ca));
    }
    return tape.push(std::move(y), {a, b}, [a, b, outer, ca, cb](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        if (t.requires_grad(a)) {
            auto& ga = t.grad_buffer(a);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < ca; ++k) ga[o * ca + k] += gy[o * (ca + cb) + k];
            }
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < cb; ++k) gb[o * cb + k] += gy[o * (ca + cb) + ca + k];
            }
        }
    });
}

template <typename T>
Var slice(Tape<T>& tape, Var x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& xs = tape.shape(x);
    if (axis >= xs.size() || begin >= end || end > xs[axis]) {
        shape_error("slice", shape_string(xs) + " axis " + std::to_string(axis) + " [" +
                                 std::to_string(begin) + "," + std::to_string(end) + ")");
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
    const std::size_t full = xs[axis] * inner;
    const std::size_t offset = begin * inner;
    const std::size_t chunk = (end - begin) * inner;
    Shape ys = xs;
    ys[axis] = end - begin;
    Tensor<T> y(ys);
    const auto& xv = tape.value(x).data;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * full + offset), chunk,
                    y.data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
    }
    return tape.push(std::move(y), {x},
                     [x, outer, full, offset, chunk](Tape<T>& t, std::uint32_t self) {
                         const auto& gy = t.grad_buffer(self);
                         auto& gx = t.grad_buffer(x);
                         for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t k = 0; k < chunk; ++k) {
                                 gx[o * full + offset + k] += gy[o * chunk + k];
                             }
                         }
                     });
}

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride, std::size_t pad) {
    const Spatial d = spatial_dims(tape.shape(input), "conv2d");
    const Shape& ws = tape.shape(weight);
    if (ws.size() != 4 || ws[1] != d.channels) {
        shape_error("conv2d", "input " + shape_string(tape.shape(input)) + " vs weight " +
                                  shape_string(ws));
    }
    const std::size_t k_out = ws[0];
    const std::size_t kh = ws[2];
    const std::size_t kw = ws[3];
    if (kh % 2 == 0 || kw % 2 == 0) shape_error("conv2d", "kernel extents must be odd");
    if (stride == 0) shape_error("conv2d", "stride must be positive");
    const std::size_t span_h = d.height + 2 * pad;
    const std::size_t span_w = d.width + 2 * pad;
    if (span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0) {
        shape_error("conv2d", "output extent not integral for input " +
                                  shape_string(tape.shape(input)) + ", kernel " +
                                  std::to_string(kh) + "x" + std::to_string(kw) + ", stride " +
                                  std::to_string(stride) + ", pad " + std::to_string(pad));
    }
    const bool has_bias = bias.valid();
    if (has_bias && tape.shape(bias) != Shape{k_out}) {
        shape_error("conv2d", "bias " + shape_string(tape.shape(bias)));
    }
    const std::size_t out_h = (span_h - kh) / stride + 1;
    const std::size_t out_w = (span_w - kw) / stride + 1;
    const std::size_t plane = out_h * out_w;
    const std::size_t patch = d.channels * kh * kw;
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    Tensor<T> y(spatial_shape(d, k_out, out_h, out_w));
    const auto& xv = tape.value(input).data;
    const auto W = cmat(tape.value(weight).data, k_out, patch);
    Buffer<T> col(pointwise ? 0 : patch * plane);
    for (std::size_t b = 0; b < d.batch; ++b) {
        const T* xb = xv.data() + b * d.channels * d.height * d.width;
        const T* cols = xb;
        if (!pointwise) {
            im2col(xb, d.channels, d.height, d.width, kh, kw, stride, pad, out_h, out_w, col.data());
            cols = col.data();
        }
        auto Y = mat(y.data.data() + b * k_out * plane, k_out, plane);
        Y.noalias() = W * cmat(cols, patch, plane);
        if (has_bias) {
            Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                tape.value(bias).data.data(), static_cast<Eigen::Index>(k_out));
        }
    }

    auto backward = [input, weight, bias, has_bias, d, k_out, kh, kw, stride, pad, out_h, out_w,
                     plane, patch, pointwise](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& xv = t.value(input).data;
        const auto W = cmat(t.value(weight).data, k_out, patch);
        const bool need_x = t.requires_grad(input);
        const bool need_w = t.requires_grad(weight);
        const bool need_b = has_bias && t.requires_grad(bias);
        Buffer<T> col(pointwise ? 0 : patch * plane);
        Buffer<T> dcol(pointwise ? 0 : patch * plane);
        const std::size_t in_plane = d.channels * d.height * d.width;
        for (std::size_t b = 0; b < d.batch; ++b) {
            const auto GY = cmat(gy.data() + b * k_out * plane, k_out, plane);
            const T* xb = xv.data() + b * in_plane;
            if (need_w) {
                const T* cols = xb;
                if (!pointwise) {
                    im2col(xb, d.channels, d.height, d.width, kh, kw, stride, pad, out_h, out_w,
                           col.data());
                    cols = col.data();
                }
                mat(t.grad_buffer(weight), k_out, patch).noalias() +=
                    GY * cmat(cols, patch, plane).transpose();
            }
            if (need_b) {
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                    t.grad_buffer(bias).data(), static_cast<Eigen::Index>(k_out)) +=
                    GY.rowwise().sum();
            }
            if (need_x) {
                T* gx = t.grad_buffer(input).data() + b * in_plane;
                if (pointwise) {
                    mat(gx, patch, plane).noalias() += W.transpose() * GY;
                } else {
                    mat(dcol, patch, plane).noalias() = W.transpose() * GY;
                    col2im(dcol.data(), d.channels, d.height, d.width, kh, kw, stride, pad, out_h,
                           out_w, gx);
                }
            }
        }
    };
    if (has_bias) return tape.push(std::move(y), {input, weight, bias}, backward);
    return tape.push(std::move(y), {input, weight}, backward);
}

template <typename T>
Var max_pool2x2(Tape<T>& tape, Var input) {
    const Spatial d = spatial_dims(tape.shape(input), "max_pool2x2");
    if (d.height % 2 != 0 || d.width % 2 != 0) {
        shape_error("max_pool2x2", "odd spatial extent " + shape_string(tape.shape(input)));
    }
    const std::size_t oh = d.height / 2;
    const std::size_t ow = d.width / 2;
    const std::size_t planes = d.batch * d.channels;
    Tensor<T> y(spatial_shape(d, d.channels, oh, ow));
    const auto& xv = tape.value(input).data;
    // Ties resolve to the first cell in row-major window order, both here and
    // in backward.
    auto argmax = [&xv, &d](std::size_t p, std::size_t oy, std::size_t ox) {
        const std::size_t base = p * d.height * d.width;
        std::size_t best = base + (2 * oy) * d.width + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = base + (2 * oy + dy) * d.width + 2 * ox + dx;
                if (xv[idx] > xv[best]) best = idx;
            }
        }
        return best;
    };
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                y.data[(p * oh + oy) * ow + ox] = xv[argmax(p, oy, ox)];
            }
        }
    }
    return tape.push(std::move(y), {input}, [input, d, oh, ow, planes](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        const auto& xv = t.value(input).data;
        auto& gx = t.grad_buffer(input);
        for (std::size_t p = 0; p < planes; ++p) {
            const std::size_t base = p * d.height * d.width;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::size_t best = base + (2 * oy) * d.width + 2 * ox;
                    for (std::size_t dy = 0; dy < 2; ++dy) {
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = base + (2 * oy + dy) * d.width + 2 * ox + dx;
                            if (xv[idx] > xv[best]) best = idx;
                        }
                    }
                    gx[best] += gy[(p * oh + oy) * ow + ox];
                }
            }
        }
    });
}

template <typename T>
Var upsample2x(Tape<T>& tape, Var input) {
    const Spatial d = spatial_dims(tape.shape(input), "upsample2x");
    const std::size_t oh = d.height * 2;
    const std::size_t ow = d.width * 2;
    const std::size_t planes = d.batch * d.channels;
    Tensor<T> y(spatial_shape(d, d.channels, oh, ow));
    const auto& xv = tape.value(input).data;
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                y.data[(p * oh + oy) * ow + ox] = xv[(p * d.height + oy / 2) * d.width + ox / 2];
            }
        }
    }
    return tape.push(std::move(y), {input}, [input, d, oh, ow, planes](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        auto& gx = t.grad_buffer(input);
        for (std::size_t p = 0; p < planes; ++p) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    gx[(p * d.height + oy / 2) * d.width + ox / 2] += gy[(p * oh + oy) * ow + ox];
                }
            }
        }
    });
}

template <typename T>
Var spatial_to_sequence(Tape<T>& tape, Var input) {
    const Spatial d = spatial_dims(tape.shape(input), "spatial_to_sequence");
    const std::size_t cells = d.height * d.width;
    const Shape ys = d.batched ? Shape{d.batch, cells, d.channels} : Shape{cells, d.channels};
    Tensor<T> y(ys);
    const auto& xv = tape.value(input).data;
    for (std::size_t b = 0; b < d.batch; ++b) {
        mat(y.data.data() + b * cells * d.channels, cells, d.channels) =
            cmat(xv.data() + b * cells * d.channels, d.channels, cells).transpose();
    }
    return tape.push(std::move(y), {input}, [input, d, cells](Tape<T>& t, std::uint32_t self) {
        const auto& gy = t.grad_buffer(self);
        auto& gx = t.grad_buffer(input);
        for (std::size_t b = 0; b < d.batch; ++b) {
            mat(gx.data() + b * cells * d.channels, d.channels, cells) +=
                cmat(gy.data() + b * cells * d.channels, cells, d.channels).transpose();
        }
    });
}

template <typename T>
std::pair<Var, Var> lstm_cell(Tape<T>& tape, Var x, Var h, Var c, Var w_ih, Var w_hh, Var bias) {
    const Shape& xs = tape.shape(x);
    const Shape& hs = tape.shape(h);
    const Shape& wi = tape.shape(w_ih);
    const Shape& wh = tape.shape(w_hh);
    if (xs.empty() || hs.empty() || xs.size() != hs.size() || tape.shape(c) != hs) {
        shape_error("lstm_cell", "x " + shape_string(xs) + ", h " + shape_string(hs) + ", c " +
                                     shape_string(tape.shape(c)));
    }
    const std::size_t din = xs.back();
    const std::size_t dh = hs.back();
    const std::size_t batch = numel(hs) / dh;
    if (numel(xs) / din != batch || wi != Shape{4 * dh, din} || wh != Shape{4 * dh, dh} ||
        tape.shape(bias) != Shape{4 * dh}) {
        shape_error("lstm_cell", "weights " + shape_string(wi) + ", " + shape_string(wh) +
                                     ", bias " + shape_string(tape.shape(bias)) + " for din " +
                                     std::to_string(din) + ", dh " + std::to_string(dh));
    }

    Tensor<T> gates({batch, 4 * dh});
    auto G = mat(gates.data, batch, 4 * dh);
    G.noalias() = cmat(tape.value(x).data, batch, din) * cmat(tape.value(w_ih).data, 4 * dh, din).transpose();
    G.noalias() += cmat(tape.value(h).data, batch, dh) * cmat(tape.value(w_hh).data, 4 * dh, dh).transpose();
    G.rowwise() += CMapRow<T>(tape.value(bias).data.data(), static_cast<Eigen::Index>(4 * dh));

    Shape packed_shape = hs;
    packed_shape.back() = 2 * dh;
    Tensor<T> packed(packed_shape);
    const auto& cv = tape.value(c).data;
    for (std::size_t b = 0; b < batch; ++b) {
        T* g = gates.data.data() + b * 4 * dh;
        for (std::size_t k = 0; k < dh; ++k) {
            g[k] = T(1) / (T(1) + std::exp(-g[k]));
            g[dh + k] = T(1) / (T(1) + std::exp(-g[dh + k]));
            g[2 * dh + k] = std::tanh(g[2 * dh + k]);
            g[3 * dh + k] = T(1) / (T(1) + std::exp(-g[3 * dh + k]));
            const T c_new = g[dh + k] * cv[b * dh + k] + g[k] * g[2 * dh + k];
            packed.data[b * 2 * dh + dh + k] = c_new;
            packed.data[b * 2 * dh + k] = g[3 * dh + k] * std::tanh(c_new);
        }
    }

    const Var out = tape.push(
        std::move(packed), {x, h, c, w_ih, w_hh, bias},
        [x, h, c, w_ih, w_hh, bias, batch, din, dh](Tape<T>& t, std::uint32_t self) {
            const auto& gout = t.grad_buffer(self);
            const auto& act = t.saved(self)[0].data;
            const auto& out = t.value(Var{self}).data;
            const auto& cv = t.value(c).data;
            Buffer<T> dgates(batch * 4 * dh);
            Buffer<T> dc_prev(batch * dh);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* g = act.data() + b * 4 * dh;
                T* dg = dgates.data() + b * 4 * dh;
                for (std::size_t k = 0; k < dh; ++k) {
                    const T gi = g[k], gf = g[dh + k], gg = g[2 * dh + k], go = g[3 * dh + k];
                    const T tc = std::tanh(out[b * 2 * dh + dh + k]);
                    const T dh_new = gout[b * 2 * dh + k];
                    const T dc = gout[b * 2 * dh + dh + k] + dh_new * go * (T(1) - tc * tc);
                    dg[k] = dc * gg * gi * (T(1) - gi);
                    dg[dh + k] = dc * cv[b * dh + k] * gf * (T(1) - gf);
                    dg[2 * dh + k] = dc * gi * (T(1) - gg * gg);
                    dg[3 * dh + k] = dh_new * tc * go * (T(1) - go);
                    dc_prev[b * dh + k] = dc * gf;
                }
            }
            const auto DG = cmat(dgates, batch, 4 * dh);
            if (t.requires_grad(x)) {
                mat(t.grad_buffer(x), batch, din).noalias() += DG * cmat(t.value(w_ih).data, 4 * dh, din);
            }
            if (t.requires_grad(h)) {
                mat(t.grad_buffer(h), batch, dh).noalias() += DG * cmat(t.value(w_hh).data, 4 * dh, dh);
            }
            if (t.requires_grad(c)) accumulate(t.grad_buffer(c), dc_prev);
            if (t.requires_grad(w_ih)) {
                mat(t.grad_buffer(w_ih), 4 * dh, din).noalias() +=
                    DG.transpose() * cmat(t.value(x).data, batch, din);
            }
            if (t.requires_grad(w_hh)) {
                mat(t.grad_buffer(w_hh), 4 * dh, dh).noalias() +=
                    DG.transpose() * cmat(t.value(h).data, batch, dh);
            }
            if (t.requires_grad(bias)) {
                MapRow<T>(t.grad_buffer(bias).data(), static_cast<Eigen::Index>(4 * dh)) +=
                    DG.colwise().sum();
            }
        },
        {std::move(gates)});
    const std::size_t last = packed_shape.size() - 1;
    return {slice(tape, out, last, 0, dh), slice(tape, out, last, dh, 2 * dh)};
}

template <typename T>
std::pair<Var, Var> attention_projected(Tape<T>& tape, Var h, Var keys, Var values, Var w_q,
                                        Var v) {
    const Shape& hs = tape.shape(h);
    const Shape& ks = tape.shape(keys);
    const Shape& vs = tape.shape(values);
    const bool batched = hs.size() == 2;
    if (!(hs.size() == 1 || batched) || ks.size() != hs.size() + 1 || vs.size() != ks.size()) {
        shape_error("attention", "h " + shape_string(hs) + ", keys " + shape_string(ks) +
                                     ", values " + shape_string(vs));
    }
    const std::size_t batch = batched ? hs[0] : 1;
    const std::size_t dh = hs.back();
    const std::size_t n = ks[ks.size() - 2];
    const std::size_t da = ks.back();
    const std::size_t df = vs.back();
    if (n == 0) throw Error(ErrorCode::EmptyKeys, "attention over zero keys");
    if ((batched && (ks[0] != batch || vs[0] != batch)) || vs[vs.size() - 2] != n ||
        tape.shape(w_q) != Shape{da, dh} || tape.shape(v) != Shape{da}) {
        shape_error("attention", "keys " + shape_string(ks) + ", values " + shape_string(vs) +
                                     ", w_q " + shape_string(tape.shape(w_q)) + ", v " +
                                     shape_string(tape.shape(v)));
    }

    MatR<T> q = cmat(tape.value(h).data, batch, dh) * cmat(tape.value(w_q).data, da, dh).transpose();
    const auto vv = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
        tape.value(v).data.data(), static_cast<Eigen::Index>(da));
    Tensor<T> hidden({batch, n, da});
    const Shape packed_shape = batched ? Shape{batch, df + n} : Shape{df + n};
    Tensor<T> packed(packed_shape);
    const auto& kv = tape.value(keys).data;
    const auto& valv = tape.value(values).data;
    for (std::size_t b = 0; b < batch; ++b) {
        auto U = mat(hidden.data.data() + b * n * da, n, da);
        U = cmat(kv.data() + b * n * da, n, da);
        U.rowwise() += q.row(static_cast<Eigen::Index>(b));
        U = U.array().tanh().matrix();
        Eigen::Matrix<T, Eigen::Dynamic, 1> e = U * vv;
        const T m = e.maxCoeff();
        e = (e.array() - m).exp().matrix();
        e /= e.sum();
        T* out = packed.data.data() + b * (df + n);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(out, static_cast<Eigen::Index>(df)).noalias() =
            cmat(valv.data() + b * n * df, n, df).transpose() * e;
        std::copy(e.data(), e.data() + n, out + df);
    }

    const Var out = tape.push(
        std::move(packed), {h, keys, values, w_q, v},
        [h, keys, values, w_q, v, batch, dh, n, da, df](Tape<T>& t, std::uint32_t self) {
            const auto& gout = t.grad_buffer(self);
            const auto& pv = t.value(Var{self}).data;
            const auto& hidden = t.saved(self)[0].data;
            const auto& valv = t.value(values).data;
            const auto vv = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(
                t.value(v).data.data(), static_cast<Eigen::Index>(da));
            using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
            MatR<T> dq(batch, da);
            MatR<T> dU(n, da);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* g = gout.data() + b * (df + n);
                const auto gctx = Eigen::Map<const Vec>(g, static_cast<Eigen::Index>(df));
                const auto gw = Eigen::Map<const Vec>(g + df, static_cast<Eigen::Index>(n));
                const auto w = Eigen::Map<const Vec>(pv.data() + b * (df + n) + df,
                                                     static_cast<Eigen::Index>(n));
                const auto V = cmat(valv.data() + b * n * df, n, df);
                const auto U = cmat(hidden.data() + b * n * da, n, da);
                if (t.requires_grad(values)) {
                    mat(t.grad_buffer(values).data() + b * n * df, n, df).noalias() +=
                        w * gctx.transpose();
                }
                const Vec dw = V * gctx + gw;
                const Vec de = w.cwiseProduct((dw.array() - w.dot(dw)).matrix());
                dU.noalias() = de * vv.transpose();
                dU.array() *= (T(1) - U.array().square());
                if (t.requires_grad(v)) {
                    Eigen::Map<Vec>(t.grad_buffer(v).data(), static_cast<Eigen::Index>(da)).noalias() +=
                        U.transpose() * de;
                }
                if (t.requires_grad(keys)) {
                    mat(t.grad_buffer(keys).data() + b * n * da, n, da) += dU;
                }
                dq.row(static_cast<Eigen::Index>(b)) = dU.colwise().sum();
            }
            if (t.requires_grad(w_q)) {
                mat(t.grad_buffer(w_q), da, dh).noalias() +=
                    dq.transpose() * cmat(t.value(h).data, batch, dh);
            }
            if (t.requires_grad(h)) {
                mat(t.grad_buffer(h), batch, dh).noalias() += dq * cmat(t.value(w_q).data, da, dh);
            }
        },
        {std::move(hidden)});
    const std::size_t last = packed_shape.size() - 1;
    return {slice(tape, out, last, 0, df), slice(tape, out, last, df, df + n)};
}

template <typename T>
std::pair<Var, Var> additive_attention(Tape<T>& tape, Var h, Var features, Var w_q, Var w_k,
                                       Var v) {
    const Var keys = linear(tape, features, w_k, Var{});
    return attention_projected(tape, h, keys, features, w_q, v);
}

template <typename T>
Var softmax_nll(Tape<T>& tape, Var logits, std::span<const int> targets,
                std::span<const T> weights) {
    const Shape& ls = tape.shape(logits);
    if (ls.empty() || ls.size() > 2) shape_error("softmax_nll", "logits " + shape_string(ls));
    const std::size_t vocab = ls.back();
    const std::size_t batch = ls.size() == 2 ? ls[0] : 1;
    if (targets.size() != batch || weights.size() != batch) {
        shape_error("softmax_nll", std::to_string(targets.size()) + " targets, " +
                                       std::to_string(weights.size()) + " weights for batch " +
                                       std::to_string(batch));
    }
    for (int tgt : targets) {
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
            throw Error(ErrorCode::TargetOutOfRange, "target " + std::to_string(tgt) +
                                                         " outside [0, " + std::to_string(vocab) + ")");
        }
    }
    const auto& lv = tape.value(logits).data;
    Tensor<T> probs({batch, vocab});
    T loss = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* row = lv.data() + b * vocab;
        T* p = probs.data.data() + b * vocab;
        const T m = *std::max_element(row, row + vocab);
        T z = T(0);
        for (std::size_t k = 0; k < vocab; ++k) {
            p[k] = std::exp(row[k] - m);
            z += p[k];
        }
        for (std::size_t k = 0; k < vocab; ++k) p[k] /= z;
        const T nll = m + std::log(z) - row[static_cast<std::size_t>(targets[b])];
        loss += weights[b] * nll;
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<T> wts(weights.begin(), weights.end());
    return tape.push(
        Tensor<T>({1}, {loss}), {logits},
        [logits, tgt, wts, batch, vocab](Tape<T>& t, std::uint32_t self) {
            const T g = t.grad_buffer(self)[0];
            const auto& p = t.saved(self)[0].data;
            auto& gl = t.grad_buffer(logits);
            for (std::size_t b = 0; b < batch; ++b) {
                const T scale = g * wts[b];
                if (scale == T(0)) continue;
                for (std::size_t k = 0; k < vocab; ++k) gl[b * vocab + k] += scale * p[b * vocab + k];
                gl[b * vocab + static_cast<std::size_t>(tgt[b])] -= scale;
            }
        },
        {std::move(probs)});
}

template <typename T>
Var softmax_nll(Tape<T>& tape, Var logits, int target) {
    const int targets[1] = {target};
    const T weights[1] = {T(1)};
    return softmax_nll<T>(tape, logits, std::span<const int>(targets), std::span<const T>(weights));
}

#define POLYGONIZER_INSTANTIATE_OPS(T)                                                         \
    template Var linear<T>(Tape<T>&, Var, Var, Var);                                           \
    template Var embedding<T>(Tape<T>&, Var, std::span<const int>);                            \
    template Var relu<T>(Tape<T>&, Var);                                                       \
    template Var tanh<T>(Tape<T>&, Var);                                                       \
    template Var sigmoid<T>(Tape<T>&, Var);                                                    \
    template Var add<T>(Tape<T>&, Var, Var);                                                   \
    template Var scale<T>(Tape<T>&, Var, T);                                                   \
    template Var reshape<T>(Tape<T>&, Var, Shape);                                             \
    template Var sum<T>(Tape<T>&, Var);                                                        \
    template Var weighted_sum<T>(Tape<T>&, Var, const Tensor<T>&);                             \
    template Var concat<T>(Tape<T>&, Var, Var, std::size_t);                                   \
    template Var slice<T>(Tape<T>&, Var, std::size_t, std::size_t, std::size_t);               \
    template Var conv2d<T>(Tape<T>&, Var, Var, Var, std::size_t, std::size_t);                 \
    template Var max_pool2x2<T>(Tape<T>&, Var);                                                \
    template Var upsample2x<T>(Tape<T>&, Var);                                                 \
    template Var spatial_to_sequence<T>(Tape<T>&, Var);                                        \
    template std::pair<Var, Var> lstm_cell<T>(Tape<T>&, Var, Var, Var, Var, Var, Var);         \
    template std::pair<Var, Var> attention_projected<T>(Tape<T>&, Var, Var, Var, Var, Var);    \
    template std::pair<Var, Var> additive_attention<T>(Tape<T>&, Var, Var, Var, Var, Var);     \
    template Var softmax_nll<T>(Tape<T>&, Var, std::span<const int>, std::span<const T>);      \
    template Var softmax_nll<T>(Tape<T>&, Var, int);

POLYGONIZER_INSTANTIATE_OPS(float)
POLYGONIZER_INSTANTIATE_OPS(double)

#undef POLYGONIZER_INSTANTIATE_OPS

}  // namespace polygonizer::tc
