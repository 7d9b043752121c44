#include "unitmod/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "unitmod/parallel.hpp"

UNITMOD_BEGIN_NAMESPACE
namespace ops {

namespace {

using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatR>;
using ConstMap = Eigen::Map<const MatR>;

// Maps a flat index of the full operand onto the (possibly broadcast) operand:
// small = (i / inner) % period.
struct Broadcast {
    std::int64_t inner = 1;
    std::int64_t period = 1;
};

Broadcast broadcast_of(const Shape& full, const Shape& part, const char* op) {
    const std::int64_t n_full = shape_numel(full);
    const std::int64_t n_part = shape_numel(part);
    if (part == full) return {1, n_full};
    if (n_part == 1) return {n_full, 1};
    if (full.size() >= 2) {
        std::int64_t trailing = 1;
        for (std::size_t i = 2; i < full.size(); ++i) trailing *= full[i];
        if (part.size() == 1 && part[0] == full[1]) return {trailing, full[1]};
        const bool image_channel =
            (part.size() == 2 || (part.size() == 4 && part[2] == 1 && part[3] == 1)) &&
            part[0] == full[0] && part[1] == full[1];
        if (image_channel) return {trailing, static_cast<std::int64_t>(full[0]) * full[1]};
    }
    // Name the first axis that disagrees.
    std::size_t axis = 0;
    while (axis < full.size() && axis < part.size() && full[axis] == part[axis]) ++axis;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(part) + " onto " +
                         shape_str(full) + " (axis " + std::to_string(axis) + ")");
}

enum class BinKind { Add, Sub, Mul, Div };

const char* bin_name(BinKind k) {
    switch (k) {
        case BinKind::Add: return "add";
        case BinKind::Sub: return "sub";
        case BinKind::Mul: return "mul";
        case BinKind::Div: return "div";
    }
    return "?";
}

template <class F>
void for_each_pair(std::int64_t n, Broadcast ba, Broadcast bb, F&& f) {
    // Both maps share the same structure when one side is the full operand,
    // so the loop runs over blocks of the smaller inner extent.
    for (std::int64_t i = 0; i < n; ++i) {
        f(i, (i / ba.inner) % ba.period, (i / bb.inner) % bb.period);
    }
}

Tensor binary(BinKind kind, const Tensor& a_in, const Tensor& b_in) {
    Tensor a = a_in;
    Tensor b = b_in;
    const char* name = bin_name(kind);
    const bool a_full = a.numel() != b.numel() ? a.numel() > b.numel() : a.ndim() >= b.ndim();
    const Shape& out_shape = a_full ? a.shape() : b.shape();
    const Broadcast ba = broadcast_of(out_shape, a.shape(), name);
    const Broadcast bb = broadcast_of(out_shape, b.shape(), name);
    const std::int64_t n = shape_numel(out_shape);
    std::vector<real> out(static_cast<std::size_t>(n));
    const real* pa = a.data().data();
    const real* pb = b.data().data();
    const bool same = ba.period == n && bb.period == n;
    switch (kind) {
        case BinKind::Add:
            if (same) { for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; }
            else for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] + pb[ib]; });
            break;
        case BinKind::Sub:
            if (same) { for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; }
            else for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] - pb[ib]; });
            break;
        case BinKind::Mul:
            if (same) { for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; }
            else for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] * pb[ib]; });
            break;
        case BinKind::Div:
            if (same) { for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i]; }
            else for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] / pb[ib]; });
            break;
    }
    return make_op(name, out_shape, std::move(out), {a, b}, [a, b, ba, bb, kind, n](TensorImpl& o) mutable {
        auto ga = grad_target(a);
        auto gb = grad_target(b);
        const real* g = o.grad.data();
        const real* va = a.data().data();
        const real* vb = b.data().data();
        switch (kind) {
            case BinKind::Add:
                for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) {
                    if (!ga.empty()) ga[ia] += g[i];
                    if (!gb.empty()) gb[ib] += g[i];
                });
                break;
            case BinKind::Sub:
                for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) {
                    if (!ga.empty()) ga[ia] += g[i];
                    if (!gb.empty()) gb[ib] -= g[i];
                });
                break;
            case BinKind::Mul:
                for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) {
                    if (!ga.empty()) ga[ia] += g[i] * vb[ib];
                    if (!gb.empty()) gb[ib] += g[i] * va[ia];
                });
                break;
            case BinKind::Div:
                for_each_pair(n, ba, bb, [&](auto i, auto ia, auto ib) {
                    if (!ga.empty()) ga[ia] += g[i] / vb[ib];
                    if (!gb.empty()) gb[ib] -= g[i] * o.data[i] / vb[ib];
                });
                break;
        }
    });
}

// y = f(x) with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const char* name, const Tensor& x_in, F f, DF df) {
    Tensor x = x_in;
    const auto src = x.data();
    std::vector<real> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
    return make_op(name, x.shape(), std::move(out), {x}, [x, df](TensorImpl& o) mutable {
        auto gx = grad_target(x);
        if (gx.empty()) return;
        const auto v = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * df(v[i], o.data[i]);
    });
}

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.ndim() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " input, got shape " + shape_str(t.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinKind::Div, a, b); }

Tensor add_scalar(const Tensor& x, real s) {
    return unary("add_scalar", x, [s](real v) { return v + s; }, [](real, real) { return real(1); });
}

Tensor mul_scalar(const Tensor& x, real s) {
    return unary("mul_scalar", x, [s](real v) { return v * s; }, [s](real, real) { return s; });
}

Tensor rsub_scalar(real s, const Tensor& x) {
    return unary("rsub_scalar", x, [s](real v) { return s - v; }, [](real, real) { return real(-1); });
}

Tensor neg(const Tensor& x) {
    return unary("neg", x, [](real v) { return -v; }, [](real, real) { return real(-1); });
}

Tensor square(const Tensor& x) {
    return unary("square", x, [](real v) { return v * v; }, [](real v, real) { return 2 * v; });
}

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](real v) { return v > 0 ? v : real(0); },
        [](real v, real) { return v > 0 ? real(1) : real(0); });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](real v) {
            if (v >= 0) return real(1) / (real(1) + std::exp(-v));
            const real e = std::exp(v);
            return e / (real(1) + e);
        },
        [](real, real y) { return y * (real(1) - y); });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x,
        [](real v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](real v, real) {
            if (v >= 0) return real(1) / (real(1) + std::exp(-v));
            const real e = std::exp(v);
            return e / (real(1) + e);
        });
}

Tensor exp(const Tensor& x) {
    return unary("exp", x, [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor clamp_min(const Tensor& x, real floor) {
    return unary(
        "clamp_min", x, [floor](real v) { return v > floor ? v : floor; },
        [floor](real v, real) { return v > floor ? real(1) : real(0); });
}

Tensor sum(const Tensor& x_in) {
    Tensor x = x_in;
    double acc = 0.0;
    for (real v : x.data()) acc += v;
    return make_op("sum", {1}, {static_cast<real>(acc)}, {x}, [x](TensorImpl& o) mutable {
        auto gx = grad_target(x);
        if (gx.empty()) return;
        const real g = o.grad[0];
        for (auto& v : gx) v += g;
    });
}

Tensor mean(const Tensor& x_in) {
    Tensor x = x_in;
    const auto n = static_cast<double>(x.numel());
    if (n == 0) throw DimensionError("mean of an empty tensor");
    double acc = 0.0;
    for (real v : x.data()) acc += v;
    return make_op("mean", {1}, {static_cast<real>(acc / n)}, {x}, [x, n](TensorImpl& o) mutable {
        auto gx = grad_target(x);
        if (gx.empty()) return;
        const real g = static_cast<real>(o.grad[0] / n);
        for (auto& v : gx) v += g;
    });
}

Tensor channel_mean(const Tensor& x_in) {
    Tensor x = x_in;
    if (x.ndim() < 3) {
        throw DimensionError("channel_mean: expected N×C×... input, got " + shape_str(x.shape()));
    }
    const int n = x.dim(0);
    const int c = x.dim(1);
    const std::int64_t inner = x.numel() / (static_cast<std::int64_t>(n) * c);
    if (inner < 1) throw DimensionError("channel_mean: empty spatial extent");
    std::vector<real> out(static_cast<std::size_t>(n) * c);
    const real* src = x.data().data();
    for (std::size_t k = 0; k < out.size(); ++k) {
        double acc = 0.0;
        const real* p = src + static_cast<std::int64_t>(k) * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
        out[k] = static_cast<real>(acc / static_cast<double>(inner));
    }
    return make_op("channel_mean", {n, c}, std::move(out), {x}, [x, inner](TensorImpl& o) mutable {
        auto gx = grad_target(x);
        if (gx.empty()) return;
        const real scale = real(1) / static_cast<real>(inner);
        for (std::size_t k = 0; k < o.grad.size(); ++k) {
            const real g = o.grad[k] * scale;
            real* p = gx.data() + static_cast<std::int64_t>(k) * inner;
            for (std::int64_t i = 0; i < inner; ++i) p[i] += g;
        }
    });
}

Tensor narrow(const Tensor& x_in, int axis, int start, int length) {
    Tensor x = x_in;
    const int rank = x.ndim();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("narrow: axis out of range");
    const int extent = x.dim(axis);
    if (start < 0 || length < 0 || start + length > extent) {
        throw DimensionError("narrow: range [" + std::to_string(start) + "," +
                             std::to_string(start + length) + ") outside axis " +
                             std::to_string(axis) + " of extent " + std::to_string(extent));
    }
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
    Shape shape = x.shape();
    shape[static_cast<std::size_t>(axis)] = length;
    std::vector<real> out(static_cast<std::size_t>(outer * length * inner));
    const real* src = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(src + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
    }
    return make_op("narrow", shape, std::move(out), {x},
                   [x, outer, inner, extent, start, length](TensorImpl& o) mutable {
                       auto gx = grad_target(x);
                       if (gx.empty()) return;
                       for (std::int64_t b = 0; b < outer; ++b) {
                           const real* g = o.grad.data() + b * length * inner;
                           real* dst = gx.data() + (b * extent + start) * inner;
                           for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += g[i];
                       }
                   });
}

Tensor concat(const std::vector<Tensor>& parts_in, int axis) {
    if (parts_in.empty()) throw DimensionError("concat of zero tensors");
    std::vector<Tensor> parts = parts_in;
    const int rank = parts[0].ndim();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
    Shape shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != rank) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && p.dim(i) != shape[static_cast<std::size_t>(i)]) {
                throw DimensionError("concat: axis " + std::to_string(i) + " differs: " +
                                     shape_str(p.shape()) + " vs " + shape_str(shape));
            }
        }
        total += p.dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
    std::vector<real> out(static_cast<std::size_t>(shape_numel(shape)));
    int offset = 0;
    for (const auto& p : parts) {
        const int len = p.dim(axis);
        const real* src = p.data().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * len * inner, len * inner, out.data() + (o * total + offset) * inner);
        }
        offset += len;
    }
    return make_op("concat", shape, std::move(out), parts, [parts, axis, outer, inner, total](TensorImpl& o) mutable {
        int off = 0;
        for (auto& p : parts) {
            const int len = p.dim(axis);
            auto gp = grad_target(p);
            if (!gp.empty()) {
                for (std::int64_t b = 0; b < outer; ++b) {
                    const real* g = o.grad.data() + (b * total + off) * inner;
                    real* dst = gp.data() + b * len * inner;
                    for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                }
            }
            off += len;
        }
    });
}

namespace {

struct ConvGeometry {
    int n, cin, h, w;
    int cout, cin_g, cout_g, kh, kw;
    int stride, pad, groups;
    int ho, wo;
    bool depthwise() const { return cin_g == 1 && cout_g == 1; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
    std::int64_t col_rows() const { return static_cast<std::int64_t>(cin_g) * kh * kw; }
    std::int64_t out_plane() const { return static_cast<std::int64_t>(ho) * wo; }
    std::int64_t in_plane() const { return static_cast<std::int64_t>(h) * w; }
};

// cols[(ci*kh + ky)*kw + kx][oy*wo + ox]
void im2col(const real* in, const ConvGeometry& g, real* cols) {
    for (int ci = 0; ci < g.cin_g; ++ci) {
        const real* plane = in + ci * g.in_plane();
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                real* row = cols + ((static_cast<std::int64_t>(ci) * g.kh + ky) * g.kw + kx) * g.out_plane();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    real* dst = row + static_cast<std::int64_t>(oy) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wo, real(0));
                        continue;
                    }
                    const real* src = plane + static_cast<std::int64_t>(iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : real(0);
                    }
                }
            }
        }
    }
}

void col2im_add(const real* cols, const ConvGeometry& g, real* in) {
    for (int ci = 0; ci < g.cin_g; ++ci) {
        real* plane = in + ci * g.in_plane();
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const real* row =
                    cols + ((static_cast<std::int64_t>(ci) * g.kh + ky) * g.kw + kx) * g.out_plane();
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const real* src = row + static_cast<std::int64_t>(oy) * g.wo;
                    real* dst = plane + static_cast<std::int64_t>(iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Valid output columns [lo, hi) for kernel column kx.
inline void valid_range(int k, int stride, int pad, int in_extent, int out_extent, int& lo, int& hi) {
    // need 0 <= o*stride - pad + k < in_extent
    lo = 0;
    while (lo < out_extent && lo * stride - pad + k < 0) ++lo;
    hi = out_extent;
    while (hi > lo && (hi - 1) * stride - pad + k >= in_extent) --hi;
}

void depthwise_forward(const real* in, const real* w, const ConvGeometry& g, real* out) {
    for (int ky = 0; ky < g.kh; ++ky) {
        int oy0, oy1;
        valid_range(ky, g.stride, g.pad, g.h, g.ho, oy0, oy1);
        for (int kx = 0; kx < g.kw; ++kx) {
            int ox0, ox1;
            valid_range(kx, g.stride, g.pad, g.w, g.wo, ox0, ox1);
            const real wv = w[ky * g.kw + kx];
            for (int oy = oy0; oy < oy1; ++oy) {
                const real* src = in + static_cast<std::int64_t>(oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
                real* dst = out + static_cast<std::int64_t>(oy) * g.wo;
                if (g.stride == 1) {
                    for (int ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox];
                } else {
                    for (int ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox * g.stride];
                }
            }
        }
    }
}

void depthwise_backward(const real* in, const real* w, const real* gout, const ConvGeometry& g,
                        real* gin, real* gw) {
    for (int ky = 0; ky < g.kh; ++ky) {
        int oy0, oy1;
        valid_range(ky, g.stride, g.pad, g.h, g.ho, oy0, oy1);
        for (int kx = 0; kx < g.kw; ++kx) {
            int ox0, ox1;
            valid_range(kx, g.stride, g.pad, g.w, g.wo, ox0, ox1);
            const real wv = w[ky * g.kw + kx];
            real acc = 0;
            for (int oy = oy0; oy < oy1; ++oy) {
                const std::int64_t base = static_cast<std::int64_t>(oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
                const real* go = gout + static_cast<std::int64_t>(oy) * g.wo;
                for (int ox = ox0; ox < ox1; ++ox) {
                    const std::int64_t idx = base + static_cast<std::int64_t>(ox) * g.stride;
                    acc += go[ox] * in[idx];
                    if (gin) gin[idx] += wv * go[ox];
                }
            }
            if (gw) gw[ky * g.kw + kx] += acc;
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input_in, const Tensor& weight_in, const Tensor& bias_in, Conv2dOptions opt) {
    Tensor input = input_in;
    Tensor weight = weight_in;
    Tensor bias = bias_in;
    require_rank(input, 4, "conv2d");
    require_rank(weight, 4, "conv2d weight");
    if (opt.groups < 1 || opt.stride < 1 || opt.padding < 0) {
        throw ConfigError("conv2d: invalid stride/padding/groups");
    }
    ConvGeometry g{};
    g.n = input.dim(0);
    g.cin = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.cout = weight.dim(0);
    g.cin_g = weight.dim(1);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = opt.stride;
    g.pad = opt.padding;
    g.groups = opt.groups;
    if (g.cin % g.groups != 0) {
        throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(g.cin) +
                             " not divisible by groups = " + std::to_string(g.groups));
    }
    if (g.cin / g.groups != g.cin_g) {
        throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(g.cin) +
                             " but weight axis 1 expects " + std::to_string(g.cin_g) + " per group");
    }
    if (g.cout % g.groups != 0) {
        throw DimensionError("conv2d: weight axis 0 (out channels) = " + std::to_string(g.cout) +
                             " not divisible by groups");
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout)) {
        throw DimensionError("conv2d: bias axis 0 must equal out channels " + std::to_string(g.cout));
    }
    g.cout_g = g.cout / g.groups;
    g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    if (g.h + 2 * g.pad < g.kh || g.ho < 1) {
        throw DimensionError("conv2d: axis 2 (height) " + std::to_string(g.h) + " too small for kernel");
    }
    if (g.w + 2 * g.pad < g.kw || g.wo < 1) {
        throw DimensionError("conv2d: axis 3 (width) " + std::to_string(g.w) + " too small for kernel");
    }

    const std::int64_t out_sample = static_cast<std::int64_t>(g.cout) * g.out_plane();
    const std::int64_t in_sample = static_cast<std::int64_t>(g.cin) * g.in_plane();
    std::vector<real> out(static_cast<std::size_t>(g.n * out_sample), real(0));
    const real* x = input.data().data();
    const real* wt = weight.data().data();
    const std::int64_t w_group = static_cast<std::int64_t>(g.cout_g) * g.col_rows();

    parallel_for(g.n, [&](int n) {
        std::vector<real> cols;
        if (!g.depthwise() && !g.pointwise()) cols.resize(static_cast<std::size_t>(g.col_rows() * g.out_plane()));
        for (int gi = 0; gi < g.groups; ++gi) {
            const real* xin = x + n * in_sample + static_cast<std::int64_t>(gi) * g.cin_g * g.in_plane();
            real* yout = out.data() + n * out_sample + static_cast<std::int64_t>(gi) * g.cout_g * g.out_plane();
            if (g.depthwise()) {
                depthwise_forward(xin, wt + gi * g.kh * g.kw, g, yout);
                continue;
            }
            const real* src = xin;
            if (!g.pointwise()) {
                im2col(xin, g, cols.data());
                src = cols.data();
            }
            Map(yout, g.cout_g, g.out_plane()).noalias() =
                ConstMap(wt + gi * w_group, g.cout_g, g.col_rows()) * ConstMap(src, g.col_rows(), g.out_plane());
        }
        if (bias.defined()) {
            const real* b = bias.data().data();
            for (int co = 0; co < g.cout; ++co) {
                real* p = out.data() + n * out_sample + co * g.out_plane();
                for (std::int64_t i = 0; i < g.out_plane(); ++i) p[i] += b[co];
            }
        }
    });

    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_op("conv2d", {g.n, g.cout, g.ho, g.wo}, std::move(out), inputs,
                   [input, weight, bias, g, out_sample, in_sample, w_group](TensorImpl& o) mutable {
        auto gin = grad_target(input);
        auto gw = grad_target(weight);
        const real* gout = o.grad.data();
        const real* x = input.data().data();
        const real* wt = weight.data().data();
        if (bias.defined()) {
            auto gb = grad_target(bias);
            if (!gb.empty()) {
                for (int n = 0; n < g.n; ++n) {
                    for (int co = 0; co < g.cout; ++co) {
                        const real* p = gout + n * out_sample + co * g.out_plane();
                        real acc = 0;
                        for (std::int64_t i = 0; i < g.out_plane(); ++i) acc += p[i];
                        gb[co] += acc;
                    }
                }
            }
        }
        if (gin.empty() && gw.empty()) return;
        // Weight gradients are accumulated per sample and reduced in sample
        // order so the result does not depend on the worker count.
        const std::size_t wsize = weight.data().size();
        std::vector<real> gw_parts(gw.empty() ? 0 : wsize * static_cast<std::size_t>(g.n), real(0));
        parallel_for(g.n, [&](int n) {
            std::vector<real> cols;
            std::vector<real> gcols;
            if (!g.depthwise()) {
                cols.resize(static_cast<std::size_t>(g.col_rows() * g.out_plane()));
                if (!g.pointwise() && !gin.empty()) gcols.resize(cols.size());
            }
            real* gw_n = gw.empty() ? nullptr : gw_parts.data() + wsize * static_cast<std::size_t>(n);
            for (int gi = 0; gi < g.groups; ++gi) {
                const std::int64_t in_off = n * in_sample + static_cast<std::int64_t>(gi) * g.cin_g * g.in_plane();
                const real* xin = x + in_off;
                real* gxin = gin.empty() ? nullptr : gin.data() + in_off;
                const real* go = gout + n * out_sample + static_cast<std::int64_t>(gi) * g.cout_g * g.out_plane();
                if (g.depthwise()) {
                    depthwise_backward(xin, wt + gi * g.kh * g.kw, go, g, gxin,
                                       gw_n ? gw_n + gi * g.kh * g.kw : nullptr);
                    continue;
                }
                const real* src = xin;
                if (!g.pointwise()) {
                    im2col(xin, g, cols.data());
                    src = cols.data();
                }
                ConstMap gom(go, g.cout_g, g.out_plane());
                if (gw_n) {
                    Map(gw_n + gi * w_group, g.cout_g, g.col_rows()).noalias() +=
                        gom * ConstMap(src, g.col_rows(), g.out_plane()).transpose();
                }
                if (gxin) {
                    ConstMap wm(wt + gi * w_group, g.cout_g, g.col_rows());
                    if (g.pointwise()) {
                        Map(gxin, g.col_rows(), g.out_plane()).noalias() += wm.transpose() * gom;
                    } else {
                        Map(gcols.data(), g.col_rows(), g.out_plane()).noalias() = wm.transpose() * gom;
                        col2im_add(gcols.data(), g, gxin);
                    }
                }
            }
        });
        if (!gw.empty()) {
            for (int n = 0; n < g.n; ++n) {
                const real* part = gw_parts.data() + wsize * static_cast<std::size_t>(n);
                for (std::size_t i = 0; i < wsize; ++i) gw[i] += part[i];
            }
        }
    });
}

Tensor group_norm(const Tensor& input_in, int groups, const Tensor& gamma_in, const Tensor& beta_in,
                  real eps, GroupStats* stats) {
    Tensor input = input_in;
    Tensor gamma = gamma_in;
    Tensor beta = beta_in;
    if (input.ndim() < 2) throw DimensionError("group_norm: expected N×C×... input");
    const int n = input.dim(0);
    const int c = input.dim(1);
    if (groups < 1 || c % groups != 0) {
        throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible by " +
                          std::to_string(groups) + " groups");
    }
    if (!(eps > 0)) throw ConfigError("group_norm: eps must be positive");
    if (gamma.numel() != c || beta.numel() != c) {
        throw DimensionError("group_norm: gamma/beta must have " + std::to_string(c) + " entries");
    }
    const std::int64_t spatial = input.numel() / (static_cast<std::int64_t>(n) * c);
    const int cg = c / groups;
    const std::int64_t block = cg * spatial;
    std::vector<real> out(input.data().size());
    std::vector<real> xhat(input.data().size());
    std::vector<real> rstd(static_cast<std::size_t>(n) * groups);
    if (stats) {
        stats->batch = n;
        stats->groups = groups;
        stats->mean.assign(rstd.size(), real(0));
        stats->var.assign(rstd.size(), real(0));
    }
    const real* x = input.data().data();
    const real* ga = gamma.data().data();
    const real* be = beta.data().data();
    for (int b = 0; b < n; ++b) {
        for (int gi = 0; gi < groups; ++gi) {
            const std::int64_t off = (static_cast<std::int64_t>(b) * groups + gi) * block;
            double s = 0.0;
            for (std::int64_t i = 0; i < block; ++i) s += x[off + i];
            const double mu = s / static_cast<double>(block);
            double v = 0.0;
            for (std::int64_t i = 0; i < block; ++i) {
                const double d = x[off + i] - mu;
                v += d * d;
            }
            v /= static_cast<double>(block);
            const real r = static_cast<real>(1.0 / std::sqrt(v + eps));
            rstd[static_cast<std::size_t>(b * groups + gi)] = r;
            if (stats) {
                stats->mean[static_cast<std::size_t>(b * groups + gi)] = static_cast<real>(mu);
                stats->var[static_cast<std::size_t>(b * groups + gi)] = static_cast<real>(v);
            }
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = gi * cg + cc;
                const std::int64_t coff = off + cc * spatial;
                for (std::int64_t i = 0; i < spatial; ++i) {
                    const real xh = static_cast<real>(x[coff + i] - mu) * r;
                    xhat[static_cast<std::size_t>(coff + i)] = xh;
                    out[static_cast<std::size_t>(coff + i)] = ga[ch] * xh + be[ch];
                }
            }
        }
    }
    return make_op("group_norm", input.shape(), std::move(out), {input, gamma, beta},
                   [input, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, groups, cg,
                    spatial, block](TensorImpl& o) mutable {
        auto gx = grad_target(input);
        auto gg = grad_target(gamma);
        auto gb = grad_target(beta);
        const real* gy = o.grad.data();
        const real* ga = gamma.data().data();
        for (int b = 0; b < n; ++b) {
            for (int gi = 0; gi < groups; ++gi) {
                const std::int64_t off = (static_cast<std::int64_t>(b) * groups + gi) * block;
                double sum_d = 0.0;
                double sum_dx = 0.0;
                for (int cc = 0; cc < cg; ++cc) {
                    const int ch = gi * cg + cc;
                    const std::int64_t coff = off + cc * spatial;
                    double acc_g = 0.0;
                    double acc_b = 0.0;
                    for (std::int64_t i = 0; i < spatial; ++i) {
                        const double dy = gy[coff + i];
                        const double xh = xhat[static_cast<std::size_t>(coff + i)];
                        acc_g += dy * xh;
                        acc_b += dy;
                        const double d = dy * ga[ch];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    if (!gg.empty()) gg[ch] += static_cast<real>(acc_g);
                    if (!gb.empty()) gb[ch] += static_cast<real>(acc_b);
                }
                if (gx.empty()) continue;
                const double mean_d = sum_d / static_cast<double>(block);
                const double mean_dx = sum_dx / static_cast<double>(block);
                const double r = rstd[static_cast<std::size_t>(b * groups + gi)];
                for (int cc = 0; cc < cg; ++cc) {
                    const int ch = gi * cg + cc;
                    const std::int64_t coff = off + cc * spatial;
                    for (std::int64_t i = 0; i < spatial; ++i) {
                        const double d = gy[coff + i] * ga[ch];
                        const double xh = xhat[static_cast<std::size_t>(coff + i)];
                        gx[static_cast<std::size_t>(coff + i)] += static_cast<real>(r * (d - mean_d - xh * mean_dx));
                    }
                }
            }
        }
    });
}

Tensor upsample_nearest2x(const Tensor& input_in) {
    Tensor input = input_in;
    require_rank(input, 4, "upsample_nearest2x");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int h2 = 2 * h, w2 = 2 * w;
    std::vector<real> out(static_cast<std::size_t>(n) * c * h2 * w2);
    const real* x = input.data().data();
    const std::int64_t planes = static_cast<std::int64_t>(n) * c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const real* src = x + p * h * w;
        real* dst = out.data() + p * h2 * w2;
        for (int y = 0; y < h2; ++y) {
            const real* row = src + (y / 2) * w;
            real* drow = dst + static_cast<std::int64_t>(y) * w2;
            for (int xx = 0; xx < w2; ++xx) drow[xx] = row[xx / 2];
        }
    }
    return make_op("upsample_nearest2x", {n, c, h2, w2}, std::move(out), {input},
                   [input, planes, h, w](TensorImpl& o) mutable {
                       auto gx = grad_target(input);
                       if (gx.empty()) return;
                       const int w2 = 2 * w;
                       for (std::int64_t p = 0; p < planes; ++p) {
                           const real* g = o.grad.data() + p * 4 * h * w;
                           real* dst = gx.data() + p * h * w;
                           for (int y = 0; y < h; ++y) {
                               const real* r0 = g + static_cast<std::int64_t>(2 * y) * w2;
                               const real* r1 = r0 + w2;
                               for (int xx = 0; xx < w; ++xx) {
                                   dst[y * w + xx] += r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
                               }
                           }
                       }
                   });
}

Tensor adaptive_avg_pool2d(const Tensor& input_in, int out_h, int out_w) {
    Tensor input = input_in;
    require_rank(input, 4, "adaptive_avg_pool2d");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (out_h < 1 || out_w < 1) throw ConfigError("adaptive_avg_pool2d: empty output extent");
    if (h < out_h || w < out_w) {
        throw ConfigError("adaptive_avg_pool2d: input " + std::to_string(h) + "×" + std::to_string(w) +
                          " is smaller than the " + std::to_string(out_h) + "×" + std::to_string(out_w) + " output");
    }
    auto bins = [](int extent, int out) {
        std::vector<std::pair<int, int>> b(static_cast<std::size_t>(out));
        for (int i = 0; i < out; ++i) {
            const int lo = (i * extent) / out;
            const int hi = ((i + 1) * extent + out - 1) / out;
            b[static_cast<std::size_t>(i)] = {lo, hi};
        }
        return b;
    };
    const auto by = bins(h, out_h);
    const auto bx = bins(w, out_w);
    std::vector<real> out(static_cast<std::size_t>(n) * c * out_h * out_w);
    const std::int64_t planes = static_cast<std::int64_t>(n) * c;
    const real* x = input.data().data();
    for (std::int64_t p = 0; p < planes; ++p) {
        const real* src = x + p * h * w;
        for (int i = 0; i < out_h; ++i) {
            for (int j = 0; j < out_w; ++j) {
                const auto [y0, y1] = by[static_cast<std::size_t>(i)];
                const auto [x0, x1] = bx[static_cast<std::size_t>(j)];
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int xx = x0; xx < x1; ++xx) acc += src[y * w + xx];
                out[static_cast<std::size_t>((p * out_h + i) * out_w + j)] =
                    static_cast<real>(acc / ((y1 - y0) * (x1 - x0)));
            }
        }
    }
    return make_op("adaptive_avg_pool2d", {n, c, out_h, out_w}, std::move(out), {input},
                   [input, by, bx, planes, h, w, out_h, out_w](TensorImpl& o) mutable {
                       auto gx = grad_target(input);
                       if (gx.empty()) return;
                       for (std::int64_t p = 0; p < planes; ++p) {
                           real* dst = gx.data() + p * h * w;
                           for (int i = 0; i < out_h; ++i) {
                               for (int j = 0; j < out_w; ++j) {
                                   const auto [y0, y1] = by[static_cast<std::size_t>(i)];
                                   const auto [x0, x1] = bx[static_cast<std::size_t>(j)];
                                   const real g = o.grad[static_cast<std::size_t>((p * out_h + i) * out_w + j)] /
                                                  static_cast<real>((y1 - y0) * (x1 - x0));
                                   for (int y = y0; y < y1; ++y)
                                       for (int xx = x0; xx < x1; ++xx) dst[y * w + xx] += g;
                               }
                           }
                       }
                   });
}

Tensor linear(const Tensor& input_in, const Tensor& weight_in, const Tensor& bias_in) {
    Tensor input = input_in;
    Tensor weight = weight_in;
    Tensor bias = bias_in;
    require_rank(input, 2, "linear");
    require_rank(weight, 2, "linear weight");
    const int m = input.dim(0);
    const int f = input.dim(1);
    const int gdim = weight.dim(0);
    if (weight.dim(1) != f) {
        throw DimensionError("linear: input axis 1 = " + std::to_string(f) + " but weight axis 1 = " +
                             std::to_string(weight.dim(1)));
    }
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != gdim)) {
        throw DimensionError("linear: bias axis 0 must be " + std::to_string(gdim));
    }
    std::vector<real> out(static_cast<std::size_t>(m) * gdim);
    Map om(out.data(), m, gdim);
    om.noalias() = ConstMap(input.data().data(), m, f) * ConstMap(weight.data().data(), gdim, f).transpose();
    if (bias.defined()) {
        const real* b = bias.data().data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < gdim; ++j) out[static_cast<std::size_t>(i * gdim + j)] += b[j];
    }
    std::vector<Tensor> inputs{input, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_op("linear", {m, gdim}, std::move(out), inputs, [input, weight, bias, m, f, gdim](TensorImpl& o) mutable {
        ConstMap go(o.grad.data(), m, gdim);
        auto gx = grad_target(input);
        auto gw = grad_target(weight);
        if (!gx.empty()) Map(gx.data(), m, f).noalias() += go * ConstMap(weight.data().data(), gdim, f);
        if (!gw.empty()) Map(gw.data(), gdim, f).noalias() += go.transpose() * ConstMap(input.data().data(), m, f);
        if (bias.defined()) {
            auto gb = grad_target(bias);
            if (!gb.empty()) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < gdim; ++j) gb[j] += o.grad[static_cast<std::size_t>(i * gdim + j)];
            }
        }
    });
}

}  // namespace ops
UNITMOD_END_NAMESPACE
