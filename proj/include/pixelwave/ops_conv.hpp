#pragma once

#include <array>
#include <vector>

#include "pixelwave/ops_core.hpp"

// N-dimensional convolution kernels (1, 2 or 3 spatial axes) over
// channels-last tensors. Input [d1..dS, Cin], kernel [k1..kS, Cin, Cout],
// output [o1..oS, Cout]. Valid arithmetic with explicit symmetric zero
// padding; transpose flag switches to the fractionally-strided variant.

namespace pixelwave {

struct ConvGeometry {
    int spatial = 0;
    std::array<int64_t, 3> in{}, ker{}, out{}, stride{}, pad{};
    int64_t cin = 0, cout = 0;
    bool transpose = false;

    int64_t out_numel() const {
        int64_t n = cout;
        for (int s = 0; s < spatial; ++s) n *= out[s];
        return n;
    }
};

namespace convdetail {

template <typename T>
ConvGeometry make_geometry(const Tensor<T>& x, const Tensor<T>& k, int spatial,
                           const std::vector<int64_t>& stride, const std::vector<int64_t>& pad, bool transpose) {
    if (spatial < 1 || spatial > 3) throw dimension_error("conv: spatial rank must be 1, 2 or 3");
    if (x.rank() != spatial + 1 || k.rank() != spatial + 2)
        throw dimension_error("conv: rank mismatch, input " + shape_str(x.shape) + " kernel " + shape_str(k.shape) +
                              " for spatial=" + std::to_string(spatial));
    if (static_cast<int>(stride.size()) != spatial || static_cast<int>(pad.size()) != spatial)
        throw dimension_error("conv: stride/pad rank mismatch");
    ConvGeometry g;
    g.spatial = spatial;
    g.transpose = transpose;
    g.cin = x.shape[spatial];
    g.cout = k.shape[spatial + 1];
    if (k.shape[spatial] != g.cin)
        throw dimension_error("conv: channel mismatch, input " + shape_str(x.shape) + " vs kernel " +
                              shape_str(k.shape));
    for (int s = 0; s < spatial; ++s) {
        g.in[s] = x.shape[s];
        g.ker[s] = k.shape[s];
        g.stride[s] = stride[s];
        g.pad[s] = pad[s];
        if (g.stride[s] < 1) throw input_error("conv: stride must be >= 1");
        if (g.pad[s] < 0) throw input_error("conv: padding must be >= 0");
        if (!transpose) {
            int64_t span = g.in[s] + 2 * g.pad[s] - g.ker[s];
            if (span < 0)
                throw dimension_error("conv: spatial extent smaller than kernel, input " + shape_str(x.shape) +
                                      " vs kernel " + shape_str(k.shape));
            g.out[s] = span / g.stride[s] + 1;
        } else {
            g.out[s] = (g.in[s] - 1) * g.stride[s] + g.ker[s] - 2 * g.pad[s];
            if (g.out[s] < 1) throw dimension_error("transpose conv: non-positive output extent");
        }
    }
    return g;
}

inline int64_t spatial_numel(const std::array<int64_t, 3>& e, int spatial) {
    int64_t n = 1;
    for (int s = 0; s < spatial; ++s) n *= e[s];
    return n;
}

inline void unflatten(int64_t flat, const std::array<int64_t, 3>& e, int spatial, std::array<int64_t, 3>& c) {
    for (int s = spatial - 1; s >= 0; --s) {
        c[s] = flat % e[s];
        flat /= e[s];
    }
}

inline int64_t flatten(const std::array<int64_t, 3>& c, const std::array<int64_t, 3>& e, int spatial) {
    int64_t f = 0;
    for (int s = 0; s < spatial; ++s) f = f * e[s] + c[s];
    return f;
}

// Enumerates kernel offsets once; each entry holds the flattened kernel
// base index (row of size cin*cout) plus its coordinates.
struct KernelOffsets {
    std::vector<std::array<int64_t, 3>> coords;
    int64_t count = 0;

    KernelOffsets(const ConvGeometry& g) {
        count = spatial_numel(g.ker, g.spatial);
        coords.resize(static_cast<size_t>(count));
        for (int64_t q = 0; q < count; ++q) unflatten(q, g.ker, g.spatial, coords[static_cast<size_t>(q)]);
    }
};

// Dense patch matrix for GEMM-based convolution: row per output position,
// one K*cin block per kernel offset, zeros where the tap leaves the map.
template <typename T>
void im2col(const ConvGeometry& g, const KernelOffsets& ko, const T* x, T* col) {
    int64_t out_sp = spatial_numel(g.out, g.spatial);
    int64_t width = ko.count * g.cin;
    std::array<int64_t, 3> oc{}, ic{};
    for (int64_t o = 0; o < out_sp; ++o) {
        unflatten(o, g.out, g.spatial, oc);
        T* crow = col + o * width;
        for (int64_t q = 0; q < ko.count; ++q) {
            bool ok = true;
            for (int s = 0; s < g.spatial; ++s) {
                ic[s] = oc[s] * g.stride[s] + ko.coords[static_cast<size_t>(q)][s] - g.pad[s];
                if (ic[s] < 0 || ic[s] >= g.in[s]) {
                    ok = false;
                    break;
                }
            }
            T* dst = crow + q * g.cin;
            if (!ok) {
                std::fill_n(dst, g.cin, T(0));
            } else {
                const T* src = x + flatten(ic, g.in, g.spatial) * g.cin;
                std::copy_n(src, g.cin, dst);
            }
        }
    }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const KernelOffsets& ko, const T* col, T* gx) {
    int64_t out_sp = spatial_numel(g.out, g.spatial);
    int64_t width = ko.count * g.cin;
    std::array<int64_t, 3> oc{}, ic{};
    for (int64_t o = 0; o < out_sp; ++o) {
        unflatten(o, g.out, g.spatial, oc);
        const T* crow = col + o * width;
        for (int64_t q = 0; q < ko.count; ++q) {
            bool ok = true;
            for (int s = 0; s < g.spatial; ++s) {
                ic[s] = oc[s] * g.stride[s] + ko.coords[static_cast<size_t>(q)][s] - g.pad[s];
                if (ic[s] < 0 || ic[s] >= g.in[s]) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            T* dst = gx + flatten(ic, g.in, g.spatial) * g.cin;
            const T* src = crow + q * g.cin;
            for (int64_t ci = 0; ci < g.cin; ++ci) dst[ci] += src[ci];
        }
    }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_add(int64_t m, int64_t k, int64_t n, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        T* crow = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T a = arow[p];
            if (a == T(0)) continue;
            const T* brow = B + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T  (dot products over contiguous rows)
template <typename T>
void gemm_nt_add(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * n;
        T* crow = C + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* brow = B + p * n;
            T acc = T(0);
            for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_add(int64_t m, int64_t k, int64_t n, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = A + i * k;
        const T* brow = B + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T a = arow[p];
            if (a == T(0)) continue;
            T* crow = C + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

template <typename T>
void forward(const ConvGeometry& g, const T* x, const T* k, T* y) {
    KernelOffsets ko(g);
    int64_t out_sp = spatial_numel(g.out, g.spatial);
    int64_t width = ko.count * g.cin;
    std::vector<T> col(static_cast<size_t>(out_sp * width));
    im2col(g, ko, x, col.data());
    gemm_nn_add(out_sp, width, g.cout, col.data(), k, y);
}

template <typename T>
void backward_input(const ConvGeometry& g, const T* gy, const T* k, T* gx) {
    KernelOffsets ko(g);
    int64_t out_sp = spatial_numel(g.out, g.spatial);
    int64_t width = ko.count * g.cin;
    std::vector<T> gcol(static_cast<size_t>(out_sp * width), T(0));
    gemm_nt_add(out_sp, g.cout, width, gy, k, gcol.data());
    col2im_add(g, ko, gcol.data(), gx);
}

template <typename T>
void backward_kernel(const ConvGeometry& g, const T* x, const T* gy, T* gk) {
    KernelOffsets ko(g);
    int64_t out_sp = spatial_numel(g.out, g.spatial);
    int64_t width = ko.count * g.cin;
    std::vector<T> col(static_cast<size_t>(out_sp * width));
    im2col(g, ko, x, col.data());
    gemm_tn_add(out_sp, width, g.cout, col.data(), gy, gk);
}

// Transpose convolution scatters each input position through the kernel.
template <typename T>
void forward_transpose(const ConvGeometry& g, const T* x, const T* k, T* y) {
    KernelOffsets ko(g);
    int64_t in_sp = spatial_numel(g.in, g.spatial);
    std::array<int64_t, 3> icoord{}, oc{};
    for (int64_t i = 0; i < in_sp; ++i) {
        unflatten(i, g.in, g.spatial, icoord);
        const T* xrow = x + i * g.cin;
        for (int64_t q = 0; q < ko.count; ++q) {
            bool ok = true;
            for (int s = 0; s < g.spatial; ++s) {
                oc[s] = icoord[s] * g.stride[s] + ko.coords[q][s] - g.pad[s];
                if (oc[s] < 0 || oc[s] >= g.out[s]) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            T* yrow = y + flatten(oc, g.out, g.spatial) * g.cout;
            const T* krow = k + q * g.cin * g.cout;
            for (int64_t ci = 0; ci < g.cin; ++ci) {
                T xv = xrow[ci];
                if (xv == T(0)) continue;
                const T* kr = krow + ci * g.cout;
                for (int64_t co = 0; co < g.cout; ++co) yrow[co] += xv * kr[co];
            }
        }
    }
}

template <typename T>
void backward_input_transpose(const ConvGeometry& g, const T* gy, const T* k, T* gx) {
    KernelOffsets ko(g);
    int64_t in_sp = spatial_numel(g.in, g.spatial);
    std::array<int64_t, 3> icoord{}, oc{};
    for (int64_t i = 0; i < in_sp; ++i) {
        unflatten(i, g.in, g.spatial, icoord);
        T* gxrow = gx + i * g.cin;
        for (int64_t q = 0; q < ko.count; ++q) {
            bool ok = true;
            for (int s = 0; s < g.spatial; ++s) {
                oc[s] = icoord[s] * g.stride[s] + ko.coords[q][s] - g.pad[s];
                if (oc[s] < 0 || oc[s] >= g.out[s]) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            const T* grow = gy + flatten(oc, g.out, g.spatial) * g.cout;
            const T* krow = k + q * g.cin * g.cout;
            for (int64_t ci = 0; ci < g.cin; ++ci) {
                const T* kr = krow + ci * g.cout;
                T acc = T(0);
                for (int64_t co = 0; co < g.cout; ++co) acc += grow[co] * kr[co];
                gxrow[ci] += acc;
            }
        }
    }
}

template <typename T>
void backward_kernel_transpose(const ConvGeometry& g, const T* x, const T* gy, T* gk) {
    KernelOffsets ko(g);
    int64_t in_sp = spatial_numel(g.in, g.spatial);
    std::array<int64_t, 3> icoord{}, oc{};
    for (int64_t i = 0; i < in_sp; ++i) {
        unflatten(i, g.in, g.spatial, icoord);
        const T* xrow = x + i * g.cin;
        for (int64_t q = 0; q < ko.count; ++q) {
            bool ok = true;
            for (int s = 0; s < g.spatial; ++s) {
                oc[s] = icoord[s] * g.stride[s] + ko.coords[q][s] - g.pad[s];
                if (oc[s] < 0 || oc[s] >= g.out[s]) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            const T* grow = gy + flatten(oc, g.out, g.spatial) * g.cout;
            T* krow = gk + q * g.cin * g.cout;
            for (int64_t ci = 0; ci < g.cin; ++ci) {
                T xv = xrow[ci];
                if (xv == T(0)) continue;
                T* kr = krow + ci * g.cout;
                for (int64_t co = 0; co < g.cout; ++co) kr[co] += xv * grow[co];
            }
        }
    }
}

}  // namespace convdetail

// Plain (tape-free) convolution used by oracles and inference helpers.
template <typename T>
Tensor<T> conv_raw(const Tensor<T>& x, const Tensor<T>& k, int spatial, const std::vector<int64_t>& stride,
                   const std::vector<int64_t>& pad, bool transpose = false) {
    ConvGeometry g = convdetail::make_geometry(x, k, spatial, stride, pad, transpose);
    Shape os;
    for (int s = 0; s < g.spatial; ++s) os.push_back(g.out[s]);
    os.push_back(g.cout);
    Tensor<T> y(os);
    if (transpose)
        convdetail::forward_transpose(g, x.ptr(), k.ptr(), y.ptr());
    else
        convdetail::forward(g, x.ptr(), k.ptr(), y.ptr());
    return y;
}

// Differentiable convolution. `bias` may be null.
template <typename T>
Value<T> conv(Tape<T>& tape, const Value<T>& x, const Value<T>& k, const std::type_identity_t<Value<T>>& bias, int spatial,
              std::vector<int64_t> stride, std::vector<int64_t> pad, bool transpose = false) {
    ConvGeometry g = convdetail::make_geometry(x->value, k->value, spatial, stride, pad, transpose);
    Shape os;
    for (int s = 0; s < g.spatial; ++s) os.push_back(g.out[s]);
    os.push_back(g.cout);
    Tensor<T> y(os);
    if (transpose)
        convdetail::forward_transpose(g, x->value.ptr(), k->value.ptr(), y.ptr());
    else
        convdetail::forward(g, x->value.ptr(), k->value.ptr(), y.ptr());
    if (bias) {
        if (bias->value.numel() != g.cout) throw dimension_error("conv: bias length mismatch");
        int64_t rows = y.numel() / g.cout;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t co = 0; co < g.cout; ++co) y[r * g.cout + co] += bias->value[co];
    }
    bool rg = tape.recording() && (x->requires_grad || k->requires_grad || (bias && bias->requires_grad));
    auto out = make_value(std::move(y), rg);
    if (rg) {
        x->ensure_grad();
        k->ensure_grad();
        if (bias) bias->ensure_grad();
        tape.record([x, k, bias, out, g] {
            if (x->requires_grad) {
                if (g.transpose)
                    convdetail::backward_input_transpose(g, out->grad.ptr(), k->value.ptr(), x->grad.ptr());
                else
                    convdetail::backward_input(g, out->grad.ptr(), k->value.ptr(), x->grad.ptr());
            }
            if (k->requires_grad) {
                if (g.transpose)
                    convdetail::backward_kernel_transpose(g, x->value.ptr(), out->grad.ptr(), k->grad.ptr());
                else
                    convdetail::backward_kernel(g, x->value.ptr(), out->grad.ptr(), k->grad.ptr());
            }
            if (bias && bias->requires_grad) {
                int64_t rows = out->grad.numel() / g.cout;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t co = 0; co < g.cout; ++co) bias->grad[co] += out->grad[r * g.cout + co];
            }
        });
    }
    return out;
}

// ------------------------------------------------------------- upsampling

namespace updetail {

struct LinearTap {
    int64_t i0, i1;
    double w1;  // weight of i1; i0 takes 1 - w1
};

// Half-pixel (align_corners = false) source taps for a factor-2 resize.
inline std::vector<LinearTap> taps_x2(int64_t n) {
    std::vector<LinearTap> taps(static_cast<size_t>(2 * n));
    for (int64_t d = 0; d < 2 * n; ++d) {
        double s = 0.5 * d - 0.25;
        if (s < 0) s = 0;
        if (s > n - 1) s = static_cast<double>(n - 1);
        int64_t i0 = static_cast<int64_t>(s);
        int64_t i1 = std::min(i0 + 1, n - 1);
        taps[static_cast<size_t>(d)] = {i0, i1, s - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace updetail

// Bilinear x2 upsampling of an h x w x c map.
template <typename T>
Value<T> upsample_bilinear_x2(Tape<T>& tape, const Value<T>& x) {
    if (x->value.rank() != 3) throw dimension_error("upsample_bilinear_x2 expects h x w x c");
    int64_t h = x->value.shape[0], w = x->value.shape[1], c = x->value.shape[2];
    auto ty = updetail::taps_x2(h);
    auto tx = updetail::taps_x2(w);
    Tensor<T> y({2 * h, 2 * w, c});
    for (int64_t i = 0; i < 2 * h; ++i)
        for (int64_t j = 0; j < 2 * w; ++j) {
            const auto& a = ty[static_cast<size_t>(i)];
            const auto& b = tx[static_cast<size_t>(j)];
            const T* p00 = x->value.ptr() + (a.i0 * w + b.i0) * c;
            const T* p01 = x->value.ptr() + (a.i0 * w + b.i1) * c;
            const T* p10 = x->value.ptr() + (a.i1 * w + b.i0) * c;
            const T* p11 = x->value.ptr() + (a.i1 * w + b.i1) * c;
            double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
            double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
            T* yr = y.ptr() + (i * 2 * w + j) * c;
            for (int64_t ch = 0; ch < c; ++ch)
                yr[ch] = static_cast<T>(w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch]);
        }
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, ty, tx, h, w, c] {
            for (int64_t i = 0; i < 2 * h; ++i)
                for (int64_t j = 0; j < 2 * w; ++j) {
                    const auto& a = ty[static_cast<size_t>(i)];
                    const auto& b = tx[static_cast<size_t>(j)];
                    double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
                    double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
                    const T* gr = out->grad.ptr() + (i * 2 * w + j) * c;
                    for (int64_t ch = 0; ch < c; ++ch) {
                        x->grad[(a.i0 * w + b.i0) * c + ch] += static_cast<T>(w00 * gr[ch]);
                        x->grad[(a.i0 * w + b.i1) * c + ch] += static_cast<T>(w01 * gr[ch]);
                        x->grad[(a.i1 * w + b.i0) * c + ch] += static_cast<T>(w10 * gr[ch]);
                        x->grad[(a.i1 * w + b.i1) * c + ch] += static_cast<T>(w11 * gr[ch]);
                    }
                }
        });
    }
    return out;
}

// Extracts frame f of a T x h x w x c stack as h x w x c.
template <typename T>
Value<T> slice_rows_3d(Tape<T>& tape, const Value<T>& x, int64_t f) {
    if (x->value.rank() != 4) throw dimension_error("slice_rows_3d expects a rank-4 stack");
    int64_t tt = x->value.shape[0];
    if (f < 0 || f >= tt) throw input_error("slice_rows_3d: frame index out of range");
    int64_t rest = x->value.numel() / tt;
    Shape os(x->value.shape.begin() + 1, x->value.shape.end());
    Tensor<T> y(os);
    std::copy_n(x->value.ptr() + f * rest, rest, y.ptr());
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, f, rest] {
            for (int64_t i = 0; i < rest; ++i) x->grad[f * rest + i] += out->grad[i];
        });
    }
    return out;
}

// Stacks equal-shape tensors along a new leading axis.
template <typename T>
Value<T> stack_axis0(Tape<T>& tape, const std::vector<Value<T>>& frames) {
    if (frames.empty()) throw input_error("stack_axis0: empty frame list");
    for (auto& f : frames) check_same_shape(frames[0]->value, f->value, "stack_axis0");
    Shape os;
    os.push_back(static_cast<int64_t>(frames.size()));
    for (int64_t e : frames[0]->value.shape) os.push_back(e);
    Tensor<T> y(os);
    int64_t rest = frames[0]->value.numel();
    for (size_t f = 0; f < frames.size(); ++f)
        std::copy_n(frames[f]->value.ptr(), rest, y.ptr() + static_cast<int64_t>(f) * rest);
    bool rg = false;
    for (auto& f : frames) rg = rg || f->requires_grad;
    auto out = make_value(std::move(y), tape.recording() && rg);
    if (out->requires_grad) {
        for (auto& f : frames) f->ensure_grad();
        tape.record([frames, out, rest] {
            for (size_t f = 0; f < frames.size(); ++f)
                if (frames[f]->requires_grad)
                    for (int64_t i = 0; i < rest; ++i)
                        frames[f]->grad[i] += out->grad[static_cast<int64_t>(f) * rest + i];
        });
    }
    return out;
}

// Trilinear upsampling restricted to the spatial axes of a T x h x w x c
// stack (temporal extent preserved); per-frame bilinear taps.
template <typename T>
Value<T> upsample_trilinear_spatial_x2(Tape<T>& tape, const Value<T>& x) {
    if (x->value.rank() != 4) throw dimension_error("upsample_trilinear_spatial_x2 expects T x h x w x c");
    int64_t tt = x->value.shape[0];
    std::vector<Value<T>> frames;
    frames.reserve(static_cast<size_t>(tt));
    for (int64_t f = 0; f < tt; ++f) frames.push_back(upsample_bilinear_x2(tape, slice_rows_3d(tape, x, f)));
    return stack_axis0(tape, frames);
}

}  // namespace pixelwave
