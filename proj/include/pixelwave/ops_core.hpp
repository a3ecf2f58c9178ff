#pragma once

#include <cmath>
#include <vector>

#include "pixelwave/tape.hpp"

// Differentiable kernels over Value<T> nodes. Every op computes its
// forward result eagerly and, when the tape is recording and an input
// requires grad, pushes one closure that scatters d(out) into the
// inputs' grad buffers. Kernels are pure over their inputs.

namespace pixelwave {

template <typename T>
inline bool grad_needed(Tape<T>& tape, std::initializer_list<Value<T>> ins) {
    if (!tape.recording()) return false;
    for (auto& v : ins)
        if (v && v->requires_grad) return true;
    return false;
}

template <typename T>
Value<T> constant(Tensor<T> t) {
    return make_value<T>(std::move(t), false);
}

// ---------------------------------------------------------------- basics

template <typename T>
Value<T> add(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor<T> y = a->value;
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += b->value[i];
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
                if (b->requires_grad) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Value<T> sub(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor<T> y = a->value;
    for (int64_t i = 0; i < y.numel(); ++i) y[i] -= b->value[i];
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
                if (b->requires_grad) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Value<T> mul(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor<T> y = a->value;
    for (int64_t i = 0; i < y.numel(); ++i) y[i] *= b->value[i];
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) {
                T g = out->grad[i];
                if (a->requires_grad) a->grad[i] += g * b->value[i];
                if (b->requires_grad) b->grad[i] += g * a->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Value<T> mul_scalar(Tape<T>& tape, const Value<T>& a, double s) {
    Tensor<T> y = a->value;
    for (auto& v : y.data) v = static_cast<T>(v * s);
    auto out = make_value(std::move(y), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out, s] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad[i] += static_cast<T>(out->grad[i] * s);
        });
    }
    return out;
}

template <typename T>
Value<T> add_scalar(Tape<T>& tape, const Value<T>& a, double s) {
    Tensor<T> y = a->value;
    for (auto& v : y.data) v = static_cast<T>(v + s);
    auto out = make_value(std::move(y), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
Value<T> neg(Tape<T>& tape, const Value<T>& a) {
    return mul_scalar(tape, a, -1.0);
}

// ------------------------------------------------------------ activations

template <typename T, typename FwdFn, typename BwdFn>
Value<T> unary_op(Tape<T>& tape, const Value<T>& a, FwdFn f, BwdFn df) {
    Tensor<T> y(a->value.shape);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = static_cast<T>(f(static_cast<double>(a->value[i])));
    auto out = make_value(std::move(y), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out, df] {
            for (int64_t i = 0; i < out->grad.numel(); ++i)
                a->grad[i] += static_cast<T>(out->grad[i] * static_cast<T>(df(static_cast<double>(a->value[i]))));
        });
    }
    return out;
}

template <typename T>
Value<T> relu(Tape<T>& tape, const Value<T>& a) {
    return unary_op(
        tape, a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

template <typename T>
Value<T> gelu(Tape<T>& tape, const Value<T>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary_op(
        tape, a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

template <typename T>
Value<T> sigmoid(Tape<T>& tape, const Value<T>& a) {
    return unary_op(
        tape, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        });
}

template <typename T>
Value<T> tanh_op(Tape<T>& tape, const Value<T>& a) {
    return unary_op(
        tape, a, [](double x) { return std::tanh(x); },
        [](double x) {
            double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

template <typename T>
Value<T> sqrt_op(Tape<T>& tape, const Value<T>& a) {
    return unary_op(
        tape, a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

template <typename T>
Value<T> rsqrt(Tape<T>& tape, const Value<T>& a) {
    return unary_op(
        tape, a, [](double x) { return 1.0 / std::sqrt(x); },
        [](double x) { return -0.5 / (x * std::sqrt(x)); });
}

template <typename T>
Value<T> clamp_min(Tape<T>& tape, const Value<T>& a, double lo) {
    return unary_op(
        tape, a, [=](double x) { return x < lo ? lo : x; }, [=](double x) { return x > lo ? 1.0 : 0.0; });
}

// ------------------------------------------------------------- reductions

template <typename T>
Value<T> sum_all(Tape<T>& tape, const Value<T>& a) {
    double s = 0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += static_cast<double>(a->value[i]);
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(s)), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out] {
            T g = out->grad[0];
            for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
        });
    }
    return out;
}

template <typename T>
Value<T> mean_all(Tape<T>& tape, const Value<T>& a) {
    return mul_scalar(tape, sum_all(tape, a), 1.0 / static_cast<double>(a->value.numel()));
}

// Mean squared error over all elements.
template <typename T>
Value<T> mse_loss(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "mse_loss");
    int64_t n = a->value.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
        s += d * d;
    }
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(s / n)), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, n] {
            T g = static_cast<T>(out->grad[0] * T(2) / static_cast<T>(n));
            for (int64_t i = 0; i < n; ++i) {
                T d = a->value[i] - b->value[i];
                if (a->requires_grad) a->grad[i] += g * d;
                if (b->requires_grad) b->grad[i] -= g * d;
            }
        });
    }
    return out;
}

// Mean absolute error; subgradient 0 at exact ties.
template <typename T>
Value<T> l1_loss(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "l1_loss");
    int64_t n = a->value.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]));
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(s / n)), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, n] {
            T g = out->grad[0] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) {
                T d = a->value[i] - b->value[i];
                T sg = d > T(0) ? g : (d < T(0) ? -g : T(0));
                if (a->requires_grad) a->grad[i] += sg;
                if (b->requires_grad) b->grad[i] -= sg;
            }
        });
    }
    return out;
}

// Squared L2 norm of the difference, summed over all elements.
template <typename T>
Value<T> sq_diff_norm(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "sq_diff_norm");
    int64_t n = a->value.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
        s += d * d;
    }
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(s)), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, n] {
            T g = out->grad[0] * T(2);
            for (int64_t i = 0; i < n; ++i) {
                T d = a->value[i] - b->value[i];
                if (a->requires_grad) a->grad[i] += g * d;
                if (b->requires_grad) b->grad[i] -= g * d;
            }
        });
    }
    return out;
}

// ------------------------------------------------------- matrix / shaping

template <typename T>
Value<T> matmul(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[1] != b->value.shape[0])
        throw dimension_error("matmul: incompatible shapes " + shape_str(a->value.shape) + " vs " +
                              shape_str(b->value.shape));
    int64_t m = a->value.shape[0], k = a->value.shape[1], n = b->value.shape[1];
    Tensor<T> y({m, n});
    const T* A = a->value.ptr();
    const T* B = b->value.ptr();
    T* Y = y.ptr();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            T av = A[i * k + p];
            if (av == T(0)) continue;
            const T* brow = B + p * n;
            T* yrow = Y + i * n;
            for (int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, m, k, n] {
            const T* G = out->grad.ptr();
            if (a->requires_grad) {
                const T* B = b->value.ptr();
                T* GA = a->grad.ptr();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) {
                        T g = G[i * n + j];
                        if (g == T(0)) continue;
                        const T* brow = B + j;
                        for (int64_t p = 0; p < k; ++p) GA[i * k + p] += g * brow[p * n];
                    }
            }
            if (b->requires_grad) {
                const T* A = a->value.ptr();
                T* GB = b->grad.ptr();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        T av = A[i * k + p];
                        if (av == T(0)) continue;
                        const T* grow = G + i * n;
                        T* gbrow = GB + p * n;
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
Tensor<T> permute_raw(const Tensor<T>& x, const std::vector<int64_t>& axes) {
    Shape os(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) os[i] = x.shape[axes[i]];
    Tensor<T> y(os);
    auto xst = row_major_strides(x.shape);
    auto yst = row_major_strides(os);
    std::vector<int64_t> idx(axes.size(), 0);
    for (int64_t flat = 0; flat < y.numel(); ++flat) {
        int64_t rem = flat, xoff = 0;
        for (size_t d = 0; d < axes.size(); ++d) {
            int64_t c = rem / yst[d];
            rem %= yst[d];
            xoff += c * xst[axes[d]];
        }
        y[flat] = x[xoff];
    }
    return y;
}

}  // namespace detail

template <typename T>
Value<T> permute(Tape<T>& tape, const Value<T>& a, std::vector<int64_t> axes) {
    if (axes.size() != a->value.shape.size()) throw dimension_error("permute: axes rank mismatch");
    auto out = make_value(detail::permute_raw(a->value, axes), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        std::vector<int64_t> inv(axes.size());
        for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int64_t>(i);
        tape.record([a, out, inv] {
            Tensor<T> g = detail::permute_raw(out->grad, inv);
            for (int64_t i = 0; i < g.numel(); ++i) a->grad[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Value<T> transpose2d(Tape<T>& tape, const Value<T>& a) {
    return permute(tape, a, {1, 0});
}

template <typename T>
Value<T> reshape(Tape<T>& tape, const Value<T>& a, Shape s) {
    auto out = make_value(a->value.reshaped(std::move(s)), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) a->grad[i] += out->grad[i];
        });
    }
    return out;
}

// ----------------------------------------------------- softmax / normalize

// Softmax over the last axis; any leading shape.
template <typename T>
Value<T> softmax_lastdim(Tape<T>& tape, const Value<T>& a) {
    int64_t c = a->value.shape.back();
    int64_t rows = a->value.numel() / c;
    Tensor<T> y(a->value.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = a->value.ptr() + r * c;
        T* yr = y.ptr() + r * c;
        double mx = -1e300;
        for (int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double denom = 0;
        for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(xr[j]) - mx);
        for (int64_t j = 0; j < c; ++j) yr[j] = static_cast<T>(std::exp(static_cast<double>(xr[j]) - mx) / denom);
    }
    auto out = make_value(std::move(y), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out, rows, c] {
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = out->value.ptr() + r * c;
                const T* gr = out->grad.ptr() + r * c;
                T* ar = a->grad.ptr() + r * c;
                double dot = 0;
                for (int64_t j = 0; j < c; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
                for (int64_t j = 0; j < c; ++j) ar[j] += static_cast<T>(yr[j] * (gr[j] - static_cast<T>(dot)));
            }
        });
    }
    return out;
}

// L2-normalizes each row of an n x c matrix. Rows with (near-)zero norm
// pass through unchanged; their indices are reported through `zero_rows`
// when provided, and gradients pass through them as identity.
template <typename T>
Value<T> rows_l2_normalize(Tape<T>& tape, const Value<T>& a, std::vector<int64_t>* zero_rows = nullptr) {
    if (a->value.rank() != 2) throw dimension_error("rows_l2_normalize expects a 2-D input");
    int64_t n = a->value.shape[0], c = a->value.shape[1];
    Tensor<T> y(a->value.shape);
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const T* xr = a->value.ptr() + i * c;
        double s = 0;
        for (int64_t j = 0; j < c; ++j) s += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
        double r = std::sqrt(s);
        (*norms)[i] = r;
        T* yr = y.ptr() + i * c;
        if (r < 1e-12) {
            if (zero_rows) zero_rows->push_back(i);
            for (int64_t j = 0; j < c; ++j) yr[j] = xr[j];
        } else {
            for (int64_t j = 0; j < c; ++j) yr[j] = static_cast<T>(xr[j] / r);
        }
    }
    auto out = make_value(std::move(y), grad_needed(tape, {a}));
    if (out->requires_grad) {
        a->ensure_grad();
        tape.record([a, out, norms, n, c] {
            for (int64_t i = 0; i < n; ++i) {
                const T* xr = a->value.ptr() + i * c;
                const T* gr = out->grad.ptr() + i * c;
                T* ar = a->grad.ptr() + i * c;
                double r = (*norms)[i];
                if (r < 1e-12) {
                    for (int64_t j = 0; j < c; ++j) ar[j] += gr[j];
                } else {
                    double dot = 0;
                    for (int64_t j = 0; j < c; ++j) dot += static_cast<double>(xr[j]) * static_cast<double>(gr[j]);
                    double r3 = r * r * r;
                    for (int64_t j = 0; j < c; ++j)
                        ar[j] += static_cast<T>(gr[j] / r - xr[j] * (dot / r3));
                }
            }
        });
    }
    return out;
}

// ------------------------------------------------------ broadcast helpers

// Adds a length-C bias over the last axis.
template <typename T>
Value<T> add_bias(Tape<T>& tape, const Value<T>& x, const Value<T>& b) {
    int64_t c = x->value.shape.back();
    if (b->value.numel() != c) throw dimension_error("add_bias: bias length mismatch");
    int64_t rows = x->value.numel() / c;
    Tensor<T> y = x->value;
    for (int64_t r = 0; r < rows; ++r) {
        T* yr = y.ptr() + r * c;
        for (int64_t j = 0; j < c; ++j) yr[j] += b->value[j];
    }
    auto out = make_value(std::move(y), grad_needed(tape, {x, b}));
    if (out->requires_grad) {
        x->ensure_grad();
        b->ensure_grad();
        tape.record([x, b, out, rows, c] {
            const T* G = out->grad.ptr();
            if (x->requires_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) x->grad[i] += G[i];
            if (b->requires_grad)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < c; ++j) b->grad[j] += G[r * c + j];
        });
    }
    return out;
}

// Column means of an n x c matrix -> length-c vector.
template <typename T>
Value<T> col_mean(Tape<T>& tape, const Value<T>& x) {
    if (x->value.rank() != 2) throw dimension_error("col_mean expects a 2-D input");
    int64_t n = x->value.shape[0], c = x->value.shape[1];
    Tensor<T> y({c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) y[j] += x->value.at(i, j);
    for (int64_t j = 0; j < c; ++j) y[j] = static_cast<T>(y[j] / static_cast<T>(n));
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, n, c] {
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j) x->grad[i * c + j] += out->grad[j] / static_cast<T>(n);
        });
    }
    return out;
}

// x[i,j] - v[j]
template <typename T>
Value<T> sub_rowvec(Tape<T>& tape, const Value<T>& x, const Value<T>& v) {
    int64_t c = x->value.shape.back();
    if (v->value.numel() != c) throw dimension_error("sub_rowvec: vector length mismatch");
    int64_t rows = x->value.numel() / c;
    Tensor<T> y = x->value;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) y[r * c + j] -= v->value[j];
    auto out = make_value(std::move(y), grad_needed(tape, {x, v}));
    if (out->requires_grad) {
        x->ensure_grad();
        v->ensure_grad();
        tape.record([x, v, out, rows, c] {
            const T* G = out->grad.ptr();
            if (x->requires_grad)
                for (int64_t i = 0; i < out->grad.numel(); ++i) x->grad[i] += G[i];
            if (v->requires_grad)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < c; ++j) v->grad[j] -= G[r * c + j];
        });
    }
    return out;
}

// x[i,j] * s[j]
template <typename T>
Value<T> scale_cols(Tape<T>& tape, const Value<T>& x, const Value<T>& s) {
    if (x->value.rank() != 2) throw dimension_error("scale_cols expects a 2-D input");
    int64_t n = x->value.shape[0], c = x->value.shape[1];
    if (s->value.numel() != c) throw dimension_error("scale_cols: scale length mismatch");
    Tensor<T> y = x->value;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) y[i * c + j] *= s->value[j];
    auto out = make_value(std::move(y), grad_needed(tape, {x, s}));
    if (out->requires_grad) {
        x->ensure_grad();
        s->ensure_grad();
        tape.record([x, s, out, n, c] {
            const T* G = out->grad.ptr();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    if (x->requires_grad) x->grad[i * c + j] += G[i * c + j] * s->value[j];
                    if (s->requires_grad) s->grad[j] += G[i * c + j] * x->value[i * c + j];
                }
        });
    }
    return out;
}

// Per-row dot product of two n x c matrices -> length-n vector.
template <typename T>
Value<T> rowdot(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    check_same_shape(a->value, b->value, "rowdot");
    if (a->value.rank() != 2) throw dimension_error("rowdot expects 2-D inputs");
    int64_t n = a->value.shape[0], c = a->value.shape[1];
    Tensor<T> y({n});
    for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < c; ++j)
            s += static_cast<double>(a->value.at(i, j)) * static_cast<double>(b->value.at(i, j));
        y[i] = static_cast<T>(s);
    }
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, n, c] {
            for (int64_t i = 0; i < n; ++i) {
                T g = out->grad[i];
                for (int64_t j = 0; j < c; ++j) {
                    if (a->requires_grad) a->grad[i * c + j] += g * b->value[i * c + j];
                    if (b->requires_grad) b->grad[i * c + j] += g * a->value[i * c + j];
                }
            }
        });
    }
    return out;
}

// Sum of squared off-diagonal entries of a square matrix.
template <typename T>
Value<T> offdiag_sq_sum(Tape<T>& tape, const Value<T>& x) {
    if (x->value.rank() != 2 || x->value.shape[0] != x->value.shape[1])
        throw dimension_error("offdiag_sq_sum expects a square matrix");
    int64_t n = x->value.shape[0];
    double s = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (i != j) s += static_cast<double>(x->value.at(i, j)) * static_cast<double>(x->value.at(i, j));
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(s)), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, n] {
            T g = out->grad[0];
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j)
                    if (i != j) x->grad[i * n + j] += T(2) * g * x->value[i * n + j];
        });
    }
    return out;
}

// ----------------------------------------------------- gather / concat

template <typename T>
Value<T> gather_rows(Tape<T>& tape, const Value<T>& x, std::vector<int64_t> idx) {
    if (x->value.rank() != 2) throw dimension_error("gather_rows expects a 2-D input");
    int64_t n = x->value.shape[0], c = x->value.shape[1];
    for (int64_t i : idx)
        if (i < 0 || i >= n) throw input_error("gather_rows: index out of range");
    Tensor<T> y({static_cast<int64_t>(idx.size()), c});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x->value.ptr() + idx[r] * c, c, y.ptr() + static_cast<int64_t>(r) * c);
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, idx, c] {
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t j = 0; j < c; ++j)
                    x->grad[idx[r] * c + j] += out->grad[static_cast<int64_t>(r) * c + j];
        });
    }
    return out;
}

// Concatenates 2-D blocks along axis 0.
template <typename T>
Value<T> concat_rows(Tape<T>& tape, const std::vector<Value<T>>& blocks) {
    if (blocks.empty()) throw input_error("concat_rows: empty block list");
    int64_t c = blocks[0]->value.shape.back();
    int64_t total = 0;
    for (auto& b : blocks) {
        if (b->value.rank() != 2 || b->value.shape[1] != c)
            throw dimension_error("concat_rows: inconsistent widths");
        total += b->value.shape[0];
    }
    Tensor<T> y({total, c});
    int64_t off = 0;
    for (auto& b : blocks) {
        std::copy_n(b->value.ptr(), b->value.numel(), y.ptr() + off);
        off += b->value.numel();
    }
    bool rg = false;
    for (auto& b : blocks) rg = rg || b->requires_grad;
    auto out = make_value(std::move(y), tape.recording() && rg);
    if (out->requires_grad) {
        for (auto& b : blocks) b->ensure_grad();
        tape.record([blocks, out] {
            int64_t off = 0;
            for (auto& b : blocks) {
                if (b->requires_grad)
                    for (int64_t i = 0; i < b->grad.numel(); ++i) b->grad[i] += out->grad[off + i];
                off += b->value.numel();
            }
        });
    }
    return out;
}

// Concatenates along the last (channel) axis; leading extents must agree.
template <typename T>
Value<T> concat_last(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    if (a->value.rank() != b->value.rank()) throw dimension_error("concat_last: rank mismatch");
    for (size_t d = 0; d + 1 < a->value.shape.size(); ++d)
        if (a->value.shape[d] != b->value.shape[d])
            throw dimension_error("concat_last: leading extents differ: " + shape_str(a->value.shape) + " vs " +
                                  shape_str(b->value.shape));
    int64_t ca = a->value.shape.back(), cb = b->value.shape.back();
    int64_t rows = a->value.numel() / ca;
    Shape os = a->value.shape;
    os.back() = ca + cb;
    Tensor<T> y(os);
    for (int64_t r = 0; r < rows; ++r) {
        std::copy_n(a->value.ptr() + r * ca, ca, y.ptr() + r * (ca + cb));
        std::copy_n(b->value.ptr() + r * cb, cb, y.ptr() + r * (ca + cb) + ca);
    }
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, rows, ca, cb] {
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = out->grad.ptr() + r * (ca + cb);
                if (a->requires_grad)
                    for (int64_t j = 0; j < ca; ++j) a->grad[r * ca + j] += gr[j];
                if (b->requires_grad)
                    for (int64_t j = 0; j < cb; ++j) b->grad[r * cb + j] += gr[ca + j];
            }
        });
    }
    return out;
}

// Slices channels [from, to) along the last axis.
template <typename T>
Value<T> slice_last(Tape<T>& tape, const Value<T>& x, int64_t from, int64_t to) {
    int64_t c = x->value.shape.back();
    if (from < 0 || to > c || from >= to) throw input_error("slice_last: bad channel range");
    int64_t rows = x->value.numel() / c;
    Shape os = x->value.shape;
    os.back() = to - from;
    Tensor<T> y(os);
    for (int64_t r = 0; r < rows; ++r)
        std::copy_n(x->value.ptr() + r * c + from, to - from, y.ptr() + r * (to - from));
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, rows, c, from, to] {
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < to - from; ++j) x->grad[r * c + from + j] += out->grad[r * (to - from) + j];
        });
    }
    return out;
}

// --------------------------------------------------------- axis reductions

// Mean over axis 0 (e.g. temporal pooling of a T x ... stack).
template <typename T>
Value<T> mean_axis0(Tape<T>& tape, const Value<T>& x) {
    if (x->value.rank() < 2) throw dimension_error("mean_axis0 expects rank >= 2");
    int64_t d0 = x->value.shape[0];
    int64_t rest = x->value.numel() / d0;
    Shape os(x->value.shape.begin() + 1, x->value.shape.end());
    Tensor<T> y(os);
    for (int64_t t = 0; t < d0; ++t)
        for (int64_t i = 0; i < rest; ++i) y[i] += x->value[t * rest + i];
    for (int64_t i = 0; i < rest; ++i) y[i] = static_cast<T>(y[i] / static_cast<T>(d0));
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, d0, rest] {
            for (int64_t t = 0; t < d0; ++t)
                for (int64_t i = 0; i < rest; ++i) x->grad[t * rest + i] += out->grad[i] / static_cast<T>(d0);
        });
    }
    return out;
}

// Mean over the last axis (channel-wise pooling of an n x c matrix).
template <typename T>
Value<T> mean_lastdim(Tape<T>& tape, const Value<T>& x) {
    int64_t c = x->value.shape.back();
    int64_t rows = x->value.numel() / c;
    Shape os(x->value.shape.begin(), x->value.shape.end() - 1);
    if (os.empty()) os = {1};
    Tensor<T> y(os);
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0;
        for (int64_t j = 0; j < c; ++j) s += static_cast<double>(x->value[r * c + j]);
        y[r] = static_cast<T>(s / c);
    }
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, rows, c] {
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) x->grad[r * c + j] += out->grad[r] / static_cast<T>(c);
        });
    }
    return out;
}

// -------------------------------------------------------------- norms

// Layer normalization over the last axis with affine parameters.
template <typename T>
Value<T> layer_norm(Tape<T>& tape, const Value<T>& x, const Value<T>& gamma, const Value<T>& beta,
                    double eps = 1e-5) {
    int64_t c = x->value.shape.back();
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw dimension_error("layer_norm: affine parameter length mismatch");
    int64_t rows = x->value.numel() / c;
    Tensor<T> y(x->value.shape);
    auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x->value.ptr() + r * c;
        double mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += static_cast<double>(xr[j]);
        mu /= c;
        double var = 0;
        for (int64_t j = 0; j < c; ++j) {
            double d = static_cast<double>(xr[j]) - mu;
            var += d * d;
        }
        var /= c;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int64_t j = 0; j < c; ++j) {
            T xh = static_cast<T>((static_cast<double>(xr[j]) - mu) * is);
            (*xhat)[r * c + j] = xh;
            y[r * c + j] = gamma->value[j] * xh + beta->value[j];
        }
    }
    auto out = make_value(std::move(y), grad_needed(tape, {x, gamma, beta}));
    if (out->requires_grad) {
        x->ensure_grad();
        gamma->ensure_grad();
        beta->ensure_grad();
        tape.record([x, gamma, beta, out, xhat, inv_std, rows, c] {
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = out->grad.ptr() + r * c;
                const T* xh = xhat->ptr() + r * c;
                if (gamma->requires_grad || beta->requires_grad)
                    for (int64_t j = 0; j < c; ++j) {
                        if (gamma->requires_grad) gamma->grad[j] += gr[j] * xh[j];
                        if (beta->requires_grad) beta->grad[j] += gr[j];
                    }
                if (x->requires_grad) {
                    double m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma->value[j]);
                        m1 += dxh;
                        m2 += dxh * static_cast<double>(xh[j]);
                    }
                    m1 /= c;
                    m2 /= c;
                    double is = (*inv_std)[r];
                    for (int64_t j = 0; j < c; ++j) {
                        double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma->value[j]);
                        x->grad[r * c + j] += static_cast<T>(is * (dxh - m1 - static_cast<double>(xh[j]) * m2));
                    }
                }
            }
        });
    }
    return out;
}

// Channel normalization over every non-channel position (the batch axis
// is the set of pixels of the sample). Training mode uses the current
// statistics and refreshes the running averages; inference uses the
// stored running statistics.
template <typename T>
Value<T> pixel_norm(Tape<T>& tape, const Value<T>& x, const Value<T>& gamma, const Value<T>& beta,
                    Tensor<T>* running_mean, Tensor<T>* running_var, bool training, double momentum = 0.1,
                    double eps = 1e-5) {
    int64_t c = x->value.shape.back();
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw dimension_error("pixel_norm: affine parameter length mismatch");
    int64_t rows = x->value.numel() / c;
    std::vector<double> mu(static_cast<size_t>(c), 0), var(static_cast<size_t>(c), 0);
    if (training) {
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) mu[j] += static_cast<double>(x->value[r * c + j]);
        for (int64_t j = 0; j < c; ++j) mu[j] /= rows;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) {
                double d = static_cast<double>(x->value[r * c + j]) - mu[j];
                var[j] += d * d;
            }
        for (int64_t j = 0; j < c; ++j) var[j] /= rows;
        if (running_mean && running_var)
            for (int64_t j = 0; j < c; ++j) {
                (*running_mean)[j] = static_cast<T>((1 - momentum) * (*running_mean)[j] + momentum * mu[j]);
                (*running_var)[j] = static_cast<T>((1 - momentum) * (*running_var)[j] + momentum * var[j]);
            }
    } else {
        if (!running_mean || !running_var) throw state_error("pixel_norm: running statistics required at inference");
        for (int64_t j = 0; j < c; ++j) {
            mu[j] = static_cast<double>((*running_mean)[j]);
            var[j] = static_cast<double>((*running_var)[j]);
        }
    }
    auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
    Tensor<T> y(x->value.shape);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) {
            T xh = static_cast<T>((static_cast<double>(x->value[r * c + j]) - mu[j]) * (*inv_std)[j]);
            (*xhat)[r * c + j] = xh;
            y[r * c + j] = gamma->value[j] * xh + beta->value[j];
        }
    auto out = make_value(std::move(y), grad_needed(tape, {x, gamma, beta}));
    if (out->requires_grad) {
        x->ensure_grad();
        gamma->ensure_grad();
        beta->ensure_grad();
        tape.record([x, gamma, beta, out, xhat, inv_std, rows, c, training] {
            std::vector<double> m1(static_cast<size_t>(c), 0), m2(static_cast<size_t>(c), 0);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) {
                    double g = static_cast<double>(out->grad[r * c + j]);
                    if (gamma->requires_grad) gamma->grad[j] += static_cast<T>(g * (*xhat)[r * c + j]);
                    if (beta->requires_grad) beta->grad[j] += static_cast<T>(g);
                    double dxh = g * static_cast<double>(gamma->value[j]);
                    m1[j] += dxh;
                    m2[j] += dxh * static_cast<double>((*xhat)[r * c + j]);
                }
            if (x->requires_grad) {
                for (int64_t j = 0; j < c; ++j) {
                    m1[j] /= rows;
                    m2[j] /= rows;
                }
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < c; ++j) {
                        double dxh =
                            static_cast<double>(out->grad[r * c + j]) * static_cast<double>(gamma->value[j]);
                        double d = training
                                       ? (*inv_std)[j] * (dxh - m1[j] - static_cast<double>((*xhat)[r * c + j]) * m2[j])
                                       : (*inv_std)[j] * dxh;
                        x->grad[r * c + j] += static_cast<T>(d);
                    }
            }
        });
    }
    return out;
}

// --------------------------------------------------------- classification

// Mean cross entropy of row logits against integer labels.
template <typename T>
Value<T> cross_entropy(Tape<T>& tape, const Value<T>& logits, const std::vector<int64_t>& labels) {
    if (logits->value.rank() != 2) throw dimension_error("cross_entropy expects 2-D logits");
    int64_t n = logits->value.shape[0], k = logits->value.shape[1];
    if (static_cast<int64_t>(labels.size()) != n) throw dimension_error("cross_entropy: label count mismatch");
    auto probs = std::make_shared<Tensor<T>>(logits->value.shape);
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k) throw input_error("cross_entropy: label out of range");
        const T* lr = logits->value.ptr() + i * k;
        double mx = -1e300;
        for (int64_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(lr[j]));
        double denom = 0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(lr[j]) - mx);
        for (int64_t j = 0; j < k; ++j)
            (*probs)[i * k + j] = static_cast<T>(std::exp(static_cast<double>(lr[j]) - mx) / denom);
        loss -= std::log(std::max(1e-300, static_cast<double>((*probs)[i * k + labels[i]])));
    }
    auto out = make_value(Tensor<T>::full({1}, static_cast<T>(loss / n)), grad_needed(tape, {logits}));
    if (out->requires_grad) {
        logits->ensure_grad();
        tape.record([logits, out, probs, labels, n, k] {
            T g = out->grad[0] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < k; ++j) {
                    T onehot = (labels[i] == j) ? T(1) : T(0);
                    logits->grad[i * k + j] += g * ((*probs)[i * k + j] - onehot);
                }
        });
    }
    return out;
}

// -------------------------------------------------------------- dropout

template <typename T>
Value<T> dropout(Tape<T>& tape, const Value<T>& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw input_error("dropout: rate must be < 1");
    auto mask = std::make_shared<Tensor<T>>(x->value.shape);
    double keep = 1.0 - p;
    for (int64_t i = 0; i < mask->numel(); ++i)
        (*mask)[i] = rng.bernoulli(p) ? T(0) : static_cast<T>(1.0 / keep);
    Tensor<T> y = x->value;
    for (int64_t i = 0; i < y.numel(); ++i) y[i] *= (*mask)[i];
    auto out = make_value(std::move(y), grad_needed(tape, {x}));
    if (out->requires_grad) {
        x->ensure_grad();
        tape.record([x, out, mask] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) x->grad[i] += out->grad[i] * (*mask)[i];
        });
    }
    return out;
}

// -------------------------------------------------- straight-through pass

// Forward takes the quantized values; backward routes the gradient to the
// continuous input unchanged (identity estimator).
template <typename T>
Value<T> straight_through(Tape<T>& tape, const Value<T>& cont, const Tensor<T>& quantized) {
    check_same_shape(cont->value, quantized, "straight_through");
    auto out = make_value(Tensor<T>(quantized), grad_needed(tape, {cont}));
    if (out->requires_grad) {
        cont->ensure_grad();
        tape.record([cont, out] {
            for (int64_t i = 0; i < out->grad.numel(); ++i) cont->grad[i] += out->grad[i];
        });
    }
    return out;
}

}  // namespace pixelwave
