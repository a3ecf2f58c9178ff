#pragma once

#include "pixelwave/ops_core.hpp"

namespace pixelwave {

// Batched matmul over a shared leading axis: a[B,m,k] x b[B,k,n] -> [B,m,n].
template <typename T>
Value<T> bmm(Tape<T>& tape, const Value<T>& a, const Value<T>& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.shape[0] != b->value.shape[0] ||
        a->value.shape[2] != b->value.shape[1])
        throw dimension_error("bmm: incompatible shapes " + shape_str(a->value.shape) + " vs " +
                              shape_str(b->value.shape));
    int64_t B = a->value.shape[0], m = a->value.shape[1], k = a->value.shape[2], n = b->value.shape[2];
    Tensor<T> y({B, m, n});
    for (int64_t bb = 0; bb < B; ++bb) {
        const T* A = a->value.ptr() + bb * m * k;
        const T* Bm = b->value.ptr() + bb * k * n;
        T* Y = y.ptr() + bb * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
                T av = A[i * k + p];
                if (av == T(0)) continue;
                const T* brow = Bm + p * n;
                T* yrow = Y + i * n;
                for (int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
            }
    }
    auto out = make_value(std::move(y), grad_needed(tape, {a, b}));
    if (out->requires_grad) {
        a->ensure_grad();
        b->ensure_grad();
        tape.record([a, b, out, B, m, k, n] {
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* G = out->grad.ptr() + bb * m * n;
                if (a->requires_grad) {
                    const T* Bm = b->value.ptr() + bb * k * n;
                    T* GA = a->grad.ptr() + bb * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) {
                            T g = G[i * n + j];
                            if (g == T(0)) continue;
                            for (int64_t p = 0; p < k; ++p) GA[i * k + p] += g * Bm[p * n + j];
                        }
                }
                if (b->requires_grad) {
                    const T* A = a->value.ptr() + bb * m * k;
                    T* GB = b->grad.ptr() + bb * k * n;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t p = 0; p < k; ++p) {
                            T av = A[i * k + p];
                            if (av == T(0)) continue;
                            const T* grow = G + i * n;
                            T* gbrow = GB + p * n;
                            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        });
    }
    return out;
}

namespace nadetail {

// Per-axis clamped window: shifted so every position still covers
// min(window, extent) cells inside the map.
inline void window_range(int64_t pos, int64_t extent, int64_t window, int64_t& lo, int64_t& span) {
    span = std::min(window, extent);
    lo = pos - window / 2;
    if (lo < 0) lo = 0;
    if (lo + span > extent) lo = extent - span;
}

}  // namespace nadetail

// Neighborhood attention over an h x w x c map: each pixel attends to the
// value projections inside its clamped window. q, k, v are pre-projected
// maps of identical shape; softmax over the window, scaled by 1/sqrt(c).
template <typename T>
Value<T> neighborhood_attention(Tape<T>& tape, const Value<T>& q, const Value<T>& k, const Value<T>& v,
                                int64_t window) {
    if (window < 1 || window % 2 == 0) throw config_error("neighborhood attention window must be odd and >= 1");
    check_same_shape(q->value, k->value, "neighborhood_attention");
    check_same_shape(q->value, v->value, "neighborhood_attention");
    if (q->value.rank() != 3) throw dimension_error("neighborhood_attention expects h x w x c maps");
    int64_t h = q->value.shape[0], w = q->value.shape[1], c = q->value.shape[2];
    double scale = 1.0 / std::sqrt(static_cast<double>(c));

    int64_t wy, wx, dummy;
    nadetail::window_range(0, h, window, dummy, wy);
    nadetail::window_range(0, w, window, dummy, wx);
    int64_t wn = wy * wx;

    // Cached softmax weights, one row of wn per pixel.
    auto attn = std::make_shared<Tensor<T>>(Shape{h * w, wn});
    Tensor<T> y({h, w, c});
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
            int64_t ylo, yspan, xlo, xspan;
            nadetail::window_range(i, h, window, ylo, yspan);
            nadetail::window_range(j, w, window, xlo, xspan);
            const T* qp = q->value.ptr() + (i * w + j) * c;
            std::vector<double> logits(static_cast<size_t>(wn));
            double mx = -1e300;
            for (int64_t a = 0; a < yspan; ++a)
                for (int64_t b = 0; b < xspan; ++b) {
                    const T* kp = k->value.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                    double dot = 0;
                    for (int64_t ch = 0; ch < c; ++ch)
                        dot += static_cast<double>(qp[ch]) * static_cast<double>(kp[ch]);
                    logits[static_cast<size_t>(a * xspan + b)] = dot * scale;
                    mx = std::max(mx, dot * scale);
                }
            double denom = 0;
            for (int64_t t = 0; t < wn; ++t) denom += std::exp(logits[static_cast<size_t>(t)] - mx);
            T* arow = attn->ptr() + (i * w + j) * wn;
            T* yp = y.ptr() + (i * w + j) * c;
            for (int64_t a = 0; a < yspan; ++a)
                for (int64_t b = 0; b < xspan; ++b) {
                    double wgt = std::exp(logits[static_cast<size_t>(a * xspan + b)] - mx) / denom;
                    arow[a * xspan + b] = static_cast<T>(wgt);
                    const T* vp = v->value.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                    for (int64_t ch = 0; ch < c; ++ch) yp[ch] += static_cast<T>(wgt * vp[ch]);
                }
        }
    auto out = make_value(std::move(y), grad_needed(tape, {q, k, v}));
    if (out->requires_grad) {
        q->ensure_grad();
        k->ensure_grad();
        v->ensure_grad();
        tape.record([q, k, v, out, attn, h, w, c, window, scale, wn] {
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    int64_t ylo, yspan, xlo, xspan;
                    nadetail::window_range(i, h, window, ylo, yspan);
                    nadetail::window_range(j, w, window, xlo, xspan);
                    const T* gp = out->grad.ptr() + (i * w + j) * c;
                    const T* qp = q->value.ptr() + (i * w + j) * c;
                    const T* arow = attn->ptr() + (i * w + j) * wn;
                    // d(attn weights), then softmax backward to logits
                    std::vector<double> ga(static_cast<size_t>(wn), 0);
                    double dot = 0;
                    for (int64_t a = 0; a < yspan; ++a)
                        for (int64_t b = 0; b < xspan; ++b) {
                            int64_t t = a * xspan + b;
                            const T* vp = v->value.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                            double s = 0;
                            for (int64_t ch = 0; ch < c; ++ch)
                                s += static_cast<double>(gp[ch]) * static_cast<double>(vp[ch]);
                            ga[static_cast<size_t>(t)] = s;
                            dot += s * static_cast<double>(arow[t]);
                            if (v->requires_grad) {
                                T* gvp = v->grad.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                                for (int64_t ch = 0; ch < c; ++ch)
                                    gvp[ch] += static_cast<T>(static_cast<double>(arow[t]) *
                                                              static_cast<double>(gp[ch]));
                            }
                        }
                    for (int64_t a = 0; a < yspan; ++a)
                        for (int64_t b = 0; b < xspan; ++b) {
                            int64_t t = a * xspan + b;
                            double glogit = static_cast<double>(arow[t]) * (ga[static_cast<size_t>(t)] - dot);
                            double gl = glogit * scale;
                            const T* kp = k->value.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                            if (q->requires_grad) {
                                T* gqp = q->grad.ptr() + (i * w + j) * c;
                                for (int64_t ch = 0; ch < c; ++ch)
                                    gqp[ch] += static_cast<T>(gl * static_cast<double>(kp[ch]));
                            }
                            if (k->requires_grad) {
                                T* gkp = k->grad.ptr() + ((ylo + a) * w + (xlo + b)) * c;
                                for (int64_t ch = 0; ch < c; ++ch)
                                    gkp[ch] += static_cast<T>(gl * static_cast<double>(qp[ch]));
                            }
                        }
                }
        });
    }
    return out;
}

}  // namespace pixelwave
