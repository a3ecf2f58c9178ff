#pragma once

#include <string>

#include "pixelwave/ops.hpp"

namespace pixelwave {

// Per-forward context: the step tape, the training/inference switch and
// the step RNG (dropout). One Ctx per invocation; never shared.
template <typename T>
struct Ctx {
    Tape<T>& tape;
    bool training = false;
    Rng* rng = nullptr;
};

template <typename T>
Value<T> param(Rng& rng, Shape shape, double stddev) {
    return make_value(Tensor<T>::randn(std::move(shape), rng, stddev), true);
}

template <typename T>
struct Linear {
    Value<T> w, b;
    int64_t in = 0, out = 0;

    void init(Rng& rng, int64_t in_dim, int64_t out_dim) {
        in = in_dim;
        out = out_dim;
        w = param<T>(rng, {in, out}, std::sqrt(2.0 / static_cast<double>(in)));
        b = make_value(Tensor<T>::zeros({out}), true);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        r.add(p + ".w", w);
        r.add(p + ".b", b);
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const { return add_bias(ctx.tape, matmul(ctx.tape, x, w), b); }
};

template <typename T>
struct ConvLayer {
    Value<T> k, b;
    int spatial = 2;
    std::vector<int64_t> stride, pad;
    bool transpose = false;

    void init(Rng& rng, int sp, std::vector<int64_t> kshape /* k1..kS, cin, cout */, std::vector<int64_t> st,
              std::vector<int64_t> pd, bool tr = false) {
        spatial = sp;
        stride = std::move(st);
        pad = std::move(pd);
        transpose = tr;
        int64_t fan_in = 1;
        for (int s = 0; s < sp; ++s) fan_in *= kshape[s];
        fan_in *= kshape[sp];
        Shape ks(kshape.begin(), kshape.end());
        k = param<T>(rng, ks, std::sqrt(2.0 / static_cast<double>(fan_in)));
        b = make_value(Tensor<T>::zeros({kshape[static_cast<size_t>(sp) + 1]}), true);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        r.add(p + ".k", k);
        r.add(p + ".b", b);
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const {
        return conv(ctx.tape, x, k, b, spatial, stride, pad, transpose);
    }
};

// Channel norm with running statistics (momentum 0.1 running averages
// for inference; current statistics in training). `with_shift = false`
// pins the bias at zero so the layer cannot reintroduce a shared
// channel offset (embedding outputs stay centered).
template <typename T>
struct NormLayer {
    Value<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    void init(int64_t c, bool with_shift = true) {
        gamma = make_value(Tensor<T>::full({c}, T(1)), true);
        beta = make_value(Tensor<T>::zeros({c}), true);
        beta->requires_grad = with_shift;
        running_mean = Tensor<T>::zeros({c});
        running_var = Tensor<T>::full({c}, T(1));
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".gamma", gamma);
        r.add(p + ".beta", beta);
        r.add_buffer(p + ".running_mean", &running_mean);
        r.add_buffer(p + ".running_var", &running_var);
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) {
        return pixel_norm(ctx.tape, x, gamma, beta, &running_mean, &running_var, ctx.training);
    }
};

template <typename T>
struct LayerNormLayer {
    Value<T> gamma, beta;

    void init(int64_t c) {
        gamma = make_value(Tensor<T>::full({c}, T(1)), true);
        beta = make_value(Tensor<T>::zeros({c}), true);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        r.add(p + ".gamma", gamma);
        r.add(p + ".beta", beta);
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const { return layer_norm(ctx.tape, x, gamma, beta); }
};

// Single-head neighborhood attention layer: bias-free q/k/v projections,
// clamped window, no output projection (window=1 reduces to the value
// projection of the pixel itself).
template <typename T>
struct NaLayer {
    Value<T> wq, wk, wv;
    int64_t window = 7;
    int64_t channels = 0;

    void init(Rng& rng, int64_t c, int64_t win) {
        if (win < 1 || win % 2 == 0) throw config_error("NA window must be odd and >= 1");
        channels = c;
        window = win;
        double s = std::sqrt(1.0 / static_cast<double>(c));
        wq = param<T>(rng, {c, c}, s);
        wk = param<T>(rng, {c, c}, s);
        wv = param<T>(rng, {c, c}, s);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        r.add(p + ".wq", wq);
        r.add(p + ".wk", wk);
        r.add(p + ".wv", wv);
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const {
        int64_t h = x->value.shape[0], w = x->value.shape[1], c = x->value.shape[2];
        if (c != channels) throw dimension_error("NA layer: channel mismatch");
        auto flat = reshape(ctx.tape, x, {h * w, c});
        auto q = reshape(ctx.tape, matmul(ctx.tape, flat, wq), {h, w, c});
        auto k = reshape(ctx.tape, matmul(ctx.tape, flat, wk), {h, w, c});
        auto v = reshape(ctx.tape, matmul(ctx.tape, flat, wv), {h, w, c});
        return neighborhood_attention(ctx.tape, q, k, v, window);
    }
};

// Two 1x1 convolutions with a factor-two hidden expansion and a channel
// norm between them. Training-time only; inference bypasses it.
template <typename T>
struct ProjectionHead {
    Linear<T> expand, project;
    NormLayer<T> norm;

    void init(Rng& rng, int64_t c_in, int64_t c_out) {
        expand.init(rng, c_in, 2 * c_in);
        norm.init(2 * c_in);
        project.init(rng, 2 * c_in, c_out);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        expand.reg(r, p + ".expand");
        norm.reg(r, p + ".norm");
        project.reg(r, p + ".project");
    }

    // x: h x w x c_in map
    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) {
        int64_t h = x->value.shape[0], w = x->value.shape[1], c = x->value.shape[2];
        auto flat = reshape(ctx.tape, x, {h * w, c});
        auto y = project.forward(ctx, relu(ctx.tape, norm.forward(ctx, expand.forward(ctx, flat))));
        return reshape(ctx.tape, y, {h, w, project.out});
    }
};

// Task head: first 1x1 conv halves the channels, second projects to the
// task size.
template <typename T>
struct TaskHead {
    Linear<T> reduce, project;
    int64_t out_dim = 0;

    void init(Rng& rng, int64_t c_in, int64_t out) {
        if (c_in % 2 != 0) throw config_error("task head requires an even input channel count");
        out_dim = out;
        reduce.init(rng, c_in, c_in / 2);
        project.init(rng, c_in / 2, out);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        reduce.reg(r, p + ".reduce");
        project.reg(r, p + ".project");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const {
        int64_t h = x->value.shape[0], w = x->value.shape[1], c = x->value.shape[2];
        auto flat = reshape(ctx.tape, x, {h * w, c});
        auto y = project.forward(ctx, relu(ctx.tape, reduce.forward(ctx, flat)));
        return reshape(ctx.tape, y, {h, w, out_dim});
    }
};

}  // namespace pixelwave
