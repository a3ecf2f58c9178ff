#pragma once

#include <array>

#include "pixelwave/layers.hpp"

namespace pixelwave {

struct TemporalAEConfig {
    int64_t frames = 3;  // T
    int64_t height = 32, width = 32, channels = 6;
    int64_t embed_dim = 16;  // D_p
    int64_t na_window = 7;

    void validate() const {
        if (frames < 1) throw config_error("temporal stack needs T >= 1");
        if (height % 8 != 0 || width % 8 != 0)
            throw dimension_error("temporal AE requires height and width divisible by 8, got " +
                                  shape_str({height, width}));
        if (channels <= 0 || embed_dim <= 0) throw config_error("channels/embed_dim must be positive");
        if (na_window < 1 || na_window % 2 == 0) throw config_error("NA window must be odd and >= 1");
    }

    int64_t stage_hidden(int d) const { return (int64_t{1} << (d - 1)) * embed_dim; }
    int64_t stage_channels_out(int d) const { return (int64_t{1} << (d - 1)) * embed_dim; }  // D_{p_d}
};

namespace temporaldetail {

// Convolutional LSTM cell with 3x3 gate kernels (i, f, g, o packed into
// one convolution over [x, h]); forget-gate bias starts at 1.
template <typename T>
struct ConvLstmCell {
    ConvLayer<T> gates;
    int64_t hidden = 0;

    void init(Rng& rng, int64_t cin, int64_t ch) {
        hidden = ch;
        gates.init(rng, 2, {3, 3, cin + ch, 4 * ch}, {1, 1}, {1, 1});
        for (int64_t j = ch; j < 2 * ch; ++j) gates.b->value[j] = T(1);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const { gates.reg(r, p + ".gates"); }

    struct State {
        Value<T> h, c;
    };

    State zero_state(Ctx<T>& ctx, int64_t h, int64_t w) const {
        (void)ctx;
        return {constant(Tensor<T>::zeros({h, w, hidden})), constant(Tensor<T>::zeros({h, w, hidden}))};
    }

    // x_t: [h, w, cin] -> (h_t, new state)
    State step(Ctx<T>& ctx, const Value<T>& x, const State& s) const {
        auto& t = ctx.tape;
        if (x->value.shape[0] != s.h->value.shape[0] || x->value.shape[1] != s.h->value.shape[1])
            throw dimension_error("convlstm_step: input " + shape_str(x->value.shape) + " vs state " +
                                  shape_str(s.h->value.shape));
        auto g = gates.forward(ctx, concat_last(t, x, s.h));
        int64_t ch = hidden;
        auto i = sigmoid(t, slice_last(t, g, 0, ch));
        auto f = sigmoid(t, slice_last(t, g, ch, 2 * ch));
        auto cand = tanh_op(t, slice_last(t, g, 2 * ch, 3 * ch));
        auto o = sigmoid(t, slice_last(t, g, 3 * ch, 4 * ch));
        auto c_new = add(t, mul(t, f, s.c), mul(t, i, cand));
        auto h_new = mul(t, o, tanh_op(t, c_new));
        return {h_new, c_new};
    }
};

// Two stacked ConvLSTM layers run over the frame sequence, then channel
// norm + ReLU over the stacked hidden sequence.
template <typename T>
struct ConvLstmBlock {
    ConvLstmCell<T> l1, l2;
    NormLayer<T> norm;

    void init(Rng& rng, int64_t cin, int64_t ch) {
        l1.init(rng, cin, ch);
        l2.init(rng, ch, ch);
        norm.init(ch);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        l1.reg(r, p + ".l1");
        l2.reg(r, p + ".l2");
        norm.reg(r, p + ".norm");
    }

    // x: [T, h, w, cin] -> [T, h, w, ch]
    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) {
        auto& t = ctx.tape;
        int64_t frames = x->value.shape[0], h = x->value.shape[1], w = x->value.shape[2];
        auto s1 = l1.zero_state(ctx, h, w);
        auto s2 = l2.zero_state(ctx, h, w);
        std::vector<Value<T>> outs;
        outs.reserve(static_cast<size_t>(frames));
        for (int64_t f = 0; f < frames; ++f) {
            auto xt = slice_rows_3d(t, x, f);
            s1 = l1.step(ctx, xt, s1);
            s2 = l2.step(ctx, s1.h, s2);
            outs.push_back(s2.h);
        }
        auto seq = stack_axis0(t, outs);
        return relu(t, norm.forward(ctx, seq));
    }
};

// Conv3D with a 3x3 spatial kernel (temporal extent untouched).
template <typename T>
struct SpatialConv3d {
    ConvLayer<T> c;

    void init(Rng& rng, int64_t cin, int64_t cout, int64_t spatial_stride) {
        c.init(rng, 3, {1, 3, 3, cin, cout}, {1, spatial_stride, spatial_stride}, {0, 1, 1});
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const { c.reg(r, p + ".c"); }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const { return c.forward(ctx, x); }
};

}  // namespace temporaldetail

template <typename T>
struct TemporalForward {
    std::array<Value<T>, 4> stages;  // X_d: [T, H/2^(d-1), W/2^(d-1), D_p]
    Value<T> recon;                  // M_hat, same shape as the input stack
};

// ConvLSTM UNet over a temporal stack: four encoder stages with strided
// spatial Conv3D downsampling, a mirrored path with trilinear spatial
// upsampling and skip concatenation, per-stage D_p projections and the
// reconstruction head.
template <typename T>
class TemporalAE {
public:
    TemporalAEConfig cfg;
    std::array<temporaldetail::ConvLstmBlock<T>, 4> down_blocks;
    std::array<temporaldetail::SpatialConv3d<T>, 3> down_convs;
    std::array<temporaldetail::SpatialConv3d<T>, 3> up_convs;
    std::array<temporaldetail::ConvLstmBlock<T>, 3> up_blocks;
    std::array<temporaldetail::SpatialConv3d<T>, 4> stage_heads;  // hidden -> D_p
    std::array<NormLayer<T>, 4> stage_norms;                      // channel norm on every X_d
    temporaldetail::SpatialConv3d<T> recon_head;
    NaLayer<T> na1, na2;
    std::array<ProjectionHead<T>, 4> ot_heads;  // D_p -> D_{p_d}, training only

    TemporalAE(const TemporalAEConfig& c, Rng rng) : cfg(c) {
        cfg.validate();
        int64_t dp = cfg.embed_dim;
        down_blocks[0].init(rng, cfg.channels, dp);
        for (int d = 2; d <= 4; ++d) down_blocks[static_cast<size_t>(d - 1)].init(rng, cfg.stage_hidden(d), cfg.stage_hidden(d));
        for (int d = 1; d <= 3; ++d) down_convs[static_cast<size_t>(d - 1)].init(rng, cfg.stage_hidden(d), cfg.stage_hidden(d + 1), 2);
        for (int d = 3; d >= 1; --d) {
            up_convs[static_cast<size_t>(d - 1)].init(rng, cfg.stage_hidden(d + 1), cfg.stage_hidden(d), 1);
            up_blocks[static_cast<size_t>(d - 1)].init(rng, 2 * cfg.stage_hidden(d), cfg.stage_hidden(d));
        }
        for (int d = 1; d <= 4; ++d) {
            stage_heads[static_cast<size_t>(d - 1)].init(rng, cfg.stage_hidden(d), dp, 1);
            stage_norms[static_cast<size_t>(d - 1)].init(dp, /*with_shift=*/false);
        }
        recon_head.init(rng, dp, cfg.channels, 1);
        na1.init(rng, dp, cfg.na_window);
        na2.init(rng, dp, cfg.na_window);
        for (int d = 1; d <= 4; ++d) ot_heads[static_cast<size_t>(d - 1)].init(rng, dp, cfg.stage_channels_out(d));
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        for (int d = 1; d <= 4; ++d) down_blocks[static_cast<size_t>(d - 1)].reg(r, p + ".down" + std::to_string(d));
        for (int d = 1; d <= 3; ++d) down_convs[static_cast<size_t>(d - 1)].reg(r, p + ".down_conv" + std::to_string(d));
        for (int d = 1; d <= 3; ++d) {
            up_convs[static_cast<size_t>(d - 1)].reg(r, p + ".up_conv" + std::to_string(d));
            up_blocks[static_cast<size_t>(d - 1)].reg(r, p + ".up" + std::to_string(d));
        }
        for (int d = 1; d <= 4; ++d) {
            stage_heads[static_cast<size_t>(d - 1)].reg(r, p + ".stage_head" + std::to_string(d));
            stage_norms[static_cast<size_t>(d - 1)].reg(r, p + ".stage_norm" + std::to_string(d));
        }
        recon_head.reg(r, p + ".recon_head");
        na1.reg(r, p + ".na1");
        na2.reg(r, p + ".na2");
        for (int d = 1; d <= 4; ++d) ot_heads[static_cast<size_t>(d - 1)].reg(r, p + ".ot_head" + std::to_string(d));
    }

    // M: [T, H, W, C]
    TemporalForward<T> forward(Ctx<T>& ctx, const Tensor<T>& stack) {
        if (stack.rank() != 4 || stack.shape[1] != cfg.height || stack.shape[2] != cfg.width ||
            stack.shape[3] != cfg.channels)
            throw dimension_error("temporal stack shape " + shape_str(stack.shape) + " does not match config");
        if (stack.shape[1] % 8 != 0 || stack.shape[2] % 8 != 0)
            throw dimension_error("temporal stack spatial extents must be divisible by 8");
        auto& t = ctx.tape;
        TemporalForward<T> out;
        std::array<Value<T>, 4> down_feats;
        auto x = constant(stack);
        for (int d = 1; d <= 4; ++d) {
            x = down_blocks[static_cast<size_t>(d - 1)].forward(ctx, x);
            down_feats[static_cast<size_t>(d - 1)] = x;
            if (d < 4) x = down_convs[static_cast<size_t>(d - 1)].forward(ctx, x);
        }
        Value<T> carrier = down_feats[3];
        out.stages[3] = stage_norms[3].forward(ctx, stage_heads[3].forward(ctx, carrier));
        for (int d = 3; d >= 1; --d) {
            auto up = up_convs[static_cast<size_t>(d - 1)].forward(ctx, upsample_trilinear_spatial_x2(t, carrier));
            auto merged = concat_last(t, up, down_feats[static_cast<size_t>(d - 1)]);
            carrier = up_blocks[static_cast<size_t>(d - 1)].forward(ctx, merged);
            out.stages[static_cast<size_t>(d - 1)] = stage_norms[static_cast<size_t>(d - 1)].forward(
                ctx, stage_heads[static_cast<size_t>(d - 1)].forward(ctx, carrier));
        }
        out.recon = recon_head.forward(ctx, carrier);
        return out;
    }

    // Temporal mean pooling; the finest stage also passes through the two
    // NA layers (the projection head is applied separately).
    Value<T> temporal_pool(Ctx<T>& ctx, const Value<T>& x_d, int d) {
        auto pooled = mean_axis0(ctx.tape, x_d);
        if (d == 1) pooled = na2.forward(ctx, na1.forward(ctx, pooled));
        return pooled;
    }

    // Training-only projection to the stage width D_{p_d}.
    Value<T> project_ot(Ctx<T>& ctx, const Value<T>& o_t_d, int d) {
        return ot_heads[static_cast<size_t>(d - 1)].forward(ctx, o_t_d);
    }
};

}  // namespace pixelwave
