#pragma once

#include <array>

#include "pixelwave/layers.hpp"

namespace pixelwave {

struct ImageModelConfig {
    int64_t height = 32, width = 32, channels = 6;
    int64_t patch = 4;
    int64_t dim = 64;          // token dimension
    int64_t heads = 4;
    int64_t layers = 4;        // total transformer layers, 4 blocks
    int64_t ff_hidden = 128;   // GeGLU hidden width (post split)
    double dropout = 0.1;
    int64_t embed_dim = 16;    // per-pixel output width D_p
    int64_t na_window = 7;     // odd
    bool shared_decoder = false;  // ablation: one decoder serves both outputs

    void validate() const {
        if (height <= 0 || width <= 0 || channels <= 0) throw config_error("image size/channels must be positive");
        if (patch <= 0 || height % patch != 0 || width % patch != 0)
            throw config_error("patch size must divide image height and width");
        if (layers < 4 || layers % 4 != 0) throw config_error("encoder layers must be a positive multiple of 4");
        if (heads <= 0 || dim % heads != 0) throw config_error("token dim must be divisible by heads");
        if (na_window < 1 || na_window % 2 == 0) throw config_error("NA window must be odd and >= 1");
        if (embed_dim <= 0 || ff_hidden <= 0) throw config_error("embed_dim/ff_hidden must be positive");
        if (dropout < 0 || dropout >= 1) throw config_error("dropout must lie in [0, 1)");
    }

    int64_t tokens() const { return (height / patch) * (width / patch); }
    int64_t stage_channels(int d) const { return (int64_t{1} << (d - 1)) * embed_dim; }  // D_{p_d}
    int64_t stage_height(int d) const { return height >> (d - 1); }
    int64_t stage_width(int d) const { return width >> (d - 1); }
};

enum class DecoderId { Vertical, Horizontal };

namespace imagedetail {

// Pre-norm transformer layer: multi-head softmax attention + GeGLU
// feedforward, both residual.
template <typename T>
struct EncoderLayer {
    LayerNormLayer<T> ln1, ln2;
    Linear<T> qkv, attn_out, ff_in, ff_out;
    int64_t heads = 1, dim = 0;
    double dropout = 0.0;

    void init(Rng& rng, int64_t d, int64_t h, int64_t ff, double drop) {
        dim = d;
        heads = h;
        dropout = drop;
        ln1.init(d);
        ln2.init(d);
        qkv.init(rng, d, 3 * d);
        attn_out.init(rng, d, d);
        ff_in.init(rng, d, 2 * ff);
        ff_out.init(rng, ff, d);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        ln1.reg(r, p + ".ln1");
        ln2.reg(r, p + ".ln2");
        qkv.reg(r, p + ".qkv");
        attn_out.reg(r, p + ".attn_out");
        ff_in.reg(r, p + ".ff_in");
        ff_out.reg(r, p + ".ff_out");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) const {
        auto& t = ctx.tape;
        int64_t n = x->value.shape[0];
        int64_t dh = dim / heads;
        auto qkv_all = qkv.forward(ctx, ln1.forward(ctx, x));  // n x 3D
        auto q = slice_last(t, qkv_all, 0, dim);
        auto k = slice_last(t, qkv_all, dim, 2 * dim);
        auto v = slice_last(t, qkv_all, 2 * dim, 3 * dim);
        auto split = [&](const Value<T>& m) {
            return permute(t, reshape(t, m, {n, heads, dh}), {1, 0, 2});  // heads x n x dh
        };
        auto qh = split(q), kh = split(k), vh = split(v);
        auto logits = mul_scalar(t, bmm(t, qh, permute(t, kh, {0, 2, 1})), 1.0 / std::sqrt(double(dh)));
        auto attn = softmax_lastdim(t, logits);
        if (ctx.training && dropout > 0 && ctx.rng) attn = pixelwave::dropout(t, attn, dropout, *ctx.rng, true);
        auto ctxv = bmm(t, attn, vh);                                        // heads x n x dh
        auto merged = reshape(t, permute(t, ctxv, {1, 0, 2}), {n, dim});     // n x D
        auto attn_y = attn_out.forward(ctx, merged);
        if (ctx.training && dropout > 0 && ctx.rng) attn_y = pixelwave::dropout(t, attn_y, dropout, *ctx.rng, true);
        auto x1 = add(t, x, attn_y);

        auto ff_pre = ff_in.forward(ctx, ln2.forward(ctx, x1));  // n x 2F
        int64_t f = ff_out.in;
        auto a = slice_last(t, ff_pre, 0, f);
        auto g = slice_last(t, ff_pre, f, 2 * f);
        auto ff_y = ff_out.forward(ctx, mul(t, a, gelu(t, g)));
        if (ctx.training && dropout > 0 && ctx.rng) ff_y = pixelwave::dropout(t, ff_y, dropout, *ctx.rng, true);
        return add(t, x1, ff_y);
    }
};

// Per-stage token reassembly: 1x1 channel adjust, then a strided 3x3
// convolution when 2^(d-1) >= P, or a transpose convolution otherwise.
template <typename T>
struct Reassemble {
    Linear<T> adjust;
    ConvLayer<T> resize;
    bool needs_resize = true;
    int64_t grid_h = 0, grid_w = 0;

    void init(Rng& rng, const ImageModelConfig& cfg, int d) {
        grid_h = cfg.height / cfg.patch;
        grid_w = cfg.width / cfg.patch;
        int64_t c = cfg.stage_channels(d);
        adjust.init(rng, cfg.dim, c);
        int64_t down = int64_t{1} << (d - 1);
        if (down < cfg.patch) {
            int64_t f = cfg.patch / down;  // upsample factor
            resize.init(rng, 2, {f, f, c, c}, {f, f}, {0, 0}, true);
        } else {
            int64_t s = down / cfg.patch;  // stride (1 keeps the extent)
            resize.init(rng, 2, {3, 3, c, c}, {s, s}, {1, 1}, false);
            needs_resize = true;
        }
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        adjust.reg(r, p + ".adjust");
        resize.reg(r, p + ".resize");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& tokens) const {
        auto adj = adjust.forward(ctx, tokens);  // n x c
        auto map = reshape(ctx.tape, adj, {grid_h, grid_w, adjust.out});
        return resize.forward(ctx, map);
    }
};

template <typename T>
struct RefineBlock {  // two 3x3 Conv-Norm-ReLU
    ConvLayer<T> c1, c2;
    NormLayer<T> n1, n2;

    void init(Rng& rng, int64_t cin, int64_t cout) {
        c1.init(rng, 2, {3, 3, cin, cout}, {1, 1}, {1, 1});
        n1.init(cout);
        c2.init(rng, 2, {3, 3, cout, cout}, {1, 1}, {1, 1});
        n2.init(cout);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        c1.reg(r, p + ".c1");
        n1.reg(r, p + ".n1");
        c2.reg(r, p + ".c2");
        n2.reg(r, p + ".n2");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) {
        auto y = relu(ctx.tape, n1.forward(ctx, c1.forward(ctx, x)));
        return relu(ctx.tape, n2.forward(ctx, c2.forward(ctx, y)));
    }
};

// Hierarchical decoder: reassembled block features fused coarse-to-fine
// with bilinear upsampling; two NA layers at the finest stage after the
// final 1x1 channel projection.
template <typename T>
struct DecoderTower {
    std::array<Reassemble<T>, 4> reassemble;  // index d-1
    std::array<RefineBlock<T>, 3> refine;     // for d = 3, 2, 1
    std::array<Linear<T>, 3> stage_proj;      // concat -> D_{p_d}, d = 3, 2, 1
    std::array<NormLayer<T>, 4> stage_norm;   // channel norm on every O_d
    NaLayer<T> na1, na2;
    ImageModelConfig cfg;

    void init(Rng& rng, const ImageModelConfig& c) {
        cfg = c;
        for (int d = 1; d <= 4; ++d) {
            reassemble[static_cast<size_t>(d - 1)].init(rng, c, d);
            stage_norm[static_cast<size_t>(d - 1)].init(c.stage_channels(d), /*with_shift=*/false);
        }
        for (int d = 3; d >= 1; --d) {
            refine[static_cast<size_t>(d - 1)].init(rng, c.stage_channels(d + 1), c.stage_channels(d));
            stage_proj[static_cast<size_t>(d - 1)].init(rng, 2 * c.stage_channels(d), c.stage_channels(d));
        }
        na1.init(rng, c.embed_dim, c.na_window);
        na2.init(rng, c.embed_dim, c.na_window);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        for (int d = 1; d <= 4; ++d) {
            reassemble[static_cast<size_t>(d - 1)].reg(r, p + ".reassemble" + std::to_string(d));
            stage_norm[static_cast<size_t>(d - 1)].reg(r, p + ".norm" + std::to_string(d));
        }
        for (int d = 1; d <= 3; ++d) {
            refine[static_cast<size_t>(d - 1)].reg(r, p + ".refine" + std::to_string(d));
            stage_proj[static_cast<size_t>(d - 1)].reg(r, p + ".proj" + std::to_string(d));
        }
        na1.reg(r, p + ".na1");
        na2.reg(r, p + ".na2");
    }

    // block_tokens[b-1] holds the output of encoder block b; stage d
    // consumes block 5-d.
    std::array<Value<T>, 4> forward(Ctx<T>& ctx, const std::array<Value<T>, 4>& block_tokens) {
        auto& t = ctx.tape;
        std::array<Value<T>, 4> out;
        std::array<Value<T>, 4> reassembled;
        for (int d = 1; d <= 4; ++d)
            reassembled[static_cast<size_t>(d - 1)] =
                reassemble[static_cast<size_t>(d - 1)].forward(ctx, block_tokens[static_cast<size_t>(4 - d)]);
        Value<T> carrier = stage_norm[3].forward(ctx, reassembled[3]);
        out[3] = carrier;  // O_4
        for (int d = 3; d >= 1; --d) {
            auto up = upsample_bilinear_x2(t, carrier);
            auto refined = refine[static_cast<size_t>(d - 1)].forward(ctx, up);
            auto fused = concat_last(t, refined, reassembled[static_cast<size_t>(d - 1)]);
            int64_t h = fused->value.shape[0], w = fused->value.shape[1], c = fused->value.shape[2];
            auto proj = reshape(
                t, stage_proj[static_cast<size_t>(d - 1)].forward(ctx, reshape(t, fused, {h * w, c})),
                {h, w, cfg.stage_channels(d)});
            proj = stage_norm[static_cast<size_t>(d - 1)].forward(ctx, proj);
            if (d == 1) proj = na2.forward(ctx, na1.forward(ctx, proj));
            out[static_cast<size_t>(d - 1)] = proj;
            carrier = proj;
        }
        return out;
    }
};

}  // namespace imagedetail

template <typename T>
struct ImageForward {
    std::array<Value<T>, 4> block_tokens;
    std::array<Value<T>, 4> ov;     // pixel-waveform decoder stages, ov[0] = O^V
    std::array<Value<T>, 4> oh;     // pixel-pixel decoder stages, oh[0] = O^H
    Value<T> recon;                 // reconstructed composite from O^H
};

// Patch embedding -> 4-block transformer encoder -> two hierarchical
// decoders with neighborhood attention output layers, plus the
// training-only projection and reconstruction heads.
template <typename T>
class ImageModel {
public:
    ImageModelConfig cfg;
    ConvLayer<T> patch;
    Value<T> pos_emb;  // zero-initialized learned position embeddings
    std::vector<imagedetail::EncoderLayer<T>> enc_layers;
    imagedetail::DecoderTower<T> decoder_v, decoder_h;
    std::array<ProjectionHead<T>, 4> oh_heads;  // training-only heads for O^H_d
    Linear<T> recon_head;                       // O^H -> C channels

    explicit ImageModel(const ImageModelConfig& c, Rng rng) : cfg(c) {
        cfg.validate();
        patch.init(rng, 2, {cfg.patch, cfg.patch, cfg.channels, cfg.dim}, {cfg.patch, cfg.patch}, {0, 0});
        pos_emb = make_value(Tensor<T>::zeros({cfg.tokens(), cfg.dim}), true);
        enc_layers.resize(static_cast<size_t>(cfg.layers));
        for (auto& l : enc_layers) l.init(rng, cfg.dim, cfg.heads, cfg.ff_hidden, cfg.dropout);
        decoder_v.init(rng, cfg);
        if (!cfg.shared_decoder) decoder_h.init(rng, cfg);
        for (int d = 1; d <= 4; ++d)
            oh_heads[static_cast<size_t>(d - 1)].init(rng, cfg.stage_channels(d), cfg.stage_channels(d));
        recon_head.init(rng, cfg.embed_dim, cfg.channels);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        patch.reg(r, p + ".patch");
        r.add(p + ".pos_emb", pos_emb);
        for (size_t i = 0; i < enc_layers.size(); ++i) enc_layers[i].reg(r, p + ".enc" + std::to_string(i));
        decoder_v.reg(r, p + ".decoder_v");
        if (!cfg.shared_decoder) decoder_h.reg(r, p + ".decoder_h");
        for (int d = 1; d <= 4; ++d) oh_heads[static_cast<size_t>(d - 1)].reg(r, p + ".oh_head" + std::to_string(d));
        recon_head.reg(r, p + ".recon_head");
    }

    // I (H x W x C) -> token sequence N x D with position embeddings.
    Value<T> patch_embed(Ctx<T>& ctx, const Tensor<T>& image) {
        if (image.rank() != 3 || image.shape[0] != cfg.height || image.shape[1] != cfg.width ||
            image.shape[2] != cfg.channels)
            throw dimension_error("patch_embed: image shape " + shape_str(image.shape) + " does not match config " +
                                  shape_str({cfg.height, cfg.width, cfg.channels}));
        auto x = constant(image);
        auto emb = patch.forward(ctx, x);  // (H/P) x (W/P) x D
        auto tokens = reshape(ctx.tape, emb, {cfg.tokens(), cfg.dim});
        return add(ctx.tape, tokens, pos_emb);
    }

    // Returns the token sequence after each of the 4 transformer blocks.
    std::array<Value<T>, 4> encode(Ctx<T>& ctx, Value<T> tokens) {
        std::array<Value<T>, 4> blocks;
        int64_t per_block = cfg.layers / 4;
        for (int b = 0; b < 4; ++b) {
            for (int64_t l = 0; l < per_block; ++l)
                tokens = enc_layers[static_cast<size_t>(b * per_block + l)].forward(ctx, tokens);
            blocks[static_cast<size_t>(b)] = tokens;
        }
        return blocks;
    }

    std::array<Value<T>, 4> decode(Ctx<T>& ctx, const std::array<Value<T>, 4>& blocks, DecoderId id) {
        if (cfg.shared_decoder || id == DecoderId::Vertical) return decoder_v.forward(ctx, blocks);
        return decoder_h.forward(ctx, blocks);
    }

    ImageForward<T> forward(Ctx<T>& ctx, const Tensor<T>& image) {
        ImageForward<T> f;
        f.block_tokens = encode(ctx, patch_embed(ctx, image));
        f.ov = decode(ctx, f.block_tokens, DecoderId::Vertical);
        f.oh = cfg.shared_decoder ? f.ov : decode(ctx, f.block_tokens, DecoderId::Horizontal);
        auto& o1 = f.oh[0];
        int64_t h = o1->value.shape[0], w = o1->value.shape[1], c = o1->value.shape[2];
        f.recon = reshape(ctx.tape, recon_head.forward(ctx, reshape(ctx.tape, o1, {h * w, c})),
                          {h, w, cfg.channels});
        return f;
    }

    // Training-only projection of a pixel-pixel stage output.
    Value<T> project_oh(Ctx<T>& ctx, const Value<T>& oh_d, int d) {
        return oh_heads[static_cast<size_t>(d - 1)].forward(ctx, oh_d);
    }

    // Fine-tuning freeze: only the last NA layer of each decoder remains
    // trainable (task heads live outside the model).
    void apply_finetune_freeze(ParamRegistry<T>& r, const std::string& prefix) {
        for (auto& [name, p] : r.params) {
            if (name.rfind(prefix + ".", 0) != 0) continue;
            bool trainable = name.find(".decoder_v.na2.") != std::string::npos ||
                             name.find(".decoder_h.na2.") != std::string::npos;
            p->requires_grad = trainable;
        }
    }
};

}  // namespace pixelwave
