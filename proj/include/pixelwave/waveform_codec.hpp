#pragma once

#include "pixelwave/layers.hpp"

namespace pixelwave {

struct WaveformCodecConfig {
    int64_t length = 256;      // L, fixed per run
    int64_t quantizers = 8;    // Q
    int64_t entries = 512;     // V per quantizer (index 0 reserved as zero)
    int64_t embed_dim = 16;    // D_p of the alignment embedding
    double ema_decay = 0.99;
    double commitment_weight = 0.25;
    int64_t dead_code_steps = 200;

    void validate() const {
        if (length <= 0 || length % 16 != 0)
            throw dimension_error("waveform length " + std::to_string(length) + " must be a positive multiple of 16");
        if (quantizers < 1 || entries < 2) throw config_error("RVQ needs >= 1 quantizers and >= 2 entries");
        if (embed_dim <= 0) throw config_error("embed_dim must be positive");
    }

    int64_t latent_len() const { return length / 16; }
    static constexpr int64_t latent_channels = 16;
};

// Residual quantizer state. Entry 0 of every quantizer is a frozen zero
// vector, which makes per-stage reconstruction error non-increasing: a
// stage can always choose the no-op code.
template <typename T>
struct RvqCodebook {
    int64_t quantizers = 0, entries = 0, dim = 0;
    Tensor<T> codes;       // [Q, V, dim]
    Tensor<T> ema_counts;  // [Q, V]
    Tensor<T> ema_sums;    // [Q, V, dim]
    Tensor<T> unused_steps;  // [Q, V] steps since an entry was last assigned

    bool initialized() const { return quantizers > 0; }

    void init(Rng& rng, int64_t q, int64_t v, int64_t d) {
        quantizers = q;
        entries = v;
        dim = d;
        codes = Tensor<T>::randn({q, v, d}, rng, 0.1);
        ema_counts = Tensor<T>::zeros({q, v});
        ema_sums = Tensor<T>::zeros({q, v, d});
        unused_steps = Tensor<T>::zeros({q, v});
        for (int64_t qq = 0; qq < q; ++qq)
            for (int64_t k = 0; k < d; ++k) codes[(qq * v + 0) * d + k] = T(0);
    }

    const T* entry(int64_t q, int64_t v) const { return codes.ptr() + (q * entries + v) * dim; }
};

template <typename T>
struct RvqOutput {
    Value<T> z;                           // straight-through quantized latent
    Tensor<T> z_q;                        // raw quantized values
    std::vector<std::vector<int64_t>> codes;       // [Q][rows]
    std::vector<double> residual_norms;            // mean row residual norm after each stage
    std::vector<Tensor<T>> stage_inputs;           // [Q] residual fed to each quantizer (for EMA)
};

namespace codecdetail {

// conv(3) - norm - relu - conv(3) - norm with a projected skip; the
// leading conv optionally strides (downsample) or transposes (upsample).
template <typename T>
struct ResBlock1d {
    ConvLayer<T> c1, c2, skip;
    NormLayer<T> n1, n2;
    bool has_skip_proj = false;

    void init(Rng& rng, int64_t cin, int64_t cout, int64_t stride, bool up) {
        if (up) {
            c1.init(rng, 1, {4, cin, cout}, {2}, {1}, true);
            skip.init(rng, 1, {2, cin, cout}, {2}, {0}, true);
            has_skip_proj = true;
        } else {
            c1.init(rng, 1, {3, cin, cout}, {stride}, {1}, false);
            if (stride != 1 || cin != cout) {
                skip.init(rng, 1, {1, cin, cout}, {stride}, {0}, false);
                has_skip_proj = true;
            }
        }
        n1.init(cout);
        c2.init(rng, 1, {3, cout, cout}, {1}, {1}, false);
        n2.init(cout);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        c1.reg(r, p + ".c1");
        n1.reg(r, p + ".n1");
        c2.reg(r, p + ".c2");
        n2.reg(r, p + ".n2");
        if (has_skip_proj) skip.reg(r, p + ".skip");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x) {
        auto y = relu(ctx.tape, n1.forward(ctx, c1.forward(ctx, x)));
        y = n2.forward(ctx, c2.forward(ctx, y));
        auto sk = has_skip_proj ? skip.forward(ctx, x) : x;
        return relu(ctx.tape, add(ctx.tape, y, sk));
    }
};

}  // namespace codecdetail

// Waveform VQ-VAE: strided 1D ResNet encoder (L -> L/16, 1 -> 16
// channels), residual vector quantizer with EMA codebooks, mirrored
// transpose-convolution decoder, and the pooled linear projection that
// produces the alignment embedding.
template <typename T>
class WaveformCodec {
public:
    WaveformCodecConfig cfg;
    ConvLayer<T> stem;                                // 1 -> 2 channels, stride 2
    std::array<codecdetail::ResBlock1d<T>, 9> enc;    // 3 stages x 3 blocks
    std::array<codecdetail::ResBlock1d<T>, 9> dec;    // mirrored
    ConvLayer<T> out_stem;                            // 2 -> 1 channels, upsample
    Linear<T> align_proj;                             // L/16 -> D_p
    RvqCodebook<T> codebook;

    WaveformCodec(const WaveformCodecConfig& c, Rng rng) : cfg(c) {
        cfg.validate();
        stem.init(rng, 1, {3, 1, 2}, {2}, {1}, false);
        int64_t ch = 2;
        for (int s = 0; s < 3; ++s) {
            enc[static_cast<size_t>(3 * s)].init(rng, ch, 2 * ch, 2, false);
            enc[static_cast<size_t>(3 * s + 1)].init(rng, 2 * ch, 2 * ch, 1, false);
            enc[static_cast<size_t>(3 * s + 2)].init(rng, 2 * ch, 2 * ch, 1, false);
            ch *= 2;
        }
        for (int s = 0; s < 3; ++s) {
            dec[static_cast<size_t>(3 * s)].init(rng, ch, ch / 2, 2, true);
            dec[static_cast<size_t>(3 * s + 1)].init(rng, ch / 2, ch / 2, 1, false);
            dec[static_cast<size_t>(3 * s + 2)].init(rng, ch / 2, ch / 2, 1, false);
            ch /= 2;
        }
        out_stem.init(rng, 1, {4, 2, 1}, {2}, {1}, true);
        align_proj.init(rng, cfg.latent_len(), cfg.embed_dim);
        align_proj.b->requires_grad = false;  // keep the embedding space centered
        codebook.init(rng, cfg.quantizers, cfg.entries, WaveformCodecConfig::latent_channels);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        stem.reg(r, p + ".stem");
        for (size_t i = 0; i < enc.size(); ++i) enc[i].reg(r, p + ".enc" + std::to_string(i));
        for (size_t i = 0; i < dec.size(); ++i) dec[i].reg(r, p + ".dec" + std::to_string(i));
        out_stem.reg(r, p + ".out_stem");
        align_proj.reg(r, p + ".align_proj");
        r.add_buffer(p + ".codebook.codes", &codebook.codes);
        r.add_buffer(p + ".codebook.ema_counts", &codebook.ema_counts);
        r.add_buffer(p + ".codebook.ema_sums", &codebook.ema_sums);
        r.add_buffer(p + ".codebook.unused_steps", &codebook.unused_steps);
    }

    // W: [L] or [L, 1] -> z_e: [L/16, 16]
    Value<T> encode(Ctx<T>& ctx, const Tensor<T>& wave) {
        Tensor<T> w = wave;
        if (w.rank() == 1) w = w.reshaped({w.numel(), 1});
        if (w.rank() != 2 || w.shape[1] != 1)
            throw dimension_error("waveform must be [L] or [L, 1], got " + shape_str(wave.shape));
        if (w.shape[0] % 16 != 0)
            throw dimension_error("waveform length " + std::to_string(w.shape[0]) + " not divisible by 16");
        auto x = stem.forward(ctx, constant(w));
        for (auto& b : enc) x = b.forward(ctx, x);
        return x;
    }

    // Greedy residual quantization with the straight-through estimator.
    RvqOutput<T> quantize(Ctx<T>& ctx, const Value<T>& z_e) {
        if (!codebook.initialized()) throw state_error("RVQ codebook is not initialized");
        if (z_e->value.rank() != 2 || z_e->value.shape[1] != codebook.dim)
            throw dimension_error("rvq: latent shape " + shape_str(z_e->value.shape) + " does not match code dim");
        int64_t rows = z_e->value.shape[0], d = codebook.dim;
        RvqOutput<T> out;
        out.z_q = Tensor<T>::zeros(z_e->value.shape);
        out.codes.assign(static_cast<size_t>(codebook.quantizers), std::vector<int64_t>(static_cast<size_t>(rows)));
        out.residual_norms.assign(static_cast<size_t>(codebook.quantizers), 0.0);
        Tensor<T> resid = z_e->value;
        for (int64_t q = 0; q < codebook.quantizers; ++q) {
            out.stage_inputs.push_back(resid);
            double norm_acc = 0;
            for (int64_t r = 0; r < rows; ++r) {
                const T* rv = resid.ptr() + r * d;
                int64_t best = 0;
                double best_d2 = 1e300;
                for (int64_t v = 0; v < codebook.entries; ++v) {
                    const T* e = codebook.entry(q, v);
                    double d2 = 0;
                    for (int64_t k = 0; k < d; ++k) {
                        double diff = static_cast<double>(rv[k]) - static_cast<double>(e[k]);
                        d2 += diff * diff;
                    }
                    if (d2 < best_d2 - 1e-18) {  // ties keep the lower index
                        best_d2 = d2;
                        best = v;
                    }
                }
                out.codes[static_cast<size_t>(q)][static_cast<size_t>(r)] = best;
                const T* e = codebook.entry(q, best);
                double n2 = 0;
                for (int64_t k = 0; k < d; ++k) {
                    out.z_q[r * d + k] += e[k];
                    T nr = resid[r * d + k] - e[k];
                    resid[r * d + k] = nr;
                    n2 += static_cast<double>(nr) * static_cast<double>(nr);
                }
                norm_acc += std::sqrt(n2);
            }
            out.residual_norms[static_cast<size_t>(q)] = norm_acc / rows;
        }
        out.z = straight_through(ctx.tape, z_e, out.z_q);
        return out;
    }

    // z: [L/16, 16] -> reconstructed waveform [L, 1]
    Value<T> decode(Ctx<T>& ctx, const Value<T>& z) {
        if (z->value.rank() != 2 || z->value.shape[1] != WaveformCodecConfig::latent_channels)
            throw dimension_error("wf_decode: latent shape " + shape_str(z->value.shape) + " must be [L/16, 16]");
        auto x = z;
        for (auto& b : dec) x = b.forward(ctx, x);
        return out_stem.forward(ctx, x);
    }

    // Channel-average pooling then a linear map to D_p. Not normalized;
    // contrastive users L2-normalize downstream.
    Value<T> align_embed(Ctx<T>& ctx, const Value<T>& z_e) {
        auto pooled = mean_lastdim(ctx.tape, z_e);  // [L/16]
        auto row = reshape(ctx.tape, pooled, {1, pooled->value.numel()});
        return reshape(ctx.tape, align_proj.forward(ctx, row), {cfg.embed_dim});
    }

    // EMA codebook refresh plus dead-entry reseeding; entry 0 stays the
    // zero vector. Returns the post-update total count mass.
    double ema_update(const RvqOutput<T>& out, Rng& rng) {
        int64_t d = codebook.dim, V = codebook.entries;
        double decay = cfg.ema_decay;
        for (int64_t q = 0; q < codebook.quantizers; ++q) {
            const auto& inputs = out.stage_inputs[static_cast<size_t>(q)];
            int64_t rows = inputs.shape[0];
            std::vector<double> counts(static_cast<size_t>(V), 0.0);
            std::vector<double> sums(static_cast<size_t>(V * d), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                int64_t v = out.codes[static_cast<size_t>(q)][static_cast<size_t>(r)];
                counts[static_cast<size_t>(v)] += 1.0;
                for (int64_t k = 0; k < d; ++k)
                    sums[static_cast<size_t>(v * d + k)] += static_cast<double>(inputs[r * d + k]);
            }
            for (int64_t v = 0; v < V; ++v) {
                T& n = codebook.ema_counts[q * V + v];
                n = static_cast<T>(decay * n + (1 - decay) * counts[static_cast<size_t>(v)]);
                for (int64_t k = 0; k < d; ++k) {
                    T& m = codebook.ema_sums[(q * V + v) * d + k];
                    m = static_cast<T>(decay * m + (1 - decay) * sums[static_cast<size_t>(v * d + k)]);
                }
                if (v == 0) continue;  // frozen zero entry
                if (counts[static_cast<size_t>(v)] > 0) {
                    codebook.unused_steps[q * V + v] = T(0);
                    if (n > T(1e-6))
                        for (int64_t k = 0; k < d; ++k)
                            codebook.codes[(q * V + v) * d + k] = codebook.ema_sums[(q * V + v) * d + k] / n;
                } else {
                    codebook.unused_steps[q * V + v] += T(1);
                    if (static_cast<double>(codebook.unused_steps[q * V + v]) > cfg.dead_code_steps && rows > 0) {
                        int64_t r = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(rows)));
                        for (int64_t k = 0; k < d; ++k) {
                            codebook.codes[(q * V + v) * d + k] = inputs[r * d + k];
                            codebook.ema_sums[(q * V + v) * d + k] = inputs[r * d + k];
                        }
                        codebook.ema_counts[q * V + v] = T(1);
                        codebook.unused_steps[q * V + v] = T(0);
                    }
                }
            }
        }
        double mass = 0;
        for (int64_t i = 0; i < codebook.ema_counts.numel(); ++i)
            mass += static_cast<double>(codebook.ema_counts[i]);
        return mass;
    }

    // Commitment term pulling the encoder output toward the codebook.
    Value<T> commitment_loss(Ctx<T>& ctx, const Value<T>& z_e, const RvqOutput<T>& out) {
        return mul_scalar(ctx.tape, mse_loss(ctx.tape, z_e, constant(out.z_q)), cfg.commitment_weight);
    }
};

}  // namespace pixelwave
