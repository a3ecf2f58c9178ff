#pragma once

#include <functional>

#include "pixelwave/layers.hpp"

namespace pixelwave {

// Variance-preserving cosine schedule: alpha_t^2 + sigma_t^2 = 1 exactly,
// alpha_0 = 1, terminal alpha = 0.
struct NoiseSchedule {
    int64_t steps = 1000;
    std::vector<double> alpha, sigma;

    static NoiseSchedule cosine(int64_t t_steps) {
        if (t_steps < 1) throw config_error("noise schedule needs at least 1 step");
        NoiseSchedule s;
        s.steps = t_steps;
        s.alpha.resize(static_cast<size_t>(t_steps) + 1);
        s.sigma.resize(static_cast<size_t>(t_steps) + 1);
        for (int64_t t = 0; t <= t_steps; ++t) {
            double phase = 1.5707963267948966 * static_cast<double>(t) / static_cast<double>(t_steps);
            s.alpha[static_cast<size_t>(t)] = std::cos(phase);
            s.sigma[static_cast<size_t>(t)] = std::sin(phase);
        }
        s.alpha[0] = 1.0;
        s.sigma[0] = 0.0;
        s.alpha[static_cast<size_t>(t_steps)] = 0.0;
        s.sigma[static_cast<size_t>(t_steps)] = 1.0;
        return s;
    }
};

// z_t = alpha_t z0 + sigma_t eps; the caller supplies eps for determinism.
template <typename T>
Tensor<T> noise_forward(const Tensor<T>& z0, int64_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.steps) throw input_error("noise_forward: t out of schedule range");
    check_same_shape(z0, eps, "noise_forward");
    Tensor<T> z = z0;
    double a = sched.alpha[static_cast<size_t>(t)], s = sched.sigma[static_cast<size_t>(t)];
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<T>(a * z0[i] + s * eps[i]);
    return z;
}

// Karras sigma grid: `steps` points from sigma_max down to sigma_min on a
// rho-warped scale, plus the terminal 0.
inline std::vector<double> karras_sigma_grid(int64_t steps, double sigma_min = 0.002, double sigma_max = 80.0,
                                             double rho = 7.0) {
    if (steps < 1) throw input_error("sampler needs steps >= 1");
    std::vector<double> sig(static_cast<size_t>(steps) + 1, 0.0);
    if (steps == 1) {
        sig[0] = sigma_max;
        return sig;
    }
    double lo = std::pow(sigma_min, 1.0 / rho), hi = std::pow(sigma_max, 1.0 / rho);
    for (int64_t i = 0; i < steps; ++i) {
        double f = static_cast<double>(i) / static_cast<double>(steps - 1);
        sig[static_cast<size_t>(i)] = std::pow(hi + f * (lo - hi), rho);
    }
    return sig;
}

struct DiffusionConfig {
    int64_t latent_len = 16;       // L/16 positions
    int64_t latent_channels = 16;
    int64_t cond_dim = 16;         // D_p
    int64_t base_width = 32;       // level widths: base, 2*base, 2*base
    int64_t time_dim = 32;
    int64_t schedule_steps = 1000;
    double guidance_scale = 3.0;
    double drop_prob = 0.5;
    double sigma_min = 0.002, sigma_max = 80.0, rho = 7.0;

    void validate() const {
        if (latent_len < 4 || latent_len % 4 != 0)
            throw config_error("denoiser needs a latent length divisible by 4 and >= 4");
        if (latent_channels <= 0 || cond_dim <= 0 || base_width <= 0 || time_dim <= 0)
            throw config_error("diffusion widths must be positive");
        if (schedule_steps < 1) throw config_error("schedule_steps must be >= 1");
    }
};

namespace diffdetail {

template <typename T>
Tensor<T> sinusoidal_embedding(double t_scaled, int64_t dim) {
    Tensor<T> e({1, dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[2 * i] = static_cast<T>(std::sin(t_scaled * freq));
        e[2 * i + 1] = static_cast<T>(std::cos(t_scaled * freq));
    }
    return e;
}

// conv(3)-norm-relu twice with a time-embedding shift between them.
template <typename T>
struct ResBlock1d {
    LayerNormLayer<T> n1, n2;
    ConvLayer<T> c1, c2, skip;
    Linear<T> t_proj;
    bool has_skip = false;

    void init(Rng& rng, int64_t cin, int64_t cout, int64_t time_dim) {
        n1.init(cin);
        c1.init(rng, 1, {3, cin, cout}, {1}, {1});
        t_proj.init(rng, time_dim, cout);
        n2.init(cout);
        c2.init(rng, 1, {3, cout, cout}, {1}, {1});
        if (cin != cout) {
            skip.init(rng, 1, {1, cin, cout}, {1}, {0});
            has_skip = true;
        }
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        n1.reg(r, p + ".n1");
        c1.reg(r, p + ".c1");
        t_proj.reg(r, p + ".t_proj");
        n2.reg(r, p + ".n2");
        c2.reg(r, p + ".c2");
        if (has_skip) skip.reg(r, p + ".skip");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x, const Value<T>& temb) {
        auto& t = ctx.tape;
        auto h = c1.forward(ctx, relu(t, n1.forward(ctx, x)));
        auto shift = reshape(t, t_proj.forward(ctx, temb), {t_proj.out});
        h = add_bias(t, h, shift);
        h = c2.forward(ctx, relu(t, n2.forward(ctx, h)));
        auto sk = has_skip ? skip.forward(ctx, x) : x;
        return add(t, h, sk);
    }
};

// Cross-attention from sequence positions onto the single conditioning
// token; residual. With one key the softmax is degenerate, so this acts
// as a learned, condition-dependent channel bias.
template <typename T>
struct CrossAttn {
    Linear<T> q_proj, k_proj, v_proj, out_proj;
    int64_t channels = 0;

    void init(Rng& rng, int64_t c, int64_t cond_dim) {
        channels = c;
        q_proj.init(rng, c, c);
        k_proj.init(rng, cond_dim, c);
        v_proj.init(rng, cond_dim, c);
        out_proj.init(rng, c, c);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) const {
        q_proj.reg(r, p + ".q");
        k_proj.reg(r, p + ".k");
        v_proj.reg(r, p + ".v");
        out_proj.reg(r, p + ".out");
    }

    Value<T> forward(Ctx<T>& ctx, const Value<T>& x, const Value<T>& cond_token) {
        auto& t = ctx.tape;
        int64_t n = x->value.shape[0];
        auto q = q_proj.forward(ctx, x);                       // n x c
        auto k = k_proj.forward(ctx, cond_token);              // 1 x c
        auto v = v_proj.forward(ctx, cond_token);              // 1 x c
        auto logits = mul_scalar(t, matmul(t, q, transpose2d(t, k)), 1.0 / std::sqrt(double(channels)));
        auto attn = softmax_lastdim(t, logits);                // n x 1, all ones
        auto gathered = matmul(t, attn, v);                    // n x c
        return add(t, x, out_proj.forward(ctx, gathered));
    }
};

}  // namespace diffdetail

// Conditional 1D UNet denoiser over quantized waveform latents. Predicts
// the clean latent z0 from (z_t, t, cond); conditioning enters through
// cross-attention at every resolution level.
template <typename T>
class DiffusionModel {
public:
    DiffusionConfig cfg;
    NoiseSchedule schedule;
    Tensor<T> null_cond;  // frozen random vector replacing dropped conditions
    Linear<T> in_proj, out_proj;
    Linear<T> t_mlp1, t_mlp2;
    diffdetail::ResBlock1d<T> down0, down1, mid, up1, up0;
    diffdetail::CrossAttn<T> att0, att1, att_mid, att_up1, att_up0;
    ConvLayer<T> down_conv0, down_conv1;
    ConvLayer<T> up_conv1, up_conv0;
    LayerNormLayer<T> out_norm;

    // Probe for contract tests: when enabled, records the conditioning
    // token handed to the cross-attention layers of each forward.
    bool probe_cross_attention = false;
    std::vector<Tensor<T>> probed_cond_tokens;

    DiffusionModel(const DiffusionConfig& c, Rng rng) : cfg(c), schedule(NoiseSchedule::cosine(c.schedule_steps)) {
        cfg.validate();
        null_cond = Tensor<T>::randn({cfg.cond_dim}, rng);
        int64_t w = cfg.base_width;
        in_proj.init(rng, cfg.latent_channels, w);
        t_mlp1.init(rng, cfg.time_dim, cfg.time_dim);
        t_mlp2.init(rng, cfg.time_dim, cfg.time_dim);
        down0.init(rng, w, w, cfg.time_dim);
        att0.init(rng, w, cfg.cond_dim);
        down_conv0.init(rng, 1, {3, w, 2 * w}, {2}, {1});
        down1.init(rng, 2 * w, 2 * w, cfg.time_dim);
        att1.init(rng, 2 * w, cfg.cond_dim);
        down_conv1.init(rng, 1, {3, 2 * w, 2 * w}, {2}, {1});
        mid.init(rng, 2 * w, 2 * w, cfg.time_dim);
        att_mid.init(rng, 2 * w, cfg.cond_dim);
        up_conv1.init(rng, 1, {4, 2 * w, 2 * w}, {2}, {1}, true);
        up1.init(rng, 4 * w, 2 * w, cfg.time_dim);
        att_up1.init(rng, 2 * w, cfg.cond_dim);
        up_conv0.init(rng, 1, {4, 2 * w, w}, {2}, {1}, true);
        up0.init(rng, 2 * w, w, cfg.time_dim);
        att_up0.init(rng, w, cfg.cond_dim);
        out_norm.init(w);
        out_proj.init(rng, w, cfg.latent_channels);
    }

    void reg(ParamRegistry<T>& r, const std::string& p) {
        in_proj.reg(r, p + ".in_proj");
        t_mlp1.reg(r, p + ".t_mlp1");
        t_mlp2.reg(r, p + ".t_mlp2");
        down0.reg(r, p + ".down0");
        att0.reg(r, p + ".att0");
        down_conv0.reg(r, p + ".down_conv0");
        down1.reg(r, p + ".down1");
        att1.reg(r, p + ".att1");
        down_conv1.reg(r, p + ".down_conv1");
        mid.reg(r, p + ".mid");
        att_mid.reg(r, p + ".att_mid");
        up_conv1.reg(r, p + ".up_conv1");
        up1.reg(r, p + ".up1");
        att_up1.reg(r, p + ".att_up1");
        up_conv0.reg(r, p + ".up_conv0");
        up0.reg(r, p + ".up0");
        att_up0.reg(r, p + ".att_up0");
        out_norm.reg(r, p + ".out_norm");
        out_proj.reg(r, p + ".out_proj");
        r.add_buffer(p + ".null_cond", &null_cond);
    }

    // t_norm in [0, 1]; cond null -> unconditional (null token).
    Value<T> predict(Ctx<T>& ctx, const Value<T>& z_t, double t_norm, const Tensor<T>* cond) {
        auto& t = ctx.tape;
        if (z_t->value.rank() != 2 || z_t->value.shape[0] != cfg.latent_len ||
            z_t->value.shape[1] != cfg.latent_channels)
            throw dimension_error("denoiser latent shape " + shape_str(z_t->value.shape) + " does not match config");
        Tensor<T> cond_vec = cond ? *cond : null_cond;
        if (cond_vec.numel() != cfg.cond_dim) throw dimension_error("condition length does not match cond_dim");
        if (probe_cross_attention) probed_cond_tokens.push_back(cond_vec);
        auto cond_token = constant(cond_vec.reshaped({1, cfg.cond_dim}));

        auto temb_in = constant(diffdetail::sinusoidal_embedding<T>(t_norm * 1000.0, cfg.time_dim));
        auto temb = t_mlp2.forward(ctx, gelu(t, t_mlp1.forward(ctx, temb_in)));

        auto h0 = in_proj.forward(ctx, z_t);
        h0 = down0.forward(ctx, h0, temb);
        h0 = att0.forward(ctx, h0, cond_token);
        auto h1 = down_conv0.forward(ctx, h0);
        h1 = down1.forward(ctx, h1, temb);
        h1 = att1.forward(ctx, h1, cond_token);
        auto h2 = down_conv1.forward(ctx, h1);
        h2 = mid.forward(ctx, h2, temb);
        h2 = att_mid.forward(ctx, h2, cond_token);
        auto u1 = up_conv1.forward(ctx, h2);
        u1 = up1.forward(ctx, concat_last(t, u1, h1), temb);
        u1 = att_up1.forward(ctx, u1, cond_token);
        auto u0 = up_conv0.forward(ctx, u1);
        u0 = up0.forward(ctx, concat_last(t, u0, h0), temb);
        u0 = att_up0.forward(ctx, u0, cond_token);
        return out_proj.forward(ctx, relu(t, out_norm.forward(ctx, u0)));
    }

    // Per-example denoising loss ||pred - z0||^2 with random condition
    // dropping. eps supplied by the caller keeps the step deterministic.
    Value<T> train_step_loss(Ctx<T>& ctx, const Tensor<T>& z0, const Tensor<T>* cond, int64_t t,
                             const Tensor<T>& eps, Rng& rng, double drop_prob) {
        if (t < 1 || t > schedule.steps) throw input_error("train step t out of [1, T]");
        Tensor<T> z_t = noise_forward(z0, t, eps, schedule);
        const Tensor<T>* used = cond;
        if (drop_prob >= 1.0 || (drop_prob > 0 && rng.bernoulli(drop_prob))) used = nullptr;
        auto pred = predict(ctx, constant(z_t), static_cast<double>(t) / static_cast<double>(schedule.steps), used);
        return sq_diff_norm(ctx.tape, pred, constant(z0));
    }

    // Classifier-free guided z0 prediction; exactly two network passes.
    Tensor<T> cfg_predict(const Tensor<T>& z_t, double t_norm, const Tensor<T>& cond, double s,
                          int* eval_count = nullptr) {
        Tape<T> tape;
        tape.set_recording(false);
        Ctx<T> ctx{tape, false, nullptr};
        auto zt = constant(z_t);
        auto uncond = predict(ctx, zt, t_norm, nullptr);
        auto conded = predict(ctx, zt, t_norm, &cond);
        if (eval_count) *eval_count = 2;
        Tensor<T> out = uncond->value;
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = static_cast<T>(uncond->value[i] + s * (conded->value[i] - uncond->value[i]));
        return out;
    }
};

// Denoised-estimate callback for the sampler: (z_t at VP scaling, t_norm
// in [0, 1]) -> predicted z0.
template <typename T>
using DenoiseFn = std::function<Tensor<T>(const Tensor<T>&, double)>;

// Deterministic 2nd-order (Heun) sampling over a Karras sigma grid. The
// VP-trained predictor is driven through the variance-exploding
// parameterization x = z_t / alpha, sigma_ve = sigma_vp / alpha.
template <typename T>
Tensor<T> karras_sample_heun(const DenoiseFn<T>& denoise, const Shape& latent_shape, int64_t steps, Rng& rng,
                             double sigma_min = 0.002, double sigma_max = 80.0, double rho = 7.0) {
    auto grid = karras_sigma_grid(steps, sigma_min, sigma_max, rho);
    Tensor<T> x = Tensor<T>::randn(latent_shape, rng);  // z_T ~ N(0, I)
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<T>(x[i] * grid[0]);

    auto denoised = [&](const Tensor<T>& xe, double sigma) {
        double alpha = 1.0 / std::sqrt(1.0 + sigma * sigma);
        double t_norm = std::atan(sigma) / 1.5707963267948966;
        Tensor<T> z_t = xe;
        for (int64_t i = 0; i < z_t.numel(); ++i) z_t[i] = static_cast<T>(z_t[i] * alpha);
        return denoise(z_t, t_norm);
    };

    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        double s0 = grid[i], s1 = grid[i + 1];
        Tensor<T> d0 = denoised(x, s0);
        Tensor<T> slope(x.shape);
        for (int64_t j = 0; j < x.numel(); ++j)
            slope[j] = static_cast<T>((static_cast<double>(x[j]) - static_cast<double>(d0[j])) / s0);
        Tensor<T> x_next = x;
        for (int64_t j = 0; j < x.numel(); ++j) x_next[j] = static_cast<T>(x[j] + (s1 - s0) * slope[j]);
        if (s1 > 0) {
            Tensor<T> d1 = denoised(x_next, s1);
            for (int64_t j = 0; j < x.numel(); ++j) {
                double slope1 = (static_cast<double>(x_next[j]) - static_cast<double>(d1[j])) / s1;
                x[j] = static_cast<T>(x[j] + (s1 - s0) * 0.5 * (static_cast<double>(slope[j]) + slope1));
            }
        } else {
            x = x_next;
        }
    }
    return x;
}

// Guided latent sampling with the trained denoiser.
template <typename T>
Tensor<T> sample_latent(DiffusionModel<T>& model, const Tensor<T>& cond, int64_t steps, uint64_t seed,
                        double guidance) {
    if (steps < 1) throw input_error("sample: steps must be >= 1");
    Rng rng(seed);
    DenoiseFn<T> fn = [&](const Tensor<T>& z_t, double t_norm) {
        return model.cfg_predict(z_t, t_norm, cond, guidance);
    };
    return karras_sample_heun(fn, {model.cfg.latent_len, model.cfg.latent_channels}, steps, rng,
                              model.cfg.sigma_min, model.cfg.sigma_max, model.cfg.rho);
}

}  // namespace pixelwave
