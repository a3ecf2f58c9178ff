#pragma once

#include <fstream>
#include <optional>

#include <json.hpp>

#include "pixelwave/checkpoint.hpp"
#include "pixelwave/diffusion.hpp"
#include "pixelwave/image_model.hpp"
#include "pixelwave/losses.hpp"
#include "pixelwave/retrieval.hpp"
#include "pixelwave/synth.hpp"
#include "pixelwave/temporal_ae.hpp"
#include "pixelwave/waveform_codec.hpp"

namespace pixelwave {

// One configuration object drives all four networks; the serialized JSON
// is the checkpoint digest source.
struct PipelineConfig {
    int64_t height = 32, width = 32, channels = 6, frames = 3;
    int64_t embed_dim = 16;  // D_p
    int64_t patch = 4, dim = 64, heads = 4, layers = 4, ff_hidden = 128;
    double dropout = 0.1;
    int64_t na_window = 7;
    bool shared_decoder = false;
    int64_t wf_length = 256, quantizers = 8, entries = 512;
    int64_t diff_base_width = 32, diff_time_dim = 32, diff_schedule_steps = 1000;
    double guidance_scale = 3.0, cond_drop_prob = 0.5;
    int64_t classes = 6;

    ImageModelConfig image_config() const {
        ImageModelConfig c;
        c.height = height;
        c.width = width;
        c.channels = channels;
        c.patch = patch;
        c.dim = dim;
        c.heads = heads;
        c.layers = layers;
        c.ff_hidden = ff_hidden;
        c.dropout = dropout;
        c.embed_dim = embed_dim;
        c.na_window = na_window;
        c.shared_decoder = shared_decoder;
        return c;
    }

    TemporalAEConfig temporal_config() const {
        TemporalAEConfig c;
        c.frames = frames;
        c.height = height;
        c.width = width;
        c.channels = channels;
        c.embed_dim = embed_dim;
        c.na_window = na_window;
        return c;
    }

    WaveformCodecConfig codec_config() const {
        WaveformCodecConfig c;
        c.length = wf_length;
        c.quantizers = quantizers;
        c.entries = entries;
        c.embed_dim = embed_dim;
        return c;
    }

    DiffusionConfig diffusion_config() const {
        DiffusionConfig c;
        c.latent_len = wf_length / 16;
        c.cond_dim = embed_dim;
        c.base_width = diff_base_width;
        c.time_dim = diff_time_dim;
        c.schedule_steps = diff_schedule_steps;
        c.guidance_scale = guidance_scale;
        c.drop_prob = cond_drop_prob;
        return c;
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"height", height},
                              {"width", width},
                              {"channels", channels},
                              {"frames", frames},
                              {"embed_dim", embed_dim},
                              {"patch", patch},
                              {"dim", dim},
                              {"heads", heads},
                              {"layers", layers},
                              {"ff_hidden", ff_hidden},
                              {"dropout", dropout},
                              {"na_window", na_window},
                              {"shared_decoder", shared_decoder},
                              {"wf_length", wf_length},
                              {"quantizers", quantizers},
                              {"entries", entries},
                              {"diff_base_width", diff_base_width},
                              {"diff_time_dim", diff_time_dim},
                              {"diff_schedule_steps", diff_schedule_steps},
                              {"guidance_scale", guidance_scale},
                              {"cond_drop_prob", cond_drop_prob},
                              {"classes", classes}};
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c;
        c.height = j.value("height", c.height);
        c.width = j.value("width", c.width);
        c.channels = j.value("channels", c.channels);
        c.frames = j.value("frames", c.frames);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.patch = j.value("patch", c.patch);
        c.dim = j.value("dim", c.dim);
        c.heads = j.value("heads", c.heads);
        c.layers = j.value("layers", c.layers);
        c.ff_hidden = j.value("ff_hidden", c.ff_hidden);
        c.dropout = j.value("dropout", c.dropout);
        c.na_window = j.value("na_window", c.na_window);
        c.shared_decoder = j.value("shared_decoder", c.shared_decoder);
        c.wf_length = j.value("wf_length", c.wf_length);
        c.quantizers = j.value("quantizers", c.quantizers);
        c.entries = j.value("entries", c.entries);
        c.diff_base_width = j.value("diff_base_width", c.diff_base_width);
        c.diff_time_dim = j.value("diff_time_dim", c.diff_time_dim);
        c.diff_schedule_steps = j.value("diff_schedule_steps", c.diff_schedule_steps);
        c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
        c.cond_drop_prob = j.value("cond_drop_prob", c.cond_drop_prob);
        c.classes = j.value("classes", c.classes);
        return c;
    }

    std::string json() const { return to_json().dump(); }

    static PipelineConfig matching(const SynthConfig& s) {
        PipelineConfig c;
        c.height = s.height;
        c.width = s.width;
        c.channels = s.channels;
        c.frames = s.frames;
        c.classes = s.classes;
        return c;
    }
};

// All four networks plus their parameter registries. Construction is
// deterministic in (config, seed).
template <typename T>
struct Models {
    PipelineConfig cfg;
    ImageModel<T> image;
    TemporalAE<T> temporal;
    WaveformCodec<T> codec;
    DiffusionModel<T> diffusion;
    ParamRegistry<T> reg_image, reg_temporal, reg_codec, reg_diffusion, reg_pretrain;

    Models(const PipelineConfig& c, uint64_t init_seed)
        : cfg(c),
          image(c.image_config(), init_rng(init_seed, 1)),
          temporal(c.temporal_config(), init_rng(init_seed, 2)),
          codec(c.codec_config(), init_rng(init_seed, 3)),
          diffusion(c.diffusion_config(), init_rng(init_seed, 4)) {
        image.reg(reg_image, "image_model");
        temporal.reg(reg_temporal, "temporal_ae");
        codec.reg(reg_codec, "waveform_codec");
        diffusion.reg(reg_diffusion, "diffusion");
        for (auto& [n, p] : reg_image.params) reg_pretrain.add(n, p);
        for (auto& [n, p] : reg_temporal.params) reg_pretrain.add(n, p);
        for (auto& [n, p] : reg_codec.params) reg_pretrain.add(n, p);
    }

    void set_requires_grad(ParamRegistry<T>& reg, bool on) {
        for (auto& [n, p] : reg.params) p->requires_grad = on;
    }

    bool all_frozen(const ParamRegistry<T>& reg) const {
        for (auto& [n, p] : reg.params)
            if (p->requires_grad) return false;
        return true;
    }

private:
    static Rng init_rng(uint64_t seed, uint64_t salt) { return Rng(seed).stream(salt); }
};

enum class PairLoss { ZeroCl, Vicreg };

struct TrainConfig {
    int64_t steps = 400;
    int64_t batch_tiles = 2;
    double lr = 1e-3;
    double weight_decay = 0.05;
    int64_t warmup_steps = 20;
    LrSchedule schedule = LrSchedule::Cosine;
    OptimizerKind optimizer = OptimizerKind::Lion;
    SemaConfig sema;
    uint64_t seed = 0;

    // loss routing (ablation flags); the default mirrors the batch-size
    // rationale: whitening loss for the sparse waveform pairs, VICReg for
    // the dense pixel pairs
    PairLoss pixel_waveform_loss = PairLoss::ZeroCl;
    PairLoss pixel_pixel_loss = PairLoss::Vicreg;
    int64_t hierarchical_stages = 4;  // 1 = single-stage ablation
    double w_pixel_waveform = 1.0, w_pixel_pixel = 1.0, w_reconstruction = 1.0;
    LossWeights vicreg_weights;

    int64_t snapshot_every = 50;
    std::string loss_csv;  // empty disables logging

    // diffusion stage
    int64_t diffusion_steps = 0;
    int64_t diffusion_batch = 16;
    double diffusion_lr = 1e-4;
    int64_t diffusion_warmup = 20;

    void validate() const {
        if (steps < 1 || batch_tiles < 1) throw config_error("steps and batch_tiles must be positive");
        if (warmup_steps < 0 || warmup_steps > steps) throw config_error("warmup must lie in [0, steps]");
        if (hierarchical_stages != 1 && hierarchical_stages != 4)
            throw config_error("hierarchical_stages must be 1 or 4");
    }
};

struct LossBreakdown {
    double l_ins = 0, l_fea = 0, l_var = 0, l_inv = 0, l_cov = 0, l_rec = 0;
    double total = 0;
    bool skipped_pixel_waveform = false;  // degenerate or G < 2
};

inline const char* kLossCsvHeader = "step,L_Ins,L_Fea,L_var,L_inv,L_cov,L_rec";

// Combined pre-training: pixel-waveform alignment, hierarchical
// pixel-pixel alignment and the three reconstruction terms, with Lion +
// SEMA and EMA codebook updates.
template <typename T>
class Pretrainer {
public:
    Models<T>& models;
    const SynthScene& scene;
    TrainConfig cfg;
    Optimizer<T> opt;
    Sema<T> sema;
    int64_t step_done = 0;
    int64_t skipped_steps = 0;
    std::vector<std::string> warnings;
    Checkpoint<T> snapshot;  // rolling last-good state

    Pretrainer(Models<T>& m, const SynthScene& s, const TrainConfig& c)
        : models(m), scene(s), cfg(c), opt(make_opt(c)), sema(c.sema) {
        cfg.validate();
        if (scene.tiles.empty()) throw state_error("pre-training requires a scene with tiles");
        sema.init(m.reg_pretrain);
        take_snapshot();
    }

    std::vector<int64_t> train_tiles() const {
        std::vector<int64_t> out;
        for (const auto& t : scene.tiles)
            if (!is_test_tile(t.index)) out.push_back(t.index);
        return out;
    }

    std::vector<int64_t> batch_for_step(int64_t step) const {
        auto pool = train_tiles();
        Rng rng = Rng(cfg.seed).stream(7000).stream(static_cast<uint64_t>(step));
        std::vector<int64_t> batch;
        for (int64_t b = 0; b < cfg.batch_tiles; ++b)
            batch.push_back(pool[rng.uniform_index(pool.size())]);
        return batch;
    }

    LossBreakdown step() {
        Tape<T> tape;
        Rng step_rng = Rng(cfg.seed).stream(9000).stream(static_cast<uint64_t>(step_done));
        Ctx<T> ctx{tape, true, &step_rng};

        std::vector<Value<T>> za_rows, zb_rows;                    // pixel / waveform alignment pairs
        std::array<std::vector<Value<T>>, 4> zh_rows, zt_rows;     // per-stage pixel-pixel pairs
        std::vector<Value<T>> wave_in, wave_out, stack_in, stack_out, img_in, img_out;
        Value<T> commit;
        std::vector<Value<T>> ze_all;
        std::vector<const TileSample*> batch_tiles;
        for (int64_t idx : batch_for_step(step_done)) batch_tiles.push_back(&scene.tiles[static_cast<size_t>(idx)]);

        for (const TileSample* tile : batch_tiles) {
            auto imf = models.image.forward(ctx, tile->image.template cast<T>());
            auto tmf = models.temporal.forward(ctx, tile->stack.template cast<T>());
            img_in.push_back(constant(tile->image.template cast<T>()));
            img_out.push_back(imf.recon);
            stack_in.push_back(constant(tile->stack.template cast<T>()));
            stack_out.push_back(tmf.recon);

            for (int d = 1; d <= 4; ++d) {
                if (cfg.hierarchical_stages == 1 && d != 1) continue;
                auto zh = models.image.project_oh(ctx, imf.oh[static_cast<size_t>(d - 1)], d);
                auto pooled = models.temporal.temporal_pool(ctx, tmf.stages[static_cast<size_t>(d - 1)], d);
                auto zt = models.temporal.project_ot(ctx, pooled, d);
                int64_t rows = zh->value.shape[0] * zh->value.shape[1];
                int64_t ch = zh->value.shape[2];
                zh_rows[static_cast<size_t>(d - 1)].push_back(reshape(tape, zh, {rows, ch}));
                zt_rows[static_cast<size_t>(d - 1)].push_back(reshape(tape, zt, {rows, ch}));
            }

            if (!tile->waveforms.empty()) {
                auto& o_v = imf.ov[0];
                int64_t w = o_v->value.shape[1], c = o_v->value.shape[2];
                auto flat = reshape(tape, o_v, {o_v->value.shape[0] * w, c});
                std::vector<int64_t> pix;
                for (const auto& rec : tile->waveforms)
                    pix.push_back(static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon));
                za_rows.push_back(gather_rows(tape, flat, pix));
                for (const auto& rec : tile->waveforms) {
                    auto wv = rec.tensor().template cast<T>();
                    auto ze = models.codec.encode(ctx, wv);
                    ze_all.push_back(ze);
                    zb_rows.push_back(reshape(tape, models.codec.align_embed(ctx, ze), {1, models.cfg.embed_dim}));
                    wave_in.push_back(constant(wv));
                }
            }
        }

        LossBreakdown out;
        Value<T> total;
        auto accumulate = [&](const Value<T>& term, double weight) {
            auto scaled = weight == 1.0 ? term : mul_scalar(tape, term, weight);
            total = total ? add(tape, total, scaled) : scaled;
        };

        // waveform codec path: batch all latent rows through one RVQ pass
        if (!ze_all.empty()) {
            auto ze_cat = concat_rows(tape, ze_all);
            auto q = models.codec.quantize(ctx, ze_cat);
            int64_t rows_per = models.cfg.wf_length / 16;
            for (size_t i = 0; i < ze_all.size(); ++i) {
                std::vector<int64_t> idx(static_cast<size_t>(rows_per));
                for (int64_t r = 0; r < rows_per; ++r) idx[static_cast<size_t>(r)] = static_cast<int64_t>(i) * rows_per + r;
                auto zi = gather_rows(tape, q.z, idx);
                wave_out.push_back(models.codec.decode(ctx, zi));
            }
            commit = models.codec.commitment_loss(ctx, ze_cat, q);
            models.codec.ema_update(q, step_rng);
        }

        // pixel-waveform alignment
        if (za_rows.size() > 0) {
            auto za = rows_l2_normalize(tape, concat_rows(tape, za_rows));
            auto zb = rows_l2_normalize(tape, concat_rows(tape, zb_rows));
            if (za->value.shape[0] >= 2) {
                if (cfg.pixel_waveform_loss == PairLoss::ZeroCl) {
                    auto z = zero_cl_loss(tape, za, zb);
                    if (z.degenerate_gap) {
                        warnings.push_back("step " + std::to_string(step_done) +
                                           ": degenerate eigenvalue gap, pixel-waveform term skipped");
                        out.skipped_pixel_waveform = true;
                    } else {
                        out.l_ins = z.instance_term->value[0];
                        out.l_fea = z.feature_term->value[0];
                        accumulate(z.total, cfg.w_pixel_waveform);
                    }
                } else {
                    auto v = vicreg_loss(tape, za, zb, cfg.vicreg_weights);
                    out.l_ins = v.total->value[0];
                    accumulate(v.total, cfg.w_pixel_waveform);
                }
            } else {
                out.skipped_pixel_waveform = true;
            }
        } else {
            out.skipped_pixel_waveform = true;
        }

        // hierarchical pixel-pixel alignment
        {
            Value<T> pp_total;
            int stages = cfg.hierarchical_stages == 1 ? 1 : 4;
            for (int d = 1; d <= stages; ++d) {
                auto zh = rows_l2_normalize(tape, concat_rows(tape, zh_rows[static_cast<size_t>(d - 1)]));
                auto zt = rows_l2_normalize(tape, concat_rows(tape, zt_rows[static_cast<size_t>(d - 1)]));
                if (cfg.pixel_pixel_loss == PairLoss::Vicreg) {
                    auto v = vicreg_loss(tape, zh, zt, cfg.vicreg_weights);
                    out.l_var += v.variance_term->value[0];
                    out.l_inv += v.invariance_term->value[0];
                    out.l_cov += v.covariance_term->value[0];
                    pp_total = pp_total ? add(tape, pp_total, v.total) : v.total;
                } else {
                    auto z = zero_cl_loss(tape, zh, zt);
                    out.l_var += z.total->value[0];
                    pp_total = pp_total ? add(tape, pp_total, z.total) : z.total;
                }
            }
            accumulate(pp_total, cfg.w_pixel_pixel);
        }

        // reconstruction terms
        {
            Value<T> rec;
            if (!wave_in.empty()) {
                rec = reconstruction_loss(tape, concat_rows(tape, wave_in), concat_rows(tape, wave_out),
                                          stack_axis0(tape, stack_in), stack_axis0(tape, stack_out),
                                          stack_axis0(tape, img_in), stack_axis0(tape, img_out));
            } else {
                rec = add(tape, mse_loss(tape, stack_axis0(tape, stack_in), stack_axis0(tape, stack_out)),
                          mse_loss(tape, stack_axis0(tape, img_in), stack_axis0(tape, img_out)));
            }
            out.l_rec = rec->value[0];
            accumulate(rec, cfg.w_reconstruction);
            if (commit) accumulate(commit, 1.0);
        }

        out.total = total->value[0];
        if (!std::isfinite(out.total)) {
            throw numeric_error("training diverged at step " + std::to_string(step_done) + " (loss is not finite)");
        }

        models.reg_pretrain.zero_grad();
        tape.backward(total);
        try {
            opt.step(models.reg_pretrain);
        } catch (const numeric_error& e) {
            warnings.push_back("step " + std::to_string(step_done) + " skipped: " + e.what());
            ++skipped_steps;
            ++step_done;
            return out;
        }
        ++step_done;
        sema.update(models.reg_pretrain, step_done);
        if (cfg.snapshot_every > 0 && step_done % cfg.snapshot_every == 0) take_snapshot();
        return out;
    }

    // Runs the configured number of steps, appending one CSV row per
    // step. On divergence the last snapshot is written to
    // `abort_checkpoint_path` (when set) and the error rethrown.
    void run(const std::string& abort_checkpoint_path = "") {
        std::ofstream csv;
        if (!cfg.loss_csv.empty()) {
            csv.open(cfg.loss_csv);
            csv << kLossCsvHeader << "\n";
        }
        while (step_done < cfg.steps) {
            int64_t at = step_done;
            LossBreakdown lb;
            try {
                lb = step();
            } catch (const numeric_error&) {
                if (!abort_checkpoint_path.empty()) save_checkpoint(abort_checkpoint_path, snapshot);
                throw;
            }
            if (csv.is_open())
                csv << at << "," << lb.l_ins << "," << lb.l_fea << "," << lb.l_var << "," << lb.l_inv << ","
                    << lb.l_cov << "," << lb.l_rec << "\n";
        }
    }

    Checkpoint<T> checkpoint() const {
        Checkpoint<T> ck;
        ck.config_json = models.cfg.json();
        ck.capture("image_model", models.reg_image, step_done, &opt, &sema);
        ck.capture("temporal_ae", models.reg_temporal, step_done, &opt, &sema);
        ck.capture("waveform_codec", models.reg_codec, step_done, &opt, &sema);
        return ck;
    }

    void restore(const Checkpoint<T>& ck) {
        opt.m.clear();
        opt.v.clear();
        ck.restore("image_model", models.reg_image, &opt, &sema);
        ck.restore("temporal_ae", models.reg_temporal, &opt, &sema);
        step_done = ck.restore("waveform_codec", models.reg_codec, &opt, &sema);
        take_snapshot();
    }

private:
    static OptimConfig make_opt(const TrainConfig& c) {
        OptimConfig o = c.optimizer == OptimizerKind::Lion ? OptimConfig::lion(c.lr, c.weight_decay)
                                                           : OptimConfig::adamw(c.lr, c.weight_decay);
        o.warmup_steps = c.warmup_steps;
        o.total_steps = c.steps;
        o.schedule = c.schedule;
        return o;
    }

    void take_snapshot() { snapshot = checkpoint(); }
};

// ------------------------------ inference ------------------------------

// Per-pixel embedding map from the requested decoder, inference mode
// (projection heads bypassed). Returns H x W x D_p floats.
template <typename T>
Tensor<float> embed_image(Models<T>& models, const Tensor<float>& image, Provenance which) {
    if (which == Provenance::OW) throw input_error("embed_image produces OV or OH maps");
    Tape<T> tape;
    tape.set_recording(false);
    Ctx<T> ctx{tape, false, nullptr};
    auto tokens = models.image.patch_embed(ctx, image.template cast<T>());
    auto blocks = models.image.encode(ctx, tokens);
    auto stages =
        models.image.decode(ctx, blocks, which == Provenance::OV ? DecoderId::Vertical : DecoderId::Horizontal);
    return stages[0]->value.template cast<float>();
}

// Alignment embeddings O^W for a set of records; rows are not yet
// normalized (the database normalizes its keys).
template <typename T>
Tensor<float> embed_waveforms(Models<T>& models, const std::vector<WaveformRecord>& records) {
    if (records.empty()) throw input_error("embed_waveforms: empty record set");
    Tape<T> tape;
    tape.set_recording(false);
    Ctx<T> ctx{tape, false, nullptr};
    Tensor<float> out({static_cast<int64_t>(records.size()), models.cfg.embed_dim});
    for (size_t i = 0; i < records.size(); ++i) {
        auto ze = models.codec.encode(ctx, records[i].tensor().template cast<T>());
        auto emb = models.codec.align_embed(ctx, ze);
        for (int64_t j = 0; j < models.cfg.embed_dim; ++j)
            out.at(static_cast<int64_t>(i), j) = static_cast<float>(emb->value[j]);
    }
    return out;
}

// Quantized latent z for one record (diffusion training data).
template <typename T>
Tensor<T> quantized_latent(Models<T>& models, const WaveformRecord& rec) {
    Tape<T> tape;
    tape.set_recording(false);
    Ctx<T> ctx{tape, false, nullptr};
    auto ze = models.codec.encode(ctx, rec.tensor().template cast<T>());
    auto q = models.codec.quantize(ctx, ze);
    return q.z_q;
}

inline void detect_signal_bounds(const std::vector<float>& samples, int32_t& start, int32_t& end) {
    float mx = 0;
    for (float v : samples) mx = std::max(mx, v);
    float thresh = 0.1f * mx;
    start = 0;
    end = static_cast<int32_t>(samples.size());
    for (size_t i = 0; i < samples.size(); ++i)
        if (samples[i] > thresh) {
            start = static_cast<int32_t>(i);
            break;
        }
    for (size_t i = samples.size(); i-- > 0;)
        if (samples[i] > thresh) {
            end = static_cast<int32_t>(i + 1);
            break;
        }
}

// Samples a latent under classifier-free guidance and decodes it through
// the frozen waveform decoder.
template <typename T>
WaveformRecord generate_waveform(Models<T>& models, const std::vector<float>& cond, uint64_t seed,
                                 int64_t steps = 30, double guidance = 3.0) {
    if (static_cast<int64_t>(cond.size()) != models.cfg.embed_dim)
        throw dimension_error("condition length does not match embed_dim");
    Tensor<T> cvec({models.cfg.embed_dim});
    double norm = 0;
    for (size_t i = 0; i < cond.size(); ++i) norm += static_cast<double>(cond[i]) * cond[i];
    norm = std::sqrt(norm);
    for (size_t i = 0; i < cond.size(); ++i)
        cvec[static_cast<int64_t>(i)] = static_cast<T>(norm > 1e-12 ? cond[i] / norm : cond[i]);
    Tensor<T> z = sample_latent(models.diffusion, cvec, steps, seed, guidance);
    Tape<T> tape;
    tape.set_recording(false);
    Ctx<T> ctx{tape, false, nullptr};
    auto wave = models.codec.decode(ctx, constant(z));
    WaveformRecord rec;
    rec.samples.resize(static_cast<size_t>(wave->value.numel()));
    float mn = 1e30f, mx = -1e30f;
    for (int64_t i = 0; i < wave->value.numel(); ++i) {
        rec.samples[static_cast<size_t>(i)] = static_cast<float>(wave->value[i]);
        mn = std::min(mn, rec.samples[static_cast<size_t>(i)]);
        mx = std::max(mx, rec.samples[static_cast<size_t>(i)]);
    }
    if (mx > mn)
        for (auto& v : rec.samples) v = (v - mn) / (mx - mn);
    detect_signal_bounds(rec.samples, rec.signal_start, rec.signal_end);
    return rec;
}

// ------------------------------ diffusion stage ------------------------------

struct DiffusionTrainConfig {
    int64_t steps = 800;
    int64_t batch = 16;
    double lr = 1e-4;
    int64_t warmup = 20;
    uint64_t seed = 0;
    SemaConfig sema;
};

// Trains the latent denoiser on (quantized latent, pixel embedding)
// pairs gathered from the frozen codec and image model. Upstream
// registries must be frozen (requires_grad = false everywhere).
template <typename T>
void train_diffusion(Models<T>& models, const SynthScene& scene, const DiffusionTrainConfig& cfg,
                     Checkpoint<T>* capture_into = nullptr) {
    if (!models.all_frozen(models.reg_image) || !models.all_frozen(models.reg_codec))
        throw state_error("diffusion training requires the image model and waveform codec to be frozen");

    // gather training pairs from the train split
    std::vector<Tensor<T>> latents;
    std::vector<Tensor<T>> conds;
    for (const auto& tile : scene.tiles) {
        if (is_test_tile(tile.index) || tile.waveforms.empty()) continue;
        Tensor<float> ovmap = embed_image(models, tile.image, Provenance::OV);
        int64_t w = ovmap.shape[1], c = ovmap.shape[2];
        for (const auto& rec : tile.waveforms) {
            latents.push_back(quantized_latent(models, rec));
            Tensor<T> cv({c});
            const float* px = ovmap.ptr() + (static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)) * c;
            double norm = 0;
            for (int64_t j = 0; j < c; ++j) norm += static_cast<double>(px[j]) * px[j];
            norm = std::sqrt(norm);
            for (int64_t j = 0; j < c; ++j) cv[j] = static_cast<T>(norm > 1e-12 ? px[j] / norm : px[j]);
            conds.push_back(cv);
        }
    }
    if (latents.size() < 2) throw state_error("diffusion training needs at least 2 waveform latents");

    OptimConfig oc = OptimConfig::adamw(cfg.lr, 0.01);
    oc.warmup_steps = cfg.warmup;
    oc.total_steps = cfg.steps;
    Optimizer<T> opt(oc);
    Sema<T> sema(cfg.sema);
    sema.init(models.reg_diffusion);

    for (int64_t step = 0; step < cfg.steps; ++step) {
        Tape<T> tape;
        Rng rng = Rng(cfg.seed).stream(40000).stream(static_cast<uint64_t>(step));
        Ctx<T> ctx{tape, true, &rng};
        Value<T> loss;
        for (int64_t b = 0; b < cfg.batch; ++b) {
            size_t pick = static_cast<size_t>(rng.uniform_index(latents.size()));
            int64_t t = 1 + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(models.diffusion.schedule.steps)));
            Tensor<T> eps = Tensor<T>::randn(latents[pick].shape, rng);
            auto l = models.diffusion.train_step_loss(ctx, latents[pick], &conds[pick], t, eps, rng,
                                                      models.cfg.cond_drop_prob);
            loss = loss ? add(tape, loss, l) : l;
        }
        loss = mul_scalar(tape, loss, 1.0 / static_cast<double>(cfg.batch));
        if (!std::isfinite(static_cast<double>(loss->value[0])))
            throw numeric_error("diffusion training diverged at step " + std::to_string(step));
        models.reg_diffusion.zero_grad();
        tape.backward(loss);
        opt.step(models.reg_diffusion);
        sema.update(models.reg_diffusion, step + 1);
    }
    if (capture_into) capture_into->capture("diffusion", models.reg_diffusion, cfg.steps, &opt, &sema);
}

// ------------------------------ fine-tuning ------------------------------

struct FinetuneConfig {
    int64_t steps = 300;
    int64_t batch_tiles = 2;
    double lr = 2e-4;
    uint64_t seed = 0;
    int64_t eval_every = 50;
    int64_t patience = 20;  // non-improving evals before stopping
};

enum class FinetuneTask { Height, LandClass };

// Freezes everything but the last NA layers, attaches a task head on the
// matching decoder output and trains with L1 (regression at waveform
// pixels) or cross entropy (dense classification).
template <typename T>
struct FinetuneResult {
    TaskHead<T> head;
    ParamRegistry<T> reg_head;
    double best_eval = 0;
};

template <typename T>
FinetuneResult<T> finetune(Models<T>& models, const SynthScene& scene, FinetuneTask task, const FinetuneConfig& cfg) {
    models.set_requires_grad(models.reg_temporal, false);
    models.set_requires_grad(models.reg_codec, false);
    models.image.apply_finetune_freeze(models.reg_image, "image_model");

    Rng init = Rng(cfg.seed).stream(777);
    FinetuneResult<T> out;
    int64_t out_dim = task == FinetuneTask::Height ? 1 : models.cfg.classes;
    out.head.init(init, models.cfg.embed_dim, out_dim);
    out.head.reg(out.reg_head, "finetune_head");

    ParamRegistry<T> trainable;
    for (auto& [n, p] : models.reg_image.params)
        if (p->requires_grad) trainable.add(n, p);
    for (auto& [n, p] : out.reg_head.params) trainable.add(n, p);

    OptimConfig oc = OptimConfig::adamw(cfg.lr, 0.01);
    oc.total_steps = cfg.steps;
    Optimizer<T> opt(oc);

    std::vector<int64_t> pool;
    for (const auto& t : scene.tiles)
        if (!is_test_tile(t.index)) pool.push_back(t.index);
    if (pool.empty()) throw state_error("fine-tuning requires train tiles");
    // hold out the tail of the train pool for the plateau check
    size_t val_count = std::max<size_t>(1, pool.size() / 8);
    std::vector<int64_t> val_pool(pool.end() - static_cast<int64_t>(val_count), pool.end());
    pool.resize(pool.size() - val_count);
    if (pool.empty()) pool = val_pool;

    auto eval_loss = [&]() {
        Tape<T> tape;
        tape.set_recording(false);
        Ctx<T> ctx{tape, false, nullptr};
        double acc = 0;
        int64_t n = 0;
        for (int64_t idx : val_pool) {
            const auto& tile = scene.tiles[static_cast<size_t>(idx)];
            auto tokens = models.image.patch_embed(ctx, tile.image.template cast<T>());
            auto blocks = models.image.encode(ctx, tokens);
            auto stages = models.image.decode(ctx, blocks,
                                              task == FinetuneTask::Height ? DecoderId::Vertical
                                                                           : DecoderId::Horizontal);
            auto pred = out.head.forward(ctx, stages[0]);
            if (task == FinetuneTask::Height) {
                int64_t w = pred->value.shape[1];
                for (const auto& recw : tile.waveforms) {
                    double p = pred->value[(static_cast<int64_t>(recw.lat) * w + static_cast<int64_t>(recw.lon))];
                    acc += std::abs(p - static_cast<double>(recw.rh));
                    ++n;
                }
            } else {
                int64_t hw = pred->value.shape[0] * pred->value.shape[1];
                auto logits = reshape(tape, pred, {hw, out_dim});
                std::vector<int64_t> labels(static_cast<size_t>(hw));
                for (int64_t i = 0; i < hw; ++i) labels[static_cast<size_t>(i)] = static_cast<int64_t>(tile.class_map[i]);
                acc += static_cast<double>(cross_entropy(tape, logits, labels)->value[0]);
                ++n;
            }
        }
        return n > 0 ? acc / n : 0.0;
    };

    double best = 1e300;
    int64_t stale = 0;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        if (cfg.eval_every > 0 && step > 0 && step % cfg.eval_every == 0) {
            double v = eval_loss();
            if (v < best - 1e-9) {
                best = v;
                stale = 0;
            } else if (++stale >= cfg.patience) {
                break;
            }
        }
        Tape<T> tape;
        Rng rng = Rng(cfg.seed).stream(50000).stream(static_cast<uint64_t>(step));
        Ctx<T> ctx{tape, true, &rng};
        Value<T> loss;
        for (int64_t b = 0; b < cfg.batch_tiles; ++b) {
            const auto& tile = scene.tiles[static_cast<size_t>(pool[rng.uniform_index(pool.size())])];
            auto tokens = models.image.patch_embed(ctx, tile.image.template cast<T>());
            auto blocks = models.image.encode(ctx, tokens);
            auto stages = models.image.decode(ctx, blocks,
                                              task == FinetuneTask::Height ? DecoderId::Vertical
                                                                           : DecoderId::Horizontal);
            auto pred = out.head.forward(ctx, stages[0]);  // H x W x out_dim
            if (task == FinetuneTask::Height) {
                if (tile.waveforms.empty()) continue;
                int64_t w = pred->value.shape[1];
                auto flat = reshape(tape, pred, {pred->value.shape[0] * w, 1});
                std::vector<int64_t> pix;
                Tensor<T> target({static_cast<int64_t>(tile.waveforms.size()), 1});
                for (size_t i = 0; i < tile.waveforms.size(); ++i) {
                    const auto& recw = tile.waveforms[i];
                    pix.push_back(static_cast<int64_t>(recw.lat) * w + static_cast<int64_t>(recw.lon));
                    target[static_cast<int64_t>(i)] = static_cast<T>(recw.rh);
                }
                auto l = l1_loss(tape, gather_rows(tape, flat, pix), constant(target));
                loss = loss ? add(tape, loss, l) : l;
            } else {
                int64_t hw = pred->value.shape[0] * pred->value.shape[1];
                auto logits = reshape(tape, pred, {hw, out_dim});
                std::vector<int64_t> labels(static_cast<size_t>(hw));
                for (int64_t i = 0; i < hw; ++i) labels[static_cast<size_t>(i)] = static_cast<int64_t>(tile.class_map[i]);
                auto l = cross_entropy(tape, logits, labels);
                loss = loss ? add(tape, loss, l) : l;
            }
        }
        if (!loss) continue;
        models.reg_image.zero_grad();
        out.reg_head.zero_grad();
        tape.backward(loss);
        opt.step(trainable);
    }
    out.best_eval = best;
    return out;
}

}  // namespace pixelwave
