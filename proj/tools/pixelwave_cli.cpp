// pixelwave command line: synthetic scenes, pre-training, embedding
// export, retrieval databases, zero-shot retrieval, waveform generation,
// fine-tuning, evaluation and plots. All randomness flows from explicit
// --seed flags; PIXELWAVE_THREADS is the only environment variable read.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pixelwave/parallel.hpp"
#include "pixelwave/pipeline.hpp"
#include "pixelwave/plot_io.hpp"

namespace fs = std::filesystem;
using namespace pixelwave;

namespace {

using ModelsF = Models<float>;

struct LoadedModels {
    PipelineConfig cfg;
    Checkpoint<float> ck;
    std::unique_ptr<ModelsF> models;
};

LoadedModels load_models(const std::string& ckpt_path) {
    LoadedModels lm;
    lm.ck = load_checkpoint<float>(ckpt_path);
    lm.cfg = PipelineConfig::from_json(nlohmann::json::parse(lm.ck.config_json));
    lm.models = std::make_unique<ModelsF>(lm.cfg, 0);
    lm.ck.restore("image_model", lm.models->reg_image);
    lm.ck.restore("temporal_ae", lm.models->reg_temporal);
    lm.ck.restore("waveform_codec", lm.models->reg_codec);
    if (lm.ck.sections.count("diffusion")) lm.ck.restore("diffusion", lm.models->reg_diffusion);
    return lm;
}

std::vector<const TileSample*> split_tiles(const SynthScene& scene, const std::string& split) {
    std::vector<const TileSample*> out;
    for (const auto& t : scene.tiles) {
        bool test = is_test_tile(t.index);
        if (split == "all" || (split == "test" && test) || (split == "train" && !test)) out.push_back(&t);
    }
    if (out.empty()) throw input_error("split '" + split + "' selects no tiles");
    return out;
}

Provenance parse_provenance(const std::string& s) {
    if (s == "ov") return Provenance::OV;
    if (s == "oh") return Provenance::OH;
    if (s == "ow") return Provenance::OW;
    throw input_error("unknown embedding source '" + s + "' (expected ov|oh|ow)");
}

// Per-pixel queries of a pixel-keyed DB need the same map source as the
// keys; waveform-keyed DBs are queried at waveform pixels.
struct QueryBatch {
    std::vector<std::vector<float>> queries;
    std::vector<float> scalar_refs;     // rh/cover/pai truth
    std::vector<int32_t> class_refs;
    std::vector<const WaveformRecord*> waveform_refs;
};

QueryBatch collect_waveform_pixel_queries(ModelsF& models, const std::vector<const TileSample*>& tiles,
                                          Provenance source, const std::string& label) {
    QueryBatch qb;
    for (const auto* tile : tiles) {
        if (tile->waveforms.empty()) continue;
        Tensor<float> map = embed_image(models, tile->image, source);
        int64_t w = map.shape[1], c = map.shape[2];
        for (const auto& rec : tile->waveforms) {
            const float* px = map.ptr() + (static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)) * c;
            qb.queries.emplace_back(px, px + c);
            if (label == "rh") qb.scalar_refs.push_back(rec.rh);
            else if (label == "cover") qb.scalar_refs.push_back(rec.cover);
            else if (label == "pai") qb.scalar_refs.push_back(rec.pai);
            qb.waveform_refs.push_back(&rec);
        }
    }
    if (qb.queries.empty()) throw input_error("no waveform-bearing pixels in the selected split");
    return qb;
}

QueryBatch collect_class_pixel_queries(ModelsF& models, const std::vector<const TileSample*>& tiles,
                                       Provenance source, int64_t stride) {
    QueryBatch qb;
    for (const auto* tile : tiles) {
        Tensor<float> map = embed_image(models, tile->image, source);
        int64_t h = map.shape[0], w = map.shape[1], c = map.shape[2];
        for (int64_t i = 0; i < h; i += stride)
            for (int64_t j = 0; j < w; j += stride) {
                const float* px = map.ptr() + (i * w + j) * c;
                qb.queries.emplace_back(px, px + c);
                qb.class_refs.push_back(static_cast<int32_t>(tile->class_map.at(i, j)));
            }
    }
    if (qb.queries.empty()) throw input_error("no pixels in the selected split");
    return qb;
}

EmbeddingDB build_database(ModelsF& models, const SynthScene& scene, const std::string& keys,
                           const std::string& label, const std::string& split, int64_t stride, int64_t window) {
    auto tiles = split_tiles(scene, split);
    Provenance prov = parse_provenance(keys);
    if (prov == Provenance::OW) {
        std::vector<WaveformRecord> records;
        for (const auto* t : tiles)
            for (const auto& r : t->waveforms) records.push_back(r);
        if (records.empty()) throw input_error("no waveforms in the selected split");
        Tensor<float> emb = embed_waveforms(models, records);
        if (label == "waveform") return build_db(emb, std::move(records), prov);
        std::vector<float> vals;
        for (const auto& r : records)
            vals.push_back(label == "rh" ? r.rh : label == "cover" ? r.cover : r.pai);
        if (label != "rh" && label != "cover" && label != "pai")
            throw input_error("waveform-keyed databases accept labels rh|cover|pai|waveform");
        return build_db(emb, std::move(vals), prov);
    }
    // pixel-keyed database
    std::vector<float> keybuf;
    std::vector<int32_t> class_labels;
    std::vector<float> scalar_labels;
    int64_t dim = 0;
    for (const auto* tile : tiles) {
        Tensor<float> map = embed_image(models, tile->image, prov);
        if (window > 1) map = window_average(map, window);
        int64_t h = map.shape[0], w = map.shape[1];
        dim = map.shape[2];
        int64_t off = window > 1 ? window / 2 : 0;
        for (int64_t i = 0; i < h; i += stride)
            for (int64_t j = 0; j < w; j += stride) {
                const float* px = map.ptr() + (i * w + j) * dim;
                keybuf.insert(keybuf.end(), px, px + dim);
                if (label == "class")
                    class_labels.push_back(static_cast<int32_t>(tile->class_map.at(i + off, j + off)));
                else if (label == "rh")
                    scalar_labels.push_back(tile->height_map.at(i + off, j + off));
                else if (label == "cover")
                    scalar_labels.push_back(tile->cover_map.at(i + off, j + off));
                else if (label == "pai")
                    scalar_labels.push_back(tile->pai_map.at(i + off, j + off));
                else
                    throw input_error("pixel-keyed databases accept labels class|rh|cover|pai");
            }
    }
    int64_t n = static_cast<int64_t>(keybuf.size()) / dim;
    Tensor<float> keys_t({n, dim}, std::move(keybuf));
    if (label == "class") return build_db(keys_t, std::move(class_labels), prov);
    return build_db(keys_t, std::move(scalar_labels), prov);
}

struct EvalResult {
    double rmse = 0, pearson = 0, wf1 = 0, mean_r = 0;
    int64_t count = 0;
};

EvalResult eval_scalar_task(ModelsF& models, const SynthScene& scene, const EmbeddingDB& db,
                            const std::string& label, int64_t k, const std::string& split) {
    auto qb = collect_waveform_pixel_queries(models, split_tiles(scene, split), Provenance::OV, label);
    int64_t kk = std::min<int64_t>(k, db.size());
    std::vector<double> preds(qb.queries.size()), refs(qb.queries.size());
    parallel_for(static_cast<int64_t>(qb.queries.size()), [&](int64_t i) {
        auto nb = knn_query(db, qb.queries[static_cast<size_t>(i)], kk);
        preds[static_cast<size_t>(i)] = weighted_mean(db, nb);
        refs[static_cast<size_t>(i)] = qb.scalar_refs[static_cast<size_t>(i)];
    });
    EvalResult r;
    r.rmse = metric_rmse(preds, refs);
    r.pearson = metric_pearson(preds, refs);
    r.count = static_cast<int64_t>(preds.size());
    return r;
}

EvalResult eval_waveform_task(ModelsF& models, const SynthScene& scene, const EmbeddingDB& db,
                              Provenance query_source, const std::string& split) {
    auto qb = collect_waveform_pixel_queries(models, split_tiles(scene, split), query_source, "rh");
    std::vector<double> rs(qb.queries.size());
    parallel_for(static_cast<int64_t>(qb.queries.size()), [&](int64_t i) {
        auto nb = knn_query(db, qb.queries[static_cast<size_t>(i)], 1);
        const auto& retrieved = top1_waveform(db, nb);
        rs[static_cast<size_t>(i)] = metric_waveform_r(retrieved, *qb.waveform_refs[static_cast<size_t>(i)]);
    });
    EvalResult r;
    double acc = 0;
    for (double v : rs) acc += v;
    r.mean_r = acc / static_cast<double>(rs.size());
    r.count = static_cast<int64_t>(rs.size());
    return r;
}

EvalResult eval_class_task(ModelsF& models, const SynthScene& scene, const EmbeddingDB& db, int64_t k,
                           int64_t stride, const std::string& split) {
    auto qb = collect_class_pixel_queries(models, split_tiles(scene, split), db.provenance, stride);
    int64_t kk = std::min<int64_t>(k, db.size());
    std::vector<int32_t> preds(qb.queries.size());
    parallel_for(static_cast<int64_t>(qb.queries.size()), [&](int64_t i) {
        auto nb = knn_query(db, qb.queries[static_cast<size_t>(i)], kk);
        preds[static_cast<size_t>(i)] = weighted_vote(db, nb);
    });
    EvalResult r;
    r.wf1 = metric_weighted_f1(preds, qb.class_refs);
    r.count = static_cast<int64_t>(preds.size());
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-level cross-modal alignment pipeline"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic scene");
    SynthConfig sc;
    std::string synth_out;
    synth->add_option("--seed", sc.seed, "scene seed");
    synth->add_option("--tiles", sc.tiles, "tile count");
    synth->add_option("--height", sc.height, "tile height");
    synth->add_option("--width", sc.width, "tile width");
    synth->add_option("--channels", sc.channels, "image channels");
    synth->add_option("--frames", sc.frames, "temporal frames");
    synth->add_option("--classes", sc.classes, "land class count");
    synth->add_option("--rate", sc.waveform_rate, "expected waveforms per 64x64 tile");
    synth->add_option("--out", synth_out, "output scene directory")->required();

    // ---- pretrain ----
    auto* pre = app.add_subcommand("pretrain", "run combined pre-training (plus optional diffusion stage)");
    std::string pre_data, pre_out, pre_log, pre_resume, pre_config;
    TrainConfig tc;
    DiffusionTrainConfig dtc;
    PipelineConfig pc_flags;
    bool flag_shared_decoder = false, flag_single_stage = false;
    std::string pw_loss = "zero_cl", pp_loss = "vicreg";
    int64_t flag_embed_dim = -1;
    pre->add_option("--data", pre_data, "scene directory")->required();
    pre->add_option("--out", pre_out, "output checkpoint")->required();
    pre->add_option("--config", pre_config, "pipeline config JSON file");
    pre->add_option("--steps", tc.steps, "training steps");
    pre->add_option("--batch", tc.batch_tiles, "tiles per step");
    pre->add_option("--lr", tc.lr, "learning rate");
    pre->add_option("--weight-decay", tc.weight_decay, "decoupled weight decay");
    pre->add_option("--warmup", tc.warmup_steps, "warmup steps");
    pre->add_option("--seed", tc.seed, "training seed");
    pre->add_option("--log", pre_log, "loss component CSV path");
    pre->add_option("--resume", pre_resume, "resume from checkpoint");
    pre->add_option("--embed-dim", flag_embed_dim, "embedding width D_p");
    std::string opt_kind = "lion";
    pre->add_option("--optimizer", opt_kind, "lion|adamw");
    pre->add_flag("--shared-decoder", flag_shared_decoder, "ablation: single decoder for both outputs");
    pre->add_flag("--single-stage", flag_single_stage, "ablation: pixel-pixel loss on stage 1 only");
    pre->add_option("--pw-loss", pw_loss, "pixel-waveform loss: zero_cl|vicreg");
    pre->add_option("--pp-loss", pp_loss, "pixel-pixel loss: vicreg|zero_cl");
    pre->add_option("--diffusion-steps", tc.diffusion_steps, "denoiser training steps after pre-training");
    pre->add_option("--diffusion-batch", tc.diffusion_batch, "denoiser batch size");
    pre->add_option("--diffusion-lr", tc.diffusion_lr, "denoiser learning rate");

    // ---- embed ----
    auto* emb = app.add_subcommand("embed", "export embedding maps / waveform embeddings");
    std::string emb_ckpt, emb_data, emb_what = "ov", emb_split = "all", emb_out;
    emb->add_option("--ckpt", emb_ckpt)->required();
    emb->add_option("--data", emb_data)->required();
    emb->add_option("--what", emb_what, "ov|oh|ow");
    emb->add_option("--split", emb_split, "train|test|all");
    emb->add_option("--out", emb_out, "output directory")->required();

    // ---- build-db ----
    auto* bdb = app.add_subcommand("build-db", "build a retrieval database");
    std::string bdb_ckpt, bdb_data, bdb_keys = "ow", bdb_label = "rh", bdb_split = "train", bdb_out;
    int64_t bdb_stride = 1, bdb_window = 0;
    bdb->add_option("--ckpt", bdb_ckpt)->required();
    bdb->add_option("--data", bdb_data)->required();
    bdb->add_option("--keys", bdb_keys, "ov|oh|ow");
    bdb->add_option("--label", bdb_label, "rh|cover|pai|class|waveform");
    bdb->add_option("--split", bdb_split, "train|test|all");
    bdb->add_option("--stride", bdb_stride, "pixel stride for pixel-keyed databases");
    bdb->add_option("--window", bdb_window, "window averaging size (0 = off)");
    bdb->add_option("--out", bdb_out)->required();

    // ---- retrieve ----
    auto* ret = app.add_subcommand("retrieve", "KNN retrieval, one CSV row per query");
    std::string ret_ckpt, ret_data, ret_db, ret_query = "ov", ret_split = "test", ret_out;
    int64_t ret_k = 50, ret_stride = 4;
    ret->add_option("--ckpt", ret_ckpt)->required();
    ret->add_option("--data", ret_data)->required();
    ret->add_option("--db", ret_db)->required();
    ret->add_option("--query", ret_query, "ov|oh");
    ret->add_option("--k", ret_k, "neighbors");
    ret->add_option("--split", ret_split);
    ret->add_option("--stride", ret_stride, "pixel stride for class queries");
    ret->add_option("--out", ret_out, "results CSV")->required();

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "conditional waveform generation");
    std::string gen_ckpt, gen_data, gen_out;
    uint64_t gen_seed = 0;
    int64_t gen_steps = 30, gen_count = 16;
    double gen_guidance = 3.0;
    gen->add_option("--ckpt", gen_ckpt)->required();
    gen->add_option("--data", gen_data)->required();
    gen->add_option("--seed", gen_seed, "sampling seed");
    gen->add_option("--steps", gen_steps, "diffusion steps");
    gen->add_option("--guidance", gen_guidance, "classifier-free guidance scale");
    gen->add_option("--count", gen_count, "number of test waveforms to condition on");
    gen->add_option("--out", gen_out, "output directory")->required();

    // ---- finetune ----
    auto* fin = app.add_subcommand("finetune", "freeze backbone, train a task head");
    std::string fin_ckpt, fin_data, fin_task = "height", fin_out;
    FinetuneConfig fc;
    fin->add_option("--ckpt", fin_ckpt)->required();
    fin->add_option("--data", fin_data)->required();
    fin->add_option("--task", fin_task, "height|class");
    fin->add_option("--steps", fc.steps);
    fin->add_option("--lr", fc.lr);
    fin->add_option("--seed", fc.seed);
    fin->add_option("--batch", fc.batch_tiles);
    fin->add_option("--eval-every", fc.eval_every);
    fin->add_option("--patience", fc.patience);
    fin->add_option("--out", fin_out)->required();

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "task metrics on a split");
    std::string ev_ckpt, ev_data, ev_db, ev_task = "rh", ev_split = "test";
    int64_t ev_k = 50, ev_stride = 4;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--db", ev_db, "retrieval database (not used by height-head)");
    ev->add_option("--task", ev_task, "rh|cover|pai|class|waveform|height-head");
    ev->add_option("--k", ev_k);
    ev->add_option("--split", ev_split);
    ev->add_option("--stride", ev_stride);

    // ---- plot ----
    auto* plt = app.add_subcommand("plot", "emit CSV summaries, PGM maps and SVG waveform overlays");
    std::string plt_data, plt_out, plt_ckpt, plt_db;
    int64_t plt_count = 4;
    uint64_t plt_seed = 0;
    plt->add_option("--data", plt_data)->required();
    plt->add_option("--out", plt_out)->required();
    plt->add_option("--ckpt", plt_ckpt, "optional checkpoint for retrieval/generation overlays");
    plt->add_option("--db", plt_db, "optional waveform database for retrieval overlays");
    plt->add_option("--count", plt_count, "tiles / waveforms to plot");
    plt->add_option("--seed", plt_seed, "generation seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            auto scene = synth_scene(sc);
            save_scene(synth_out, scene);
            int64_t waves = 0;
            for (auto& t : scene.tiles) waves += static_cast<int64_t>(t.waveforms.size());
            std::cout << "scene " << synth_out << ": " << scene.tiles.size() << " tiles, " << waves
                      << " waveforms\n";
            return 0;
        }

        if (*pre) {
            auto scene = load_scene(pre_data);
            PipelineConfig pc = PipelineConfig::matching(scene.cfg);
            if (!pre_config.empty()) {
                std::ifstream cf(pre_config);
                if (!cf) throw state_error("cannot read config " + pre_config);
                pc = PipelineConfig::from_json(nlohmann::json::parse(cf));
            }
            if (flag_embed_dim > 0) pc.embed_dim = flag_embed_dim;
            pc.shared_decoder = flag_shared_decoder;
            tc.loss_csv = pre_log;
            tc.pixel_waveform_loss = pw_loss == "vicreg" ? PairLoss::Vicreg : PairLoss::ZeroCl;
            tc.pixel_pixel_loss = pp_loss == "zero_cl" ? PairLoss::ZeroCl : PairLoss::Vicreg;
            tc.hierarchical_stages = flag_single_stage ? 1 : 4;
            tc.optimizer = opt_kind == "adamw" ? OptimizerKind::AdamW : OptimizerKind::Lion;
            ModelsF models(pc, tc.seed);
            Pretrainer<float> trainer(models, scene, tc);
            if (!pre_resume.empty()) trainer.restore(load_checkpoint<float>(pre_resume, pc.json()));
            trainer.run(pre_out + ".aborted");
            Checkpoint<float> ck = trainer.checkpoint();
            if (tc.diffusion_steps > 0) {
                models.set_requires_grad(models.reg_image, false);
                models.set_requires_grad(models.reg_temporal, false);
                models.set_requires_grad(models.reg_codec, false);
                dtc.steps = tc.diffusion_steps;
                dtc.batch = tc.diffusion_batch;
                dtc.lr = tc.diffusion_lr;
                dtc.warmup = std::min<int64_t>(tc.diffusion_warmup, tc.diffusion_steps / 10);
                dtc.seed = tc.seed + 1;
                train_diffusion(models, scene, dtc, &ck);
            }
            save_checkpoint(pre_out, ck);
            for (auto& w : trainer.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << "checkpoint " << pre_out << " (" << trainer.step_done << " steps";
            if (tc.diffusion_steps > 0) std::cout << " + " << tc.diffusion_steps << " diffusion steps";
            std::cout << ")\n";
            return 0;
        }

        if (*emb) {
            auto lm = load_models(emb_ckpt);
            auto scene = load_scene(emb_data);
            fs::create_directories(emb_out);
            auto tiles = split_tiles(scene, emb_split);
            if (emb_what == "ow") {
                std::vector<WaveformRecord> records;
                for (auto* t : tiles)
                    for (auto& r : t->waveforms) records.push_back(r);
                Tensor<float> e = embed_waveforms(*lm.models, records);
                save_tensor_file((fs::path(emb_out) / ("ow_" + emb_split + ".dten")).string(), e);
                std::cout << "wrote " << records.size() << " waveform embeddings\n";
            } else {
                Provenance prov = parse_provenance(emb_what);
                char name[48];
                for (auto* t : tiles) {
                    Tensor<float> map = embed_image(*lm.models, t->image, prov);
                    std::snprintf(name, sizeof(name), "%s_%04lld.dten", emb_what.c_str(),
                                  static_cast<long long>(t->index));
                    save_tensor_file((fs::path(emb_out) / name).string(), map);
                }
                std::cout << "wrote " << tiles.size() << " embedding maps\n";
            }
            return 0;
        }

        if (*bdb) {
            auto lm = load_models(bdb_ckpt);
            auto scene = load_scene(bdb_data);
            EmbeddingDB db = build_database(*lm.models, scene, bdb_keys, bdb_label, bdb_split, bdb_stride, bdb_window);
            save_db(bdb_out, db);
            std::cout << "database " << bdb_out << ": " << db.size() << " keys of dim " << db.dim() << "\n";
            return 0;
        }

        if (*ret) {
            auto lm = load_models(ret_ckpt);
            auto scene = load_scene(ret_data);
            EmbeddingDB db = load_db(ret_db);
            QueryBatch qb = db.kind == LabelKind::ClassId
                                ? collect_class_pixel_queries(*lm.models, split_tiles(scene, ret_split),
                                                              parse_provenance(ret_query), ret_stride)
                                : collect_waveform_pixel_queries(*lm.models, split_tiles(scene, ret_split),
                                                                 parse_provenance(ret_query), "rh");
            int64_t kk = std::min<int64_t>(ret_k, db.size());
            std::ofstream csv(ret_out);
            if (!csv) throw state_error("cannot open " + ret_out);
            csv << "query,indices,similarities,prediction\n";
            std::vector<std::string> rows(qb.queries.size());
            parallel_for(static_cast<int64_t>(qb.queries.size()), [&](int64_t i) {
                auto nb = knn_query(db, qb.queries[static_cast<size_t>(i)], kk);
                std::ostringstream row;
                row << i << ",\"";
                for (size_t j = 0; j < nb.size(); ++j) row << (j ? " " : "") << nb[j].index;
                row << "\",\"";
                for (size_t j = 0; j < nb.size(); ++j) row << (j ? " " : "") << nb[j].similarity;
                row << "\",";
                if (db.kind == LabelKind::ClassId)
                    row << weighted_vote(db, nb);
                else if (db.kind == LabelKind::Scalar)
                    row << weighted_mean(db, nb);
                else
                    row << nb.front().index;
                rows[static_cast<size_t>(i)] = row.str();
            });
            for (auto& r : rows) csv << r << "\n";
            std::cout << "wrote " << rows.size() << " rows to " << ret_out << "\n";
            return 0;
        }

        if (*gen) {
            auto lm = load_models(gen_ckpt);
            if (!lm.ck.sections.count("diffusion"))
                throw state_error("checkpoint has no trained diffusion section");
            if (!lm.ck.sections.count("waveform_codec"))
                throw state_error("checkpoint has no waveform decoder section");
            auto scene = load_scene(gen_data);
            fs::create_directories(gen_out);
            auto qb = collect_waveform_pixel_queries(*lm.models, split_tiles(scene, "test"), Provenance::OV,
                                                     "rh");
            int64_t count = std::min<int64_t>(gen_count, static_cast<int64_t>(qb.queries.size()));
            std::ofstream csv(fs::path(gen_out) / "generated.csv");
            csv << "sample,r\n";
            double mean_r = 0;
            std::vector<WaveformRecord> generated;
            for (int64_t i = 0; i < count; ++i) {
                auto rec = generate_waveform(*lm.models, qb.queries[static_cast<size_t>(i)],
                                             gen_seed + static_cast<uint64_t>(i), gen_steps, gen_guidance);
                double r = metric_waveform_r(rec, *qb.waveform_refs[static_cast<size_t>(i)]);
                mean_r += r;
                csv << i << "," << r << "\n";
                generated.push_back(std::move(rec));
            }
            save_waveforms_file((fs::path(gen_out) / "generated.dwav").string(), generated);
            std::cout << "mean r " << mean_r / static_cast<double>(count) << " over " << count << " samples\n";
            return 0;
        }

        if (*fin) {
            auto lm = load_models(fin_ckpt);
            auto scene = load_scene(fin_data);
            FinetuneTask task = fin_task == "class" ? FinetuneTask::LandClass : FinetuneTask::Height;
            auto res = finetune(*lm.models, scene, task, fc);
            Checkpoint<float> ck = lm.ck;
            ck.capture("image_model", lm.models->reg_image, fc.steps);
            ck.capture("finetune_head", res.reg_head, fc.steps);
            save_checkpoint(fin_out, ck);
            std::cout << "fine-tuned head (" << fin_task << ") saved to " << fin_out << "\n";
            return 0;
        }

        if (*ev) {
            auto lm = load_models(ev_ckpt);
            auto scene = load_scene(ev_data);
            if (ev_task == "height-head") {
                if (!lm.ck.sections.count("finetune_head"))
                    throw state_error("checkpoint has no fine-tuned head section");
                Rng init(0);
                TaskHead<float> head;
                head.init(init, lm.cfg.embed_dim, 1);
                ParamRegistry<float> reg;
                head.reg(reg, "finetune_head");
                lm.ck.restore("finetune_head", reg);
                std::vector<double> preds, refs;
                Tape<float> tape;
                tape.set_recording(false);
                Ctx<float> ctx{tape, false, nullptr};
                for (const auto* tile : split_tiles(scene, ev_split)) {
                    if (tile->waveforms.empty()) continue;
                    auto tokens = lm.models->image.patch_embed(ctx, tile->image);
                    auto blocks = lm.models->image.encode(ctx, tokens);
                    auto stages = lm.models->image.decode(ctx, blocks, DecoderId::Vertical);
                    auto pred = head.forward(ctx, stages[0]);
                    int64_t w = pred->value.shape[1];
                    for (const auto& rec : tile->waveforms) {
                        preds.push_back(pred->value[static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)]);
                        refs.push_back(rec.rh);
                    }
                }
                std::cout << "RMSE " << metric_rmse(preds, refs) << "\n";
                std::cout << "r " << metric_pearson(preds, refs) << "\n";
                return 0;
            }
            if (ev_db.empty()) throw input_error("eval task '" + ev_task + "' requires --db");
            EmbeddingDB db = load_db(ev_db);
            if (ev_task == "class") {
                auto r = eval_class_task(*lm.models, scene, db, ev_k, ev_stride, ev_split);
                std::cout << "wF1 " << r.wf1 << "\n";
            } else if (ev_task == "waveform") {
                auto r = eval_waveform_task(*lm.models, scene, db, Provenance::OV, ev_split);
                std::cout << "r " << r.mean_r << "\n";
            } else {
                auto r = eval_scalar_task(*lm.models, scene, db, ev_task, ev_k, ev_split);
                std::cout << "RMSE " << r.rmse << "\n";
                std::cout << "r " << r.pearson << "\n";
            }
            return 0;
        }

        if (*plt) {
            auto scene = load_scene(plt_data);
            fs::create_directories(plt_out);
            std::ofstream csv(fs::path(plt_out) / "scene_summary.csv");
            csv << "tile,waveforms,mean_height,mean_cover\n";
            int64_t plotted = 0;
            for (const auto& tile : scene.tiles) {
                double mh = 0, mc = 0;
                for (int64_t i = 0; i < tile.height_map.numel(); ++i) {
                    mh += tile.height_map[i];
                    mc += tile.cover_map[i];
                }
                mh /= tile.height_map.numel();
                mc /= tile.cover_map.numel();
                csv << tile.index << "," << tile.waveforms.size() << "," << mh << "," << mc << "\n";
                if (plotted < plt_count) {
                    char name[48];
                    std::snprintf(name, sizeof(name), "tile_%04lld_height.pgm", static_cast<long long>(tile.index));
                    write_pgm((fs::path(plt_out) / name).string(), tile.height_map);
                    std::snprintf(name, sizeof(name), "tile_%04lld_cover.pgm", static_cast<long long>(tile.index));
                    write_pgm((fs::path(plt_out) / name).string(), tile.cover_map);
                    std::snprintf(name, sizeof(name), "tile_%04lld_class.pgm", static_cast<long long>(tile.index));
                    write_pgm((fs::path(plt_out) / name).string(), tile.class_map);
                    ++plotted;
                }
            }
            // waveform overlays: reference plus retrieval / generation when available
            std::unique_ptr<LoadedModels> lm;
            std::unique_ptr<EmbeddingDB> db;
            if (!plt_ckpt.empty()) lm = std::make_unique<LoadedModels>(load_models(plt_ckpt));
            if (!plt_db.empty()) db = std::make_unique<EmbeddingDB>(load_db(plt_db));
            int64_t drawn = 0;
            for (const auto& tile : scene.tiles) {
                if (drawn >= plt_count) break;
                if (!is_test_tile(tile.index) || tile.waveforms.empty()) continue;
                Tensor<float> ovmap;
                if (lm) ovmap = embed_image(*lm->models, tile.image, Provenance::OV);
                for (const auto& rec : tile.waveforms) {
                    if (drawn >= plt_count) break;
                    std::vector<WaveformTrace> traces;
                    traces.push_back({"reference", "gray", rec.samples});
                    if (lm && db && db->kind == LabelKind::Waveform) {
                        int64_t w = ovmap.shape[1], c = ovmap.shape[2];
                        const float* px =
                            ovmap.ptr() + (static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)) * c;
                        auto nb = knn_query(*db, px, c, 1);
                        traces.push_back({"retrieved", "steelblue", top1_waveform(*db, nb).samples});
                        if (lm->ck.sections.count("diffusion")) {
                            auto genrec = generate_waveform(*lm->models, std::vector<float>(px, px + c),
                                                            plt_seed + static_cast<uint64_t>(drawn), 30, 3.0);
                            traces.push_back({"generated", "seagreen", genrec.samples});
                        }
                    }
                    char name[48];
                    std::snprintf(name, sizeof(name), "waveform_%04lld_%02lld.svg",
                                  static_cast<long long>(tile.index), static_cast<long long>(drawn));
                    write_waveform_svg((fs::path(plt_out) / name).string(), traces);
                    ++drawn;
                }
            }
            std::cout << "plots written to " << plt_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        nlohmann::json err{{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
