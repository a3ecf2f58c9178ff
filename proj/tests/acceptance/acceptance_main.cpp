// Acceptance suite: one pass/fail line per criterion. Property-based
// checks plus seeded synthetic-data directional checks; every tolerance
// is pinned here in code.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pixelwave/grad_check.hpp"
#include "pixelwave/parallel.hpp"
#include "pixelwave/pipeline.hpp"
#include "../test_support.hpp"

using namespace pixelwave;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Criterion {
    std::string name;
    std::vector<std::string> failures;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    explicit Criterion(std::string n) : name(std::move(n)) {}

    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }

    void finish() {
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (failures.empty()) {
            std::printf("[PASS] %s (%.1fs)\n", name.c_str(), secs);
        } else {
            ++g_failures;
            std::printf("[FAIL] %s (%.1fs)\n", name.c_str(), secs);
            for (auto& f : failures) std::printf("       - %s\n", f.c_str());
        }
        std::fflush(stdout);
    }
};

double rel_err(double got, double want) {
    return std::abs(got - want) / std::max({1e-12, std::abs(got), std::abs(want)});
}

// ---------------------------------------------------------------- 1

void criterion_formula_oracles() {
    Criterion c("criterion 1: formula-oracle equivalence (>=100 randomized instances each)");
    Rng rng(101);

    // zero_cl vs the from-scratch whitening oracle
    double worst_zero = 0;
    for (int rep = 0; rep < 100; ++rep) {
        int64_t g = 3 + static_cast<int64_t>(rng.uniform_index(4));
        int64_t d = 3 + static_cast<int64_t>(rng.uniform_index(4));
        Tensor<double> za = Tensor<double>::randn({g, d}, rng);
        Tensor<double> zb = Tensor<double>::randn({g, d}, rng);
        Tape<double> t;
        auto got = zero_cl_loss(t, constant(za), constant(zb));
        auto want = oracle::zero_cl(za, zb);
        worst_zero = std::max(worst_zero, rel_err(got.total->value[0], want.total));
    }
    c.expect(worst_zero <= 1e-8, "zero_cl rel err " + std::to_string(worst_zero));

    // vicreg + hierarchical + reconstruction
    double worst_vic = 0, worst_hier = 0, worst_rec = 0;
    for (int rep = 0; rep < 100; ++rep) {
        int64_t m = 2 + static_cast<int64_t>(rng.uniform_index(8));
        int64_t d = 2 + static_cast<int64_t>(rng.uniform_index(6));
        Tensor<double> zh = Tensor<double>::randn({m, d}, rng);
        Tensor<double> zt = Tensor<double>::randn({m, d}, rng);
        Tape<double> t;
        auto got = vicreg_loss(t, constant(zh), constant(zt));
        worst_vic = std::max(worst_vic, rel_err(got.total->value[0], oracle::vicreg(zh, zt).total));

        std::array<Value<double>, 4> hz, ht;
        double hier_want = 0;
        for (int s = 0; s < 4; ++s) {
            Tensor<double> a = Tensor<double>::randn({m, d}, rng), b = Tensor<double>::randn({m, d}, rng);
            hz[static_cast<size_t>(s)] = constant(a);
            ht[static_cast<size_t>(s)] = constant(b);
            hier_want += oracle::vicreg(a, b).total;
        }
        worst_hier = std::max(worst_hier, rel_err(hierarchical_vicreg(t, hz, ht).total->value[0], hier_want));

        Tensor<double> w = Tensor<double>::randn({8, 1}, rng), wh = Tensor<double>::randn({8, 1}, rng);
        Tensor<double> mm = Tensor<double>::randn({2, 3, 3, 2}, rng), mh = Tensor<double>::randn({2, 3, 3, 2}, rng);
        Tensor<double> ii = Tensor<double>::randn({3, 3, 2}, rng), ih = Tensor<double>::randn({3, 3, 2}, rng);
        double rec_want = 0;
        auto msev = [](const Tensor<double>& a, const Tensor<double>& b) {
            double s = 0;
            for (int64_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
            return s / a.numel();
        };
        rec_want = msev(w, wh) + msev(mm, mh) + msev(ii, ih);
        auto rec_got = reconstruction_loss(t, constant(w), constant(wh), constant(mm), constant(mh), constant(ii),
                                           constant(ih));
        worst_rec = std::max(worst_rec, rel_err(rec_got->value[0], rec_want));
    }
    c.expect(worst_vic <= 1e-8, "vicreg rel err " + std::to_string(worst_vic));
    c.expect(worst_hier <= 1e-8, "hierarchical rel err " + std::to_string(worst_hier));
    c.expect(worst_rec <= 1e-8, "reconstruction rel err " + std::to_string(worst_rec));

    // cfg_predict is the guided affine combination of its two passes
    {
        DiffusionConfig dc;
        dc.latent_len = 8;
        dc.latent_channels = 4;
        dc.cond_dim = 5;
        dc.base_width = 8;
        dc.time_dim = 16;
        DiffusionModel<double> model(dc, rng);
        double worst = 0;
        for (int rep = 0; rep < 100; ++rep) {
            Tensor<double> zt = Tensor<double>::randn({8, 4}, rng);
            Tensor<double> cond = Tensor<double>::randn({5}, rng);
            double s = rng.uniform(0.0, 4.0);
            double t_norm = rng.uniform(0.05, 0.95);
            Tape<double> tape;
            tape.set_recording(false);
            Ctx<double> ctx{tape, false, nullptr};
            auto u = model.predict(ctx, constant(zt), t_norm, nullptr);
            auto cc = model.predict(ctx, constant(zt), t_norm, &cond);
            auto got = model.cfg_predict(zt, t_norm, cond, s);
            for (int64_t i = 0; i < got.numel(); ++i) {
                double want = u->value[i] + s * (cc->value[i] - u->value[i]);
                worst = std::max(worst, std::abs(got[i] - want));
            }
        }
        c.expect(worst <= 1e-12, "cfg_predict deviation " + std::to_string(worst));
    }

    // cosine correction vs direct evaluation
    {
        double worst = 0;
        for (int rep = 0; rep < 100; ++rep) {
            double theta = rng.uniform(0.0, 89.0);
            double sigma = rng.uniform(0.0, 5.0);
            double deg = 3.14159265358979323846 / 180.0;
            double want = sigma * std::pow(std::cos(40.0 * deg), 2) / std::pow(std::cos(theta * deg), 2);
            worst = std::max(worst, rel_err(s1_cosine_correction(sigma, theta), want));
        }
        c.expect(worst <= 1e-12, "cosine correction rel err " + std::to_string(worst));
    }

    // metrics vs independent computation
    {
        double worst = 0;
        for (int rep = 0; rep < 100; ++rep) {
            int64_t n = 5 + static_cast<int64_t>(rng.uniform_index(40));
            std::vector<double> a, b;
            std::vector<int32_t> pa, pb;
            for (int64_t i = 0; i < n; ++i) {
                a.push_back(rng.normal());
                b.push_back(0.4 * a.back() + rng.normal());
                pa.push_back(static_cast<int32_t>(rng.uniform_index(4)));
                pb.push_back(static_cast<int32_t>(rng.uniform_index(4)));
            }
            // rmse
            double se = 0;
            for (int64_t i = 0; i < n; ++i) se += (a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)]) *
                                                  (a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)]);
            worst = std::max(worst, rel_err(metric_rmse(a, b), std::sqrt(se / n)));
            // pearson
            double ma = oracle::mean(a), mb = oracle::mean(b), saa = 0, sbb = 0, sab = 0;
            for (int64_t i = 0; i < n; ++i) {
                saa += (a[static_cast<size_t>(i)] - ma) * (a[static_cast<size_t>(i)] - ma);
                sbb += (b[static_cast<size_t>(i)] - mb) * (b[static_cast<size_t>(i)] - mb);
                sab += (a[static_cast<size_t>(i)] - ma) * (b[static_cast<size_t>(i)] - mb);
            }
            worst = std::max(worst, rel_err(metric_pearson(a, b), sab / std::sqrt(saa * sbb)));
            // weighted F1 via confusion counts
            double wf1 = 0;
            for (int32_t cls = 0; cls < 4; ++cls) {
                double tp = 0, fp = 0, fn = 0, support = 0;
                for (int64_t i = 0; i < n; ++i) {
                    if (pb[static_cast<size_t>(i)] == cls) ++support;
                    if (pa[static_cast<size_t>(i)] == cls && pb[static_cast<size_t>(i)] == cls) ++tp;
                    if (pa[static_cast<size_t>(i)] == cls && pb[static_cast<size_t>(i)] != cls) ++fp;
                    if (pa[static_cast<size_t>(i)] != cls && pb[static_cast<size_t>(i)] == cls) ++fn;
                }
                if (support == 0) continue;
                double prec = tp + fp > 0 ? tp / (tp + fp) : 0;
                double recall = tp + fn > 0 ? tp / (tp + fn) : 0;
                double f1 = prec + recall > 0 ? 2 * prec * recall / (prec + recall) : 0;
                wf1 += f1 * support / n;
            }
            worst = std::max(worst, std::abs(metric_weighted_f1(pa, pb) - wf1));
        }
        c.expect(worst <= 1e-8, "metric deviation " + std::to_string(worst));
    }

    // exact KNN equality on >= 100 randomized instances
    {
        bool all_equal = true;
        for (int rep = 0; rep < 100 && all_equal; ++rep) {
            int64_t n = 10 + static_cast<int64_t>(rng.uniform_index(990));
            int64_t d = 2 + static_cast<int64_t>(rng.uniform_index(10));
            Tensor<float> keys = Tensor<float>::randn({n, d}, rng);
            std::vector<float> labels(static_cast<size_t>(n), 0.f);
            auto db = build_db(keys, std::move(labels), Provenance::OW);
            std::vector<float> q(static_cast<size_t>(d));
            for (auto& v : q) v = static_cast<float>(rng.normal());
            int64_t k = 1 + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(std::min<int64_t>(n, 40))));
            auto got = knn_query(db, q, k);
            auto want = oracle::knn(db.keys, q, k);
            for (size_t i = 0; i < got.size(); ++i)
                if (got[i].index != want[i].index) all_equal = false;
        }
        c.expect(all_equal, "knn disagreed with the brute-force oracle");
    }
    c.finish();
}

// ---------------------------------------------------------------- 2

void criterion_whitening() {
    Criterion c("criterion 2: whitening identity within 1e-6 on randomized full-rank inputs");
    Rng rng(202);
    double worst_i = 0, worst_f = 0;
    for (int rep = 0; rep < 60; ++rep) {
        // instance mode full rank requires G <= D
        int64_t g = 2 + static_cast<int64_t>(rng.uniform_index(31));
        int64_t d = g + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(33 - g)));
        Tensor<double> z = Tensor<double>::randn({g, d}, rng);
        Tape<double> t;
        auto r = zca_whiten(t, constant(z), ZcaMode::Instance);
        for (int64_t i = 0; i < g; ++i)
            for (int64_t j = 0; j < g; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < d; ++k) acc += r.whitened->value.at(i, k) * r.whitened->value.at(j, k);
                worst_i = std::max(worst_i, std::abs(acc / d - (i == j ? 1.0 : 0.0)));
            }
        // feature mode full rank requires D <= G
        Tensor<double> z2 = Tensor<double>::randn({d, g}, rng);
        auto rf = zca_whiten(t, constant(z2), ZcaMode::Feature);
        for (int64_t i = 0; i < g; ++i)
            for (int64_t j = 0; j < g; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < d; ++k) acc += rf.whitened->value.at(i, k) * rf.whitened->value.at(j, k);
                worst_f = std::max(worst_f, std::abs(acc / d - (i == j ? 1.0 : 0.0)));
            }
    }
    c.expect(worst_i <= 1e-6, "instance whitening deviation " + std::to_string(worst_i));
    c.expect(worst_f <= 1e-6, "feature whitening deviation " + std::to_string(worst_f));
    c.finish();
}

// ---------------------------------------------------------------- 3

void criterion_gradients() {
    Criterion c("criterion 3: gradient suite at 1e-4 (1e-3 through the eigendecomposition)");
    Rng rng(303);
    auto check = [&](const char* name, const GradCheckFn& fn, std::vector<Tensor<double>> ins, double tol) {
        auto rep = grad_check(fn, std::move(ins), 1e-5, tol);
        c.expect(rep.passed, std::string(name) + " rel err " + std::to_string(rep.max_rel_err));
    };
    auto sq = [](Tape<double>& t, const Value<double>& v) { return sum_all(t, mul(t, v, v)); };

    for (int rep = 0; rep < 3; ++rep) {
        int64_t n = 3 + rep, m = 4 - rep % 2, cch = 2 + rep % 2;
        check("elementwise", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto y = mul(t, gelu(t, in[0]), sigmoid(t, add(t, in[0], in[1])));
            return sum_all(t, mul(t, y, tanh_op(t, in[1])));
        }, {Tensor<double>::randn({n, m}, rng), Tensor<double>::randn({n, m}, rng)}, 1e-4);

        check("matmul/softmax/layernorm", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto y = matmul(t, softmax_lastdim(t, in[0]), in[1]);
            return sq(t, layer_norm(t, y, in[2], in[3]));
        }, {Tensor<double>::randn({n, m}, rng), Tensor<double>::randn({m, 5}, rng),
            Tensor<double>::uniform({5}, rng, 0.5, 1.5), Tensor<double>::randn({5}, rng, 0.2)}, 1e-4);

        check("pixel_norm", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            Tensor<double> rm = Tensor<double>::zeros({cch}), rv = Tensor<double>::full({cch}, 1.0);
            return sq(t, pixel_norm(t, in[0], in[1], in[2], &rm, &rv, true));
        }, {Tensor<double>::randn({n, m, cch}, rng), Tensor<double>::uniform({cch}, rng, 0.5, 1.5),
            Tensor<double>::randn({cch}, rng, 0.2)}, 1e-4);

        check("conv2d", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return sq(t, conv(t, in[0], in[1], in[2], 2, {1 + rep % 2, 1}, {1, 1}));
        }, {Tensor<double>::randn({4 + rep, 5, cch}, rng), Tensor<double>::randn({3, 3, cch, 2}, rng, 0.4),
            Tensor<double>::randn({2}, rng, 0.2)}, 1e-4);

        check("conv1d transpose", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return sq(t, conv(t, in[0], in[1], in[2], 1, {2}, {1}, true));
        }, {Tensor<double>::randn({5 + rep, cch}, rng), Tensor<double>::randn({4, cch, 2}, rng, 0.4),
            Tensor<double>::randn({2}, rng, 0.2)}, 1e-4);

        check("conv3d", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return sq(t, conv(t, in[0], in[1], in[2], 3, {1, 2, 2}, {0, 1, 1}));
        }, {Tensor<double>::randn({2, 4, 4, cch}, rng), Tensor<double>::randn({1, 3, 3, cch, 2}, rng, 0.4),
            Tensor<double>::randn({2}, rng, 0.2)}, 1e-4);

        check("upsampling", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return add(t, sq(t, upsample_bilinear_x2(t, in[0])), sq(t, upsample_trilinear_spatial_x2(t, in[1])));
        }, {Tensor<double>::randn({n, m, cch}, rng), Tensor<double>::randn({2, n, m, cch}, rng)}, 1e-4);

        check("neighborhood attention", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return sq(t, neighborhood_attention(t, in[0], in[1], in[2], 3));
        }, {Tensor<double>::randn({n, m, cch}, rng), Tensor<double>::randn({n, m, cch}, rng),
            Tensor<double>::randn({n, m, cch}, rng)}, 1e-4);

        check("pool/normalize/gather", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto a = rows_l2_normalize(t, in[0]);
            auto b = gather_rows(t, a, {0, 1, 1});
            return add(t, sq(t, mean_axis0(t, in[1])), add(t, sq(t, mean_lastdim(t, in[0])), sq(t, b)));
        }, {Tensor<double>::randn({n, m}, rng), Tensor<double>::randn({3, n, m}, rng)}, 1e-4);

        check("bmm/attention composite", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto logits = mul_scalar(t, bmm(t, in[0], permute(t, in[1], {0, 2, 1})), 0.5);
            return sq(t, bmm(t, softmax_lastdim(t, logits), in[1]));
        }, {Tensor<double>::randn({2, n, m}, rng), Tensor<double>::randn({2, n, m}, rng)}, 1e-4);

        check("mse/l1/ce", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto a = add(t, mse_loss(t, in[0], in[1]), l1_loss(t, in[0], in[1]));
            return add(t, a, cross_entropy(t, in[0], {0, 1, 2, 0}));
        }, {Tensor<double>::randn({4, 3}, rng), Tensor<double>::randn({4, 3}, rng)}, 1e-4);

        check("zero_cl (eig path)", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return zero_cl_loss(t, in[0], in[1]).total;
        }, {Tensor<double>::randn({4, 4}, rng), Tensor<double>::randn({4, 4}, rng)}, 1e-3);

        check("zca (eig path)", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            auto spd = matmul(t, in[0], transpose2d(t, in[0]));
            auto r = zca_whiten(t, spd, ZcaMode::Instance);
            return sq(t, r.whitened);
        }, {Tensor<double>::randn({3, 3}, rng)}, 1e-3);

        check("vicreg", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return vicreg_loss(t, in[0], in[1]).total;
        }, {Tensor<double>::randn({5, 4}, rng), Tensor<double>::randn({5, 4}, rng)}, 1e-4);

        check("hierarchical vicreg", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            std::array<Value<double>, 4> a{in[0], in[1], in[0], in[1]};
            std::array<Value<double>, 4> b{in[1], in[0], in[1], in[0]};
            return hierarchical_vicreg(t, a, b).total;
        }, {Tensor<double>::randn({4, 3}, rng), Tensor<double>::randn({4, 3}, rng)}, 1e-4);

        check("reconstruction", [&](Tape<double>& t, const std::vector<Value<double>>& in) {
            return reconstruction_loss(t, in[0], in[1], in[2], in[3], in[4], in[5]);
        }, {Tensor<double>::randn({6, 1}, rng), Tensor<double>::randn({6, 1}, rng),
            Tensor<double>::randn({2, 3, 3, 2}, rng), Tensor<double>::randn({2, 3, 3, 2}, rng),
            Tensor<double>::randn({3, 3, 2}, rng), Tensor<double>::randn({3, 3, 2}, rng)}, 1e-4);
    }
    c.finish();
}

// ---------------------------------------------------------------- 4

void criterion_rvq() {
    Criterion c("criterion 4: RVQ per-row error non-increasing in active quantizers (exact)");
    Rng rng(404);
    WaveformCodecConfig cfg;
    cfg.length = 32;
    cfg.entries = 32;
    cfg.embed_dim = 4;
    WaveformCodec<double> codec(cfg, rng);
    int64_t d = WaveformCodecConfig::latent_channels;
    bool monotone = true;
    for (int rep = 0; rep < 200 && monotone; ++rep) {
        Tensor<double> row = Tensor<double>::randn({1, d}, rng, rng.uniform(0.2, 3.0));
        Tape<double> t;
        Ctx<double> ctx{t, false, nullptr};
        auto out = codec.quantize(ctx, constant(row));
        std::vector<double> acc(static_cast<size_t>(d), 0.0);
        double prev = 1e300;
        for (int64_t q = 0; q < cfg.quantizers; ++q) {
            const double* e = codec.codebook.entry(q, out.codes[static_cast<size_t>(q)][0]);
            for (int64_t k = 0; k < d; ++k) acc[static_cast<size_t>(k)] += e[k];
            double errsq = 0;
            for (int64_t k = 0; k < d; ++k) {
                double diff = row[k] - acc[static_cast<size_t>(k)];
                errsq += diff * diff;
            }
            if (errsq > prev + 1e-12) monotone = false;
            prev = errsq;
        }
    }
    c.expect(monotone, "a quantizer stage increased the row reconstruction error");
    c.finish();
}

// ---------------------------------------------------------------- 5

void criterion_sampler() {
    Criterion c("criterion 5: Karras sampling of a closed-form gaussian + cfg affine identity");
    double mu = 3.0, sd = 1.0;
    DenoiseFn<double> den = [&](const Tensor<double>& z_t, double t_norm) {
        double a = std::cos(1.5707963267948966 * t_norm);
        double sv = std::sin(1.5707963267948966 * t_norm);
        Tensor<double> out = z_t;
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = (sd * sd * a * z_t[i] + sv * sv * mu) / (a * a * sd * sd + sv * sv);
        return out;
    };
    Rng seeder(42);
    int n = 10000;
    std::vector<double> xs(static_cast<size_t>(n));
    std::vector<uint64_t> seeds(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) seeds[static_cast<size_t>(i)] = seeder.next_u64();
    parallel_for(n, [&](int64_t i) {
        Rng r(seeds[static_cast<size_t>(i)]);
        xs[static_cast<size_t>(i)] = karras_sample_heun<double>(den, {1}, 30, r)[0];
    });
    double mean = 0, var = 0;
    for (double v : xs) mean += v;
    mean /= n;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= n;
    c.expect(std::abs(mean - mu) / std::abs(mu) <= 0.02,
             "sampled mean " + std::to_string(mean) + " vs target " + std::to_string(mu));
    c.expect(std::abs(var - sd * sd) / (sd * sd) <= 0.05,
             "sampled variance " + std::to_string(var) + " vs target " + std::to_string(sd * sd));

    // cfg affine identity within 1e-10 in 64-bit
    Rng rng(55);
    DiffusionConfig dc;
    dc.latent_len = 8;
    dc.latent_channels = 4;
    dc.cond_dim = 5;
    dc.base_width = 8;
    dc.time_dim = 16;
    DiffusionModel<double> model(dc, rng);
    Tensor<double> zt = Tensor<double>::randn({8, 4}, rng);
    Tensor<double> cond = Tensor<double>::randn({5}, rng);
    auto p0 = model.cfg_predict(zt, 0.5, cond, 0.0);
    auto p1 = model.cfg_predict(zt, 0.5, cond, 1.0);
    auto p3 = model.cfg_predict(zt, 0.5, cond, 3.0);
    double worst = 0;
    for (int64_t i = 0; i < p3.numel(); ++i)
        worst = std::max(worst, std::abs(p3[i] - (p0[i] + 3.0 * (p1[i] - p0[i]))));
    c.expect(worst <= 1e-10, "cfg affine deviation " + std::to_string(worst));
    c.finish();
}

// ------------------------------------------------- shared 6/7 machinery

struct EndToEnd {
    SynthConfig synth;
    PipelineConfig pipe;
    TrainConfig train;
    SynthScene scene;

    EndToEnd() {
        synth.seed = 42;
        synth.tiles = 64;
        synth.height = 32;
        synth.width = 32;
        synth.frames = 2;
        synth.waveform_rate = 52.0;
        scene = synth_scene(synth);
        pipe = PipelineConfig::matching(synth);
        pipe.embed_dim = 16;
        train.steps = 700;
        train.warmup_steps = 30;
        train.batch_tiles = 2;
        train.seed = 3;
        train.lr = 1e-3;
        train.weight_decay = 0.1;
    }

    // O^V / O^H queries at test waveform pixels with their records
    struct Queries {
        std::vector<std::vector<float>> ov, oh;
        std::vector<const WaveformRecord*> recs;
    };

    Queries test_queries(Models<float>& models) const {
        Queries q;
        for (const auto& tile : scene.tiles) {
            if (!is_test_tile(tile.index) || tile.waveforms.empty()) continue;
            Tensor<float> ovmap = embed_image(models, tile.image, Provenance::OV);
            Tensor<float> ohmap = embed_image(models, tile.image, Provenance::OH);
            int64_t w = ovmap.shape[1], cch = ovmap.shape[2];
            for (const auto& rec : tile.waveforms) {
                int64_t off = (static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)) * cch;
                q.ov.emplace_back(ovmap.ptr() + off, ovmap.ptr() + off + cch);
                q.oh.emplace_back(ohmap.ptr() + off, ohmap.ptr() + off + cch);
                q.recs.push_back(&rec);
            }
        }
        return q;
    }

    EmbeddingDB waveform_db(Models<float>& models) const {
        std::vector<WaveformRecord> recs;
        for (const auto& tile : scene.tiles)
            if (!is_test_tile(tile.index))
                for (const auto& r : tile.waveforms) recs.push_back(r);
        Tensor<float> emb = embed_waveforms(models, recs);
        return build_db(emb, std::move(recs), Provenance::OW);
    }

    EmbeddingDB height_db(Models<float>& models) const {
        std::vector<WaveformRecord> recs;
        for (const auto& tile : scene.tiles)
            if (!is_test_tile(tile.index))
                for (const auto& r : tile.waveforms) recs.push_back(r);
        Tensor<float> emb = embed_waveforms(models, recs);
        std::vector<float> rh;
        for (const auto& r : recs) rh.push_back(r.rh);
        return build_db(emb, std::move(rh), Provenance::OW);
    }
};

double mean_waveform_r(const EmbeddingDB& db, const std::vector<std::vector<float>>& queries,
                       const std::vector<const WaveformRecord*>& recs) {
    std::vector<double> rs(queries.size());
    parallel_for(static_cast<int64_t>(queries.size()), [&](int64_t i) {
        auto nb = knn_query(db, queries[static_cast<size_t>(i)], 1);
        rs[static_cast<size_t>(i)] = metric_waveform_r(top1_waveform(db, nb), *recs[static_cast<size_t>(i)]);
    });
    return oracle::mean(rs);
}

void normalize_rows_inplace(std::vector<std::vector<float>>& rows) {
    for (auto& r : rows) {
        double n = 0;
        for (float v : r) n += static_cast<double>(v) * v;
        n = std::sqrt(n);
        if (n > 1e-12)
            for (auto& v : r) v = static_cast<float>(v / n);
    }
}

}  // namespace

// ---------------------------------------------------------------- 6

namespace {

void criterion_end_to_end(EndToEnd& e2e, Models<float>& models, bool trained_ok) {
    Criterion c("criterion 6: synthetic end-to-end retrieval, fine-tuning and alignment margins");
    if (!trained_ok) {
        c.expect(false, "pre-training failed upstream");
        c.finish();
        return;
    }
    auto q = e2e.test_queries(models);
    auto wf_db = e2e.waveform_db(models);
    auto rh_db = e2e.height_db(models);

    // (a) pixel -> waveform retrieval, and the query-direction margin
    double r_ov = mean_waveform_r(wf_db, q.ov, q.recs);
    double r_oh = mean_waveform_r(wf_db, q.oh, q.recs);
    c.expect(r_ov >= 0.5, "(a) mean time-aligned r " + std::to_string(r_ov) + " < 0.5");
    c.expect(r_ov - r_oh >= 0.15, "(a) OV-query advantage " + std::to_string(r_ov - r_oh) + " < 0.15 (OH " +
                                      std::to_string(r_oh) + ")");

    // (b) zero-shot height retrieval vs the constant-mean predictor
    double rmse_zs, baseline;
    {
        int64_t k = std::min<int64_t>(50, rh_db.size());
        std::vector<double> preds(q.ov.size()), refs(q.ov.size());
        parallel_for(static_cast<int64_t>(q.ov.size()), [&](int64_t i) {
            auto nb = knn_query(rh_db, q.ov[static_cast<size_t>(i)], k);
            preds[static_cast<size_t>(i)] = weighted_mean(rh_db, nb);
            refs[static_cast<size_t>(i)] = q.recs[static_cast<size_t>(i)]->rh;
        });
        rmse_zs = metric_rmse(preds, refs);
        double mean_train = 0;
        for (float v : rh_db.scalar_labels) mean_train += v;
        mean_train /= static_cast<double>(rh_db.scalar_labels.size());
        std::vector<double> const_preds(refs.size(), mean_train);
        baseline = metric_rmse(const_preds, refs);
        c.expect(rmse_zs <= 0.7 * baseline, "(b) zero-shot RMSE " + std::to_string(rmse_zs) +
                                                " not 30% under baseline " + std::to_string(baseline));
    }

    // (c) fine-tuned head beats zero-shot height retrieval on the split
    {
        FinetuneConfig fc;
        fc.steps = 220;
        fc.batch_tiles = 2;
        fc.seed = 5;
        fc.eval_every = 40;
        fc.patience = 20;
        auto ft = finetune(models, e2e.scene, FinetuneTask::Height, fc);
        std::vector<double> preds, refs;
        Tape<float> tape;
        tape.set_recording(false);
        Ctx<float> ctx{tape, false, nullptr};
        for (const auto& tile : e2e.scene.tiles) {
            if (!is_test_tile(tile.index) || tile.waveforms.empty()) continue;
            auto tokens = models.image.patch_embed(ctx, tile.image);
            auto blocks = models.image.encode(ctx, tokens);
            auto stages = models.image.decode(ctx, blocks, DecoderId::Vertical);
            auto pred = ft.head.forward(ctx, stages[0]);
            int64_t w = pred->value.shape[1];
            for (const auto& rec : tile.waveforms) {
                preds.push_back(pred->value[static_cast<int64_t>(rec.lat) * w + static_cast<int64_t>(rec.lon)]);
                refs.push_back(rec.rh);
            }
        }
        double rmse_ft = metric_rmse(preds, refs);
        c.expect(rmse_ft < rmse_zs, "(c) fine-tuned RMSE " + std::to_string(rmse_ft) +
                                        " did not improve on zero-shot " + std::to_string(rmse_zs));
    }

    // (d) positive-vs-negative cosine margins for both alignment directions
    {
        // pixel-waveform: O^V pixels vs their waveform embeddings
        std::vector<WaveformRecord> test_recs;
        for (auto* r : q.recs) test_recs.push_back(*r);
        Tensor<float> ow = embed_waveforms(models, test_recs);
        std::vector<std::vector<float>> ow_rows;
        for (int64_t i = 0; i < ow.shape[0]; ++i)
            ow_rows.emplace_back(ow.ptr() + i * ow.shape[1], ow.ptr() + (i + 1) * ow.shape[1]);
        auto qa = q.ov;
        normalize_rows_inplace(qa);
        normalize_rows_inplace(ow_rows);
        double pos = 0, neg = 0;
        int64_t npairs = 0;
        Rng pick(7);
        int64_t n = static_cast<int64_t>(qa.size());
        for (int64_t i = 0; i < n; ++i) {
            double s = 0;
            for (size_t k = 0; k < qa[static_cast<size_t>(i)].size(); ++k)
                s += static_cast<double>(qa[static_cast<size_t>(i)][k]) * ow_rows[static_cast<size_t>(i)][k];
            pos += s;
            for (int rep = 0; rep < 8; ++rep) {
                int64_t j = static_cast<int64_t>(pick.uniform_index(static_cast<uint64_t>(n)));
                if (j == i) continue;
                double sn = 0;
                for (size_t k = 0; k < qa[static_cast<size_t>(i)].size(); ++k)
                    sn += static_cast<double>(qa[static_cast<size_t>(i)][k]) * ow_rows[static_cast<size_t>(j)][k];
                neg += sn;
                ++npairs;
            }
        }
        double margin_pw = pos / n - neg / npairs;
        c.expect(margin_pw >= 0.3, "(d) pixel-waveform margin " + std::to_string(margin_pw) + " < 0.3");

        // pixel-pixel: O^H vs temporally pooled O^T at the same coordinates
        double pos2 = 0, neg2 = 0;
        int64_t np2 = 0;
        for (const auto& tile : e2e.scene.tiles) {
            if (!is_test_tile(tile.index)) continue;
            Tensor<float> oh = embed_image(models, tile.image, Provenance::OH);
            Tape<float> tape;
            tape.set_recording(false);
            Ctx<float> ctx{tape, false, nullptr};
            auto tf = models.temporal.forward(ctx, tile.stack);
            auto ot = models.temporal.temporal_pool(ctx, tf.stages[0], 1);
            int64_t hw = oh.shape[0] * oh.shape[1], cch = oh.shape[2];
            std::vector<std::vector<float>> a(static_cast<size_t>(hw)), b(static_cast<size_t>(hw));
            for (int64_t i = 0; i < hw; ++i) {
                a[static_cast<size_t>(i)].assign(oh.ptr() + i * cch, oh.ptr() + (i + 1) * cch);
                b[static_cast<size_t>(i)].assign(ot->value.ptr() + i * cch, ot->value.ptr() + (i + 1) * cch);
            }
            normalize_rows_inplace(a);
            normalize_rows_inplace(b);
            Rng pick2(11);
            for (int64_t i = 0; i < hw; i += 7) {
                double s = 0;
                for (int64_t k = 0; k < cch; ++k)
                    s += static_cast<double>(a[static_cast<size_t>(i)][static_cast<size_t>(k)]) *
                         b[static_cast<size_t>(i)][static_cast<size_t>(k)];
                pos2 += s;
                ++np2;
                int64_t j = static_cast<int64_t>(pick2.uniform_index(static_cast<uint64_t>(hw)));
                if (j != i) {
                    double sn = 0;
                    for (int64_t k = 0; k < cch; ++k)
                        sn += static_cast<double>(a[static_cast<size_t>(i)][static_cast<size_t>(k)]) *
                              b[static_cast<size_t>(j)][static_cast<size_t>(k)];
                    neg2 += sn;
                }
            }
            if (np2 > 600) break;
        }
        double margin_pp = (pos2 - neg2) / np2;
        c.expect(margin_pp >= 0.3, "(d) pixel-pixel margin " + std::to_string(margin_pp) + " < 0.3");
    }
    c.finish();
}

// ---------------------------------------------------------------- 7

void criterion_ablations(EndToEnd& e2e, Models<float>& base_models, bool trained_ok) {
    Criterion c("criterion 7: ablation directions (separate decoders, hierarchical alignment)");
    if (!trained_ok) {
        c.expect(false, "pre-training failed upstream");
        c.finish();
        return;
    }

    // mean cosine between pixel queries and their retrieved waveform keys
    auto retrieval_cs = [&](Models<float>& models) {
        auto q = e2e.test_queries(models);
        auto db = e2e.waveform_db(models);
        normalize_rows_inplace(q.ov);
        double acc = 0;
        for (auto& query : q.ov) {
            auto nb = knn_query(db, query, 1);
            const float* key = db.keys.ptr() + nb[0].index * db.dim();
            double s = 0;
            for (size_t k = 0; k < query.size(); ++k) s += static_cast<double>(query[k]) * key[k];
            acc += s;
        }
        return acc / static_cast<double>(q.ov.size());
    };

    double cs_separate = retrieval_cs(base_models);

    // shared-decoder arm, same budget
    {
        PipelineConfig pc = e2e.pipe;
        pc.shared_decoder = true;
        Models<float> shared(pc, e2e.train.seed);
        Pretrainer<float> trainer(shared, e2e.scene, e2e.train);
        trainer.run();
        double cs_shared = retrieval_cs(shared);
        c.expect(cs_separate > 0, "separate-decoder retrieval similarity " + std::to_string(cs_separate) +
                                      " is not positive");
        c.expect(cs_separate > cs_shared, "shared decoder did not degrade retrieval similarity (separate " +
                                              std::to_string(cs_separate) + ", shared " + std::to_string(cs_shared) +
                                              ")");
    }

    // land-class wF1 with the hierarchical loss vs a single-stage loss
    auto class_wf1 = [&](Models<float>& models) {
        // train-split pixel database, stride 2; test-split queries, k = 50
        std::vector<float> keybuf;
        std::vector<int32_t> labels;
        int64_t dim = 0;
        for (const auto& tile : e2e.scene.tiles) {
            if (is_test_tile(tile.index)) continue;
            Tensor<float> map = embed_image(models, tile.image, Provenance::OH);
            dim = map.shape[2];
            for (int64_t i = 0; i < map.shape[0]; i += 2)
                for (int64_t j = 0; j < map.shape[1]; j += 2) {
                    const float* px = map.ptr() + (i * map.shape[1] + j) * dim;
                    keybuf.insert(keybuf.end(), px, px + dim);
                    labels.push_back(static_cast<int32_t>(tile.class_map.at(i, j)));
                }
        }
        Tensor<float> keys({static_cast<int64_t>(labels.size()), dim}, std::move(keybuf));
        auto db = build_db(keys, std::move(labels), Provenance::OH);
        std::vector<int32_t> preds, refs;
        std::vector<std::vector<float>> queries;
        for (const auto& tile : e2e.scene.tiles) {
            if (!is_test_tile(tile.index)) continue;
            Tensor<float> map = embed_image(models, tile.image, Provenance::OH);
            for (int64_t i = 0; i < map.shape[0]; i += 4)
                for (int64_t j = 0; j < map.shape[1]; j += 4) {
                    const float* px = map.ptr() + (i * map.shape[1] + j) * dim;
                    queries.emplace_back(px, px + dim);
                    refs.push_back(static_cast<int32_t>(tile.class_map.at(i, j)));
                }
        }
        preds.resize(queries.size());
        int64_t k = std::min<int64_t>(50, db.size());
        parallel_for(static_cast<int64_t>(queries.size()), [&](int64_t i) {
            preds[static_cast<size_t>(i)] = weighted_vote(db, knn_query(db, queries[static_cast<size_t>(i)], k));
        });
        return metric_weighted_f1(preds, refs);
    };

    double wf1_hier = class_wf1(base_models);
    {
        TrainConfig tc = e2e.train;
        tc.hierarchical_stages = 1;
        Models<float> single(e2e.pipe, tc.seed);
        Pretrainer<float> trainer(single, e2e.scene, tc);
        trainer.run();
        double wf1_single = class_wf1(single);
        c.expect(wf1_hier > wf1_single, "hierarchical wF1 " + std::to_string(wf1_hier) +
                                            " did not beat single-stage " + std::to_string(wf1_single));
    }
    c.finish();
}

// ---------------------------------------------------------------- 8

void criterion_determinism() {
    Criterion c("criterion 8: determinism and persistence round trips");
    // compact scene for speed
    SynthConfig sc;
    sc.seed = 17;
    sc.tiles = 6;
    sc.height = sc.width = 16;
    sc.frames = 2;
    sc.waveform_rate = 120;
    auto scene = synth_scene(sc);
    PipelineConfig pc = PipelineConfig::matching(sc);
    pc.embed_dim = 8;
    pc.dim = 32;
    pc.ff_hidden = 64;
    pc.na_window = 5;
    pc.entries = 32;
    TrainConfig tc;
    tc.steps = 6;
    tc.warmup_steps = 1;
    tc.batch_tiles = 2;
    tc.seed = 3;

    // resume reproduces training bit-exactly
    {
        Models<float> a(pc, 5);
        Pretrainer<float> ta(a, scene, tc);
        for (int i = 0; i < 2; ++i) ta.step();
        auto ck = ta.checkpoint();
        auto r1 = ta.step();
        Models<float> b(pc, 999);
        Pretrainer<float> tb(b, scene, tc);
        tb.restore(ck);
        auto r2 = tb.step();
        c.expect(r1.total == r2.total, "resumed step diverged from the uninterrupted run");
        Tensor<float>& pa = a.reg_pretrain.params[5].second->value;
        Tensor<float>& pb = b.reg_pretrain.params[5].second->value;
        c.expect(max_abs_diff(pa, pb) == 0.0, "resumed parameters differ");
    }

    // checkpoint file round trip is bit exact
    {
        Models<float> a(pc, 5);
        Pretrainer<float> ta(a, scene, tc);
        ta.step();
        auto ck = ta.checkpoint();
        std::string p1 = "/tmp/pixelwave_acc_ck1.dckp", p2 = "/tmp/pixelwave_acc_ck2.dckp";
        save_checkpoint(p1, ck);
        auto loaded = load_checkpoint<float>(p1, pc.json());
        save_checkpoint(p2, loaded);
        std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        c.expect(!b1.empty() && b1 == b2, "checkpoint round trip not bit-exact");
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }

    // embedding database round trip is bit exact
    {
        Rng rng(7);
        Tensor<float> keys = Tensor<float>::randn({30, 8}, rng);
        std::vector<float> labels(30, 1.5f);
        auto db = build_db(keys, std::move(labels), Provenance::OW);
        std::string p = "/tmp/pixelwave_acc_db.dedb";
        save_db(p, db);
        auto loaded = load_db(p);
        bool same = loaded.keys.shape == db.keys.shape;
        for (int64_t i = 0; same && i < db.keys.numel(); ++i) same = loaded.keys[i] == db.keys[i];
        c.expect(same, "database keys not bit-identical after the round trip");
        std::remove(p.c_str());
    }

    // identical seeds give identical CLI outputs
    {
        const char* cli = std::getenv("PIXELWAVE_CLI");
        if (cli) {
            std::string d1 = "/tmp/pixelwave_acc_s1", d2 = "/tmp/pixelwave_acc_s2";
            fs::remove_all(d1);
            fs::remove_all(d2);
            std::string base = std::string(cli) + " synth --seed 33 --tiles 4 --height 16 --width 16 --frames 2 --out ";
            int rc1 = std::system((base + d1 + " > /dev/null").c_str());
            int rc2 = std::system((base + d2 + " > /dev/null").c_str());
            bool ok = rc1 == 0 && rc2 == 0;
            for (int i = 0; ok && i < 4; ++i) {
                char name[64];
                std::snprintf(name, sizeof(name), "tiles/tile_%04d.dtil", i);
                std::ifstream f1(fs::path(d1) / name, std::ios::binary), f2(fs::path(d2) / name, std::ios::binary);
                std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
                std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
                ok = !b1.empty() && b1 == b2;
            }
            c.expect(ok, "CLI synth outputs differ across identical seeds");
            fs::remove_all(d1);
            fs::remove_all(d2);
        }
    }
    c.finish();
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    criterion_formula_oracles();
    criterion_whitening();
    criterion_gradients();
    criterion_rvq();
    criterion_sampler();

    EndToEnd e2e;
    Models<float> models(e2e.pipe, e2e.train.seed);
    bool trained = true;
    {
        Criterion c("criterion 6/7 shared setup: seeded scene and toy pre-training (<= 5K steps)");
        try {
            Pretrainer<float> trainer(models, e2e.scene, e2e.train);
            trainer.run();
        } catch (const std::exception& e) {
            trained = false;
            c.expect(false, e.what());
        }
        c.finish();
    }
    criterion_end_to_end(e2e, models, trained);
    criterion_ablations(e2e, models, trained);

    criterion_determinism();

    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
