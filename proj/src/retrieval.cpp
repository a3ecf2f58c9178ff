#include "pixelwave/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace pixelwave {

namespace {

Tensor<float> normalized_keys(const Tensor<float>& embeddings) {
    if (embeddings.rank() != 2) throw dimension_error("embeddings must be n x dim");
    if (!embeddings.all_finite()) throw input_error("embeddings contain non-finite values");
    Tensor<float> keys = embeddings;
    int64_t n = keys.shape[0], d = keys.shape[1];
    for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < d; ++j) s += static_cast<double>(keys.at(i, j)) * keys.at(i, j);
        double r = std::sqrt(s);
        if (r > 1e-12)
            for (int64_t j = 0; j < d; ++j) keys.at(i, j) = static_cast<float>(keys.at(i, j) / r);
    }
    return keys;
}

void check_label_count(int64_t n, size_t labels) {
    if (static_cast<int64_t>(labels) != n) throw dimension_error("label count does not match key count");
}

}  // namespace

EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<int32_t> class_labels, Provenance prov) {
    EmbeddingDB db;
    db.keys = normalized_keys(embeddings);
    check_label_count(db.size(), class_labels.size());
    db.kind = LabelKind::ClassId;
    db.provenance = prov;
    db.class_labels = std::move(class_labels);
    return db;
}

EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<float> scalar_labels, Provenance prov) {
    EmbeddingDB db;
    db.keys = normalized_keys(embeddings);
    check_label_count(db.size(), scalar_labels.size());
    db.kind = LabelKind::Scalar;
    db.provenance = prov;
    db.scalar_labels = std::move(scalar_labels);
    return db;
}

EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<WaveformRecord> waveform_labels, Provenance prov) {
    EmbeddingDB db;
    db.keys = normalized_keys(embeddings);
    check_label_count(db.size(), waveform_labels.size());
    db.kind = LabelKind::Waveform;
    db.provenance = prov;
    db.waveform_labels = std::move(waveform_labels);
    return db;
}

void save_db(const std::string& path, const EmbeddingDB& db) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    io::write_magic(os, "DEDB");
    io::write_pod<uint8_t>(os, static_cast<uint8_t>(db.provenance));
    io::write_pod<uint64_t>(os, static_cast<uint64_t>(db.size()));
    io::write_pod<uint64_t>(os, static_cast<uint64_t>(db.dim()));
    io::write_pod<uint8_t>(os, static_cast<uint8_t>(db.kind));
    io::write_bytes(os, db.keys.data.data(), db.keys.data.size() * sizeof(float));
    switch (db.kind) {
        case LabelKind::ClassId:
            io::write_bytes(os, db.class_labels.data(), db.class_labels.size() * sizeof(int32_t));
            break;
        case LabelKind::Scalar:
            io::write_bytes(os, db.scalar_labels.data(), db.scalar_labels.size() * sizeof(float));
            break;
        case LabelKind::Waveform:
            save_waveforms(os, db.waveform_labels);
            break;
    }
}

EmbeddingDB load_db(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw state_error("cannot open for reading: " + path);
    io::expect_magic(is, "DEDB", "embedding database");
    EmbeddingDB db;
    db.provenance = static_cast<Provenance>(io::read_pod<uint8_t>(is));
    int64_t n = static_cast<int64_t>(io::read_pod<uint64_t>(is));
    int64_t d = static_cast<int64_t>(io::read_pod<uint64_t>(is));
    db.kind = static_cast<LabelKind>(io::read_pod<uint8_t>(is));
    db.keys = Tensor<float>({n, d});
    io::read_bytes(is, db.keys.data.data(), db.keys.data.size() * sizeof(float));
    switch (db.kind) {
        case LabelKind::ClassId:
            db.class_labels.resize(static_cast<size_t>(n));
            io::read_bytes(is, db.class_labels.data(), db.class_labels.size() * sizeof(int32_t));
            break;
        case LabelKind::Scalar:
            db.scalar_labels.resize(static_cast<size_t>(n));
            io::read_bytes(is, db.scalar_labels.data(), db.scalar_labels.size() * sizeof(float));
            break;
        case LabelKind::Waveform:
            db.waveform_labels = load_waveforms(is);
            break;
    }
    return db;
}

NeighborSet knn_query(const EmbeddingDB& db, const float* query, int64_t dim, int64_t k) {
    int64_t n = db.size();
    if (dim != db.dim()) throw dimension_error("query length does not match key dimension");
    if (k < 1 || k > n) throw input_error("k must lie in [1, " + std::to_string(n) + "]");
    std::vector<double> q(static_cast<size_t>(dim));
    double norm = 0;
    for (int64_t j = 0; j < dim; ++j) {
        q[static_cast<size_t>(j)] = query[j];
        norm += static_cast<double>(query[j]) * query[j];
    }
    norm = std::sqrt(norm);
    if (norm > 1e-12)
        for (auto& v : q) v /= norm;

    NeighborSet all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const float* key = db.keys.ptr() + i * dim;
        double s = 0;
        for (int64_t j = 0; j < dim; ++j) s += q[static_cast<size_t>(j)] * key[j];
        all[static_cast<size_t>(i)] = {i, s};
    }
    auto cmp = [](const Neighbor& a, const Neighbor& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.index < b.index;
    };
    std::partial_sort(all.begin(), all.begin() + k, all.end(), cmp);
    all.resize(static_cast<size_t>(k));
    return all;
}

NeighborSet knn_query(const EmbeddingDB& db, const std::vector<float>& query, int64_t k) {
    return knn_query(db, query.data(), static_cast<int64_t>(query.size()), k);
}

int32_t weighted_vote(const EmbeddingDB& db, const NeighborSet& neighbors) {
    if (db.kind != LabelKind::ClassId) throw input_error("weighted_vote requires classification labels");
    if (neighbors.empty()) throw input_error("weighted_vote: empty neighbor set");
    std::map<int32_t, double> score;
    for (const auto& nb : neighbors)
        score[db.class_labels[static_cast<size_t>(nb.index)]] += std::max(0.0, nb.similarity);
    int32_t best = score.begin()->first;
    double best_score = score.begin()->second;
    for (const auto& [cls, s] : score)
        if (s > best_score) {  // ties keep the smaller class id (map order)
            best = cls;
            best_score = s;
        }
    return best;
}

double weighted_mean(const EmbeddingDB& db, const NeighborSet& neighbors) {
    if (db.kind != LabelKind::Scalar) throw input_error("weighted_mean requires continuous labels");
    if (neighbors.empty()) throw input_error("weighted_mean: empty neighbor set");
    double wsum = 0, acc = 0, plain = 0;
    for (const auto& nb : neighbors) {
        double w = std::max(0.0, nb.similarity);
        double v = db.scalar_labels[static_cast<size_t>(nb.index)];
        wsum += w;
        acc += w * v;
        plain += v;
    }
    if (wsum <= 0) return plain / static_cast<double>(neighbors.size());
    return acc / wsum;
}

const WaveformRecord& top1_waveform(const EmbeddingDB& db, const NeighborSet& neighbors) {
    if (db.kind != LabelKind::Waveform) throw input_error("top1_waveform requires waveform labels");
    if (neighbors.empty()) throw input_error("top1_waveform: empty neighbor set");
    return db.waveform_labels[static_cast<size_t>(neighbors.front().index)];
}

Tensor<float> window_average(const Tensor<float>& map, int64_t window) {
    if (map.rank() != 3) throw dimension_error("window_average expects h x w x c");
    int64_t h = map.shape[0], w = map.shape[1], c = map.shape[2];
    if (window < 1 || window > h || window > w)
        throw input_error("window " + std::to_string(window) + " larger than map " + shape_str(map.shape));
    Tensor<float> out({h - window + 1, w - window + 1, c});
    for (int64_t i = 0; i + window <= h; ++i)
        for (int64_t j = 0; j + window <= w; ++j) {
            float* dst = out.ptr() + (i * (w - window + 1) + j) * c;
            for (int64_t a = 0; a < window; ++a)
                for (int64_t b = 0; b < window; ++b) {
                    const float* src = map.ptr() + ((i + a) * w + (j + b)) * c;
                    for (int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            double norm = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
                dst[ch] /= static_cast<float>(window * window);
                norm += static_cast<double>(dst[ch]) * dst[ch];
            }
            norm = std::sqrt(norm);
            if (norm > 1e-12)
                for (int64_t ch = 0; ch < c; ++ch) dst[ch] = static_cast<float>(dst[ch] / norm);
        }
    return out;
}

double metric_rmse(const std::vector<double>& preds, const std::vector<double>& refs) {
    if (preds.empty() || preds.size() != refs.size()) throw input_error("rmse: empty or mismatched series");
    double s = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        double d = preds[i] - refs[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(preds.size()));
}

double metric_pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || a.size() != b.size()) throw input_error("pearson: empty or mismatched series");
    size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0, sbb = 0, sab = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa <= 0 || sbb <= 0) throw undefined_error("pearson undefined for zero-variance series");
    return sab / std::sqrt(saa * sbb);
}

double metric_weighted_f1(const std::vector<int32_t>& preds, const std::vector<int32_t>& refs) {
    if (preds.empty() || preds.size() != refs.size()) throw input_error("wF1: empty or mismatched series");
    std::map<int32_t, double> tp, fp, fn, support;
    for (size_t i = 0; i < preds.size(); ++i) {
        support[refs[i]] += 1;
        if (preds[i] == refs[i])
            tp[refs[i]] += 1;
        else {
            fp[preds[i]] += 1;
            fn[refs[i]] += 1;
        }
    }
    double total = static_cast<double>(preds.size());
    double wf1 = 0;
    for (const auto& [cls, sup] : support) {
        double p_den = tp[cls] + fp[cls];
        double r_den = tp[cls] + fn[cls];
        double prec = p_den > 0 ? tp[cls] / p_den : 0.0;
        double rec = r_den > 0 ? tp[cls] / r_den : 0.0;
        double f1 = (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        wf1 += f1 * (sup / total);
    }
    return wf1;
}

double metric_waveform_r(const WaveformRecord& pred, const WaveformRecord& ref) {
    int64_t n = static_cast<int64_t>(ref.samples.size());
    if (static_cast<int64_t>(pred.samples.size()) != n) throw input_error("waveform_r: length mismatch");
    int64_t shift = static_cast<int64_t>(ref.signal_start) - pred.signal_start;
    // ref[i] pairs with pred[i - shift]; keep the common support.
    int64_t lo = std::max<int64_t>(0, shift);
    int64_t hi = std::min(n, n + shift);
    if (hi - lo < 2) throw undefined_error("waveform_r: no overlapping support after alignment");
    std::vector<double> a, b;
    a.reserve(static_cast<size_t>(hi - lo));
    b.reserve(static_cast<size_t>(hi - lo));
    for (int64_t i = lo; i < hi; ++i) {
        a.push_back(ref.samples[static_cast<size_t>(i)]);
        b.push_back(pred.samples[static_cast<size_t>(i - shift)]);
    }
    return metric_pearson(a, b);
}

}  // namespace pixelwave
