#pragma once

#include "pixelwave/data.hpp"

namespace pixelwave {

enum class LabelKind : uint8_t { ClassId = 0, Scalar = 1, Waveform = 2 };
enum class Provenance : uint8_t { OV = 0, OH = 1, OW = 2 };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::OV: return "ov";
        case Provenance::OH: return "oh";
        default: return "ow";
    }
}

// Immutable table of L2-normalized key embeddings paired with labels.
// Concurrent queries over a built database are safe.
struct EmbeddingDB {
    Provenance provenance = Provenance::OW;
    LabelKind kind = LabelKind::Scalar;
    Tensor<float> keys;  // n x dim, unit rows
    std::vector<int32_t> class_labels;
    std::vector<float> scalar_labels;
    std::vector<WaveformRecord> waveform_labels;

    int64_t size() const { return keys.numel() ? keys.shape[0] : 0; }
    int64_t dim() const { return keys.numel() ? keys.shape[1] : 0; }
};

struct Neighbor {
    int64_t index;
    double similarity;
};

using NeighborSet = std::vector<Neighbor>;  // similarity descending, ties by lower index

EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<int32_t> class_labels, Provenance prov);
EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<float> scalar_labels, Provenance prov);
EmbeddingDB build_db(const Tensor<float>& embeddings, std::vector<WaveformRecord> waveform_labels, Provenance prov);

// "DEDB" container round-trip (bit-exact on keys).
void save_db(const std::string& path, const EmbeddingDB& db);
EmbeddingDB load_db(const std::string& path);

// Exact top-k by cosine similarity (dot product over unit keys).
NeighborSet knn_query(const EmbeddingDB& db, const float* query, int64_t dim, int64_t k);
NeighborSet knn_query(const EmbeddingDB& db, const std::vector<float>& query, int64_t k);

// Distance-weighted voting: weight = max(similarity, 0); deterministic
// tie-break toward the smaller class id.
int32_t weighted_vote(const EmbeddingDB& db, const NeighborSet& neighbors);

// Similarity-weighted mean of continuous neighbor targets.
double weighted_mean(const EmbeddingDB& db, const NeighborSet& neighbors);

// Full-waveform retrieval returns the single nearest stored waveform.
const WaveformRecord& top1_waveform(const EmbeddingDB& db, const NeighborSet& neighbors);

// Sliding-window mean of pixel embeddings, re-normalized per window.
// map: h x w x c -> (h - window + 1) x (w - window + 1) x c.
Tensor<float> window_average(const Tensor<float>& map, int64_t window = 5);

// ------------------------------ metrics ------------------------------

double metric_rmse(const std::vector<double>& preds, const std::vector<double>& refs);
double metric_pearson(const std::vector<double>& a, const std::vector<double>& b);
double metric_weighted_f1(const std::vector<int32_t>& preds, const std::vector<int32_t>& refs);

// Pearson correlation of two waveforms after aligning them by the
// difference of their signal_start indices (common support only).
double metric_waveform_r(const WaveformRecord& pred, const WaveformRecord& ref);

}  // namespace pixelwave
