#pragma once

#include "pixelwave/eig.hpp"
#include "pixelwave/ops.hpp"

namespace pixelwave {

struct LossWeights {
    double alpha_v = 25.0;  // variance
    double beta_i = 25.0;   // invariance
    double gamma_c = 1.0;   // covariance
};

enum class ZcaMode { Instance, Feature };

template <typename T>
struct ZcaResult {
    Value<T> whitened;     // Instance: G x D (W Z); Feature: D x G (W Z^T)
    bool degenerate_gap = false;
    bool clamped = false;  // some eigenvalue hit the floor
};

inline constexpr double kZcaEigenFloor = 1e-6;

// Zero-phase whitening of an embedding batch. Instance mode whitens the
// affinity matrix S = (1/D) Z Z^T so (1/D) H H^T = I_G; feature mode
// whitens the covariance C = (1/G) Z^T Z so (1/G) H H^T = I_D.
// Eigenvalues are clamped at 1e-6 before the inverse square root.
template <typename T>
ZcaResult<T> zca_whiten(Tape<T>& tape, const Value<T>& z, ZcaMode mode) {
    if (z->value.rank() != 2) throw dimension_error("zca_whiten expects a 2-D batch");
    int64_t g = z->value.shape[0], d = z->value.shape[1];
    if (mode == ZcaMode::Instance && g < 2) throw input_error("instance whitening needs at least 2 rows");
    if (mode == ZcaMode::Feature && d < 2) throw input_error("feature whitening needs at least 2 features");

    Value<T> affinity, target;
    if (mode == ZcaMode::Instance) {
        affinity = mul_scalar(tape, matmul(tape, z, transpose2d(tape, z)), 1.0 / static_cast<double>(d));
        target = z;
    } else {
        auto zt = transpose2d(tape, z);
        affinity = mul_scalar(tape, matmul(tape, zt, z), 1.0 / static_cast<double>(g));
        target = zt;
    }
    auto eig = sym_eig(tape, affinity);
    ZcaResult<T> r;
    // Rank deficiency is expected (whenever G != D) and handled by the
    // clamp; only near-equal eigenvalues above the clamp floor make the
    // eigenvector gradient unstable.
    int64_t n = eig.eigvals->value.numel();
    for (int64_t i = 0; i < n; ++i) {
        double li = static_cast<double>(eig.eigvals->value[i]);
        if (li < kZcaEigenFloor) {
            r.clamped = true;
            continue;
        }
        for (int64_t j = i + 1; j < n; ++j) {
            double lj = static_cast<double>(eig.eigvals->value[j]);
            if (lj >= kZcaEigenFloor && std::abs(li - lj) < 1e-6) r.degenerate_gap = true;
        }
    }
    auto inv_sqrt = rsqrt(tape, clamp_min(tape, eig.eigvals, kZcaEigenFloor));
    auto w = matmul(tape, scale_cols(tape, eig.eigvecs, inv_sqrt), transpose2d(tape, eig.eigvecs));
    r.whitened = matmul(tape, w, target);
    return r;
}

template <typename T>
struct ZeroClOutput {
    Value<T> total, instance_term, feature_term;
    bool degenerate_gap = false;
};

// Whitening-based contrastive loss: instance-wise plus feature-wise
// squared cosine deficits between the whitened (and re-normalized) views.
template <typename T>
ZeroClOutput<T> zero_cl_loss(Tape<T>& tape, const Value<T>& za, const Value<T>& zb) {
    check_same_shape(za->value, zb->value, "zero_cl_loss");
    if (za->value.rank() != 2) throw dimension_error("zero_cl_loss expects 2-D batches");
    if (za->value.shape[0] < 2) throw input_error("zero_cl_loss needs at least 2 instances");

    auto deficit_sq_sum = [&](const Value<T>& ha, const Value<T>& hb) {
        auto dots = rowdot(tape, rows_l2_normalize(tape, ha), rows_l2_normalize(tape, hb));
        auto deficit = add_scalar(tape, neg(tape, dots), 1.0);
        return sum_all(tape, mul(tape, deficit, deficit));
    };

    ZeroClOutput<T> out;
    auto wa_i = zca_whiten(tape, za, ZcaMode::Instance);
    auto wb_i = zca_whiten(tape, zb, ZcaMode::Instance);
    auto wa_f = zca_whiten(tape, za, ZcaMode::Feature);
    auto wb_f = zca_whiten(tape, zb, ZcaMode::Feature);
    out.degenerate_gap = wa_i.degenerate_gap || wb_i.degenerate_gap || wa_f.degenerate_gap || wb_f.degenerate_gap;
    out.instance_term = deficit_sq_sum(wa_i.whitened, wb_i.whitened);
    out.feature_term = deficit_sq_sum(wa_f.whitened, wb_f.whitened);
    out.total = add(tape, out.instance_term, out.feature_term);
    return out;
}

template <typename T>
struct VicregOutput {
    Value<T> total, variance_term, invariance_term, covariance_term;
};

inline constexpr double kVicregEps = 1e-4;

// Variance / invariance / covariance loss on a co-located embedding pair.
template <typename T>
VicregOutput<T> vicreg_loss(Tape<T>& tape, const Value<T>& zh, const Value<T>& zt,
                            const LossWeights& w = {}, double eps = kVicregEps) {
    check_same_shape(zh->value, zt->value, "vicreg_loss");
    if (zh->value.rank() != 2) throw dimension_error("vicreg_loss expects 2-D batches");
    int64_t m = zh->value.shape[0], c = zh->value.shape[1];
    if (m < 2) throw input_error("vicreg_loss needs at least 2 rows");

    auto hinge_std = [&](const Value<T>& z) {
        auto centered = sub_rowvec(tape, z, col_mean(tape, z));
        auto var = col_mean(tape, mul(tape, centered, centered));
        auto sd = sqrt_op(tape, add_scalar(tape, var, eps));
        return mean_all(tape, relu(tape, add_scalar(tape, neg(tape, sd), 1.0)));
    };
    auto cov_offdiag = [&](const Value<T>& z) {
        auto centered = sub_rowvec(tape, z, col_mean(tape, z));
        auto cov = mul_scalar(tape, matmul(tape, transpose2d(tape, centered), centered),
                              1.0 / static_cast<double>(m - 1));
        return mul_scalar(tape, offdiag_sq_sum(tape, cov), 1.0 / static_cast<double>(c));
    };

    VicregOutput<T> out;
    out.variance_term = mul_scalar(tape, add(tape, hinge_std(zh), hinge_std(zt)), 0.5);
    out.invariance_term = mul_scalar(tape, sq_diff_norm(tape, zh, zt), 1.0 / static_cast<double>(m));
    out.covariance_term = add(tape, cov_offdiag(zh), cov_offdiag(zt));
    out.total = add(tape,
                    add(tape, mul_scalar(tape, out.variance_term, w.alpha_v),
                        mul_scalar(tape, out.invariance_term, w.beta_i)),
                    mul_scalar(tape, out.covariance_term, w.gamma_c));
    return out;
}

template <typename T>
struct HierarchicalVicregOutput {
    Value<T> total;
    std::array<VicregOutput<T>, 4> stages;
};

// Sum of weighted VICReg terms over the four decoder stages.
template <typename T>
HierarchicalVicregOutput<T> hierarchical_vicreg(Tape<T>& tape, const std::array<Value<T>, 4>& zh,
                                                const std::array<Value<T>, 4>& zt, const LossWeights& w = {}) {
    for (int d = 0; d < 4; ++d)
        if (!zh[static_cast<size_t>(d)] || !zt[static_cast<size_t>(d)])
            throw input_error("hierarchical_vicreg: missing stage " + std::to_string(d + 1));
    HierarchicalVicregOutput<T> out;
    for (int d = 0; d < 4; ++d) {
        out.stages[static_cast<size_t>(d)] =
            vicreg_loss(tape, zh[static_cast<size_t>(d)], zt[static_cast<size_t>(d)], w);
        out.total = d == 0 ? out.stages[0].total : add(tape, out.total, out.stages[static_cast<size_t>(d)].total);
    }
    return out;
}

// Sum of the three modality reconstruction errors.
template <typename T>
Value<T> reconstruction_loss(Tape<T>& tape, const Value<T>& w, const Value<T>& w_hat, const Value<T>& m,
                             const Value<T>& m_hat, const Value<T>& i, const Value<T>& i_hat) {
    return add(tape, add(tape, mse_loss(tape, w, w_hat), mse_loss(tape, m, m_hat)), mse_loss(tape, i, i_hat));
}

}  // namespace pixelwave
