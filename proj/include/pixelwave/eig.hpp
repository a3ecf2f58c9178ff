#pragma once

#include <algorithm>
#include <numeric>

#include "pixelwave/ops_core.hpp"

namespace pixelwave {

struct SymEigOptions {
    double sweep_threshold = 1e-12;  // relative off-diagonal convergence target
    int max_sweeps = 100;
    double symmetry_tol = 1e-8;
    double grad_gap_floor = 1e-6;  // eigenvalue-gap safeguard in the backward
};

template <typename T>
struct SymEigResult {
    Tensor<T> eigvals;  // descending
    Tensor<T> eigvecs;  // columns, orthonormal
};

// Cyclic Jacobi rotations. Small dense symmetric matrices only, which is
// all the whitening paths ever produce (G x G and D_p x D_p).
template <typename T>
SymEigResult<T> sym_eig_raw(const Tensor<T>& A, const SymEigOptions& opt = {}) {
    if (A.rank() != 2 || A.shape[0] != A.shape[1]) throw dimension_error("sym_eig expects a square matrix");
    int64_t n = A.shape[0];
    if (!A.all_finite()) throw input_error("sym_eig: non-finite entries");
    double scale = std::max(1.0, max_abs(A));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (std::abs(static_cast<double>(A.at(i, j)) - static_cast<double>(A.at(j, i))) >
                opt.symmetry_tol * scale)
                throw input_error("sym_eig: input asymmetric beyond tolerance");

    std::vector<double> a(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n * n; ++i) a[static_cast<size_t>(i)] = static_cast<double>(A[i]);
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;

    auto off_max = [&] {
        double m = 0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) m = std::max(m, std::abs(a[static_cast<size_t>(p * n + q)]));
        return m;
    };

    bool converged = n <= 1;
    for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
        if (off_max() <= opt.sweep_threshold * scale) {
            converged = true;
            break;
        }
        for (int64_t p = 0; p < n - 1; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = a[static_cast<size_t>(p * n + q)];
                if (std::abs(apq) <= 1e-300) continue;
                double app = a[static_cast<size_t>(p * n + p)];
                double aqq = a[static_cast<size_t>(q * n + q)];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    double aip = a[static_cast<size_t>(i * n + p)];
                    double aiq = a[static_cast<size_t>(i * n + q)];
                    a[static_cast<size_t>(i * n + p)] = c * aip - s * aiq;
                    a[static_cast<size_t>(i * n + q)] = s * aip + c * aiq;
                }
                for (int64_t j = 0; j < n; ++j) {
                    double apj = a[static_cast<size_t>(p * n + j)];
                    double aqj = a[static_cast<size_t>(q * n + j)];
                    a[static_cast<size_t>(p * n + j)] = c * apj - s * aqj;
                    a[static_cast<size_t>(q * n + j)] = s * apj + c * aqj;
                }
                for (int64_t i = 0; i < n; ++i) {
                    double vip = v[static_cast<size_t>(i * n + p)];
                    double viq = v[static_cast<size_t>(i * n + q)];
                    v[static_cast<size_t>(i * n + p)] = c * vip - s * viq;
                    v[static_cast<size_t>(i * n + q)] = s * vip + c * viq;
                }
            }
    }
    if (!converged && off_max() > opt.sweep_threshold * scale)
        throw numeric_error("sym_eig: Jacobi sweeps did not converge within the sweep cap");

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return a[static_cast<size_t>(x * n + x)] > a[static_cast<size_t>(y * n + y)];
    });

    SymEigResult<T> r{Tensor<T>({n}), Tensor<T>({n, n})};
    for (int64_t j = 0; j < n; ++j) {
        int64_t src = order[static_cast<size_t>(j)];
        r.eigvals[j] = static_cast<T>(a[static_cast<size_t>(src * n + src)]);
        // Deterministic sign: make the largest-magnitude component positive.
        int64_t arg = 0;
        double best = -1;
        for (int64_t i = 0; i < n; ++i) {
            double m = std::abs(v[static_cast<size_t>(i * n + src)]);
            if (m > best) {
                best = m;
                arg = i;
            }
        }
        double sgn = v[static_cast<size_t>(arg * n + src)] >= 0 ? 1.0 : -1.0;
        for (int64_t i = 0; i < n; ++i)
            r.eigvecs.at(i, j) = static_cast<T>(sgn * v[static_cast<size_t>(i * n + src)]);
    }
    return r;
}

template <typename T>
struct SymEigNodes {
    Value<T> eigvals;
    Value<T> eigvecs;
    bool degenerate_gap = false;  // some |lambda_i - lambda_j| fell below the floor
};

// Differentiable symmetric eigendecomposition. The backward applies the
// standard eigh adjoint with an eigenvalue-gap floor; callers can consult
// `degenerate_gap` to skip unstable batches.
template <typename T>
SymEigNodes<T> sym_eig(Tape<T>& tape, const Value<T>& A, const SymEigOptions& opt = {}) {
    SymEigResult<T> r = sym_eig_raw(A->value, opt);
    int64_t n = A->value.shape[0];
    SymEigNodes<T> nodes;
    bool rg = grad_needed(tape, {A});
    nodes.eigvals = make_value(std::move(r.eigvals), rg);
    nodes.eigvecs = make_value(std::move(r.eigvecs), rg);
    for (int64_t i = 0; i < n && !nodes.degenerate_gap; ++i)
        for (int64_t j = i + 1; j < n; ++j)
            if (std::abs(static_cast<double>(nodes.eigvals->value[i]) -
                         static_cast<double>(nodes.eigvals->value[j])) < opt.grad_gap_floor) {
                nodes.degenerate_gap = true;
                break;
            }
    if (rg) {
        A->ensure_grad();
        auto evals = nodes.eigvals;
        auto evecs = nodes.eigvecs;
        double gap_floor = opt.grad_gap_floor;
        tape.record([A, evals, evecs, n, gap_floor] {
            // dA = E (diag(g_lambda) + F o (E^T g_E)) E^T, symmetrized,
            // F_ij = 1 / (lambda_j - lambda_i) with the gap floored.
            std::vector<double> M(static_cast<size_t>(n * n), 0.0);
            for (int64_t i = 0; i < n; ++i) M[static_cast<size_t>(i * n + i)] = static_cast<double>(evals->grad[i]);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    if (i == j) continue;
                    double etge = 0;
                    for (int64_t r2 = 0; r2 < n; ++r2)
                        etge += static_cast<double>(evecs->value.at(r2, i)) *
                                static_cast<double>(evecs->grad.at(r2, j));
                    double gap = static_cast<double>(evals->value[j]) - static_cast<double>(evals->value[i]);
                    if (std::abs(gap) < gap_floor) gap = (gap >= 0 ? gap_floor : -gap_floor);
                    M[static_cast<size_t>(i * n + j)] = etge / gap;
                }
            // G = E M E^T
            std::vector<double> EM(static_cast<size_t>(n * n), 0.0);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t p = 0; p < n; ++p) {
                    double e = static_cast<double>(evecs->value.at(i, p));
                    if (e == 0) continue;
                    for (int64_t j = 0; j < n; ++j) EM[static_cast<size_t>(i * n + j)] += e * M[static_cast<size_t>(p * n + j)];
                }
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    double g = 0;
                    for (int64_t p = 0; p < n; ++p)
                        g += EM[static_cast<size_t>(i * n + p)] * static_cast<double>(evecs->value.at(j, p));
                    // symmetrized contribution accumulated once per (i, j)
                    A->grad.at(i, j) += static_cast<T>(0.5 * g);
                    A->grad.at(j, i) += static_cast<T>(0.5 * g);
                }
        });
    }
    return nodes;
}

}  // namespace pixelwave
