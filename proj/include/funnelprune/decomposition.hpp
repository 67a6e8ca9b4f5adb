// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "funnelprune/tensor.hpp"

namespace fp {

struct SvdResult {
    Matrix u;    // (m, k) column-orthonormal
    Vector s;    // k values, non-negative, descending
    Matrix v;    // (n, k) column-orthonormal
};

/// Thin SVD, k = min(rows, cols). Throws NumericError on non-finite input.
SvdResult svd(const Matrix& m);

/// Leading `count` left singular vectors of m.
Matrix leading_left_singular_vectors(const Matrix& m, std::size_t count);

struct TuckerFactors {
    Tensor core;
    std::vector<Matrix> factors;  // factor n: (extent_n, ranks[n])
    std::vector<std::size_t> ranks;
};

/**
 * Truncated HOSVD: factor n holds the leading ranks[n] left singular vectors
 * of unfold(t, n); the core is t contracted with every factor transpose.
 * `refine_iters` > 0 runs that many HOOI sweeps afterwards (default none).
 */
TuckerFactors hosvd(const Tensor& t, const std::vector<std::size_t>& ranks, std::size_t refine_iters = 0);
Tensor tucker_reconstruct(const TuckerFactors& f);

/// Kernel K (D, D, S, T) ≈ C ×₃ u3 ×₄ u4 with identity spatial factors.
struct Tucker2Factors {
    Tensor core;  // (D, D, R3, R4)
    Matrix u3;    // (S, R3)
    Matrix u4;    // (T, R4)

    std::size_t kernel_h() const { return core.extent(0); }
    std::size_t kernel_w() const { return core.extent(1); }
    std::size_t rank3() const { return static_cast<std::size_t>(u3.cols()); }
    std::size_t rank4() const { return static_cast<std::size_t>(u4.cols()); }
    std::size_t in_channels() const { return static_cast<std::size_t>(u3.rows()); }
    std::size_t out_channels() const { return static_cast<std::size_t>(u4.rows()); }
};

Tucker2Factors tucker2_decompose(const Tensor& kernel, std::size_t r3, std::size_t r4);
Tensor tucker2_reconstruct(const Tucker2Factors& f);

struct CpdFactors {
    std::size_t rank = 0;
    std::vector<Matrix> factors;  // factor n: (extent_n, rank), unit-norm columns
    Vector weights;               // length rank
    Shape shape;

    // Diagnostics.
    std::size_t iterations = 0;
    std::vector<double> error_history;  // relative error after init and after each sweep
    bool ridge_used = false;
    bool converged = false;
};

/// Ridge added to the normal equations when they are numerically singular.
inline constexpr double kCpdRidge = 1e-10;

/**
 * Rank-R CPD by alternating least squares.
 *
 * Factors start from the leading left singular vectors of each unfolding;
 * columns beyond the unfolding's extent are filled from a seeded normal
 * draw. Stops after `max_iters` sweeps or when the relative error improves
 * by less than `tol`.
 */
CpdFactors cpd_als(const Tensor& t, std::size_t rank, std::size_t max_iters, double tol, std::uint64_t seed = 0);
Tensor cpd_reconstruct(const CpdFactors& f);

/// ‖(UᵀU) − I‖_max.
double orthonormality_defect(const Matrix& u);

}  // namespace fp
