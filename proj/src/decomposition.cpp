// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include <Eigen/SVD>

namespace fp {

SvdResult svd(const Matrix& m) {
    if (!m.allFinite()) {
        throw NumericError("svd: non-finite input");
    }
    SvdResult r;
    if (m.size() == 0) {
        return r;
    }
    constexpr unsigned kOptions = Eigen::ComputeThinU | Eigen::ComputeThinV;
    // Jacobi is the accurate path; divide-and-conquer only for larger inputs.
    if (std::min(m.rows(), m.cols()) <= 64) {
        Eigen::JacobiSVD<Matrix> solver(m, kOptions);
        r.u = solver.matrixU();
        r.s = solver.singularValues();
        r.v = solver.matrixV();
    } else {
        Eigen::BDCSVD<Matrix> solver(m, kOptions);
        r.u = solver.matrixU();
        r.s = solver.singularValues();
        r.v = solver.matrixV();
    }
    return r;
}

Matrix leading_left_singular_vectors(const Matrix& m, std::size_t count) {
    if (count == 0 || count > static_cast<std::size_t>(m.rows())) {
        throw RangeError("leading_left_singular_vectors: count " + std::to_string(count) + " out of range [1, " +
                         std::to_string(m.rows()) + "]");
    }
    const auto k = static_cast<Eigen::Index>(count);
    if (static_cast<Eigen::Index>(count) <= std::min(m.rows(), m.cols())) {
        return svd(m).u.leftCols(k);
    }
    // More vectors than columns: only the full U has them.
    if (!m.allFinite()) {
        throw NumericError("svd: non-finite input");
    }
    Eigen::JacobiSVD<Matrix> solver(m, Eigen::ComputeFullU);
    return solver.matrixU().leftCols(k);
}

double orthonormality_defect(const Matrix& u) {
    const Matrix g = u.transpose() * u - Matrix::Identity(u.cols(), u.cols());
    return g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
}

// ---------------------------------------------------------------------------
// Tucker

namespace {

void check_ranks(const Shape& shape, const std::vector<std::size_t>& ranks) {
    if (ranks.size() != shape.size()) {
        throw RangeError("hosvd: expected " + std::to_string(shape.size()) + " ranks, got " +
                         std::to_string(ranks.size()));
    }
    for (std::size_t n = 0; n < ranks.size(); ++n) {
        if (ranks[n] < 1 || ranks[n] > shape[n]) {
            throw RangeError("hosvd: rank " + std::to_string(ranks[n]) + " out of range [1, " +
                             std::to_string(shape[n]) + "] for mode " + std::to_string(n));
        }
    }
}

Tensor project_all(const Tensor& t, const std::vector<Matrix>& factors, std::size_t skip) {
    Tensor out = t;
    for (std::size_t n = 0; n < factors.size(); ++n) {
        if (n != skip) {
            out = mode_product(out, factors[n].transpose(), n);
        }
    }
    return out;
}

}  // namespace

TuckerFactors hosvd(const Tensor& t, const std::vector<std::size_t>& ranks, std::size_t refine_iters) {
    check_ranks(t.shape(), ranks);
    TuckerFactors f;
    f.ranks = ranks;
    f.factors.reserve(t.order());
    for (std::size_t n = 0; n < t.order(); ++n) {
        f.factors.push_back(leading_left_singular_vectors(unfold(t, n), ranks[n]));
    }
    for (std::size_t it = 0; it < refine_iters; ++it) {
        for (std::size_t n = 0; n < t.order(); ++n) {
            const Tensor partial = project_all(t, f.factors, n);
            f.factors[n] = leading_left_singular_vectors(unfold(partial, n), ranks[n]);
        }
    }
    f.core = project_all(t, f.factors, t.order());
    return f;
}

Tensor tucker_reconstruct(const TuckerFactors& f) {
    Tensor out = f.core;
    for (std::size_t n = 0; n < f.factors.size(); ++n) {
        out = mode_product(out, f.factors[n], n);
    }
    return out;
}

Tucker2Factors tucker2_decompose(const Tensor& kernel, std::size_t r3, std::size_t r4) {
    if (kernel.order() != 4) {
        throw ShapeError("tucker2_decompose: expected a 4-way kernel, got " + shape_string(kernel.shape()));
    }
    const std::size_t s = kernel.extent(2);
    const std::size_t t = kernel.extent(3);
    if (r3 < 1 || r3 > s) {
        throw RangeError("tucker2_decompose: r3 " + std::to_string(r3) + " out of range [1, " + std::to_string(s) + "]");
    }
    if (r4 < 1 || r4 > t) {
        throw RangeError("tucker2_decompose: r4 " + std::to_string(r4) + " out of range [1, " + std::to_string(t) + "]");
    }
    Tucker2Factors f;
    f.u3 = leading_left_singular_vectors(unfold(kernel, 2), r3);
    f.u4 = leading_left_singular_vectors(unfold(kernel, 3), r4);
    f.core = mode_product(mode_product(kernel, f.u3.transpose(), 2), f.u4.transpose(), 3);
    return f;
}

Tensor tucker2_reconstruct(const Tucker2Factors& f) {
    if (f.core.order() != 4 || f.core.extent(2) != f.rank3() || f.core.extent(3) != f.rank4()) {
        throw ShapeError("tucker2_reconstruct: core " + shape_string(f.core.shape()) + " does not match factors");
    }
    return mode_product(mode_product(f.core, f.u3, 2), f.u4, 3);
}

// ---------------------------------------------------------------------------
// CPD-ALS

namespace {

// Khatri-Rao rows aligned with unfold(t, mode) columns: remaining modes
// row-major in ascending order, so the highest remaining mode varies fastest.
Matrix khatri_rao_except(const std::vector<Matrix>& factors, std::size_t mode, std::size_t rank) {
    std::size_t rows = 1;
    for (std::size_t n = 0; n < factors.size(); ++n) {
        if (n != mode) {
            rows *= static_cast<std::size_t>(factors[n].rows());
        }
    }
    Matrix kr = Matrix::Ones(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(rank));
    std::size_t stride = rows;
    for (std::size_t n = 0; n < factors.size(); ++n) {
        if (n == mode) {
            continue;
        }
        const auto extent = static_cast<std::size_t>(factors[n].rows());
        stride /= extent;
        for (std::size_t row = 0; row < rows; ++row) {
            const auto idx = static_cast<Eigen::Index>((row / stride) % extent);
            kr.row(static_cast<Eigen::Index>(row)).array() *= factors[n].row(idx).array();
        }
    }
    return kr;
}

void normalize_columns(Matrix& a, Vector& weights) {
    for (Eigen::Index r = 0; r < a.cols(); ++r) {
        const double n = a.col(r).norm();
        if (n > 0.0) {
            a.col(r) /= n;
            weights(r) *= n;
        }
    }
}

}  // namespace

Tensor cpd_reconstruct(const CpdFactors& f) {
    Tensor out(f.shape);
    if (f.factors.empty()) {
        return out;
    }
    const Matrix scaled = f.factors[0] * f.weights.asDiagonal();
    const Matrix kr = khatri_rao_except(f.factors, 0, f.rank);
    return fold(scaled * kr.transpose(), 0, f.shape);
}

CpdFactors cpd_als(const Tensor& t, std::size_t rank, std::size_t max_iters, double tol, std::uint64_t seed) {
    if (rank < 1) {
        throw RangeError("cpd_als: rank must be >= 1");
    }
    if (!t.all_finite()) {
        throw NumericError("cpd_als: non-finite input");
    }
    const std::size_t order = t.order();
    CpdFactors f;
    f.rank = rank;
    f.shape = t.shape();
    f.weights = Vector::Ones(static_cast<Eigen::Index>(rank));

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Matrix> unfoldings;
    unfoldings.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        unfoldings.push_back(unfold(t, n));
        const auto extent = static_cast<Eigen::Index>(t.extent(n));
        Matrix a(extent, static_cast<Eigen::Index>(rank));
        const SvdResult sv = svd(unfoldings.back());
        const Eigen::Index from_svd = std::min<Eigen::Index>(sv.u.cols(), static_cast<Eigen::Index>(rank));
        a.leftCols(from_svd) = sv.u.leftCols(from_svd);
        for (Eigen::Index r = from_svd; r < a.cols(); ++r) {
            for (Eigen::Index i = 0; i < extent; ++i) {
                a(i, r) = normal(rng);
            }
            a.col(r).normalize();
        }
        f.factors.push_back(std::move(a));
    }

    const double norm_t = frobenius_norm(t);
    auto rel_error = [&]() {
        const double e = frobenius_norm([&] {
            Tensor diff = cpd_reconstruct(f);
            for (std::size_t i = 0; i < diff.size(); ++i) {
                diff[i] -= t[i];
            }
            return diff;
        }());
        return norm_t > 0.0 ? e / norm_t : e;
    };
    f.error_history.push_back(rel_error());

    const auto r = static_cast<Eigen::Index>(rank);
    for (std::size_t it = 0; it < max_iters; ++it) {
        for (std::size_t n = 0; n < order; ++n) {
            Matrix gram = Matrix::Ones(r, r);
            for (std::size_t m = 0; m < order; ++m) {
                if (m != n) {
                    gram.array() *= (f.factors[m].transpose() * f.factors[m]).array();
                }
            }
            const Matrix rhs = (unfoldings[n] * khatri_rao_except(f.factors, n, rank)).transpose();
            // LDLT's rcond estimate misses exactly singular Gram matrices, so
            // test the spectrum directly (R x R, cheap).
            const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues();
            const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1.0);
            if (ev.minCoeff() <= 1e-13 * scale) {
                gram += Matrix::Identity(r, r) * (kCpdRidge * scale);
                f.ridge_used = true;
            }
            Matrix a = Eigen::LDLT<Matrix>(gram).solve(rhs).transpose();
            if (!a.allFinite()) {
                throw NumericError("cpd_als: non-finite factor update at sweep " + std::to_string(it));
            }
            f.weights.setOnes();
            normalize_columns(a, f.weights);
            f.factors[n] = std::move(a);
        }
        f.iterations = it + 1;
        f.error_history.push_back(rel_error());
        const double prev = f.error_history[f.error_history.size() - 2];
        if (prev - f.error_history.back() < tol) {
            f.converged = true;
            break;
        }
    }
    return f;
}

}  // namespace fp
