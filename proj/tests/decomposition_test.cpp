// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "funnelprune/decomposition.hpp"
#include "test_util.hpp"

namespace fp {
namespace {

using testing::for_each_index;
using testing::random_matrix;
using testing::random_tensor;

// Cyclic Jacobi eigenvalue iteration on a symmetric matrix. Independent of
// the SVD path; only used as an oracle.
std::vector<double> jacobi_eigenvalues(Matrix a) {
    const Eigen::Index n = a.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                off += a(p, q) * a(p, q);
            }
        }
        if (off < 1e-30) {
            break;
        }
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        ev[static_cast<std::size_t>(i)] = a(i, i);
    }
    std::sort(ev.rbegin(), ev.rend());
    return ev;
}

double squared_error(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------

TEST(SvdTest, Identity) {
    const auto r = svd(Matrix::Identity(3, 3));
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(r.s(i), 1.0, 1e-15);
    }
}

TEST(SvdTest, Diagonal) {
    Matrix m = Matrix::Zero(3, 3);
    m(0, 0) = 3;
    m(1, 1) = 2;
    m(2, 2) = 1;
    const auto r = svd(m);
    EXPECT_NEAR(r.s(0), 3.0, 1e-14);
    EXPECT_NEAR(r.s(1), 2.0, 1e-14);
    EXPECT_NEAR(r.s(2), 1.0, 1e-14);
}

TEST(SvdTest, RandomMatchesEigenOracle) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix m = random_matrix(8, 5, seed);
        const auto r = svd(m);
        const Matrix rec = r.u * r.s.asDiagonal() * r.v.transpose();
        EXPECT_LE((m - rec).norm(), 1e-8 * m.norm());
        EXPECT_LE(orthonormality_defect(r.u), 1e-10);
        EXPECT_LE(orthonormality_defect(r.v), 1e-10);
        const auto ev = jacobi_eigenvalues(m.transpose() * m);
        ASSERT_EQ(r.s.size(), 5);
        for (int i = 0; i < 5; ++i) {
            EXPECT_GE(r.s(i), 0.0);
            if (i > 0) {
                EXPECT_LE(r.s(i), r.s(i - 1));
            }
            EXPECT_NEAR(r.s(i), std::sqrt(std::max(0.0, ev[static_cast<std::size_t>(i)])), 1e-6);
        }
    }
}

TEST(SvdTest, WideAndLargeInputs) {
    const Matrix wide = random_matrix(4, 30, 5);
    const auto a = svd(wide);
    EXPECT_LE((wide - a.u * a.s.asDiagonal() * a.v.transpose()).norm(), 1e-8 * wide.norm());
    const Matrix big = random_matrix(80, 90, 6);
    const auto b = svd(big);
    EXPECT_LE((big - b.u * b.s.asDiagonal() * b.v.transpose()).norm(), 1e-8 * big.norm());
}

TEST(SvdTest, NonFiniteThrows) {
    Matrix m = Matrix::Identity(2, 2);
    m(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(svd(m), NumericError);
}

// ---------------------------------------------------------------------------

TEST(HosvdTest, FullRankIsLossless) {
    const Tensor t = random_tensor({3, 4, 5}, 1);
    const auto f = hosvd(t, {3, 4, 5});
    EXPECT_LE(relative_error(tucker_reconstruct(f), t), 1e-6);
    for (const auto& u : f.factors) {
        EXPECT_LE(orthonormality_defect(u), 1e-8);
    }
}

TEST(HosvdTest, RankOneOuterProductIsExact) {
    const Vector a = Vector::LinSpaced(3, 1.0, 2.0);
    const Vector b = Vector::LinSpaced(4, -1.0, 3.0);
    const Vector c = Vector::LinSpaced(2, 0.5, 1.5);
    Tensor t({3, 4, 2});
    for_each_index(t.shape(), [&](const Shape& i, std::size_t flat) {
        t[flat] = a(static_cast<Eigen::Index>(i[0])) * b(static_cast<Eigen::Index>(i[1])) *
                  c(static_cast<Eigen::Index>(i[2]));
    });
    const auto f = hosvd(t, {1, 1, 1});
    EXPECT_LE(relative_error(tucker_reconstruct(f), t), 1e-12);
}

TEST(HosvdTest, TruncatedErrorWithinDiscardedSpectrumBound) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor t = random_tensor({4, 4, 4}, 100 + seed);
        const std::vector<std::size_t> ranks{2, 2, 2};
        double bound = 0.0;
        for (std::size_t n = 0; n < 3; ++n) {
            const auto s = svd(unfold(t, n)).s;
            for (Eigen::Index i = static_cast<Eigen::Index>(ranks[n]); i < s.size(); ++i) {
                bound += s(i) * s(i);
            }
        }
        const auto f = hosvd(t, ranks);
        const double err = squared_error(tucker_reconstruct(f), t);
        EXPECT_LE(err, bound * (1.0 + 1e-12));
        EXPECT_EQ(f.core.shape(), (Shape{2, 2, 2}));

        // HOOI sweeps never make the fit worse.
        const auto refined = hosvd(t, ranks, 5);
        EXPECT_LE(squared_error(tucker_reconstruct(refined), t), err * (1.0 + 1e-10));
    }
}

TEST(HosvdTest, RankOutOfRangeThrows) {
    const Tensor t = random_tensor({2, 3}, 0);
    EXPECT_THROW(hosvd(t, {0, 1}), RangeError);
    EXPECT_THROW(hosvd(t, {2, 4}), RangeError);
    EXPECT_THROW(hosvd(t, {2}), RangeError);
}

// ---------------------------------------------------------------------------

Tensor naive_tucker2(const Tucker2Factors& f) {
    const std::size_t dh = f.core.extent(0);
    const std::size_t dw = f.core.extent(1);
    Tensor k({dh, dw, f.in_channels(), f.out_channels()});
    for (std::size_t i = 0; i < dh; ++i) {
        for (std::size_t j = 0; j < dw; ++j) {
            for (std::size_t s = 0; s < f.in_channels(); ++s) {
                for (std::size_t t = 0; t < f.out_channels(); ++t) {
                    double sum = 0.0;
                    for (std::size_t r3 = 0; r3 < f.rank3(); ++r3) {
                        for (std::size_t r4 = 0; r4 < f.rank4(); ++r4) {
                            sum += f.core.at({i, j, r3, r4}) * f.u3(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r3)) *
                                   f.u4(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(r4));
                        }
                    }
                    k.at({i, j, s, t}) = sum;
                }
            }
        }
    }
    return k;
}

TEST(Tucker2Test, FullRankIsLossless) {
    const Tensor k = random_tensor({3, 3, 6, 5}, 2);
    const auto f = tucker2_decompose(k, 6, 5);
    EXPECT_LE(relative_error(tucker2_reconstruct(f), k), 1e-6);
    EXPECT_LE(orthonormality_defect(f.u3), 1e-8);
    EXPECT_LE(orthonormality_defect(f.u4), 1e-8);
}

TEST(Tucker2Test, RankOneChannelPatternIsExact) {
    const Tensor spatial = random_tensor({3, 3}, 4);
    const Vector a = Vector::LinSpaced(4, 1.0, -1.0);
    const Vector b = Vector::LinSpaced(6, 0.2, 2.0);
    Tensor k({3, 3, 4, 6});
    for_each_index(k.shape(), [&](const Shape& i, std::size_t flat) {
        k[flat] = spatial.at({i[0], i[1]}) * a(static_cast<Eigen::Index>(i[2])) * b(static_cast<Eigen::Index>(i[3]));
    });
    const auto f = tucker2_decompose(k, 1, 1);
    EXPECT_LE(relative_error(tucker2_reconstruct(f), k), 1e-12);
}

// Projection oracle: the rank-r Tucker-2 approximation equals
// K ×₃ P3 ×₄ P4 with Pn the projector onto the leading eigenvectors of
// unfold(K, n) unfold(K, n)ᵀ.
TEST(Tucker2Test, TruncatedMatchesDenseContractionOracle) {
    const Tensor k = random_tensor({3, 3, 8, 16}, 7);
    const std::size_t r3 = 4;
    const std::size_t r4 = 8;

    auto projector = [&](std::size_t mode, std::size_t rank) {
        const Matrix m = unfold(k, mode);
        Eigen::SelfAdjointEigenSolver<Matrix> es(m * m.transpose());
        const Matrix v = es.eigenvectors().rightCols(static_cast<Eigen::Index>(rank));
        return Matrix(v * v.transpose());
    };
    const Matrix p3 = projector(2, r3);
    const Matrix p4 = projector(3, r4);
    Tensor approx(k.shape());
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            for (std::size_t s = 0; s < 8; ++s) {
                for (std::size_t t = 0; t < 16; ++t) {
                    double sum = 0.0;
                    for (std::size_t s2 = 0; s2 < 8; ++s2) {
                        for (std::size_t t2 = 0; t2 < 16; ++t2) {
                            sum += p3(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(s2)) *
                                   p4(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t2)) * k.at({i, j, s2, t2});
                        }
                    }
                    approx.at({i, j, s, t}) = sum;
                }
            }
        }
    }
    const double oracle_error = std::sqrt(squared_error(approx, k));

    const auto f = tucker2_decompose(k, r3, r4);
    const Tensor rec = tucker2_reconstruct(f);
    EXPECT_NEAR(std::sqrt(squared_error(rec, k)), oracle_error, 1e-8);
    EXPECT_LE(max_abs_diff(rec, approx), 1e-8);
    EXPECT_EQ(f.core.shape(), (Shape{3, 3, 4, 8}));
}

TEST(Tucker2Test, IdentityFactorsEmbedCore) {
    Tucker2Factors f;
    f.core = random_tensor({3, 3, 4, 5}, 8);
    f.u3 = Matrix::Identity(4, 4);
    f.u4 = Matrix::Identity(5, 5);
    EXPECT_EQ(max_abs_diff(tucker2_reconstruct(f), f.core), 0.0);
}

TEST(Tucker2Test, SmallCaseAgainstQuadrupleLoop) {
    Tucker2Factors f;
    f.core = Tensor({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    f.u3 = Matrix(2, 2);
    f.u3 << 1.0, 0.5, -1.0, 2.0;
    f.u4 = Matrix(2, 2);
    f.u4 << 0.0, 1.0, 3.0, -2.0;
    // K[0,0,s,t] = sum_{a,b} C[a,b] u3[s,a] u4[t,b]
    // K[s=0,t=0] = 1*1*0 + 2*1*1 + 3*0.5*0 + 4*0.5*1 = 4
    // K[s=0,t=1] = 1*1*3 + 2*1*(-2) + 3*0.5*3 + 4*0.5*(-2) = -0.5
    // K[s=1,t=0] = 1*(-1)*0 + 2*(-1)*1 + 3*2*0 + 4*2*1 = 6
    // K[s=1,t=1] = 1*(-1)*3 + 2*(-1)*(-2) + 3*2*3 + 4*2*(-2) = 3
    const Tensor k = tucker2_reconstruct(f);
    EXPECT_DOUBLE_EQ(k.at({0, 0, 0, 0}), 4.0);
    EXPECT_DOUBLE_EQ(k.at({0, 0, 0, 1}), -0.5);
    EXPECT_DOUBLE_EQ(k.at({0, 0, 1, 0}), 6.0);
    EXPECT_DOUBLE_EQ(k.at({0, 0, 1, 1}), 3.0);
    EXPECT_LE(max_abs_diff(k, naive_tucker2(f)), 1e-12);
}

TEST(Tucker2Test, ReconstructAgreesWithNaiveLoop) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tucker2Factors f;
        f.core = random_tensor({3, 3, 3, 4}, seed);
        f.u3 = random_matrix(5, 3, seed + 10);
        f.u4 = random_matrix(6, 4, seed + 20);
        EXPECT_LE(max_abs_diff(tucker2_reconstruct(f), naive_tucker2(f)), 1e-10);
    }
}

TEST(Tucker2Test, ContractViolations) {
    EXPECT_THROW(tucker2_decompose(random_tensor({3, 3, 4}, 0), 1, 1), ShapeError);
    const Tensor k = random_tensor({3, 3, 4, 5}, 0);
    EXPECT_THROW(tucker2_decompose(k, 0, 1), RangeError);
    EXPECT_THROW(tucker2_decompose(k, 5, 1), RangeError);
    EXPECT_THROW(tucker2_decompose(k, 1, 6), RangeError);
}

// ---------------------------------------------------------------------------

TEST(CpdTest, RankOneIsExact) {
    Tensor t({3, 4, 2});
    for_each_index(t.shape(), [&](const Shape& i, std::size_t flat) {
        t[flat] = (1.0 + static_cast<double>(i[0])) * (0.5 - static_cast<double>(i[1])) * (2.0 + static_cast<double>(i[2]));
    });
    const auto f = cpd_als(t, 1, 50, 1e-14);
    EXPECT_LE(relative_error(cpd_reconstruct(f), t), 1e-6);
}

TEST(CpdTest, OverCompleteRankFitsSmallTensor) {
    const Tensor t = random_tensor({2, 2, 3}, 42);
    const auto f = cpd_als(t, 4, 20000, 1e-16, 42);
    EXPECT_LE(relative_error(cpd_reconstruct(f), t), 1e-4);
}

TEST(CpdTest, ZeroIterationsReturnsInitialization) {
    const Tensor t = random_tensor({3, 4, 5}, 3);
    const auto f = cpd_als(t, 2, 0, 1e-8);
    EXPECT_EQ(f.iterations, 0u);
    ASSERT_EQ(f.error_history.size(), 1u);
    for (std::size_t n = 0; n < 3; ++n) {
        const Matrix lead = svd(unfold(t, n)).u.leftCols(2);
        EXPECT_EQ(f.factors[n], lead);
    }
    EXPECT_EQ(f.weights, Vector::Ones(2));
}

TEST(CpdTest, ErrorIsNonIncreasing) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor t = random_tensor({4, 3, 5}, 200 + seed);
        const auto f = cpd_als(t, 3, 200, 0.0, seed);
        for (std::size_t i = 1; i < f.error_history.size(); ++i) {
            EXPECT_LE(f.error_history[i], f.error_history[i - 1] + 1e-12) << "sweep " << i;
        }
        EXPECT_EQ(cpd_reconstruct(f).shape(), t.shape());
    }
}

TEST(CpdTest, SingularNormalEquationsUseRidge) {
    // Unit extents force rank-one Gram factors, so rank 2 is singular.
    const Tensor t = random_tensor({1, 1, 3}, 5);
    const auto f = cpd_als(t, 2, 10, 0.0, 1);
    EXPECT_TRUE(f.ridge_used);
    EXPECT_LE(relative_error(cpd_reconstruct(f), t), 1e-4);
}

TEST(CpdTest, ZeroRankThrows) {
    EXPECT_THROW(cpd_als(random_tensor({2, 2}, 0), 0, 1, 0.0), RangeError);
}

}  // namespace
}  // namespace fp
