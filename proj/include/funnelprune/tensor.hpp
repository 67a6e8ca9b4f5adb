// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "funnelprune/error.hpp"

namespace fp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/**
 * Dense N-way array of doubles.
 *
 * Data is stored row-major over the shape (last index fastest). Every
 * unfolding, serialization record and oracle in the project uses this one
 * linearization.
 */
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor filled(Shape shape, double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t order() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t mode) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t flat) noexcept { return data_[flat]; }
    double operator[](std::size_t flat) const noexcept { return data_[flat]; }

    /// Linear offset of a multi-index; throws on rank or range violation.
    std::size_t offset(std::span<const std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;

    /// Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    void fill(double value);
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

double frobenius_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// ‖a − b‖_F / ‖b‖_F, or the absolute norm when b is zero.
double relative_error(const Tensor& a, const Tensor& b);

/**
 * Mode-n unfolding.
 *
 * Row index is the `mode` coordinate. The column index linearizes the
 * remaining coordinates row-major in ascending mode order, so for shape
 * (I0, I1, I2) and mode 1 the entry t[i0, i1, i2] lands at
 * (i1, i0 * I2 + i2).
 */
Matrix unfold(const Tensor& t, std::size_t mode);

/// Exact inverse of unfold for the same mode and shape.
Tensor fold(const Matrix& m, std::size_t mode, const Shape& shape);

/// Mode-n product t ×_n m, where m has shape (J, extent_n).
Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t mode);

/// Row-major (rows, cols) tensor copy of a matrix, and back.
Tensor to_tensor(const Matrix& m);
Matrix to_matrix(const Tensor& t);

// FPTN record: "FPTN", u16 version, u8 order, u32 extents, f64 LE payload.
inline constexpr std::uint16_t kTensorRecordVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace fp
