// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fp {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ')';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape));
        }
    }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (shape_size(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
    }
}

Tensor Tensor::filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

std::size_t Tensor::extent(std::size_t mode) const {
    if (mode >= shape_.size()) {
        throw RangeError("mode " + std::to_string(mode) + " out of range for order " + std::to_string(order()));
    }
    return shape_[mode];
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw RangeError("index rank does not match tensor order");
    }
    std::size_t flat = 0;
    for (std::size_t n = 0; n < index.size(); ++n) {
        if (index[n] >= shape_[n]) {
            throw RangeError("index out of range along mode " + std::to_string(n));
        }
        flat = flat * shape_[n] + index[n];
    }
    return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
    return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) {
    std::fill(data_.begin(), data_.end(), value);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double frobenius_norm(const Tensor& t) {
    double sum = 0.0;
    for (double v : t.data()) {
        sum += v * v;
    }
    return std::sqrt(sum);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double relative_error(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("relative_error: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Shape (outer, extent, inner) view: outer = product of modes before `mode`,
// inner = product of modes after it. Column of unfold = o * inner + i.
namespace {

struct ModeSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

ModeSplit split_at(const Shape& shape, std::size_t mode) {
    ModeSplit s;
    for (std::size_t n = 0; n < mode; ++n) {
        s.outer *= shape[n];
    }
    s.extent = shape[mode];
    for (std::size_t n = mode + 1; n < shape.size(); ++n) {
        s.inner *= shape[n];
    }
    return s;
}

}  // namespace

Matrix unfold(const Tensor& t, std::size_t mode) {
    if (mode >= t.order()) {
        throw RangeError("unfold: mode " + std::to_string(mode) + " out of range for order " +
                         std::to_string(t.order()));
    }
    const auto s = split_at(t.shape(), mode);
    Matrix m(static_cast<Eigen::Index>(s.extent), static_cast<Eigen::Index>(s.outer * s.inner));
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t e = 0; e < s.extent; ++e) {
            const double* src = t.ptr() + (o * s.extent + e) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                m(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(o * s.inner + i)) = src[i];
            }
        }
    }
    return m;
}

Tensor fold(const Matrix& m, std::size_t mode, const Shape& shape) {
    if (mode >= shape.size()) {
        throw RangeError("fold: mode " + std::to_string(mode) + " out of range");
    }
    const auto s = split_at(shape, mode);
    if (static_cast<std::size_t>(m.rows()) != s.extent || static_cast<std::size_t>(m.cols()) != s.outer * s.inner) {
        throw ShapeError("fold: matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         " does not match shape " + shape_string(shape) + " at mode " + std::to_string(mode));
    }
    Tensor t(shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t e = 0; e < s.extent; ++e) {
            double* dst = t.ptr() + (o * s.extent + e) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                dst[i] = m(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(o * s.inner + i));
            }
        }
    }
    return t;
}

Tensor to_tensor(const Matrix& m) {
    const auto rows = static_cast<std::size_t>(m.rows());
    const auto cols = static_cast<std::size_t>(m.cols());
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            t[i * cols + j] = m(Eigen::Index(i), Eigen::Index(j));
        }
    }
    return t;
}

Matrix to_matrix(const Tensor& t) {
    if (t.order() != 2) {
        throw ShapeError("to_matrix: expected order-2 tensor, got " + shape_string(t.shape()));
    }
    const std::size_t rows = t.extent(0);
    const std::size_t cols = t.extent(1);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            m(Eigen::Index(i), Eigen::Index(j)) = t[i * cols + j];
        }
    }
    return m;
}

Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t mode) {
    if (mode >= t.order()) {
        throw RangeError("mode_product: mode out of range");
    }
    if (static_cast<std::size_t>(m.cols()) != t.extent(mode)) {
        throw ShapeError("mode_product: matrix columns do not match extent of mode " + std::to_string(mode));
    }
    Shape out_shape = t.shape();
    out_shape[mode] = static_cast<std::size_t>(m.rows());
    const Matrix product = m * unfold(t, mode);
    return fold(product, mode, out_shape);
}

// ---------------------------------------------------------------------------
// FPTN records

namespace {

constexpr std::array<char, 4> kMagic{'F', 'P', 'T', 'N'};

template <typename T>
void put_le(std::ostream& out, T value) {
    static_assert(std::is_integral_v<T>);
    std::array<char, sizeof(T)> buf{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFFu);
    }
    out.write(buf.data(), buf.size());
}

template <typename T>
T get_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (!in) {
        throw FormatError("FPTN: truncated record");
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    }
    return static_cast<T>(v);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    if (t.order() > 255) {
        throw FormatError("FPTN: order exceeds 255");
    }
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint16_t>(out, kTensorRecordVersion);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.order()));
    for (auto e : t.shape()) {
        if (e > 0xFFFFFFFFu) {
            throw FormatError("FPTN: extent exceeds u32");
        }
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    for (double v : t.data()) {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) {
        throw FormatError("FPTN: write failed");
    }
}

Tensor read_tensor(std::istream& in) {
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw FormatError("FPTN: bad magic");
    }
    const auto version = get_le<std::uint16_t>(in);
    if (version != kTensorRecordVersion) {
        throw FormatError("FPTN: unsupported version " + std::to_string(version));
    }
    const auto order = get_le<std::uint8_t>(in);
    Shape shape(order);
    for (auto& e : shape) {
        e = get_le<std::uint32_t>(in);
        if (e == 0) {
            throw FormatError("FPTN: zero extent");
        }
    }
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) {
        v = std::bit_cast<double>(get_le<std::uint64_t>(in));
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace fp
