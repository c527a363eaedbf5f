#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "attnshift/common.hpp"

namespace attnshift {

// Mask encoding for "minus infinity": the most negative finite float.
// Matrices stay finite-valued; softmax treats anything at or below this
// as an exactly-masked entry.
inline constexpr float kMaskNegInf = std::numeric_limits<float>::lowest();

// Dense row-major float32 matrix. Accumulations run in double, storage
// stays 32-bit.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);
    static Matrix filled(int rows, int cols, float value);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    float operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    float* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const float* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols_)}; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    bool operator==(const Matrix& other) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<float> data_;
};

// C = A * B with double accumulation. Throws ShapeError on a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);
void matmul_into(Matrix& dst, const Matrix& a, const Matrix& b);

// Row softmax with max subtraction. Entries at or below kMaskNegInf (or
// -inf) produce exactly zero. Throws DegenerateDataError when no entry
// is live.
std::vector<float> softmax_row(std::span<const float> v);
void softmax_row_into(std::span<const float> v, float* out);

// SplitMix64 stream: one 64-bit word of state, identical draws on every
// platform. Gaussian draws use Box-Muller over two uniforms per pair.
struct RngStream {
    std::uint64_t state = 0;
    bool has_spare = false;
    double spare = 0.0;

    explicit RngStream(std::uint64_t seed = 0) : state(seed) {}

    std::uint64_t next_u64();
    double next_uniform();   // [0, 1), 53-bit mantissa
    double next_gaussian();  // standard normal
};

// SplitMix64 output scrambler, used both by the stream and for deriving
// independent sub-seeds.
std::uint64_t mix64(std::uint64_t x);

// Stable sub-seed derivation: mixes a base seed with a label and index so
// distinct purposes get independent streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index = 0);

// FNV-1a over raw bytes; chainable via the h argument. Used for content
// hashes in artifact provenance.
std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t h = 0xCBF29CE484222325ull);

}  // namespace attnshift
