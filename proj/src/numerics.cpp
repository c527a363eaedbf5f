#include "attnshift/numerics.hpp"

#include <cmath>
#include <cstring>

namespace attnshift {

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw ShapeError("matrix dimensions must be non-negative");
    data_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0f);
}

Matrix Matrix::filled(int rows, int cols, float value) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = value;
    return m;
}

void matmul_into(Matrix& dst, const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions disagree");
    if (dst.rows() != a.rows() || dst.cols() != b.cols()) dst = Matrix(a.rows(), b.cols());
    const int n = b.cols();
    const int k = a.cols();
    std::vector<double> acc(static_cast<std::size_t>(n));
    for (int i = 0; i < a.rows(); ++i) {
        std::memset(acc.data(), 0, acc.size() * sizeof(double));
        const float* arow = a.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = static_cast<double>(arow[p]);
            const float* brow = b.row(p);
            for (int j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* drow = dst.row(i);
        for (int j = 0; j < n; ++j) drow[j] = static_cast<float>(acc[j]);
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c;
    matmul_into(c, a, b);
    return c;
}

void softmax_row_into(std::span<const float> v, float* out) {
    double maxv = -std::numeric_limits<double>::infinity();
    bool any_live = false;
    for (float x : v) {
        if (x > kMaskNegInf) {
            any_live = true;
            if (x > maxv) maxv = x;
        }
    }
    if (!any_live) throw DegenerateDataError("softmax_row: every entry is masked");
    double sum = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
        // exp of a hugely negative argument underflows to exactly 0 for
        // masked entries.
        const double ev = (v[j] > kMaskNegInf) ? std::exp(static_cast<double>(v[j]) - maxv) : 0.0;
        out[j] = static_cast<float>(ev);
        sum += ev;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = static_cast<float>(static_cast<double>(out[j]) * inv);
}

std::vector<float> softmax_row(std::span<const float> v) {
    std::vector<float> out(v.size());
    softmax_row_into(v, out.data());
    return out;
}

std::uint64_t mix64(std::uint64_t x) {
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t RngStream::next_u64() {
    state += 0x9E3779B97F4A7C15ull;
    return mix64(state);
}

double RngStream::next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
    if (has_spare) {
        has_spare = false;
        return spare;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    // log(1-u1) keeps the argument in (0, 1], so the radius is finite.
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(theta);
    has_spare = true;
    return r * std::cos(theta);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index) {
    // FNV-1a over the label, then two scrambler passes against base+index.
    const std::uint64_t h = fnv1a(label.data(), label.size());
    return mix64(mix64(base ^ h) + index * 0x9E3779B97F4A7C15ull);
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace attnshift
