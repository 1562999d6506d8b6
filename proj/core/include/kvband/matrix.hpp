#pragma once
// Minimal deterministic dense numeric kernels used by the model and engine.
//
// All kernels are pure functions over 32-bit floats with a fixed accumulation
// order, so repeated calls with identical inputs are bit-identical and the
// engine/oracle equivalence tests can use tight tolerances.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvband {

// Row-major dense float matrix. data.size() == rows * cols always.
struct Matrix {
    std::size_t rows{0};
    std::size_t cols{0};
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// Standard product. Accumulates along k strictly left-to-right for every
// output element (i-k-j loop order: deterministic, and the innermost j loop
// stays elementwise so it vectorizes without reassociating the k-sum).
// Throws std::invalid_argument on inner-dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

// Softmax over the visible entries only; invisible entries are exactly 0 in
// the result. Numerically stabilized by max-subtraction over visible entries.
// Throws std::invalid_argument if the sequences differ in length or no entry
// is visible (an empty visible set signals a policy bug: the query's own
// position must always be visible).
std::vector<float> masked_softmax_row(std::span<const float> scores,
                                      std::span<const std::uint8_t> visible);

// y_i = gain_i * x_i / sqrt(mean(x^2) + eps). eps may be zero (making the
// transform exactly scale-invariant); an all-zero input with eps == 0 maps to
// zero. Throws std::invalid_argument on length mismatch or negative eps.
std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, float eps);

// Rotary position embedding applied in place to one head vector of even
// dimension: adjacent pairs (2i, 2i+1) are rotated by
// position * theta_base^(-2i/d). The position is the token's ORIGINAL
// absolute sequence index; visibility policies never renumber positions.
// Throws std::invalid_argument on odd dimension.
void rope_apply(std::span<float> head_vec, std::size_t position, float theta_base);

}  // namespace kvband
