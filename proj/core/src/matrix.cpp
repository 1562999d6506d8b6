#include "kvband/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace kvband {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: inner dimensions differ (" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const float* arow = a.data.data() + i * a.cols;
        float* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const float aik = arow[k];
            const float* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

std::vector<float> masked_softmax_row(std::span<const float> scores,
                                      std::span<const std::uint8_t> visible) {
    if (scores.size() != visible.size()) {
        throw std::invalid_argument("masked_softmax_row: scores/visible length mismatch");
    }
    float max_visible = 0.0f;
    bool any_visible = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!visible[i]) continue;
        if (!any_visible || scores[i] > max_visible) max_visible = scores[i];
        any_visible = true;
    }
    if (!any_visible) {
        throw std::invalid_argument(
            "masked_softmax_row: empty visible set (policy bug: self must be visible)");
    }
    std::vector<float> out(scores.size(), 0.0f);
    float denom = 0.0f;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!visible[i]) continue;
        const float e = std::exp(scores[i] - max_visible);
        out[i] = e;
        denom += e;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (visible[i]) out[i] /= denom;
    }
    return out;
}

std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, float eps) {
    if (x.size() != gain.size()) {
        throw std::invalid_argument("rms_norm: x/gain length mismatch");
    }
    if (eps < 0.0f) {
        throw std::invalid_argument("rms_norm: eps must be non-negative");
    }
    double mean_sq = 0.0;
    for (float v : x) mean_sq += static_cast<double>(v) * static_cast<double>(v);
    mean_sq /= static_cast<double>(x.size());
    const float scale_sq = static_cast<float>(mean_sq) + eps;
    if (scale_sq == 0.0f) {
        // All-zero input with eps == 0: the normalized vector is defined as zero.
        return std::vector<float>(x.size(), 0.0f);
    }
    const float inv = 1.0f / std::sqrt(scale_sq);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * x[i] * inv;
    return out;
}

void rope_apply(std::span<float> head_vec, std::size_t position, float theta_base) {
    if (head_vec.size() % 2 != 0) {
        throw std::invalid_argument("rope_apply: head dimension must be even");
    }
    const std::size_t d = head_vec.size();
    for (std::size_t i = 0; i * 2 < d; ++i) {
        const float freq = std::pow(theta_base, -2.0f * static_cast<float>(i) / static_cast<float>(d));
        const float angle = static_cast<float>(position) * freq;
        const float c = std::cos(angle);
        const float s = std::sin(angle);
        const float x0 = head_vec[2 * i];
        const float x1 = head_vec[2 * i + 1];
        head_vec[2 * i] = x0 * c - x1 * s;
        head_vec[2 * i + 1] = x0 * s + x1 * c;
    }
}

}  // namespace kvband
