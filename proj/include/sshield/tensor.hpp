#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sshield {

// Dense row-major float tensor. Shape is dynamic but fixed per instance;
// product(shape) == values.size() always holds.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<float> values;

    Tensor() = default;
    Tensor(std::vector<size_t> s, std::vector<float> v) : shape(std::move(s)), values(std::move(v)) {
        if (numel(shape) != values.size()) throw std::invalid_argument("Tensor: shape/value size mismatch");
    }

    static size_t numel(const std::vector<size_t>& s) {
        return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<size_t>());
    }

    static Tensor zeros(std::vector<size_t> s) {
        size_t n = numel(s);
        return Tensor(std::move(s), std::vector<float>(n, 0.0f));
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor vec(std::vector<float> v) {
        size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    size_t size() const { return values.size(); }

    float& operator[](size_t i) { return values[i]; }
    float operator[](size_t i) const { return values[i]; }

    // Row-major 2-D access; valid only for rank-2 tensors.
    float& at(size_t r, size_t c) { return values[r * shape[1] + c]; }
    float at(size_t r, size_t c) const { return values[r * shape[1] + c]; }

    size_t rows() const { return shape.at(0); }
    size_t cols() const { return shape.at(1); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<size_t>& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(s[i]);
    }
    return out.empty() ? "1" : out;
}

}  // namespace sshield
