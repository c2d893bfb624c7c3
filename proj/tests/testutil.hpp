#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "sshield/bundle.hpp"
#include "sshield/mlp.hpp"

namespace testutil {

// Independent double-precision forward + loss, used as the oracle for
// gradient checks. Deliberately not sharing code with sshield::forward.
inline double reference_loss(const sshield::ModelParams& params, const std::vector<double>& x,
                             const std::vector<double>& y) {
    std::vector<double> z(x);
    const size_t n = params.layer_count();
    for (size_t j = 0; j < n; ++j) {
        const auto& w = params.weights[j];
        const auto& b = params.biases[j];
        std::vector<double> next(w.rows(), 0.0);
        for (size_t o = 0; o < w.rows(); ++o) {
            double acc = static_cast<double>(b.values[o]);
            for (size_t i = 0; i < w.cols(); ++i) acc += static_cast<double>(w.at(o, i)) * z[i];
            next[o] = acc;
        }
        if (j + 1 < n) {
            for (double& v : next) v = v > 0.0 ? v : 0.0;
        } else {
            double mx = next[0];
            for (double v : next) mx = std::max(mx, v);
            double sum = 0.0;
            for (double& v : next) {
                v = std::exp(v - mx);
                sum += v;
            }
            for (double& v : next) v /= sum;
        }
        z = std::move(next);
    }
    double loss = 0.0;
    for (size_t c = 0; c < y.size(); ++c) {
        if (y[c] == 0.0) continue;
        double p = z[c];
        if (p < 1e-12) p = 1e-12;
        if (p > 1.0) p = 1.0;
        loss -= y[c] * std::log(p);
    }
    return loss;
}

// Central finite difference of reference_loss w.r.t. one parameter.
inline double fd_gradient(sshield::ModelParams params, bool is_weight, size_t layer, size_t flat_index,
                          const std::vector<double>& x, const std::vector<double>& y, double h = 1e-3) {
    auto& slot = is_weight ? params.weights[layer].values[flat_index] : params.biases[layer].values[flat_index];
    const float orig = slot;
    slot = static_cast<float>(orig + h);
    const double lp = reference_loss(params, x, y);
    slot = static_cast<float>(orig - h);
    const double lm = reference_loss(params, x, y);
    slot = orig;
    return (lp - lm) / (2.0 * h);
}

// Relative error with a floor so components near zero are judged on an
// absolute scale commensurate with float32 backprop noise.
inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-2});
    return std::fabs(got - want) / denom;
}

// Max relative error between analytic and finite-difference gradients for a
// random [4,3,2] instance drawn from the given rng.
inline double gradcheck_instance(sshield::Rng& rng) {
    using namespace sshield;
    Architecture arch{{4, 3, 2}};
    ModelParams params = ModelParams::zeros(arch);
    for (size_t j = 0; j < arch.layer_count(); ++j) {
        for (float& v : params.weights[j].values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        for (float& v : params.biases[j].values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    Tensor x = Tensor::zeros({4});
    for (float& v : x.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    Tensor y = Tensor::zeros({2});
    y.values[rng.uniform_index(2)] = 1.0f;

    auto acts = forward(params, x);
    auto grads = backward(params, acts, y);

    std::vector<double> xd(x.values.begin(), x.values.end());
    std::vector<double> yd(y.values.begin(), y.values.end());
    double worst = 0.0;
    for (size_t j = 0; j < arch.layer_count(); ++j) {
        for (size_t i = 0; i < params.weights[j].size(); ++i) {
            const double fd = fd_gradient(params, true, j, i, xd, yd);
            worst = std::max(worst, rel_err(grads.weights[j].values[i], fd));
        }
        for (size_t i = 0; i < params.biases[j].size(); ++i) {
            const double fd = fd_gradient(params, false, j, i, xd, yd);
            worst = std::max(worst, rel_err(grads.biases[j].values[i], fd));
        }
    }
    return worst;
}

// Tiny labeled dataset builder for trainer tests.
struct ToyData {
    std::vector<float> inputs;
    std::vector<float> targets;
    size_t count = 0;
    size_t input_dim = 0;
    size_t num_classes = 0;

    sshield::DataView view() const { return {inputs.data(), targets.data(), count, input_dim, num_classes}; }
};

inline ToyData xor_dataset() {
    ToyData d;
    d.input_dim = 2;
    d.num_classes = 2;
    d.count = 4;
    d.inputs = {0, 0, 0, 1, 1, 0, 1, 1};
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            int cls = a ^ b;
            d.targets.push_back(cls == 0 ? 1.0f : 0.0f);
            d.targets.push_back(cls == 1 ? 1.0f : 0.0f);
        }
    return d;
}

inline ToyData random_dataset(sshield::Rng& rng, size_t count, size_t input_dim, size_t num_classes) {
    ToyData d;
    d.count = count;
    d.input_dim = input_dim;
    d.num_classes = num_classes;
    for (size_t i = 0; i < count * input_dim; ++i) d.inputs.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    d.targets.assign(count * num_classes, 0.0f);
    for (size_t i = 0; i < count; ++i) d.targets[i * num_classes + rng.uniform_index(num_classes)] = 1.0f;
    return d;
}

class TempDir {
  public:
    TempDir() {
        auto base = std::filesystem::temp_directory_path();
        for (int i = 0; i < 10000; ++i) {
            auto p = base / ("sshield_test_" + std::to_string(::getpid()) + "_" + std::to_string(i));
            std::error_code ec;
            if (std::filesystem::create_directory(p, ec)) {
                path_ = p;
                return;
            }
        }
        throw std::runtime_error("cannot create temp dir");
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace testutil
