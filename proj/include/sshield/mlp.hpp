#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sshield/dataset.hpp"
#include "sshield/rng.hpp"
#include "sshield/tensor.hpp"

namespace sshield {

// Dense feed-forward classifier: ReLU hidden layers, softmax output,
// categorical cross-entropy loss, plain backprop with minibatch SGD.

struct Architecture {
    std::vector<size_t> layer_sizes;  // e.g. {784, 100, 10}

    size_t layer_count() const { return layer_sizes.size() - 1; }
    size_t input_dim() const { return layer_sizes.front(); }
    size_t output_dim() const { return layer_sizes.back(); }
    size_t in_dim(size_t layer) const { return layer_sizes[layer]; }
    size_t out_dim(size_t layer) const { return layer_sizes[layer + 1]; }

    void validate() const {
        if (layer_sizes.size() < 2) throw std::invalid_argument("architecture needs at least 2 layer sizes");
        for (size_t s : layer_sizes)
            if (s == 0) throw std::invalid_argument("architecture layer sizes must be positive");
    }

    bool operator==(const Architecture&) const = default;
};

struct ModelParams {
    std::vector<Tensor> weights;  // per layer: {out, in}
    std::vector<Tensor> biases;   // per layer: {out}

    size_t layer_count() const { return weights.size(); }

    static ModelParams zeros(const Architecture& arch) {
        ModelParams p;
        for (size_t j = 0; j < arch.layer_count(); ++j) {
            p.weights.push_back(Tensor::zeros({arch.out_dim(j), arch.in_dim(j)}));
            p.biases.push_back(Tensor::zeros({arch.out_dim(j)}));
        }
        return p;
    }

    bool operator==(const ModelParams& o) const {
        if (weights.size() != o.weights.size()) return false;
        for (size_t j = 0; j < weights.size(); ++j)
            if (weights[j].values != o.weights[j].values || biases[j].values != o.biases[j].values) return false;
        return true;
    }
};

using Gradients = ModelParams;

struct Hyperparams {
    float learning_rate = 0.05f;
    size_t epochs = 20;
    size_t batch_size = 64;
    uint64_t rng_seed = 1;
    float init_scale = 1.0f;

    void validate() const {
        if (!(learning_rate > 0.0f)) throw std::invalid_argument("learning_rate must be > 0");
        if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (!(init_scale >= 0.0f)) throw std::invalid_argument("init_scale must be >= 0");
    }
};

// Non-owning view over a labeled sample set (row-major inputs and one-hot
// targets). Keeps the trainer independent of how the data was loaded.
struct DataView {
    const float* inputs = nullptr;
    const float* targets = nullptr;
    size_t count = 0;
    size_t input_dim = 0;
    size_t num_classes = 0;

    const float* input(size_t i) const { return inputs + i * input_dim; }
    const float* target(size_t i) const { return targets + i * num_classes; }
};

inline DataView view(const Dataset& ds) {
    return DataView{ds.images.data(), ds.labels.data(), ds.count, kImageDim, kClassCount};
}

// Weights i.i.d. uniform in [-init_scale/sqrt(fan_in), +init_scale/sqrt(fan_in)],
// biases zero. Fully determined by the seed.
inline ModelParams init_params(const Architecture& arch, uint64_t seed, float init_scale = 1.0f) {
    arch.validate();
    Rng rng(mix_seed(seed, kStreamInit));
    ModelParams p = ModelParams::zeros(arch);
    for (size_t j = 0; j < arch.layer_count(); ++j) {
        const float bound = init_scale / std::sqrt(static_cast<float>(arch.in_dim(j)));
        for (float& w : p.weights[j].values) w = static_cast<float>(rng.uniform(-bound, bound));
    }
    return p;
}

inline Tensor relu(const Tensor& t) {
    Tensor out = t;
    for (float& v : out.values) v = std::max(v, 0.0f);
    return out;
}

// Max-subtracted exp-normalize; output is a probability vector.
inline Tensor softmax(const Tensor& logits) {
    if (logits.values.empty()) throw std::invalid_argument("softmax: empty input");
    Tensor out = logits;
    const float m = *std::max_element(out.values.begin(), out.values.end());
    double sum = 0.0;
    for (float& v : out.values) {
        v = std::exp(v - m);
        sum += v;
    }
    for (float& v : out.values) v = static_cast<float>(v / sum);
    return out;
}

// Multi-class cross-entropy, natural log, probabilities clamped to
// [1e-12, 1] before the log.
inline double cross_entropy(const Tensor& y_hat, const Tensor& y) {
    if (y_hat.values.size() != y.values.size()) throw std::invalid_argument("cross_entropy: dimension mismatch");
    double loss = 0.0;
    for (size_t c = 0; c < y.values.size(); ++c) {
        if (y.values[c] == 0.0f) continue;
        const double p = std::clamp(static_cast<double>(y_hat.values[c]), 1e-12, 1.0);
        loss -= static_cast<double>(y.values[c]) * std::log(p);
    }
    return loss;
}

// One layer's parameters by reference; lets callers mix layers from
// different models without copying.
struct LayerRef {
    const Tensor* w;
    const Tensor* b;
};

// One layer's gradient accumulation target.
struct GradRef {
    Tensor* gw;
    Tensor* gb;
};

inline std::vector<LayerRef> layer_refs(const ModelParams& params) {
    std::vector<LayerRef> refs(params.layer_count());
    for (size_t j = 0; j < refs.size(); ++j) refs[j] = {&params.weights[j], &params.biases[j]};
    return refs;
}

namespace detail {

// y = W x + b, row-major W {out, in}.
inline void affine(const Tensor& w, const Tensor& b, const float* x, float* y) {
    const size_t out = w.rows(), in = w.cols();
    const float* wp = w.values.data();
    for (size_t o = 0; o < out; ++o) {
        const float* row = wp + o * in;
        float acc = 0.0f;
        for (size_t i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc + b.values[o];
    }
}

}  // namespace detail

// Returns activations Z_0..Z_n (input, each hidden post-ReLU, softmax output).
inline std::vector<Tensor> forward_layers(const std::vector<LayerRef>& layers, const Tensor& x) {
    const size_t n = layers.size();
    if (n == 0) throw std::invalid_argument("forward: empty model");
    if (x.size() != layers[0].w->cols()) throw std::invalid_argument("forward: input dimension mismatch");
    std::vector<Tensor> acts;
    acts.reserve(n + 1);
    acts.push_back(x);
    for (size_t j = 0; j < n; ++j) {
        const Tensor& w = *layers[j].w;
        if (acts.back().size() != w.cols()) throw std::invalid_argument("forward: layer shape mismatch");
        Tensor z = Tensor::zeros({w.rows()});
        detail::affine(w, *layers[j].b, acts.back().values.data(), z.values.data());
        if (j + 1 < n) {
            for (float& v : z.values) v = std::max(v, 0.0f);
        } else {
            z = softmax(z);
        }
        acts.push_back(std::move(z));
    }
    return acts;
}

inline std::vector<Tensor> forward(const ModelParams& params, const Tensor& x) {
    return forward_layers(layer_refs(params), x);
}

// Backprop with the fused softmax/cross-entropy gradient: output delta is
// y_hat - y. ReLU subgradient is 0 at exactly 0 (post-activation > 0 test).
// Accumulates into the per-layer targets so a minibatch can reuse buffers.
inline void backward_layers(const std::vector<LayerRef>& layers, const std::vector<Tensor>& acts, const Tensor& y,
                            const std::vector<GradRef>& targets) {
    const size_t n = layers.size();
    if (acts.size() != n + 1) throw std::invalid_argument("backward: activation list does not match model");
    if (y.size() != acts.back().size()) throw std::invalid_argument("backward: label dimension mismatch");
    if (targets.size() != n) throw std::invalid_argument("backward: gradient target count mismatch");

    std::vector<float> delta(acts[n].values.size());
    for (size_t c = 0; c < delta.size(); ++c) delta[c] = acts[n][c] - y[c];

    for (size_t j = n; j-- > 0;) {
        const Tensor& w = *layers[j].w;
        const size_t out = w.rows(), in = w.cols();
        if (!targets[j].gw->same_shape(w)) throw std::invalid_argument("backward: gradient shape mismatch");
        const float* zprev = acts[j].values.data();
        float* gw = targets[j].gw->values.data();
        float* gb = targets[j].gb->values.data();
        for (size_t o = 0; o < out; ++o) {
            const float d = delta[o];
            gb[o] += d;
            float* grow = gw + o * in;
            for (size_t i = 0; i < in; ++i) grow[i] += d * zprev[i];
        }
        if (j > 0) {
            std::vector<float> prev(in, 0.0f);
            const float* wp = w.values.data();
            for (size_t o = 0; o < out; ++o) {
                const float d = delta[o];
                const float* row = wp + o * in;
                for (size_t i = 0; i < in; ++i) prev[i] += d * row[i];
            }
            for (size_t i = 0; i < in; ++i)
                if (!(acts[j][i] > 0.0f)) prev[i] = 0.0f;
            delta = std::move(prev);
        }
    }
}

inline void backward_accumulate(const ModelParams& params, const std::vector<Tensor>& acts, const Tensor& y,
                                Gradients& accum) {
    std::vector<GradRef> targets(params.layer_count());
    for (size_t j = 0; j < targets.size(); ++j) targets[j] = {&accum.weights[j], &accum.biases[j]};
    backward_layers(layer_refs(params), acts, y, targets);
}

inline Gradients backward(const ModelParams& params, const std::vector<Tensor>& acts, const Tensor& y) {
    Gradients g;
    for (size_t j = 0; j < params.layer_count(); ++j) {
        g.weights.push_back(Tensor::zeros(params.weights[j].shape));
        g.biases.push_back(Tensor::zeros(params.biases[j].shape));
    }
    backward_accumulate(params, acts, y, g);
    return g;
}

inline void sgd_step_inplace(ModelParams& params, const Gradients& grads, float alpha) {
    for (size_t j = 0; j < params.layer_count(); ++j) {
        if (!params.weights[j].same_shape(grads.weights[j]) || !params.biases[j].same_shape(grads.biases[j]))
            throw std::invalid_argument("sgd_step: gradient shape mismatch");
        float* w = params.weights[j].values.data();
        const float* gw = grads.weights[j].values.data();
        for (size_t i = 0; i < params.weights[j].size(); ++i) w[i] -= alpha * gw[i];
        float* b = params.biases[j].values.data();
        const float* gb = grads.biases[j].values.data();
        for (size_t i = 0; i < params.biases[j].size(); ++i) b[i] -= alpha * gb[i];
    }
}

inline ModelParams sgd_step(const ModelParams& params, const Gradients& grads, float alpha) {
    ModelParams out = params;
    sgd_step_inplace(out, grads, alpha);
    return out;
}

inline size_t argmax(const float* v, size_t n) {
    size_t best = 0;
    for (size_t i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

using EpochCallback = std::function<void(size_t epoch, double mean_loss, const ModelParams& params)>;

// Algorithm: for each epoch, shuffle with the epoch-derived stream, split
// into minibatches, average per-sample gradients, take one SGD step per
// batch. Bit-reproducible for a given (arch, hyper, data) triple.
inline ModelParams train_baseline(const DataView& data, const Architecture& arch, const Hyperparams& hyper,
                                  const EpochCallback& on_epoch = {}) {
    arch.validate();
    hyper.validate();
    if (data.count == 0) throw std::invalid_argument("train_baseline: empty dataset");
    if (data.input_dim != arch.input_dim() || data.num_classes != arch.output_dim())
        throw std::invalid_argument("train_baseline: data does not match architecture");

    ModelParams params = init_params(arch, hyper.rng_seed, hyper.init_scale);
    Gradients accum = ModelParams::zeros(arch);
    Tensor x = Tensor::zeros({data.input_dim});
    Tensor y = Tensor::zeros({data.num_classes});

    for (size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        const auto batches = minibatches(data.count, hyper.batch_size, mix_seed(hyper.rng_seed, kStreamShuffle, epoch));
        double loss_sum = 0.0;
        for (const auto& batch : batches) {
            for (auto& t : accum.weights) std::fill(t.values.begin(), t.values.end(), 0.0f);
            for (auto& t : accum.biases) std::fill(t.values.begin(), t.values.end(), 0.0f);
            for (size_t idx : batch) {
                std::copy_n(data.input(idx), data.input_dim, x.values.begin());
                std::copy_n(data.target(idx), data.num_classes, y.values.begin());
                auto acts = forward(params, x);
                loss_sum += cross_entropy(acts.back(), y);
                backward_accumulate(params, acts, y, accum);
            }
            sgd_step_inplace(params, accum, hyper.learning_rate / static_cast<float>(batch.size()));
        }
        if (on_epoch) on_epoch(epoch, loss_sum / static_cast<double>(data.count), params);
    }
    return params;
}

inline double accuracy(const ModelParams& params, const DataView& data) {
    if (data.count == 0) throw std::invalid_argument("accuracy: empty dataset");
    size_t correct = 0;
    Tensor x = Tensor::zeros({data.input_dim});
    for (size_t i = 0; i < data.count; ++i) {
        std::copy_n(data.input(i), data.input_dim, x.values.begin());
        auto acts = forward(params, x);
        if (argmax(acts.back().values.data(), data.num_classes) == argmax(data.target(i), data.num_classes))
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.count);
}

}  // namespace sshield
