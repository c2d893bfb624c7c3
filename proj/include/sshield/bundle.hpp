#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sshield/binio.hpp"
#include "sshield/mlp.hpp"

namespace sshield {

// Multi-model training. Two defense modes share one container:
//  - modelwise: m independently trained models, one picked whole per inference
//  - layerwise: m co-trained models, the parameters of every layer picked
//    independently per inference (randomized backpropagation keeps mixed
//    configurations accurate)

enum class BundleMode : uint8_t { Baseline = 0, Modelwise = 1, Layerwise = 2 };

inline const char* mode_name(BundleMode m) {
    switch (m) {
        case BundleMode::Baseline: return "baseline";
        case BundleMode::Modelwise: return "modelwise";
        case BundleMode::Layerwise: return "layerwise";
    }
    return "?";
}

// Per-layer group quantization of a bundle (shared scale across models so
// runtime selection is exact in the 8-bit domain). Populated on demand.
struct QuantizedConstants {
    struct LayerGroup {
        float w_scale = 1.0f;
        int32_t w_zero_point = 0;
        float b_scale = 1.0f;
        int32_t b_zero_point = 0;
        std::vector<std::vector<int8_t>> w_q;  // per model
        std::vector<std::vector<int8_t>> b_q;  // per model

        bool operator==(const LayerGroup&) const = default;
    };
    std::vector<LayerGroup> layers;

    bool operator==(const QuantizedConstants&) const = default;
};

struct ModelBundle {
    Architecture arch;
    BundleMode mode = BundleMode::Baseline;
    std::vector<ModelParams> models;
    std::optional<QuantizedConstants> quantized;

    size_t model_count() const { return models.size(); }
    size_t layer_count() const { return arch.layer_count(); }

    void validate() const {
        arch.validate();
        if (models.empty()) throw std::invalid_argument("bundle: no models");
        if (mode != BundleMode::Baseline && models.size() < 2)
            throw std::invalid_argument("bundle: defense modes need m >= 2");
        for (const auto& p : models) {
            if (p.layer_count() != arch.layer_count()) throw std::invalid_argument("bundle: layer count mismatch");
            for (size_t j = 0; j < p.layer_count(); ++j) {
                if (p.weights[j].shape != std::vector<size_t>{arch.out_dim(j), arch.in_dim(j)} ||
                    p.biases[j].shape != std::vector<size_t>{arch.out_dim(j)})
                    throw std::invalid_argument("bundle: parameter shape mismatch");
            }
        }
    }
};

// Per-layer model choice, 0-based indices in [0, m).
using SelectionVector = std::vector<size_t>;

inline SelectionVector sample_selection(size_t m, size_t n, Rng& rng) {
    if (m < 1 || n < 1) throw std::invalid_argument("sample_selection: m and n must be >= 1");
    SelectionVector sel(n);
    for (size_t j = 0; j < n; ++j) sel[j] = static_cast<size_t>(rng.uniform_index(m));
    return sel;
}

// Number of distinct inference configurations: m^n layerwise, m modelwise.
inline uint64_t count_configurations(uint64_t m, uint64_t n, BundleMode mode) {
    if (m < 1 || n < 1) throw std::invalid_argument("count_configurations: m and n must be >= 1");
    if (mode != BundleMode::Layerwise) return m;
    const uint64_t limit = 1ULL << 63;
    uint64_t result = 1;
    for (uint64_t i = 0; i < n; ++i) {
        if (m != 0 && result > limit / m) throw std::overflow_error("count_configurations: exceeds 2^63");
        result *= m;
        if (result > limit) throw std::overflow_error("count_configurations: exceeds 2^63");
    }
    return result;
}

inline std::vector<LayerRef> selected_layer_refs(const ModelBundle& bundle, const SelectionVector& sel) {
    const size_t n = bundle.layer_count();
    if (sel.size() != n) throw std::invalid_argument("selection length does not match layer count");
    std::vector<LayerRef> refs(n);
    for (size_t j = 0; j < n; ++j) {
        if (sel[j] >= bundle.model_count()) throw std::invalid_argument("selection index out of range");
        refs[j] = {&bundle.models[sel[j]].weights[j], &bundle.models[sel[j]].biases[j]};
    }
    return refs;
}

// Copies the selected per-layer parameters into a standalone model; used by
// oracles that compare graph execution against a directly assembled net.
inline ModelParams assemble_params(const ModelBundle& bundle, const SelectionVector& sel) {
    auto refs = selected_layer_refs(bundle, sel);
    ModelParams p;
    for (const auto& r : refs) {
        p.weights.push_back(*r.w);
        p.biases.push_back(*r.b);
    }
    return p;
}

using ModelwiseEpochCallback =
    std::function<void(size_t model_index, size_t epoch, double mean_loss, const ModelParams& params)>;

// m independent runs of train_baseline on the full dataset with seeds
// seed+1..seed+m. Runs are independent, so they execute on a small thread
// pool; results are deterministic regardless of scheduling.
inline ModelBundle train_modelwise_with_seeds(const DataView& data, const Architecture& arch,
                                              const std::vector<uint64_t>& seeds, const Hyperparams& hyper,
                                              std::vector<std::string>* warnings = nullptr,
                                              const ModelwiseEpochCallback& on_epoch = {}) {
    if (seeds.size() < 2) throw std::invalid_argument("train_modelwise: m must be >= 2");
    for (size_t a = 0; a < seeds.size(); ++a)
        for (size_t b = a + 1; b < seeds.size(); ++b)
            if (seeds[a] == seeds[b] && warnings)
                warnings->push_back("duplicate model seeds " + std::to_string(seeds[a]) +
                                    ": models will be identical");

    ModelBundle bundle;
    bundle.arch = arch;
    bundle.mode = BundleMode::Modelwise;
    bundle.models.resize(seeds.size());

    std::mutex cb_mutex;
    const size_t workers = std::min<size_t>(seeds.size(), std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    auto run = [&]() {
        for (size_t k = next.fetch_add(1); k < seeds.size(); k = next.fetch_add(1)) {
            Hyperparams h = hyper;
            h.rng_seed = seeds[k];
            EpochCallback cb;
            if (on_epoch)
                cb = [&, k](size_t epoch, double loss, const ModelParams& p) {
                    std::lock_guard<std::mutex> lock(cb_mutex);
                    on_epoch(k, epoch, loss, p);
                };
            bundle.models[k] = train_baseline(data, arch, h, cb);
        }
    };
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(run);
    for (auto& t : pool) t.join();
    bundle.validate();
    return bundle;
}

inline ModelBundle train_modelwise(const DataView& data, const Architecture& arch, size_t m,
                                   const Hyperparams& hyper, std::vector<std::string>* warnings = nullptr,
                                   const ModelwiseEpochCallback& on_epoch = {}) {
    if (m < 2) throw std::invalid_argument("train_modelwise: m must be >= 2");
    std::vector<uint64_t> seeds(m);
    for (size_t k = 0; k < m; ++k) seeds[k] = hyper.rng_seed + 1 + k;
    return train_modelwise_with_seeds(data, arch, seeds, hyper, warnings, on_epoch);
}

// Test/introspection hook: which selection each (epoch, sample) drew.
struct SelectionEvent {
    size_t epoch;
    size_t sample_index;
    SelectionVector sel;
};

using LayerwiseEpochCallback = std::function<void(size_t epoch, double mean_loss, const ModelBundle& bundle)>;

// Randomized backpropagation: a fresh per-layer model choice is drawn for
// every training sample; the forward pass uses the selected parameters and
// the gradients flow only into them. Within a minibatch the per-sample
// gradients land in per-(layer, model) buckets, and every non-empty bucket
// is applied with step alpha/bucket_count, which matches averaging the
// per-sample updates over the samples that selected that bucket.
inline ModelBundle train_layerwise(const DataView& data, const Architecture& arch, size_t m,
                                   const Hyperparams& hyper,
                                   const std::vector<ModelParams>* initial_models = nullptr,
                                   std::vector<SelectionEvent>* selection_log = nullptr,
                                   const LayerwiseEpochCallback& on_epoch = {}) {
    arch.validate();
    hyper.validate();
    if (m < 2) throw std::invalid_argument("train_layerwise: m must be >= 2");
    if (data.count == 0) throw std::invalid_argument("train_layerwise: empty dataset");
    if (data.input_dim != arch.input_dim() || data.num_classes != arch.output_dim())
        throw std::invalid_argument("train_layerwise: data does not match architecture");

    const size_t n = arch.layer_count();
    ModelBundle bundle;
    bundle.arch = arch;
    bundle.mode = BundleMode::Layerwise;
    if (initial_models) {
        if (initial_models->size() != m) throw std::invalid_argument("train_layerwise: initial model count mismatch");
        bundle.models = *initial_models;
    } else {
        for (size_t k = 0; k < m; ++k) bundle.models.push_back(init_params(arch, hyper.rng_seed + 1 + k, hyper.init_scale));
    }
    bundle.validate();

    // One gradient bucket per (layer, model).
    std::vector<std::vector<Tensor>> gw(n), gb(n);
    std::vector<std::vector<size_t>> counts(n, std::vector<size_t>(m, 0));
    for (size_t j = 0; j < n; ++j) {
        for (size_t k = 0; k < m; ++k) {
            gw[j].push_back(Tensor::zeros({arch.out_dim(j), arch.in_dim(j)}));
            gb[j].push_back(Tensor::zeros({arch.out_dim(j)}));
        }
    }

    Rng sel_rng(mix_seed(hyper.rng_seed, kStreamSelect));
    Tensor x = Tensor::zeros({data.input_dim});
    Tensor y = Tensor::zeros({data.num_classes});
    std::vector<LayerRef> refs(n);
    std::vector<GradRef> targets(n);

    for (size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        const auto batches = minibatches(data.count, hyper.batch_size, mix_seed(hyper.rng_seed, kStreamShuffle, epoch));
        double loss_sum = 0.0;
        for (const auto& batch : batches) {
            for (size_t j = 0; j < n; ++j)
                for (size_t k = 0; k < m; ++k) {
                    counts[j][k] = 0;
                    std::fill(gw[j][k].values.begin(), gw[j][k].values.end(), 0.0f);
                    std::fill(gb[j][k].values.begin(), gb[j][k].values.end(), 0.0f);
                }
            for (size_t idx : batch) {
                const SelectionVector sel = sample_selection(m, n, sel_rng);
                if (selection_log) selection_log->push_back({epoch, idx, sel});
                for (size_t j = 0; j < n; ++j) {
                    refs[j] = {&bundle.models[sel[j]].weights[j], &bundle.models[sel[j]].biases[j]};
                    targets[j] = {&gw[j][sel[j]], &gb[j][sel[j]]};
                    counts[j][sel[j]] += 1;
                }
                std::copy_n(data.input(idx), data.input_dim, x.values.begin());
                std::copy_n(data.target(idx), data.num_classes, y.values.begin());
                auto acts = forward_layers(refs, x);
                loss_sum += cross_entropy(acts.back(), y);
                backward_layers(refs, acts, y, targets);
            }
            for (size_t j = 0; j < n; ++j) {
                for (size_t k = 0; k < m; ++k) {
                    if (counts[j][k] == 0) continue;
                    const float step = hyper.learning_rate / static_cast<float>(counts[j][k]);
                    float* w = bundle.models[k].weights[j].values.data();
                    const float* g = gw[j][k].values.data();
                    for (size_t i = 0; i < gw[j][k].size(); ++i) w[i] -= step * g[i];
                    float* b = bundle.models[k].biases[j].values.data();
                    const float* gbp = gb[j][k].values.data();
                    for (size_t i = 0; i < gb[j][k].size(); ++i) b[i] -= step * gbp[i];
                }
            }
        }
        if (on_epoch) on_epoch(epoch, loss_sum / static_cast<double>(data.count), bundle);
    }
    return bundle;
}

// Accuracy of the bundle under randomized selection: a fresh choice per
// (sample, trial), whole-model in modelwise mode.
inline double eval_bundle_accuracy(const ModelBundle& bundle, const DataView& data, size_t trials_per_sample,
                                   uint64_t seed = 0) {
    bundle.validate();
    if (trials_per_sample < 1) throw std::invalid_argument("eval_bundle_accuracy: trials_per_sample must be >= 1");
    if (data.count == 0) throw std::invalid_argument("eval_bundle_accuracy: empty dataset");
    const size_t n = bundle.layer_count();
    const size_t m = bundle.model_count();
    Rng rng(mix_seed(seed, kStreamEval));
    Tensor x = Tensor::zeros({data.input_dim});
    size_t correct = 0;
    SelectionVector sel(n);
    for (size_t i = 0; i < data.count; ++i) {
        std::copy_n(data.input(i), data.input_dim, x.values.begin());
        for (size_t t = 0; t < trials_per_sample; ++t) {
            if (bundle.mode == BundleMode::Layerwise) {
                sel = sample_selection(m, n, rng);
            } else {
                const size_t k = static_cast<size_t>(rng.uniform_index(m));
                std::fill(sel.begin(), sel.end(), k);
            }
            auto acts = forward_layers(selected_layer_refs(bundle, sel), x);
            if (argmax(acts.back().values.data(), data.num_classes) == argmax(data.target(i), data.num_classes))
                ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.count * trials_per_sample);
}

// ---- SSHD container ----
// magic "SSHD" | u16 version | u16 flags (bit0: quantized payload) |
// u32 arch_len | u32[] layer sizes | u32 m | u8 mode |
// per layer, per model: f32[out*in] W, f32[out] B (little-endian) |
// optional quantized payload: per layer: f32 w_scale, i32 w_zp,
// per model i8[] W_q, f32 b_scale, i32 b_zp, per model i8[] B_q.

inline constexpr uint16_t kBundleFormatVersion = 1;

inline void save_bundle(const ModelBundle& bundle, const std::string& path) {
    bundle.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_bytes(os, "SSHD", 4);
    write_le<uint16_t>(os, kBundleFormatVersion);
    write_le<uint16_t>(os, bundle.quantized ? 1 : 0);
    write_le<uint32_t>(os, static_cast<uint32_t>(bundle.arch.layer_sizes.size()));
    for (size_t s : bundle.arch.layer_sizes) write_le<uint32_t>(os, static_cast<uint32_t>(s));
    write_le<uint32_t>(os, static_cast<uint32_t>(bundle.model_count()));
    write_le<uint8_t>(os, static_cast<uint8_t>(bundle.mode));
    for (size_t j = 0; j < bundle.layer_count(); ++j) {
        for (size_t k = 0; k < bundle.model_count(); ++k) {
            write_f32_block_le(os, bundle.models[k].weights[j].values);
            write_f32_block_le(os, bundle.models[k].biases[j].values);
        }
    }
    if (bundle.quantized) {
        const auto& q = *bundle.quantized;
        if (q.layers.size() != bundle.layer_count()) throw std::runtime_error("quantized payload layer mismatch");
        for (size_t j = 0; j < q.layers.size(); ++j) {
            const auto& g = q.layers[j];
            write_f32_le(os, g.w_scale);
            write_le<int32_t>(os, g.w_zero_point);
            for (size_t k = 0; k < bundle.model_count(); ++k)
                write_bytes(os, g.w_q[k].data(), g.w_q[k].size());
            write_f32_le(os, g.b_scale);
            write_le<int32_t>(os, g.b_zero_point);
            for (size_t k = 0; k < bundle.model_count(); ++k)
                write_bytes(os, g.b_q[k].data(), g.b_q[k].size());
        }
    }
}

inline ModelBundle load_bundle(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open bundle: " + path);
    char magic[4];
    read_bytes(is, magic, 4);
    if (std::string(magic, 4) != "SSHD") throw std::runtime_error("bad bundle magic in " + path);
    const uint16_t version = read_le<uint16_t>(is);
    if (version != kBundleFormatVersion) throw std::runtime_error("unsupported bundle version in " + path);
    const uint16_t flags = read_le<uint16_t>(is);
    const uint32_t arch_len = read_le<uint32_t>(is);
    if (arch_len < 2 || arch_len > 64) throw std::runtime_error("implausible bundle architecture in " + path);
    ModelBundle bundle;
    bundle.arch.layer_sizes.resize(arch_len);
    for (auto& s : bundle.arch.layer_sizes) s = read_le<uint32_t>(is);
    const uint32_t m = read_le<uint32_t>(is);
    const uint8_t mode = read_le<uint8_t>(is);
    if (mode > 2) throw std::runtime_error("bad bundle mode in " + path);
    bundle.mode = static_cast<BundleMode>(mode);
    bundle.models.resize(m);
    for (auto& p : bundle.models) p = ModelParams::zeros(bundle.arch);
    for (size_t j = 0; j < bundle.layer_count(); ++j) {
        for (size_t k = 0; k < m; ++k) {
            read_f32_block_le(is, bundle.models[k].weights[j].values);
            read_f32_block_le(is, bundle.models[k].biases[j].values);
        }
    }
    if (flags & 1) {
        QuantizedConstants q;
        q.layers.resize(bundle.layer_count());
        for (size_t j = 0; j < q.layers.size(); ++j) {
            auto& g = q.layers[j];
            g.w_scale = read_f32_le(is);
            g.w_zero_point = read_le<int32_t>(is);
            g.w_q.resize(m);
            const size_t wn = bundle.arch.out_dim(j) * bundle.arch.in_dim(j);
            for (size_t k = 0; k < m; ++k) {
                g.w_q[k].resize(wn);
                read_bytes(is, g.w_q[k].data(), wn);
            }
            g.b_scale = read_f32_le(is);
            g.b_zero_point = read_le<int32_t>(is);
            g.b_q.resize(m);
            for (size_t k = 0; k < m; ++k) {
                g.b_q[k].resize(bundle.arch.out_dim(j));
                read_bytes(is, g.b_q[k].data(), bundle.arch.out_dim(j));
            }
        }
        bundle.quantized = std::move(q);
    }
    bundle.validate();
    return bundle;
}

}  // namespace sshield
