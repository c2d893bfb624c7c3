#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "sshield/binio.hpp"
#include "sshield/quantize.hpp"
#include "sshield/rng.hpp"

namespace sshield {

// Simulated side-channel acquisition. Stands in for an EM probe parked over
// the accelerator's MAC array: each trace point models the switching
// activity of one graph node during a quantized inference as a Hamming
// weight sum over the 8-bit values it processes, on top of Gaussian noise.
//
// Activity model per node:
//  - source nodes (image input, constants, random inputs) are storage, not
//    core compute: no signal, noise only;
//  - MatMul nodes are where the probe sits: activity covers the output
//    bytes plus both operand streams moving through the MAC - the
//    activation bytes (mac_input_coupling) and the fetched weight bytes
//    (mac_weight_coupling). The weight stream is what runtime selection
//    re-randomizes per inference;
//  - every other compute node contributes the Hamming weight of its output
//    bytes.
//
// The per-point noise has two parts: the probe noise floor (noise_sigma)
// and interference from the rest of the switching logic, which grows with
// the graph's total compute element count. The second term is what makes a
// defense graph with its mux machinery noisier per point than the bare
// model, even with randomness disabled.

enum class Condition : uint8_t {
    INoDefense = 0,       // bare single-model graph
    IIDefenseDisabled = 1,  // defense graph, every random bit fixed to -1
    IIIDefenseEnabled = 2,  // defense graph, fresh random bits per trace
};

inline const char* condition_name(Condition c) {
    switch (c) {
        case Condition::INoDefense: return "I";
        case Condition::IIDefenseDisabled: return "II";
        case Condition::IIIDefenseEnabled: return "III";
    }
    return "?";
}

struct LeakageConfig {
    double noise_sigma = 2.0;         // probe noise floor per sample point
    double logic_noise = 0.35;        // interference variance per int8 compute element
    double mac_input_coupling = 1.0;  // activation operand stream at MatMul points
    double mac_weight_coupling = 3.5; // weight fetch stream at MatMul points
    uint64_t rng_seed = 1;
    bool per_element_points = false;  // finer traces: one point per output element

    double effective_sigma(uint64_t compute_elements) const {
        return std::sqrt(noise_sigma * noise_sigma + logic_noise * static_cast<double>(compute_elements));
    }
};

enum class TraceLabel : uint8_t { Fixed = 0, Random = 1 };

struct TraceSet {
    Condition condition = Condition::INoDefense;
    size_t trace_len = 0;
    std::vector<uint8_t> labels;   // one per trace
    std::vector<float> samples;    // row-major n_traces x trace_len

    size_t size() const { return labels.size(); }
    const float* trace(size_t i) const { return samples.data() + i * trace_len; }
    float* trace(size_t i) { return samples.data() + i * trace_len; }

    size_t count_label(TraceLabel l) const {
        size_t c = 0;
        for (uint8_t v : labels) c += (v == static_cast<uint8_t>(l));
        return c;
    }
};

// Hamming weight of the 8-bit two's-complement pattern, 0..8.
inline float leak_value(int8_t q) {
    return static_cast<float>(std::popcount(static_cast<unsigned>(static_cast<uint8_t>(q))));
}

inline size_t trace_length(const QuantizedGraph& qg, const LeakageConfig& cfg) {
    if (!cfg.per_element_points) return qg.graph().node_count();
    size_t len = 0;
    for (const Node& n : qg.graph().nodes) len += Tensor::numel(n.output_shape);
    return len;
}

namespace detail {

inline double hw_sum(const std::vector<int8_t>& vals) {
    double s = 0.0;
    for (int8_t q : vals) s += leak_value(q);
    return s;
}

}  // namespace detail

// One trace: quantized execution, then per-node (or per-element) activity
// plus noise drawn from the supplied stream.
inline void simulate_trace_into(const QuantizedGraph& qg, const Tensor& image, const std::vector<float>& bits,
                                const LeakageConfig& cfg, Rng& noise_rng, QuantExecResult& scratch, float* out) {
    qg.execute_into(image, bits, scratch);
    const double sigma = cfg.effective_sigma(qg.compute_element_count());
    size_t p = 0;
    for (const Node& n : qg.graph().nodes) {
        const auto& vals = scratch.node_values[n.id];
        const bool source = is_source_op(n.kind);
        if (cfg.per_element_points) {
            for (int8_t q : vals)
                out[p++] = (source ? 0.0f : leak_value(q)) + static_cast<float>(noise_rng.normal(0.0, sigma));
            continue;
        }
        double activity = 0.0;
        if (!source) {
            activity = detail::hw_sum(vals);
            if (n.kind == OpKind::MatMul) {
                // operand streams through the MAC; inputs[0] is the weight
                // matrix, inputs[1] the activation vector
                activity += cfg.mac_weight_coupling * detail::hw_sum(scratch.node_values[n.inputs[0]]);
                activity += cfg.mac_input_coupling * detail::hw_sum(scratch.node_values[n.inputs[1]]);
            }
        }
        out[p++] = static_cast<float>(activity + noise_rng.normal(0.0, sigma));
    }
}

inline std::vector<float> simulate_trace(const QuantizedGraph& qg, const Tensor& image,
                                         const std::vector<float>& bits, const LeakageConfig& cfg,
                                         uint64_t trace_index = 0) {
    std::vector<float> out(trace_length(qg, cfg));
    QuantExecResult scratch;
    Rng rng(mix_seed(cfg.rng_seed, kStreamTrace, trace_index));
    simulate_trace_into(qg, image, bits, cfg, rng, scratch, out.data());
    return out;
}

// Fixed-vs-random acquisition campaign under one experimental condition.
// Every trace derives its own stream from (seed, trace index): label coin,
// then random image pixels when the label is random, then the condition's
// bits, then the noise. Serial and parallel generation therefore agree.
inline TraceSet generate_traceset(const QuantizedGraph& qg, Condition condition, size_t n_traces,
                                  const Tensor& fixed_image, const LeakageConfig& cfg) {
    if (n_traces < 2) throw std::invalid_argument("generate_traceset: need at least 2 traces");
    const auto& g = qg.graph();
    if (condition == Condition::INoDefense) {
        if (g.mode != BundleMode::Baseline || g.selection_bit_count != 0)
            throw std::invalid_argument("condition I needs the no-defense graph");
    } else {
        if (g.mode == BundleMode::Baseline || g.selection_bit_count == 0)
            throw std::invalid_argument("conditions II/III need a defense graph");
    }
    if (fixed_image.shape != g.node(g.image_input).output_shape)
        throw std::invalid_argument("generate_traceset: fixed image shape mismatch");

    TraceSet ts;
    ts.condition = condition;
    ts.trace_len = trace_length(qg, cfg);
    ts.labels.resize(n_traces);
    ts.samples.resize(n_traces * ts.trace_len);

    QuantExecResult scratch;
    Tensor image = Tensor::zeros(fixed_image.shape);
    std::vector<float> bits(g.selection_bit_count);

    for (size_t i = 0; i < n_traces; ++i) {
        Rng rng(mix_seed(cfg.rng_seed, kStreamTrace, i));
        const bool fixed = !rng.coin();
        ts.labels[i] = static_cast<uint8_t>(fixed ? TraceLabel::Fixed : TraceLabel::Random);
        const Tensor* img = &fixed_image;
        if (!fixed) {
            for (float& v : image.values) v = static_cast<float>(rng.uniform());
            img = &image;
        }
        switch (condition) {
            case Condition::INoDefense:
                break;
            case Condition::IIDefenseDisabled:
                std::fill(bits.begin(), bits.end(), -1.0f);
                break;
            case Condition::IIIDefenseEnabled:
                for (float& b : bits) b = rng.sign();
                break;
        }
        simulate_trace_into(qg, *img, bits, cfg, rng, scratch, ts.trace(i));
    }
    return ts;
}

// ---- TRCS container ----
// magic "TRCS" | u16 version | u32 n_traces | u32 trace_len | u8 condition |
// per trace: u8 label, f32[trace_len] samples (little-endian).

inline constexpr uint16_t kTraceFormatVersion = 1;

inline void save_traceset(const TraceSet& ts, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_bytes(os, "TRCS", 4);
    write_le<uint16_t>(os, kTraceFormatVersion);
    write_le<uint32_t>(os, static_cast<uint32_t>(ts.size()));
    write_le<uint32_t>(os, static_cast<uint32_t>(ts.trace_len));
    write_le<uint8_t>(os, static_cast<uint8_t>(ts.condition));
    for (size_t i = 0; i < ts.size(); ++i) {
        write_le<uint8_t>(os, ts.labels[i]);
        const float* row = ts.trace(i);
        for (size_t p = 0; p < ts.trace_len; ++p) write_f32_le(os, row[p]);
    }
}

inline TraceSet load_traceset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open traceset: " + path);
    char magic[4];
    read_bytes(is, magic, 4);
    if (std::string(magic, 4) != "TRCS") throw std::runtime_error("bad traceset magic in " + path);
    if (read_le<uint16_t>(is) != kTraceFormatVersion)
        throw std::runtime_error("unsupported traceset version in " + path);
    TraceSet ts;
    const uint32_t n = read_le<uint32_t>(is);
    ts.trace_len = read_le<uint32_t>(is);
    const uint8_t cond = read_le<uint8_t>(is);
    if (cond > 2) throw std::runtime_error("bad traceset condition in " + path);
    ts.condition = static_cast<Condition>(cond);
    ts.labels.resize(n);
    ts.samples.resize(size_t(n) * ts.trace_len);
    for (size_t i = 0; i < n; ++i) {
        ts.labels[i] = read_le<uint8_t>(is);
        if (ts.labels[i] > 1) throw std::runtime_error("bad trace label in " + path);
        float* row = ts.trace(i);
        for (size_t p = 0; p < ts.trace_len; ++p) row[p] = read_f32_le(is);
    }
    return ts;
}

}  // namespace sshield
