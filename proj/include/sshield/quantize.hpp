#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "sshield/graph.hpp"
#include "sshield/tensor.hpp"

namespace sshield {

// Affine 8-bit quantization: real = scale * (q - zero_point), signed int8,
// zero always exactly representable. Rounding is half-away-from-zero
// everywhere so quantized traces are reproducible.

struct QuantParams {
    float scale = 1.0f;
    int32_t zero_point = 0;

    bool operator==(const QuantParams&) const = default;
};

struct QuantTensor {
    std::vector<size_t> shape;
    std::vector<int8_t> values;
    QuantParams qp;
};

inline int8_t quantize_value(float v, const QuantParams& qp) {
    const long long q = std::llround(static_cast<double>(v) / qp.scale) + qp.zero_point;
    return static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
}

// Range rule: widen [min,max] to include 0, scale = range/255, zero_point
// anchored so 0.0 maps exactly; an all-equal tensor gets max(|v|,1)/127.
inline QuantParams choose_qparams(float mn, float mx) {
    if (!(mn <= mx)) throw std::invalid_argument("choose_qparams: bad range");
    if (mn == mx) {
        const float v = std::fabs(mn);
        return {std::max(v, 1.0f) / 127.0f, 0};
    }
    mn = std::min(mn, 0.0f);
    mx = std::max(mx, 0.0f);
    const float scale = (mx - mn) / 255.0f;
    const long long zp = std::llround(-128.0 - static_cast<double>(mn) / scale);
    return {scale, static_cast<int32_t>(std::clamp(zp, -128LL, 127LL))};
}

// Symmetric variant used for parameter groups: zero_point 0 so gating by
// 0/1 and negation stay exact in the integer domain.
inline QuantParams choose_symmetric_qparams(float max_abs) {
    return {std::max(max_abs, 1e-8f) / 127.0f, 0};
}

inline QuantTensor quantize_with(const Tensor& t, const QuantParams& qp) {
    QuantTensor out;
    out.shape = t.shape;
    out.qp = qp;
    out.values.resize(t.size());
    for (size_t i = 0; i < t.size(); ++i) out.values[i] = quantize_value(t.values[i], qp);
    return out;
}

inline QuantTensor quantize(const Tensor& t) {
    if (!t.all_finite()) throw std::invalid_argument("quantize: non-finite values");
    float mn = t.values.empty() ? 0.0f : t.values[0];
    float mx = mn;
    for (float v : t.values) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    return quantize_with(t, choose_qparams(mn, mx));
}

inline Tensor dequantize(const QuantTensor& q) {
    Tensor out = Tensor::zeros(q.shape);
    for (size_t i = 0; i < q.values.size(); ++i)
        out.values[i] = q.qp.scale * static_cast<float>(static_cast<int32_t>(q.values[i]) - q.qp.zero_point);
    return out;
}

inline double dequantize_value(int8_t q, const QuantParams& qp) {
    return static_cast<double>(qp.scale) * (static_cast<int32_t>(q) - qp.zero_point);
}

// Fixed grids for graph endpoints: images live in [0,1] on a /255 grid,
// probabilities are mapped onto the same grid.
inline constexpr QuantParams kUnitIntervalQP{1.0f / 255.0f, -128};

struct QuantExecResult {
    Tensor output;  // dequantized graph output (softmax probabilities)
    std::vector<std::vector<int8_t>> node_values;
    size_t nodes_evaluated = 0;
};

// A branch-free graph plus everything needed to run it in the 8-bit
// domain: per-node quantization parameters (parameter groups shared and
// symmetric, data-path nodes calibrated on sample images) and
// pre-quantized constants. MatMul accumulates in int32 and requantizes.
class QuantizedGraph {
  public:
    static QuantizedGraph build(const BranchFreeGraph& graph, const std::vector<Tensor>& calib_images,
                                uint64_t calib_seed) {
        if (calib_images.empty()) throw std::invalid_argument("quantize_graph: need calibration images");
        QuantizedGraph qg(graph);
        qg.assign_structural_qparams();
        qg.calibrate(calib_images, calib_seed);
        qg.freeze_constants();
        return qg;
    }

    const BranchFreeGraph& graph() const { return graph_; }
    const QuantParams& node_qparams(uint32_t id) const { return node_qp_[id]; }
    bool node_is_calibrated(uint32_t id) const { return needs_calibration_[id]; }

    // Total int8 elements produced by compute (non-source) nodes; the
    // leakage model uses this as the graph's switching-logic size.
    uint64_t compute_element_count() const {
        uint64_t total = 0;
        for (const Node& n : graph_.nodes)
            if (!is_source_op(n.kind)) total += Tensor::numel(n.output_shape);
        return total;
    }

    QuantExecResult execute(const Tensor& image, const std::vector<float>& random_bits) const {
        QuantExecResult result;
        execute_into(image, random_bits, result);
        return result;
    }

    // Reusable-buffer variant for trace generation.
    void execute_into(const Tensor& image, const std::vector<float>& random_bits, QuantExecResult& result) const {
        const auto& nodes = graph_.nodes;
        if (image.shape != graph_.node(graph_.image_input).output_shape)
            throw std::invalid_argument("execute_quantized: image shape mismatch");
        if (random_bits.size() != graph_.selection_bit_count)
            throw std::invalid_argument("execute_quantized: bit count mismatch");
        for (float bit : random_bits)
            if (bit != 1.0f && bit != -1.0f)
                throw std::invalid_argument("execute_quantized: random bits must be +1 or -1");

        result.node_values.resize(nodes.size());
        result.nodes_evaluated = 0;

        for (const Node& n : nodes) {
            auto& out = result.node_values[n.id];
            out.resize(Tensor::numel(n.output_shape));
            const QuantParams& oq = node_qp_[n.id];
            switch (n.kind) {
                case OpKind::Constant:
                    out = const_q_[n.id];
                    break;
                case OpKind::Input:
                    for (size_t i = 0; i < image.size(); ++i) out[i] = quantize_value(image.values[i], oq);
                    break;
                case OpKind::RandomInput: {
                    size_t slot = 0;
                    while (graph_.random_inputs[slot] != n.id) ++slot;
                    out[0] = static_cast<int8_t>(random_bits[slot] > 0 ? 1 : -1);
                    break;
                }
                case OpKind::MatMul: {
                    const auto& wq = result.node_values[n.inputs[0]];
                    const auto& xq = result.node_values[n.inputs[1]];
                    const QuantParams& wp = node_qp_[n.inputs[0]];
                    const QuantParams& xp = node_qp_[n.inputs[1]];
                    const size_t rows = n.output_shape[0];
                    const size_t cols = xq.size();
                    const double multiplier =
                        static_cast<double>(wp.scale) * static_cast<double>(xp.scale) / oq.scale;
                    for (size_t o = 0; o < rows; ++o) {
                        int32_t acc = 0;
                        const int8_t* row = wq.data() + o * cols;
                        for (size_t i = 0; i < cols; ++i)
                            acc += (static_cast<int32_t>(row[i]) - wp.zero_point) *
                                   (static_cast<int32_t>(xq[i]) - xp.zero_point);
                        const long long q = std::llround(acc * multiplier) + oq.zero_point;
                        out[o] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                    }
                    break;
                }
                case OpKind::Add: {
                    const auto& aq = result.node_values[n.inputs[0]];
                    const auto& bq = result.node_values[n.inputs[1]];
                    const QuantParams& ap = node_qp_[n.inputs[0]];
                    const QuantParams& bp = node_qp_[n.inputs[1]];
                    for (size_t i = 0; i < out.size(); ++i) {
                        const double real = dequantize_value(aq[i], ap) + dequantize_value(bq[i], bp);
                        const long long q = std::llround(real / oq.scale) + oq.zero_point;
                        out[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                    }
                    break;
                }
                case OpKind::Mul: {
                    const auto* aq = &result.node_values[n.inputs[0]];
                    const auto* bq = &result.node_values[n.inputs[1]];
                    const QuantParams* ap = &node_qp_[n.inputs[0]];
                    const QuantParams* bp = &node_qp_[n.inputs[1]];
                    if (aq->size() == 1 && bq->size() != 1) {
                        std::swap(aq, bq);
                        std::swap(ap, bp);
                    }
                    if (bq->size() == 1) {
                        const double s = dequantize_value((*bq)[0], *bp);
                        for (size_t i = 0; i < out.size(); ++i) {
                            const double real = dequantize_value((*aq)[i], *ap) * s;
                            const long long q = std::llround(real / oq.scale) + oq.zero_point;
                            out[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                        }
                    } else {
                        for (size_t i = 0; i < out.size(); ++i) {
                            const double real = dequantize_value((*aq)[i], *ap) * dequantize_value((*bq)[i], *bp);
                            const long long q = std::llround(real / oq.scale) + oq.zero_point;
                            out[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                        }
                    }
                    break;
                }
                case OpKind::Neg: {
                    const auto& aq = result.node_values[n.inputs[0]];
                    const QuantParams& ap = node_qp_[n.inputs[0]];
                    for (size_t i = 0; i < out.size(); ++i) {
                        const double real = -dequantize_value(aq[i], ap);
                        const long long q = std::llround(real / oq.scale) + oq.zero_point;
                        out[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                    }
                    break;
                }
                case OpKind::ReLU: {
                    const auto& aq = result.node_values[n.inputs[0]];
                    const QuantParams& ap = node_qp_[n.inputs[0]];
                    if (oq == ap) {
                        const int8_t zp = static_cast<int8_t>(std::clamp(ap.zero_point, -128, 127));
                        for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(aq[i], zp);
                    } else {
                        for (size_t i = 0; i < out.size(); ++i) {
                            const double real = std::max(dequantize_value(aq[i], ap), 0.0);
                            const long long q = std::llround(real / oq.scale) + oq.zero_point;
                            out[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
                        }
                    }
                    break;
                }
                case OpKind::Softmax: {
                    const auto& aq = result.node_values[n.inputs[0]];
                    const QuantParams& ap = node_qp_[n.inputs[0]];
                    Tensor logits = Tensor::zeros(n.output_shape);
                    for (size_t i = 0; i < logits.size(); ++i)
                        logits.values[i] = static_cast<float>(dequantize_value(aq[i], ap));
                    Tensor probs = softmax(logits);
                    if (n.id == graph_.output) result.output = probs;
                    for (size_t i = 0; i < out.size(); ++i) out[i] = quantize_value(probs.values[i], oq);
                    break;
                }
            }
            ++result.nodes_evaluated;
        }

        // non-softmax outputs (not produced by compile, but keep execute total)
        if (graph_.node(graph_.output).kind != OpKind::Softmax) {
            const auto& oq = node_qp_[graph_.output];
            const auto& ov = result.node_values[graph_.output];
            result.output = Tensor::zeros(graph_.node(graph_.output).output_shape);
            for (size_t i = 0; i < ov.size(); ++i)
                result.output.values[i] = static_cast<float>(dequantize_value(ov[i], oq));
        }
    }

  private:
    explicit QuantizedGraph(const BranchFreeGraph& g) : graph_(g) {}

    // Exact quantization rules where structure allows them; everything else
    // is marked for range calibration.
    void assign_structural_qparams() {
        const auto& nodes = graph_.nodes;
        node_qp_.assign(nodes.size(), QuantParams{});
        needs_calibration_.assign(nodes.size(), false);
        bit_like_.assign(nodes.size(), false);
        depends_on_image_.assign(nodes.size(), false);

        // shared symmetric scale per constant group
        std::map<std::string, float> group_max;
        for (const Node& n : nodes)
            if (n.kind == OpKind::Constant) {
                float mx = 0.0f;
                for (float v : n.const_payload.values) mx = std::max(mx, std::fabs(v));
                auto& slot = group_max[n.quant_group.empty() ? "#" + std::to_string(n.id) : n.quant_group];
                slot = std::max(slot, mx);
            }

        for (const Node& n : nodes) {
            switch (n.kind) {
                case OpKind::Constant:
                    node_qp_[n.id] = choose_symmetric_qparams(
                        group_max[n.quant_group.empty() ? "#" + std::to_string(n.id) : n.quant_group]);
                    break;
                case OpKind::Input:
                    node_qp_[n.id] = kUnitIntervalQP;
                    depends_on_image_[n.id] = true;
                    break;
                case OpKind::RandomInput:
                    node_qp_[n.id] = {1.0f, 0};
                    bit_like_[n.id] = true;
                    break;
                case OpKind::Neg:
                case OpKind::ReLU:
                    node_qp_[n.id] = node_qp_[n.inputs[0]];
                    bit_like_[n.id] = bit_like_[n.inputs[0]];
                    depends_on_image_[n.id] = depends_on_image_[n.inputs[0]];
                    break;
                case OpKind::Mul: {
                    const uint32_t a = n.inputs[0], b = n.inputs[1];
                    depends_on_image_[n.id] = depends_on_image_[a] || depends_on_image_[b];
                    if (bit_like_[a] && !bit_like_[b]) {
                        node_qp_[n.id] = node_qp_[b];
                    } else if (bit_like_[b] && !bit_like_[a]) {
                        node_qp_[n.id] = node_qp_[a];
                    } else if (bit_like_[a] && bit_like_[b]) {
                        node_qp_[n.id] = {1.0f, 0};
                        bit_like_[n.id] = true;
                    } else {
                        needs_calibration_[n.id] = true;
                    }
                    break;
                }
                case OpKind::Add: {
                    const uint32_t a = n.inputs[0], b = n.inputs[1];
                    depends_on_image_[n.id] = depends_on_image_[a] || depends_on_image_[b];
                    if (!depends_on_image_[n.id] && node_qp_[a] == node_qp_[b] && !needs_calibration_[a] &&
                        !needs_calibration_[b]) {
                        node_qp_[n.id] = node_qp_[a];
                    } else {
                        needs_calibration_[n.id] = true;
                    }
                    break;
                }
                case OpKind::MatMul:
                    depends_on_image_[n.id] = true;
                    needs_calibration_[n.id] = true;
                    break;
                case OpKind::Softmax:
                    node_qp_[n.id] = kUnitIntervalQP;
                    depends_on_image_[n.id] = true;
                    break;
            }
        }

        // a calibrated node's dependents that copy its qparams must wait for
        // calibration; ReLU/Neg inherit afterwards (handled in calibrate()).
    }

    void calibrate(const std::vector<Tensor>& calib_images, uint64_t seed) {
        const auto& nodes = graph_.nodes;
        std::vector<float> mn(nodes.size(), 0.0f), mx(nodes.size(), 0.0f);
        std::vector<bool> seen(nodes.size(), false);

        for (size_t i = 0; i < calib_images.size(); ++i) {
            Rng rng(mix_seed(seed, kStreamCalib, i));
            std::vector<float> bits(graph_.selection_bit_count);
            for (float& b : bits) b = rng.sign();
            auto res = sshield::execute(graph_, calib_images[i], bits, /*record_intermediates=*/true);
            for (const Node& n : nodes) {
                if (!needs_calibration_[n.id]) continue;
                for (float v : res.node_values[n.id].values) {
                    if (!seen[n.id]) {
                        mn[n.id] = mx[n.id] = v;
                        seen[n.id] = true;
                    } else {
                        mn[n.id] = std::min(mn[n.id], v);
                        mx[n.id] = std::max(mx[n.id], v);
                    }
                }
            }
        }

        for (const Node& n : nodes) {
            if (needs_calibration_[n.id]) node_qp_[n.id] = choose_qparams(mn[n.id], mx[n.id]);
            // unary nodes downstream of calibrated producers pick up the final qparams
            if ((n.kind == OpKind::ReLU || n.kind == OpKind::Neg) && !needs_calibration_[n.id])
                node_qp_[n.id] = node_qp_[n.inputs[0]];
        }
    }

    void freeze_constants() {
        const auto& nodes = graph_.nodes;
        const_q_.resize(nodes.size());
        for (const Node& n : nodes)
            if (n.kind == OpKind::Constant) const_q_[n.id] = quantize_with(n.const_payload, node_qp_[n.id]).values;
    }

    BranchFreeGraph graph_;
    std::vector<QuantParams> node_qp_;
    std::vector<std::vector<int8_t>> const_q_;
    std::vector<bool> needs_calibration_;
    std::vector<bool> bit_like_;
    std::vector<bool> depends_on_image_;
};

inline QuantizedGraph quantize_graph(const BranchFreeGraph& graph, const std::vector<Tensor>& calib_images,
                                     uint64_t calib_seed) {
    return QuantizedGraph::build(graph, calib_images, calib_seed);
}

// Per-layer group quantization of bundle constants for the container's
// quantized payload; shares one symmetric scale across models per layer.
inline QuantizedConstants quantize_bundle_constants(const ModelBundle& bundle) {
    QuantizedConstants out;
    out.layers.resize(bundle.layer_count());
    for (size_t j = 0; j < bundle.layer_count(); ++j) {
        float wmax = 0.0f, bmax = 0.0f;
        for (const auto& mp : bundle.models) {
            for (float v : mp.weights[j].values) wmax = std::max(wmax, std::fabs(v));
            for (float v : mp.biases[j].values) bmax = std::max(bmax, std::fabs(v));
        }
        auto& g = out.layers[j];
        const QuantParams wq = choose_symmetric_qparams(wmax);
        const QuantParams bq = choose_symmetric_qparams(bmax);
        g.w_scale = wq.scale;
        g.w_zero_point = wq.zero_point;
        g.b_scale = bq.scale;
        g.b_zero_point = bq.zero_point;
        for (const auto& mp : bundle.models) {
            g.w_q.push_back(quantize_with(mp.weights[j], wq).values);
            g.b_q.push_back(quantize_with(mp.biases[j], bq).values);
        }
    }
    return out;
}

}  // namespace sshield
