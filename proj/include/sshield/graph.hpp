#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sshield/bundle.hpp"
#include "sshield/mlp.hpp"
#include "sshield/tensor.hpp"

namespace sshield {

// Inference DAG restricted to the operation set an inference-only
// accelerator compiler accepts: no control flow, static shapes, 8-bit
// friendly ops. Runtime parameter selection is built from the ReLU
// multiplexer gadget ReLU(r)*x + ReLU(-r)*y with r in {-1,+1}.

enum class OpKind : uint8_t {
    Constant = 0,
    Input = 1,
    RandomInput = 2,
    MatMul = 3,
    Add = 4,
    Mul = 5,
    Neg = 6,
    ReLU = 7,
    Softmax = 8,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Constant: return "Constant";
        case OpKind::Input: return "Input";
        case OpKind::RandomInput: return "RandomInput";
        case OpKind::MatMul: return "MatMul";
        case OpKind::Add: return "Add";
        case OpKind::Mul: return "Mul";
        case OpKind::Neg: return "Neg";
        case OpKind::ReLU: return "ReLU";
        case OpKind::Softmax: return "Softmax";
    }
    return "Unknown";
}

struct Node {
    uint32_t id = 0;
    OpKind kind = OpKind::Constant;
    std::vector<uint32_t> inputs;
    Tensor const_payload;  // Constant nodes only
    std::vector<size_t> output_shape;
    std::string quant_group;  // shared-quantization group label, "" if none
};

struct BranchFreeGraph {
    std::vector<Node> nodes;  // topologically ordered; node id == index
    uint32_t image_input = 0;
    std::vector<uint32_t> random_inputs;  // each expects a runtime scalar in {-1,+1}
    uint32_t output = 0;

    Architecture arch;
    uint32_t m = 1;
    BundleMode mode = BundleMode::Baseline;
    uint32_t selection_bit_count = 0;
    uint32_t mux_gadget_count = 0;

    const Node& node(uint32_t id) const { return nodes.at(id); }
    size_t node_count() const { return nodes.size(); }
};

inline bool is_source_op(OpKind k) {
    return k == OpKind::Constant || k == OpKind::Input || k == OpKind::RandomInput;
}

inline bool shape_is_scalar(const std::vector<size_t>& s) { return Tensor::numel(s) == 1; }

// Incremental, shape-checked graph construction. Appending operands before
// users keeps the node list topologically ordered by construction.
class GraphBuilder {
  public:
    uint32_t add_constant(Tensor payload, std::string quant_group = "") {
        auto shape = payload.shape;
        Node n;
        n.kind = OpKind::Constant;
        n.const_payload = std::move(payload);
        n.output_shape = std::move(shape);
        n.quant_group = std::move(quant_group);
        return push(std::move(n));
    }

    uint32_t add_input(std::vector<size_t> shape) {
        Node n;
        n.kind = OpKind::Input;
        n.output_shape = std::move(shape);
        return push(std::move(n));
    }

    uint32_t add_random_input() {
        Node n;
        n.kind = OpKind::RandomInput;
        n.output_shape = {1};
        return push(std::move(n));
    }

    uint32_t add_matmul(uint32_t w, uint32_t x) {
        const auto& ws = shape(w);
        const auto& xs = shape(x);
        if (ws.size() != 2 || xs.size() != 1 || ws[1] != xs[0])
            throw std::invalid_argument("matmul: incompatible shapes");
        Node n;
        n.kind = OpKind::MatMul;
        n.inputs = {w, x};
        n.output_shape = {ws[0]};
        return push(std::move(n));
    }

    uint32_t add_add(uint32_t a, uint32_t b) {
        if (shape(a) != shape(b)) throw std::invalid_argument("add: shape mismatch");
        Node n;
        n.kind = OpKind::Add;
        n.inputs = {a, b};
        n.output_shape = shape(a);
        return push(std::move(n));
    }

    uint32_t add_mul(uint32_t a, uint32_t b) {
        std::vector<size_t> out;
        if (shape(a) == shape(b)) {
            out = shape(a);
        } else if (shape_is_scalar(shape(b))) {
            out = shape(a);
        } else if (shape_is_scalar(shape(a))) {
            out = shape(b);
        } else {
            throw std::invalid_argument("mul: shape mismatch");
        }
        Node n;
        n.kind = OpKind::Mul;
        n.inputs = {a, b};
        n.output_shape = std::move(out);
        return push(std::move(n));
    }

    uint32_t add_neg(uint32_t a) {
        Node n;
        n.kind = OpKind::Neg;
        n.inputs = {a};
        n.output_shape = shape(a);
        return push(std::move(n));
    }

    uint32_t add_relu(uint32_t a) {
        Node n;
        n.kind = OpKind::ReLU;
        n.inputs = {a};
        n.output_shape = shape(a);
        return push(std::move(n));
    }

    uint32_t add_softmax(uint32_t a) {
        if (shape(a).size() != 1) throw std::invalid_argument("softmax: needs a 1-D input");
        Node n;
        n.kind = OpKind::Softmax;
        n.inputs = {a};
        n.output_shape = shape(a);
        return push(std::move(n));
    }

    // Branch-free two-way select: ReLU(r)*x + ReLU(-r)*y. Equals x when the
    // runtime value of r is +1 and y when it is -1; multiplication by the
    // resulting 1.0/0.0 gates is exact in float. The ReLU gates for a given
    // r are shared between all muxes steered by it.
    uint32_t relu_mux(uint32_t x, uint32_t y, uint32_t r) {
        if (shape(x) != shape(y)) throw std::invalid_argument("relu_mux: x/y shape mismatch");
        if (!shape_is_scalar(shape(r))) throw std::invalid_argument("relu_mux: selector must be scalar");
        auto [pos, neg] = bit_gates(r);
        const uint32_t a = add_mul(x, pos);
        const uint32_t b = add_mul(y, neg);
        ++mux_gadget_count_;
        return add_add(a, b);
    }

    // k-way select as a balanced tree of relu_mux gadgets. bits[i] steers
    // tree level i (bit 0 at the leaves); a +1 bit takes the lower-index
    // branch. Non-power-of-two k is padded by repeating the last value.
    uint32_t build_mux_tree(std::vector<uint32_t> values, const std::vector<uint32_t>& bits) {
        if (values.empty()) throw std::invalid_argument("build_mux_tree: no values");
        if (bits.size() != mux_bits_needed(values.size()))
            throw std::invalid_argument("build_mux_tree: wrong bit count");
        const size_t padded = size_t{1} << bits.size();
        while (values.size() < padded) values.push_back(values.back());
        for (size_t level = 0; level < bits.size(); ++level) {
            std::vector<uint32_t> next;
            next.reserve(values.size() / 2);
            for (size_t i = 0; i + 1 < values.size(); i += 2)
                next.push_back(relu_mux(values[i], values[i + 1], bits[level]));
            values = std::move(next);
        }
        return values[0];
    }

    static size_t mux_bits_needed(size_t k) {
        size_t bits = 0;
        while ((size_t{1} << bits) < k) ++bits;
        return bits;
    }

    const std::vector<size_t>& shape(uint32_t id) const { return nodes_.at(id).output_shape; }

    std::vector<Node> take_nodes() { return std::move(nodes_); }
    uint32_t mux_gadget_count() const { return mux_gadget_count_; }

  private:
    uint32_t push(Node n) {
        n.id = static_cast<uint32_t>(nodes_.size());
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    // (ReLU(r), ReLU(Neg(r))) pair, cached per selector node.
    std::pair<uint32_t, uint32_t> bit_gates(uint32_t r) {
        auto it = gates_.find(r);
        if (it != gates_.end()) return it->second;
        const uint32_t pos = add_relu(r);
        const uint32_t neg = add_relu(add_neg(r));
        gates_[r] = {pos, neg};
        return {pos, neg};
    }

    std::vector<Node> nodes_;
    std::map<uint32_t, std::pair<uint32_t, uint32_t>> gates_;
    uint32_t mux_gadget_count_ = 0;
};

namespace detail {

inline uint32_t compile_layers(GraphBuilder& b, const ModelBundle& bundle,
                               const std::vector<std::vector<uint32_t>>& group_bits, uint32_t image,
                               bool per_layer_groups) {
    const size_t n = bundle.layer_count();
    uint32_t z = image;
    for (size_t j = 0; j < n; ++j) {
        const auto& bits = group_bits[per_layer_groups ? j : 0];
        std::vector<uint32_t> w_ids, b_ids;
        for (size_t k = 0; k < bundle.model_count(); ++k) {
            w_ids.push_back(b.add_constant(bundle.models[k].weights[j], "w:" + std::to_string(j)));
            b_ids.push_back(b.add_constant(bundle.models[k].biases[j], "b:" + std::to_string(j)));
        }
        const uint32_t w = bits.empty() ? w_ids[0] : b.build_mux_tree(w_ids, bits);
        const uint32_t bias = bits.empty() ? b_ids[0] : b.build_mux_tree(b_ids, bits);
        const uint32_t mat = b.add_matmul(w, z);
        const uint32_t pre = b.add_add(mat, bias);
        z = (j + 1 < n) ? b.add_relu(pre) : b.add_softmax(pre);
    }
    return z;
}

}  // namespace detail

// Lowers a defense bundle to a single branch-free graph. Selection bits are
// runtime inputs: modelwise shares one ceil(log2 m)-bit group across all
// layers, layerwise gives every layer its own group. Parameter tensors are
// selected by mux trees ahead of the MatMul, so each layer is computed once.
inline BranchFreeGraph compile_bundle(const ModelBundle& bundle) {
    bundle.validate();
    if (bundle.model_count() < 2) throw std::invalid_argument("compile_bundle: m must be >= 2");
    if (bundle.mode == BundleMode::Baseline) throw std::invalid_argument("compile_bundle: bundle has no defense mode");

    const size_t n = bundle.layer_count();
    const size_t bits_per_group = GraphBuilder::mux_bits_needed(bundle.model_count());
    const size_t groups = bundle.mode == BundleMode::Layerwise ? n : 1;

    BranchFreeGraph g;
    GraphBuilder b;
    g.image_input = b.add_input({bundle.arch.input_dim()});
    std::vector<std::vector<uint32_t>> group_bits(groups);
    for (size_t gi = 0; gi < groups; ++gi)
        for (size_t i = 0; i < bits_per_group; ++i) {
            const uint32_t id = b.add_random_input();
            group_bits[gi].push_back(id);
            g.random_inputs.push_back(id);
        }

    g.output = detail::compile_layers(b, bundle, group_bits, g.image_input, bundle.mode == BundleMode::Layerwise);
    g.mux_gadget_count = b.mux_gadget_count();
    g.nodes = b.take_nodes();
    g.arch = bundle.arch;
    g.m = static_cast<uint32_t>(bundle.model_count());
    g.mode = bundle.mode;
    g.selection_bit_count = static_cast<uint32_t>(groups * bits_per_group);
    return g;
}

// No-defense graph for a single model; the reference subject for
// experiment I and for node-count comparisons.
inline BranchFreeGraph compile_model(const ModelParams& params, const Architecture& arch) {
    ModelBundle single;
    single.arch = arch;
    single.mode = BundleMode::Baseline;
    single.models = {params};
    single.validate();

    BranchFreeGraph g;
    GraphBuilder b;
    g.image_input = b.add_input({arch.input_dim()});
    g.output = detail::compile_layers(b, single, {{}}, g.image_input, false);
    g.nodes = b.take_nodes();
    g.arch = arch;
    g.m = 1;
    g.mode = BundleMode::Baseline;
    g.selection_bit_count = 0;
    return g;
}

inline BranchFreeGraph compile(const ModelBundle& bundle) {
    if (bundle.mode == BundleMode::Baseline) {
        if (bundle.model_count() != 1) throw std::invalid_argument("baseline bundle must hold exactly one model");
        return compile_model(bundle.models[0], bundle.arch);
    }
    return compile_bundle(bundle);
}

struct ExecResult {
    Tensor output;
    std::vector<Tensor> node_values;  // filled when record_intermediates
    size_t nodes_evaluated = 0;
    uint64_t eval_order_hash = 0;
};

// Topological interpretation. Every node is evaluated for every input;
// the evaluation order and count never depend on the image or the bits.
inline ExecResult execute(const BranchFreeGraph& g, const Tensor& image, const std::vector<float>& random_bits,
                          bool record_intermediates = false) {
    if (image.shape != g.node(g.image_input).output_shape)
        throw std::invalid_argument("execute: image shape mismatch");
    if (random_bits.size() != g.selection_bit_count)
        throw std::invalid_argument("execute: expected " + std::to_string(g.selection_bit_count) + " random bits");
    for (float bit : random_bits)
        if (bit != 1.0f && bit != -1.0f) throw std::invalid_argument("execute: random bits must be +1 or -1");

    std::vector<Tensor> values(g.nodes.size());
    ExecResult result;
    uint64_t order_hash = 0xcbf29ce484222325ULL;

    for (const Node& n : g.nodes) {
        Tensor& out = values[n.id];
        switch (n.kind) {
            case OpKind::Constant:
                out = n.const_payload;
                break;
            case OpKind::Input:
                out = image;
                break;
            case OpKind::RandomInput: {
                size_t slot = 0;
                while (g.random_inputs[slot] != n.id) ++slot;
                out = Tensor::scalar(random_bits[slot]);
                break;
            }
            case OpKind::MatMul: {
                const Tensor& w = values[n.inputs[0]];
                const Tensor& x = values[n.inputs[1]];
                out = Tensor::zeros({w.rows()});
                for (size_t o = 0; o < w.rows(); ++o) {
                    float acc = 0.0f;
                    const float* row = w.values.data() + o * w.cols();
                    for (size_t i = 0; i < w.cols(); ++i) acc += row[i] * x.values[i];
                    out.values[o] = acc;
                }
                break;
            }
            case OpKind::Add: {
                const Tensor& a = values[n.inputs[0]];
                const Tensor& bv = values[n.inputs[1]];
                out = a;
                for (size_t i = 0; i < out.size(); ++i) out.values[i] += bv.values[i];
                break;
            }
            case OpKind::Mul: {
                const Tensor* a = &values[n.inputs[0]];
                const Tensor* bv = &values[n.inputs[1]];
                if (a->size() == 1 && bv->size() != 1) std::swap(a, bv);
                out = *a;
                if (bv->size() == 1) {
                    const float s = bv->values[0];
                    for (float& v : out.values) v *= s;
                } else {
                    for (size_t i = 0; i < out.size(); ++i) out.values[i] *= bv->values[i];
                }
                break;
            }
            case OpKind::Neg:
                out = values[n.inputs[0]];
                for (float& v : out.values) v = -v;
                break;
            case OpKind::ReLU:
                out = values[n.inputs[0]];
                for (float& v : out.values) v = std::max(v, 0.0f);
                break;
            case OpKind::Softmax:
                out = softmax(values[n.inputs[0]]);
                break;
        }
        ++result.nodes_evaluated;
        order_hash = (order_hash ^ n.id) * 0x100000001b3ULL;
    }

    result.output = values[g.output];
    result.eval_order_hash = order_hash;
    if (record_intermediates) result.node_values = std::move(values);
    return result;
}

// Static checks mirroring an inference-accelerator compiler's restriction
// list. Violations are returned, not thrown.
inline std::vector<std::string> validate_graph(const BranchFreeGraph& g) {
    std::vector<std::string> violations;
    size_t input_count = 0;

    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        if (n.id != i) {
            violations.push_back("node " + std::to_string(i) + ": id/position mismatch");
            continue;
        }
        if (static_cast<uint8_t>(n.kind) > static_cast<uint8_t>(OpKind::Softmax)) {
            violations.push_back("node " + std::to_string(n.id) + ": unsupported op kind " +
                                 std::to_string(static_cast<int>(n.kind)));
            continue;
        }
        for (uint32_t in : n.inputs)
            if (in >= n.id) violations.push_back("node " + std::to_string(n.id) + ": cycle (input " +
                                                 std::to_string(in) + " does not precede it)");
        if (Tensor::numel(n.output_shape) == 0)
            violations.push_back("node " + std::to_string(n.id) + ": empty shape");

        const size_t arity = n.inputs.size();
        switch (n.kind) {
            case OpKind::Constant:
                if (arity != 0) violations.push_back("node " + std::to_string(n.id) + ": constant with inputs");
                else if (n.const_payload.shape != n.output_shape)
                    violations.push_back("node " + std::to_string(n.id) + ": constant payload shape mismatch");
                else if (!n.const_payload.all_finite())
                    violations.push_back("node " + std::to_string(n.id) + ": non-finite constant");
                break;
            case OpKind::Input:
                ++input_count;
                if (arity != 0) violations.push_back("node " + std::to_string(n.id) + ": input with inputs");
                break;
            case OpKind::RandomInput:
                if (arity != 0) violations.push_back("node " + std::to_string(n.id) + ": random input with inputs");
                if (n.output_shape != std::vector<size_t>{1})
                    violations.push_back("node " + std::to_string(n.id) + ": random input must be scalar");
                break;
            case OpKind::MatMul: {
                if (arity != 2) {
                    violations.push_back("node " + std::to_string(n.id) + ": matmul arity");
                    break;
                }
                if (n.inputs[0] < n.id && n.inputs[1] < n.id) {
                    const auto& ws = g.node(n.inputs[0]).output_shape;
                    const auto& xs = g.node(n.inputs[1]).output_shape;
                    if (ws.size() != 2 || xs.size() != 1 || ws[1] != xs[0] ||
                        n.output_shape != std::vector<size_t>{ws[0]})
                        violations.push_back("node " + std::to_string(n.id) + ": matmul shape mismatch");
                }
                break;
            }
            case OpKind::Add: {
                if (arity != 2) {
                    violations.push_back("node " + std::to_string(n.id) + ": add arity");
                    break;
                }
                if (n.inputs[0] < n.id && n.inputs[1] < n.id) {
                    if (g.node(n.inputs[0]).output_shape != n.output_shape ||
                        g.node(n.inputs[1]).output_shape != n.output_shape)
                        violations.push_back("node " + std::to_string(n.id) + ": add shape mismatch");
                }
                break;
            }
            case OpKind::Mul: {
                if (arity != 2) {
                    violations.push_back("node " + std::to_string(n.id) + ": mul arity");
                    break;
                }
                if (n.inputs[0] < n.id && n.inputs[1] < n.id) {
                    const auto& as = g.node(n.inputs[0]).output_shape;
                    const auto& bs = g.node(n.inputs[1]).output_shape;
                    const bool ok = (as == bs && as == n.output_shape) ||
                                    (shape_is_scalar(bs) && as == n.output_shape) ||
                                    (shape_is_scalar(as) && bs == n.output_shape);
                    if (!ok) violations.push_back("node " + std::to_string(n.id) + ": mul shape mismatch");
                }
                break;
            }
            case OpKind::Neg:
            case OpKind::ReLU:
                if (arity != 1) violations.push_back("node " + std::to_string(n.id) + ": unary arity");
                else if (n.inputs[0] < n.id && g.node(n.inputs[0]).output_shape != n.output_shape)
                    violations.push_back("node " + std::to_string(n.id) + ": unary shape mismatch");
                break;
            case OpKind::Softmax:
                if (arity != 1) violations.push_back("node " + std::to_string(n.id) + ": softmax arity");
                else if (n.output_shape.size() != 1)
                    violations.push_back("node " + std::to_string(n.id) + ": softmax output must be 1-D");
                break;
        }
    }

    if (input_count != 1)
        violations.push_back("graph must have exactly one image input, found " + std::to_string(input_count));
    if (g.output >= g.nodes.size()) {
        violations.push_back("output id out of range");
        return violations;
    }
    if (g.selection_bit_count != g.random_inputs.size())
        violations.push_back("selection_bit_count does not match random input count");
    for (uint32_t id : g.random_inputs)
        if (id >= g.nodes.size() || g.node(id).kind != OpKind::RandomInput)
            violations.push_back("random input list entry " + std::to_string(id) + " is not a RandomInput node");

    // reverse reachability from the output
    std::vector<bool> reachable(g.nodes.size(), false);
    std::vector<uint32_t> stack = {g.output};
    reachable[g.output] = true;
    while (!stack.empty()) {
        const uint32_t id = stack.back();
        stack.pop_back();
        for (uint32_t in : g.node(id).inputs) {
            if (in < g.nodes.size() && !reachable[in]) {
                reachable[in] = true;
                stack.push_back(in);
            }
        }
    }
    for (uint32_t id : g.random_inputs)
        if (id < g.nodes.size() && !reachable[id])
            violations.push_back("random input " + std::to_string(id) + " unreachable from output");

    return violations;
}

// One node per line: "id kind shape inputs...". Stable golden-file format.
inline std::string dump_graph(const BranchFreeGraph& g) {
    std::ostringstream os;
    for (const Node& n : g.nodes) {
        os << n.id << ' ' << op_name(n.kind) << ' ' << shape_str(n.output_shape);
        for (uint32_t in : n.inputs) os << ' ' << in;
        os << '\n';
    }
    return os.str();
}

// Decodes which model index a bit assignment selects for one group:
// bit level i contributes 2^i when the bit is -1 (+1 keeps the lower
// branch). Padding clamps the result to the last model.
inline size_t selected_index(const std::vector<float>& group_bits, size_t m) {
    size_t index = 0;
    for (size_t i = 0; i < group_bits.size(); ++i)
        if (group_bits[i] == -1.0f) index |= size_t{1} << i;
    return std::min(index, m - 1);
}

// Expands runtime bits into the per-layer SelectionVector the graph
// realizes; the oracle counterpart of the mux trees.
inline SelectionVector decode_selection(const BranchFreeGraph& g, const std::vector<float>& bits) {
    if (bits.size() != g.selection_bit_count) throw std::invalid_argument("decode_selection: bit count mismatch");
    const size_t n = g.arch.layer_count();
    SelectionVector sel(n);
    if (g.mode == BundleMode::Baseline) throw std::invalid_argument("decode_selection: baseline graph");
    const size_t per_group = GraphBuilder::mux_bits_needed(g.m);
    if (g.mode == BundleMode::Modelwise) {
        std::vector<float> group(bits.begin(), bits.begin() + per_group);
        std::fill(sel.begin(), sel.end(), selected_index(group, g.m));
    } else {
        for (size_t j = 0; j < n; ++j) {
            std::vector<float> group(bits.begin() + j * per_group, bits.begin() + (j + 1) * per_group);
            sel[j] = selected_index(group, g.m);
        }
    }
    return sel;
}

}  // namespace sshield
