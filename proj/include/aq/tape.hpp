#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "aq/tensor.hpp"

namespace aq {

/// Reverse-mode tape. Ops append one node per call; backward() replays them
/// in reverse. A node's backward rule receives the gradient of its output and
/// accumulates into its inputs. Custom rules (straight-through estimators) are
/// recorded the same way as analytic ones; nothing distinguishes them here.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const double> grad_out)>;

    struct Node {
        std::string name;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// True when at least one input wants a gradient, i.e. the op must be recorded.
    static bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
        for (const Tensor* t : inputs) {
            if (t && t->defined() && t->requires_grad()) return true;
        }
        return false;
    }

    /// Attach `out` to the tape as the product of `inputs`. No-op when no input
    /// requires a gradient.
    Tensor record(std::string name, Tensor out, std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
        if (!any_requires_grad(inputs)) return out;
        Node node;
        node.name = std::move(name);
        for (const Tensor* t : inputs) {
            if (t && t->defined()) node.inputs.push_back(t->impl());
        }
        node.output = out.impl();
        node.backward = std::move(backward);
        out.impl()->requires_grad = true;
        out.impl()->tape = this;
        out.impl()->producer = static_cast<std::int64_t>(nodes_.size());
        nodes_.push_back(std::move(node));
        return out;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }

    /// Populates .grad on every tensor that requires a gradient and feeds `loss`.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        verify_order();
        loss.impl()->grad_buffer()[0] += 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& node = nodes_[i];
            if (node.output->grad.empty()) continue;
            node.backward(node.output->grad);
            for (const auto& in : node.inputs) {
                if (!in->grad.empty() && in->grad.size() != in->data.size()) {
                    throw StructuralError("backward rule of '" + node.name + "' produced a gradient of the wrong size");
                }
            }
        }
    }

    /// Number of times a log/ratio argument was clamped to epsilon on this tape.
    std::size_t eps_clamps = 0;

private:
    // Every input produced on this tape must come from an earlier node.
    void verify_order() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            for (const auto& in : nodes_[i].inputs) {
                if (in->tape == this && in->producer >= static_cast<std::int64_t>(i)) {
                    throw StructuralError("tape cycle: node " + std::to_string(i) + " ('" + nodes_[i].name +
                                          "') consumes the output of node " + std::to_string(in->producer));
                }
            }
            if (nodes_[i].output->tape != this || nodes_[i].output->producer != static_cast<std::int64_t>(i)) {
                throw StructuralError("tape node " + std::to_string(i) + " output was re-recorded");
            }
        }
    }

    std::vector<Node> nodes_;
};

/// Gradient accumulator for an op input, or null if the input is a constant.
inline std::vector<double>* grad_sink(const std::shared_ptr<detail::TensorImpl>& impl) {
    return impl->requires_grad ? &impl->grad_buffer() : nullptr;
}

}  // namespace aq
