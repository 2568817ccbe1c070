#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aq/error.hpp"

namespace aq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    const Tape* tape = nullptr;  // tape that produced this tensor, null for leaves
    std::int64_t producer = -1;  // node index on that tape

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
/// Copies are shallow: two Tensor handles may refer to the same storage,
/// which is how parameters are shared between the network and the optimizer.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                                 std::to_string(values.size()) + " values");
        }
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

    bool defined() const noexcept { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad_mut() { return impl_->grad_buffer(); }
    void zero_grad() { impl_->grad.clear(); }

    /// Same values, no history, no gradient.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data); }
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

inline void check_finite(std::string_view op, std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
    }
}

}  // namespace aq
