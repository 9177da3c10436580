#include "qadv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qadv/error.hpp"

namespace qadv {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_)
        if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    if (shape_size(shape_) != data_.size())
        throw DimensionError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                             " values");
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
    return Tensor(std::move(shape), std::vector<double>(values));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size())
        throw DimensionError("index rank " + std::to_string(index.size()) + " for tensor " + shape_string(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_string(shape_));
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

double Tensor::item() const {
    if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
}

std::span<double> Tensor::grad() {
    if (!grad_) throw UsageError("tensor has no gradient");
    return *grad_;
}

std::span<const double> Tensor::grad() const {
    if (!grad_) throw UsageError("tensor has no gradient");
    return *grad_;
}

std::span<double> Tensor::ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
}

Tensor Tensor::grad_tensor() const {
    if (!grad_) return Tensor(shape_, 0.0);
    return Tensor(shape_, *grad_);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double linf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double l2_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l2_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double linf_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "linf_distance");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

Tensor slice_row(const Tensor& batch, std::size_t i) {
    if (batch.rank() < 1 || i >= batch.dim(0)) throw DimensionError("slice_row out of range");
    Shape row_shape(batch.shape().begin() + 1, batch.shape().end());
    if (row_shape.empty()) row_shape = {1};
    const std::size_t n = shape_size(row_shape);
    std::vector<double> data(batch.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                             batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return Tensor(std::move(row_shape), std::move(data));
}

Tensor stack(std::span<const Tensor> rows) {
    if (rows.empty()) throw DimensionError("stack of zero tensors");
    Shape shape{rows.size()};
    shape.insert(shape.end(), rows[0].shape().begin(), rows[0].shape().end());
    std::vector<double> data;
    data.reserve(shape_size(shape));
    for (const auto& r : rows) {
        require_same_shape(r, rows[0], "stack");
        data.insert(data.end(), r.data().begin(), r.data().end());
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace qadv
