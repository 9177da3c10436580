#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qadv {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles with an optional gradient slot of the
// same shape. Reshaping copies; there are no strided views.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor from(std::initializer_list<double> values);
    static Tensor from(Shape shape, std::initializer_list<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return shape_.empty() && data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Multi-index access, bounds checked.
    double at(std::initializer_list<std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index);

    // Scalar value of a one-element tensor.
    double item() const;

    Tensor reshaped(Shape shape) const;

    bool has_grad() const { return grad_.has_value(); }
    std::span<double> grad();
    std::span<const double> grad() const;
    // Allocates a zero gradient if none is present.
    std::span<double> ensure_grad();
    void clear_grad() { grad_.reset(); }
    Tensor grad_tensor() const;

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<double> data_;
    std::optional<std::vector<double>> grad_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

double l2_norm(std::span<const double> v);
double linf_norm(std::span<const double> v);
double l2_distance(const Tensor& a, const Tensor& b);
double linf_distance(const Tensor& a, const Tensor& b);

// Index of the largest element; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

// Row `i` of a tensor viewed as [shape[0], rest...] copied out with
// shape = shape[1:].
Tensor slice_row(const Tensor& batch, std::size_t i);
// Stacks equally shaped tensors into [n, shape...].
Tensor stack(std::span<const Tensor> rows);

}  // namespace qadv
