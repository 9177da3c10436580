#include "qadv/dataset.hpp"

#include <algorithm>
#include <string>

#include "qadv/error.hpp"
#include "qadv/random.hpp"

namespace qadv {

Shape Dataset::sample_shape() const {
    if (features.rank() < 2) return Shape{1};
    return Shape(features.shape().begin() + 1, features.shape().end());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw UsageError("empty batch");
    const Shape row = sample_shape();
    const std::size_t n = shape_size(row);
    Shape shape{indices.size()};
    shape.insert(shape.end(), row.begin(), row.end());
    std::vector<double> data(indices.size() * n);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= size()) throw UsageError("batch index out of range");
        std::copy_n(features.data().begin() + static_cast<std::ptrdiff_t>(indices[k] * n), n,
                    data.begin() + static_cast<std::ptrdiff_t>(k * n));
    }
    return Tensor(std::move(shape), std::move(data));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset d;
    d.features = batch(indices);
    d.classes = classes;
    d.labels.reserve(indices.size());
    for (auto i : indices) d.labels.push_back(labels[i]);
    return d;
}

void Dataset::validate() const {
    if (labels.empty()) throw UsageError("dataset is empty");
    if (features.rank() < 1 || features.dim(0) != labels.size())
        throw DimensionError("dataset has " + std::to_string(labels.size()) + " labels for features " +
                             shape_string(features.shape()));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
}

Dataset make_blobs(std::size_t n, std::size_t classes, const Shape& sample_shape, double spread,
                   std::uint64_t seed) {
    if (n == 0 || classes < 2) throw ConfigError("blobs need at least one sample and two classes");
    if (!(spread > 0.0)) throw ConfigError("blob spread must be positive");
    const std::size_t dim = shape_size(sample_shape);
    if (dim == 0) throw ConfigError("blob sample shape is empty");
    Rng rng(seed);
    std::vector<double> centers(classes * dim);
    for (auto& c : centers) c = rng.uniform(0.25, 0.75);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);

    Shape shape{n};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Dataset d;
    d.features = Tensor(shape);
    d.labels.resize(n);
    d.classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = order[i] % classes;
        d.labels[i] = static_cast<int>(k);
        for (std::size_t j = 0; j < dim; ++j)
            d.features[i * dim + j] = std::clamp(centers[k * dim + j] + spread * rng.normal(), 0.0, 1.0);
    }
    return d;
}

}  // namespace qadv
