#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qadv/tensor.hpp"

namespace qadv {

// Labeled examples; features are [N, sample_shape...] with values in [0,1].
struct Dataset {
    Tensor features;
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const;
    Tensor sample(std::size_t i) const { return slice_row(features, i); }
    // Rows `indices` stacked into a batch.
    Tensor batch(std::span<const std::size_t> indices) const;
    Dataset subset(std::span<const std::size_t> indices) const;

    // Throws when labels are out of range or shapes disagree.
    void validate() const;
};

// Gaussian clusters with centers drawn uniformly from [0.25, 0.75]^d and
// per-coordinate standard deviation `spread`, clipped into [0,1]. Classes are
// balanced and the order is shuffled; everything is a function of `seed`.
Dataset make_blobs(std::size_t n, std::size_t classes, const Shape& sample_shape, double spread,
                   std::uint64_t seed);

}  // namespace qadv
