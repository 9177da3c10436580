#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "qadv/autodiff.hpp"
#include "qadv/tensor.hpp"

namespace qadv {

enum class QuantMethod { none, binary_connect, binary_net, dorefa, xnor, ternary };

std::string_view to_string(QuantMethod m);
QuantMethod parse_quant_method(std::string_view s);

inline constexpr int kFullPrecisionBits = 32;

// Quantization method plus weight / activation bitwidths. 32 bits means
// the path is left in full precision.
struct QuantScheme {
    QuantMethod method = QuantMethod::none;
    int weight_bits = kFullPrecisionBits;
    int activation_bits = kFullPrecisionBits;

    static QuantScheme full_precision() { return {}; }
    // Accepts "float", "w<i>a<j>" (binary-connect for w1a32, binary-net for
    // w1a1, dorefa otherwise) and "<method>:w<i>a<j>" for an explicit method.
    static QuantScheme parse(std::string_view id);

    // Throws ConfigError when the method / bitwidth combination is invalid.
    void validate() const;

    bool quantizes_weights() const { return weight_bits != kFullPrecisionBits; }
    bool quantizes_activations() const { return activation_bits != kFullPrecisionBits; }

    // "float", "w2a2", "w1a32", ... ; prefixed with the method when parse()
    // would not infer it.
    std::string id() const;

    bool operator==(const QuantScheme&) const = default;
};

// round((2^n - 1) x) / (2^n - 1) for x in [0,1], rounding half away from zero.
double uniform_quantize(double x, int bits);

// Elementwise sign with sign(0) = +1.
Tensor binarize(const Tensor& w);

// upstream * 1{|master| <= 1}
Tensor ste_backward(const Tensor& upstream, const Tensor& master);

// 2 Q(tanh(w) / (2 max|tanh(w)|) + 1/2, n) - 1. All-zero input is returned as is.
Tensor dorefa_quantize_weights(const Tensor& w, int bits);

// Q(clip(a, 0, 1), n)
Tensor dorefa_quantize_activations(const Tensor& a, int bits);

struct XnorApproximation {
    double alpha = 0.0;
    Tensor signs;
};
// alpha = mean|W|, B = sign(W): the minimizer of ||W - alpha B||_2.
XnorApproximation xnor_scale(const Tensor& w);

// 0.7 * mean|w|
double default_ternary_threshold(const Tensor& w);
// +1 above delta, -1 below -delta, 0 otherwise.
Tensor ternarize(const Tensor& w, std::optional<double> delta = std::nullopt);

// Forward value of the weights a layer uses under `scheme`.
Tensor quantized_weights(const Tensor& master, const QuantScheme& scheme);

// Tape ops. Forward applies the quantizer; backward is straight-through:
// gated by 1{|w| <= 1} for sign-based methods, identity for dorefa.
Var quantize_weights(Var master, const QuantScheme& scheme);
// Q(clip(a,0,1), n) forward, upstream * 1{0 <= a <= 1} backward.
Var quantize_activations(Var a, int bits);

}  // namespace qadv
