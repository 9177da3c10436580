#include "qadv/quantization.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "qadv/error.hpp"

namespace qadv {

namespace {

constexpr std::array<int, 5> kActivationBits{1, 2, 3, 4, kFullPrecisionBits};

bool is_activation_width(int bits) {
    return std::find(kActivationBits.begin(), kActivationBits.end(), bits) != kActivationBits.end();
}

double sign_pos(double x) { return x >= 0.0 ? 1.0 : -1.0; }

}  // namespace

std::string_view to_string(QuantMethod m) {
    switch (m) {
        case QuantMethod::none: return "none";
        case QuantMethod::binary_connect: return "binary-connect";
        case QuantMethod::binary_net: return "binary-net";
        case QuantMethod::dorefa: return "dorefa";
        case QuantMethod::xnor: return "xnor";
        case QuantMethod::ternary: return "ternary";
    }
    return "unknown";
}

QuantMethod parse_quant_method(std::string_view s) {
    for (auto m : {QuantMethod::none, QuantMethod::binary_connect, QuantMethod::binary_net, QuantMethod::dorefa,
                   QuantMethod::xnor, QuantMethod::ternary})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown quantization method '" + std::string(s) + "'");
}

QuantScheme QuantScheme::parse(std::string_view id) {
    if (id == "float" || id == "none") return full_precision();
    std::optional<QuantMethod> method;
    std::string_view bits = id;
    if (auto colon = id.find(':'); colon != std::string_view::npos) {
        method = parse_quant_method(id.substr(0, colon));
        bits = id.substr(colon + 1);
    }
    auto bad = [&] { return ConfigError("malformed model id '" + std::string(id) + "' (expected float or w<i>a<j>)"); };
    if (bits.size() < 4 || bits[0] != 'w') throw bad();
    const auto a_pos = bits.find('a');
    if (a_pos == std::string_view::npos || a_pos < 2) throw bad();
    QuantScheme s;
    try {
        std::size_t used = 0;
        const std::string w_str(bits.substr(1, a_pos - 1));
        const std::string a_str(bits.substr(a_pos + 1));
        s.weight_bits = std::stoi(w_str, &used);
        if (used != w_str.size()) throw bad();
        s.activation_bits = std::stoi(a_str, &used);
        if (used != a_str.size()) throw bad();
    } catch (const std::logic_error&) {
        throw bad();
    }
    if (method) {
        s.method = *method;
    } else if (s.weight_bits == 1) {
        s.method = s.activation_bits == 1 ? QuantMethod::binary_net : QuantMethod::binary_connect;
    } else if (s.weight_bits == kFullPrecisionBits && s.activation_bits == kFullPrecisionBits) {
        s.method = QuantMethod::none;
    } else {
        s.method = QuantMethod::dorefa;
    }
    s.validate();
    return s;
}

void QuantScheme::validate() const {
    auto fail = [&](const std::string& why) {
        return ConfigError("invalid quantization scheme " + std::string(to_string(method)) + " w" +
                           std::to_string(weight_bits) + "a" + std::to_string(activation_bits) + ": " + why);
    };
    switch (method) {
        case QuantMethod::none:
            if (weight_bits != kFullPrecisionBits || activation_bits != kFullPrecisionBits)
                throw fail("no quantization requires 32-bit weights and activations");
            break;
        case QuantMethod::binary_connect:
            if (weight_bits != 1 || activation_bits != kFullPrecisionBits)
                throw fail("binary-connect requires 1-bit weights and 32-bit activations");
            break;
        case QuantMethod::binary_net:
            if (weight_bits != 1 || activation_bits != 1) throw fail("binary-net requires 1-bit weights and activations");
            break;
        case QuantMethod::dorefa:
            if (weight_bits < 2 || weight_bits > 4) throw fail("dorefa weights must use 2, 3 or 4 bits");
            if (!is_activation_width(activation_bits)) throw fail("activations must use 1, 2, 3, 4 or 32 bits");
            break;
        case QuantMethod::xnor:
            if (weight_bits != 1) throw fail("xnor requires 1-bit weights");
            if (!is_activation_width(activation_bits)) throw fail("activations must use 1, 2, 3, 4 or 32 bits");
            break;
        case QuantMethod::ternary:
            if (weight_bits != 2) throw fail("ternary weights occupy 2 bits");
            if (!is_activation_width(activation_bits)) throw fail("activations must use 1, 2, 3, 4 or 32 bits");
            break;
    }
}

std::string QuantScheme::id() const {
    if (method == QuantMethod::none) return "float";
    std::string base = "w" + std::to_string(weight_bits) + "a" + std::to_string(activation_bits);
    QuantMethod inferred = QuantMethod::dorefa;
    if (weight_bits == 1) inferred = activation_bits == 1 ? QuantMethod::binary_net : QuantMethod::binary_connect;
    if (inferred == method) return base;
    return std::string(to_string(method)) + ":" + base;
}

double uniform_quantize(double x, int bits) {
    if (bits < 1 || bits > 31) throw ParameterError("uniform_quantize: bits must be in [1, 31], got " + std::to_string(bits));
    if (!(x >= 0.0 && x <= 1.0)) throw ParameterError("uniform_quantize: input " + std::to_string(x) + " outside [0,1]");
    const double levels = std::ldexp(1.0, bits) - 1.0;
    return std::round(levels * x) / levels;
}

Tensor binarize(const Tensor& w) {
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = sign_pos(w[i]);
    return out;
}

Tensor ste_backward(const Tensor& upstream, const Tensor& master) {
    require_same_shape(upstream, master, "ste_backward");
    Tensor out(upstream.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(master[i]) <= 1.0 ? upstream[i] : 0.0;
    return out;
}

Tensor dorefa_quantize_weights(const Tensor& w, int bits) {
    if (bits < 2 || bits > 4) throw ParameterError("dorefa weights use 2, 3 or 4 bits, got " + std::to_string(bits));
    double max_tanh = 0.0;
    for (double v : w.data()) max_tanh = std::max(max_tanh, std::abs(std::tanh(v)));
    if (max_tanh == 0.0) return Tensor(w.shape(), w.values());
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double unit = std::clamp(std::tanh(w[i]) / (2.0 * max_tanh) + 0.5, 0.0, 1.0);
        out[i] = 2.0 * uniform_quantize(unit, bits) - 1.0;
    }
    return out;
}

Tensor dorefa_quantize_activations(const Tensor& a, int bits) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = uniform_quantize(std::clamp(a[i], 0.0, 1.0), bits);
    return out;
}

XnorApproximation xnor_scale(const Tensor& w) {
    if (w.size() == 0) throw ParameterError("xnor_scale of an empty tensor");
    double s = 0.0;
    for (double v : w.data()) s += std::abs(v);
    return {s / static_cast<double>(w.size()), binarize(w)};
}

double default_ternary_threshold(const Tensor& w) {
    double s = 0.0;
    for (double v : w.data()) s += std::abs(v);
    return 0.7 * s / static_cast<double>(std::max<std::size_t>(w.size(), 1));
}

Tensor ternarize(const Tensor& w, std::optional<double> delta) {
    const double d = delta.value_or(default_ternary_threshold(w));
    if (d < 0.0) throw ParameterError("ternarize: negative threshold");
    Tensor out(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] > d ? 1.0 : (w[i] < -d ? -1.0 : 0.0);
    return out;
}

Tensor quantized_weights(const Tensor& master, const QuantScheme& scheme) {
    switch (scheme.method) {
        case QuantMethod::none: return Tensor(master.shape(), master.values());
        case QuantMethod::binary_connect:
        case QuantMethod::binary_net: return binarize(master);
        case QuantMethod::dorefa: return dorefa_quantize_weights(master, scheme.weight_bits);
        case QuantMethod::xnor: {
            auto [alpha, signs] = xnor_scale(master);
            for (std::size_t i = 0; i < signs.size(); ++i) signs[i] *= alpha;
            return signs;
        }
        case QuantMethod::ternary: return ternarize(master);
    }
    throw ConfigError("unhandled quantization method");
}

Var quantize_weights(Var master, const QuantScheme& scheme) {
    if (scheme.method == QuantMethod::none) return master;
    Tape& t = *master.tape;
    const Tensor* mv = &master.value();
    Tensor q = quantized_weights(*mv, scheme);
    if (scheme.method == QuantMethod::dorefa) {
        return t.record("quantize_weights", std::move(q), {master},
                        [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g}; });
    }
    return t.record("quantize_weights", std::move(q), {master}, [mv](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{ste_backward(g, *mv)};
    });
}

Var quantize_activations(Var a, int bits) {
    if (bits == kFullPrecisionBits) return relu(a);
    Tape& t = *a.tape;
    const Tensor* av = &a.value();
    return t.record("quantize_activations", dorefa_quantize_activations(*av, bits), {a},
                    [av](const Tensor& g, const std::vector<bool>&) {
                        Tensor d(g.shape());
                        for (std::size_t i = 0; i < d.size(); ++i)
                            d[i] = ((*av)[i] >= 0.0 && (*av)[i] <= 1.0) ? g[i] : 0.0;
                        return std::vector<Tensor>{std::move(d)};
                    });
}

}  // namespace qadv
