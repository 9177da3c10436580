#pragma once

#include "qadv/model.hpp"
#include "qadv/random.hpp"

namespace qadv::testing {

inline Tensor random_input(const Shape& sample, std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    Tensor t(s);
    Rng rng(seed);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// softmax(x W + b) as a one-layer model; pass an empty bias for none.
inline Model softmax_regression(const Tensor& w, const Tensor& bias = Tensor()) {
    Model m;
    m.arch = Arch::desk_mlp;
    m.classes = w.dim(1);
    m.input_shape = Shape{w.dim(0)};
    LayerSpec dense;
    dense.kind = LayerKind::dense;
    dense.width = w.dim(1);
    dense.bias = !bias.empty();
    LayerSpec head;
    head.kind = LayerKind::softmax;
    m.layers = {dense, head};
    m.params = {{w}, {}};
    if (dense.bias) m.params[0].push_back(bias);
    m.bn_state.resize(2);
    return m;
}

// Model whose logits do not depend on the input.
inline Model constant_model(const Shape& input, std::size_t classes) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), input, classes, 1);
    for (auto& v : m.params[0][0].data()) v = 0.0;
    return m;
}

}  // namespace qadv::testing

#include <filesystem>
#include <fstream>
#include <string>

#include <unistd.h>

namespace qadv::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() / ("qadv-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace qadv::testing
