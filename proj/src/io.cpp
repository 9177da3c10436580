#include "qadv/io.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "qadv/error.hpp"

namespace qadv {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

namespace {

// Cursor over an in-memory file with truncation diagnostics.
class Reader {
public:
    Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (pos_ + n > b_.size())
            throw FormatError(what_ + ": truncated (need " + std::to_string(pos_ + n) + " bytes, have " +
                              std::to_string(b_.size()) + ")");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(b_[pos_++]);
    }
    std::uint32_t u32_be() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(b_[pos_++]);
        return v;
    }
    template <typename T>
    T le() {
        need(sizeof(T));
        std::array<unsigned char, sizeof(T)> raw{};
        std::memcpy(raw.data(), b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        T v;
        std::memcpy(&v, raw.data(), sizeof(T));
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return b_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    const std::string& b_;
    std::string what_;
    std::size_t pos_ = 0;
};

class Writer {
public:
    void u8(std::uint8_t v) { s_.push_back(static_cast<char>(v)); }
    void u32_be(std::uint32_t v) {
        for (int i = 3; i >= 0; --i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    template <typename T>
    void le(T v) {
        std::array<unsigned char, sizeof(T)> raw{};
        std::memcpy(raw.data(), &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        s_.append(reinterpret_cast<const char*>(raw.data()), raw.size());
    }
    void be_bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        if constexpr (std::endian::native == std::endian::little)
            for (std::size_t i = n; i-- > 0;) u8(c[i]);
        else
            for (std::size_t i = 0; i < n; ++i) u8(c[i]);
    }
    void str(const std::string& v) { s_ += v; }
    std::string& bytes() { return s_; }

private:
    std::string s_;
};

std::size_t idx_element_size(std::uint8_t type) {
    switch (type) {
        case 0x08:
        case 0x09: return 1;
        case 0x0B: return 2;
        case 0x0C:
        case 0x0D: return 4;
        case 0x0E: return 8;
    }
    return 0;
}

template <typename T>
T read_be(const std::string& b, std::size_t at) {
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), b.data() + at, sizeof(T));
    if constexpr (std::endian::native == std::endian::little) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
}

}  // namespace

IdxArray read_idx(const fs::path& path) {
    const std::string bytes = read_file(path);
    Reader r(bytes, path.string());
    const std::uint8_t z0 = r.u8(), z1 = r.u8(), type = r.u8(), rank = r.u8();
    const std::size_t esize = idx_element_size(type);
    if (z0 != 0 || z1 != 0 || esize == 0 || rank == 0) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "0x%02X%02X%02X%02X", z0, z1, type, rank);
        throw FormatError(path.string() + ": bad IDX magic number " + buf);
    }
    IdxArray a;
    a.type = type;
    std::size_t count = 1;
    for (int i = 0; i < rank; ++i) {
        const std::uint32_t d = r.u32_be();
        if (d == 0) throw FormatError(path.string() + ": zero extent in IDX header");
        a.dims.push_back(d);
        count *= d;
    }
    r.need(count * esize);
    if (r.remaining() != count * esize)
        throw FormatError(path.string() + ": " + std::to_string(r.remaining() - count * esize) +
                          " trailing bytes after IDX payload");
    const std::size_t base = bytes.size() - count * esize;
    a.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t at = base + i * esize;
        switch (type) {
            case 0x08: a.values[i] = static_cast<std::uint8_t>(bytes[at]); break;
            case 0x09: a.values[i] = static_cast<std::int8_t>(bytes[at]); break;
            case 0x0B: a.values[i] = read_be<std::int16_t>(bytes, at); break;
            case 0x0C: a.values[i] = read_be<std::int32_t>(bytes, at); break;
            case 0x0D: a.values[i] = read_be<float>(bytes, at); break;
            case 0x0E: a.values[i] = read_be<double>(bytes, at); break;
        }
    }
    return a;
}

void write_idx(const fs::path& path, const IdxArray& a) {
    if (a.type != 0x08 && a.type != 0x0E) throw UsageError("write_idx supports types 0x08 and 0x0E");
    if (a.dims.empty() || shape_size(a.dims) != a.values.size()) throw DimensionError("IDX dims do not match payload");
    Writer w;
    w.u8(0);
    w.u8(0);
    w.u8(a.type);
    w.u8(static_cast<std::uint8_t>(a.dims.size()));
    for (auto d : a.dims) w.u32_be(static_cast<std::uint32_t>(d));
    for (double v : a.values) {
        if (a.type == 0x08) {
            const double r = std::round(v);
            if (!(r >= 0.0 && r <= 255.0)) throw ParameterError("value " + std::to_string(v) + " does not fit a byte");
            w.u8(static_cast<std::uint8_t>(r));
        } else {
            w.be_bytes(&v, sizeof v);
        }
    }
    write_file_atomic(path, w.bytes());
}

Dataset load_idx_dataset(const fs::path& images, const fs::path& labels, std::size_t classes) {
    IdxArray img = read_idx(images);
    IdxArray lab = read_idx(labels);
    if (lab.type != 0x08 || lab.dims.size() != 1)
        throw FormatError(labels.string() + ": expected a rank-1 unsigned-byte label file");
    if (img.dims.size() != 2 && img.dims.size() != 3 && img.dims.size() != 4)
        throw FormatError(images.string() + ": expected rank 2, 3 or 4 images, got rank " +
                          std::to_string(img.dims.size()));
    if (img.dims[0] != lab.dims[0])
        throw FormatError(images.string() + " holds " + std::to_string(img.dims[0]) + " images but " +
                          labels.string() + " holds " + std::to_string(lab.dims[0]) + " labels");
    Dataset d;
    d.classes = classes;
    Shape shape = img.dims;
    if (shape.size() == 3) shape.insert(shape.begin() + 1, 1);
    const bool bytes = img.type == 0x08;
    for (auto& v : img.values) {
        if (bytes) v /= 255.0;
        if (!(v >= 0.0 && v <= 1.0)) throw FormatError(images.string() + ": feature value outside [0,1]");
    }
    d.features = Tensor(shape, std::move(img.values));
    for (std::size_t i = 0; i < lab.values.size(); ++i) {
        const int y = static_cast<int>(lab.values[i]);
        if (static_cast<std::size_t>(y) >= classes)
            throw FormatError(labels.string() + ": label " + std::to_string(y) + " at index " + std::to_string(i) +
                              " out of range for " + std::to_string(classes) + " classes");
        d.labels.push_back(y);
    }
    return d;
}

void save_idx_dataset(const Dataset& data, const fs::path& images, const fs::path& labels) {
    data.validate();
    IdxArray img{0x0E, data.features.shape(), data.features.values()};
    IdxArray lab{0x08, Shape{data.size()}, {}};
    for (int y : data.labels) lab.values.push_back(y);
    write_idx(images, img);
    write_idx(labels, lab);
}

Dataset load_cifar_binary(const std::vector<fs::path>& files) {
    constexpr std::size_t kRecord = 1 + 3072;
    if (files.empty()) throw ConfigError("no CIFAR batch files given");
    Dataset d;
    d.classes = 10;
    std::vector<double> pixels;
    for (const auto& f : files) {
        const std::string bytes = read_file(f);
        if (bytes.empty() || bytes.size() % kRecord != 0)
            throw FormatError(f.string() + ": truncated CIFAR batch (" + std::to_string(bytes.size()) +
                              " bytes is not a multiple of 3073)");
        for (std::size_t at = 0; at < bytes.size(); at += kRecord) {
            const int y = static_cast<std::uint8_t>(bytes[at]);
            if (y >= 10)
                throw FormatError(f.string() + ": label " + std::to_string(y) + " at record " +
                                  std::to_string(at / kRecord) + " out of range for 10 classes");
            d.labels.push_back(y);
            for (std::size_t k = 1; k < kRecord; ++k) pixels.push_back(static_cast<std::uint8_t>(bytes[at + k]) / 255.0);
        }
    }
    d.features = Tensor(Shape{d.labels.size(), 3, 32, 32}, std::move(pixels));
    return d;
}

namespace {
Dataset cap(Dataset d, std::size_t limit) {
    if (limit == 0 || limit >= d.size()) return d;
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return d.subset(idx);
}
}  // namespace

std::pair<Dataset, Dataset> load_dataset(const DatasetSpec& spec) {
    switch (spec.source) {
        case DataSource::idx:
            return {cap(load_idx_dataset(spec.train_images, spec.train_labels, spec.classes), spec.train_limit),
                    cap(load_idx_dataset(spec.test_images, spec.test_labels, spec.classes), spec.test_limit)};
        case DataSource::cifar:
            return {cap(load_cifar_binary(spec.train_files), spec.train_limit),
                    cap(load_cifar_binary(spec.test_files), spec.test_limit)};
        case DataSource::blobs: {
            // One draw split in two so train and test share cluster centers.
            Dataset all = make_blobs(spec.train_size + spec.test_size, spec.classes, spec.blob_shape, spec.blob_spread,
                                     spec.blob_seed);
            std::vector<std::size_t> tr(spec.train_size), te(spec.test_size);
            std::iota(tr.begin(), tr.end(), std::size_t{0});
            std::iota(te.begin(), te.end(), spec.train_size);
            if (tr.empty() || te.empty()) throw ConfigError("blob train and test sizes must be positive");
            return {all.subset(tr), all.subset(te)};
        }
    }
    throw ConfigError("unknown dataset source");
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'Q', 'A', 'D', 'V', 'C', 'K', 'P', 'T'};

std::string param_name(const Model& m, std::size_t layer, std::size_t k) {
    static constexpr const char* dense_names[] = {"weight", "bias"};
    static constexpr const char* bn_names[] = {"gamma", "beta"};
    std::string base = "layer" + std::to_string(layer) + "." + std::string(to_string(m.layers[layer].kind)) + ".";
    switch (m.layers[layer].kind) {
        case LayerKind::conv: return base + "kernel";
        case LayerKind::dense: return base + dense_names[k];
        case LayerKind::batchnorm: return base + bn_names[k];
        default: return base + std::to_string(k);
    }
}

}  // namespace

void snap_to_float32(Model& model) {
    auto snap = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    for (auto& layer : model.params)
        for (auto& t : layer)
            for (auto& v : t.data()) v = snap(v);
    for (auto& st : model.bn_state) {
        for (auto& v : st.running_mean) v = snap(v);
        for (auto& v : st.running_var) v = snap(v);
    }
}

void save_checkpoint(const Model& model, const fs::path& path) {
    Writer w;
    w.str(std::string(kMagic, sizeof kMagic));
    w.le<std::uint32_t>(kCheckpointVersion);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.arch));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.scheme.method));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.scheme.weight_bits));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.scheme.activation_bits));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.classes));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(model.input_shape.size()));
    for (auto d : model.input_shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));

    std::uint32_t blocks = 0;
    for (const auto& layer : model.params) blocks += static_cast<std::uint32_t>(layer.size());
    w.le<std::uint32_t>(blocks);
    for (std::size_t i = 0; i < model.params.size(); ++i)
        for (std::size_t k = 0; k < model.params[i].size(); ++k) {
            const Tensor& t = model.params[i][k];
            const std::string name = param_name(model, i, k);
            w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
            w.str(name);
            w.le<std::uint32_t>(static_cast<std::uint32_t>(i));
            w.le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
            for (auto d : t.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
            for (double v : t.values()) w.le<float>(static_cast<float>(v));
        }

    std::uint32_t bn_layers = 0;
    for (const auto& st : model.bn_state) bn_layers += st.running_mean.empty() ? 0 : 1;
    w.le<std::uint32_t>(bn_layers);
    for (std::size_t i = 0; i < model.bn_state.size(); ++i) {
        const auto& st = model.bn_state[i];
        if (st.running_mean.empty()) continue;
        w.le<std::uint32_t>(static_cast<std::uint32_t>(i));
        w.le<std::uint32_t>(static_cast<std::uint32_t>(st.running_mean.size()));
        for (double v : st.running_mean) w.le<float>(static_cast<float>(v));
        for (double v : st.running_var) w.le<float>(static_cast<float>(v));
    }

    w.le<std::uint64_t>(model.metadata.seed);
    w.le<std::uint32_t>(model.metadata.epochs);
    w.le<double>(model.metadata.final_accuracy);
    write_file_atomic(path, w.bytes());
}

Model load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    Reader r(bytes, path.string());
    if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
        throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
    const auto arch = r.le<std::uint32_t>();
    if (arch > static_cast<std::uint32_t>(Arch::desk_mlp)) throw FormatError(path.string() + ": unknown architecture id");
    QuantScheme scheme;
    const auto method = r.le<std::uint32_t>();
    if (method > static_cast<std::uint32_t>(QuantMethod::ternary)) throw FormatError(path.string() + ": unknown quantization method");
    scheme.method = static_cast<QuantMethod>(method);
    scheme.weight_bits = static_cast<int>(r.le<std::uint32_t>());
    scheme.activation_bits = static_cast<int>(r.le<std::uint32_t>());
    const auto classes = r.le<std::uint32_t>();
    const auto rank = r.le<std::uint32_t>();
    if (rank == 0 || rank > 4) throw FormatError(path.string() + ": implausible input rank");
    Shape input;
    for (std::uint32_t i = 0; i < rank; ++i) input.push_back(r.le<std::uint32_t>());

    Model m;
    try {
        m = build_model(static_cast<Arch>(arch), scheme, input, classes, 0);
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }

    std::size_t expected_blocks = 0;
    for (const auto& layer : m.params) expected_blocks += layer.size();
    const auto blocks = r.le<std::uint32_t>();
    if (blocks != expected_blocks)
        throw FormatError(path.string() + ": " + std::to_string(blocks) + " parameter blocks, architecture needs " +
                          std::to_string(expected_blocks));
    std::vector<std::size_t> next(m.params.size(), 0);
    for (std::uint32_t b = 0; b < blocks; ++b) {
        const std::string name = r.str(r.le<std::uint32_t>());
        const auto layer = r.le<std::uint32_t>();
        if (layer >= m.params.size() || next[layer] >= m.params[layer].size())
            throw FormatError(path.string() + ": unexpected parameter block '" + name + "'");
        Tensor& t = m.params[layer][next[layer]];
        if (name != param_name(m, layer, next[layer]))
            throw FormatError(path.string() + ": parameter block '" + name + "' where '" +
                              param_name(m, layer, next[layer]) + "' was expected");
        ++next[layer];
        Shape shape;
        const auto prank = r.le<std::uint32_t>();
        for (std::uint32_t i = 0; i < prank; ++i) shape.push_back(r.le<std::uint32_t>());
        if (shape != t.shape())
            throw FormatError(path.string() + ": block '" + name + "' has shape " + shape_string(shape) +
                              ", architecture needs " + shape_string(t.shape()));
        for (auto& v : t.data()) v = r.le<float>();
    }

    const auto bn_layers = r.le<std::uint32_t>();
    for (std::uint32_t b = 0; b < bn_layers; ++b) {
        const auto layer = r.le<std::uint32_t>();
        const auto c = r.le<std::uint32_t>();
        if (layer >= m.bn_state.size() || m.bn_state[layer].running_mean.size() != c)
            throw FormatError(path.string() + ": batch-norm statistics do not match the architecture");
        for (auto& v : m.bn_state[layer].running_mean) v = r.le<float>();
        for (auto& v : m.bn_state[layer].running_var) v = r.le<float>();
    }
    m.metadata.seed = r.le<std::uint64_t>();
    m.metadata.epochs = r.le<std::uint32_t>();
    m.metadata.final_accuracy = r.le<double>();
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after checkpoint");
    return m;
}

}  // namespace qadv
