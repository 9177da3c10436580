#include "qadv/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "qadv/error.hpp"

namespace qadv {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

Tape& tape_of(Var a) {
    if (!a.valid()) throw UsageError("operation on an unbound Var");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    Tape& t = tape_of(a);
    if (b.tape != &t) throw UsageError("operands recorded on different tapes");
    return t;
}

}  // namespace

const Tensor& Var::value() const {
    if (!valid()) throw UsageError("value of an unbound Var");
    return tape->value(*this);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{"constant", std::move(value), {}, nullptr, false});
    return Var{nodes_.size() - 1, this};
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{"variable", std::move(value), {}, nullptr, true});
    return Var{nodes_.size() - 1, this};
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardRule rule) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
        if (in.tape != this) throw UsageError(n.op + ": input from another tape");
        n.inputs.push_back(in.id);
        n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.rule = std::move(rule);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1, this};
}

const Tape::Node& Tape::node(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw UsageError("Var does not belong to this tape");
    return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
const std::string& Tape::op(Var v) const { return node(v).op; }

void Tape::backward(Var root) {
    const Node& r = node(root);
    if (r.value.size() != 1)
        throw UsageError("backward() needs a scalar root, got shape " + shape_string(r.value.shape()));
    if (backward_done_) throw UsageError("backward() called twice without zero_grad()");
    if (nodes_.empty()) throw UsageError("backward() on an empty tape");
    backward_done_ = true;
    if (!r.requires_grad) return;

    nodes_[root.id].value.ensure_grad()[0] += 1.0;
    for (std::size_t idx = root.id + 1; idx-- > 0;) {
        Node& n = nodes_[idx];
        if (!n.requires_grad || !n.rule || !n.value.has_grad()) continue;
        std::vector<bool> needs(n.inputs.size());
        for (std::size_t k = 0; k < n.inputs.size(); ++k) needs[k] = nodes_[n.inputs[k]].requires_grad;
        const Tensor upstream = n.value.grad_tensor();
        std::vector<Tensor> grads = n.rule(upstream, needs);
        for (std::size_t k = 0; k < n.inputs.size() && k < grads.size(); ++k) {
            if (!needs[k] || grads[k].size() == 0) continue;
            Tensor& target = nodes_[n.inputs[k]].value;
            if (grads[k].size() != target.size())
                throw DimensionError(n.op + ": backward rule produced gradient of shape " +
                                     shape_string(grads[k].shape()) + " for input " + shape_string(target.shape()));
            auto acc = target.ensure_grad();
            const auto g = grads[k].data();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
        }
    }
}

Tensor Tape::grad(Var v) const { return node(v).value.grad_tensor(); }

void Tape::zero_grad() {
    for (auto& n : nodes_) n.value.clear_grad();
    backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// Elementwise unary op; the derivative is a function of the input value.
template <typename Fwd, typename Deriv>
Var elementwise(const char* name, Var a, Fwd fwd, Deriv deriv) {
    Tape& t = tape_of(a);
    const Tensor* av = &a.value();
    Tensor out(av->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd((*av)[i]);
    return t.record(name, std::move(out), {a}, [av, deriv](const Tensor& g, const std::vector<bool>&) {
        Tensor da(av->shape());
        for (std::size_t i = 0; i < da.size(); ++i) da[i] = g[i] * deriv((*av)[i]);
        return std::vector<Tensor>{std::move(da)};
    });
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    out.clear_grad();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return t.record("add", std::move(out), {a, b},
                    [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g, g}; });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    out.clear_grad();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return t.record("sub", std::move(out), {a, b}, [](const Tensor& g, const std::vector<bool>&) {
        Tensor nb = g;
        for (std::size_t i = 0; i < nb.size(); ++i) nb[i] = -nb[i];
        return std::vector<Tensor>{g, std::move(nb)};
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    const Tensor* av = &a.value();
    const Tensor* bv = &b.value();
    Tensor out(av->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*av)[i] * (*bv)[i];
    return t.record("mul", std::move(out), {a, b}, [av, bv](const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) {
            r[0] = Tensor(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = g[i] * (*bv)[i];
        }
        if (needs[1]) {
            r[1] = Tensor(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) r[1][i] = g[i] * (*av)[i];
        }
        return r;
    });
}

Var scale(Var a, double s) {
    return elementwise("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(Var a, double s) {
    return elementwise("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var square(Var a) {
    return elementwise("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var relu(Var a) {
    // subgradient at 0 is 0
    return elementwise("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clip(Var a, double lo, double hi) {
    if (lo > hi) throw ParameterError("clip: lo > hi");
    return elementwise("clip", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sin(Var a) {
    return elementwise("sin", a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Var tanh(Var a) {
    return elementwise("tanh", a, [](double x) { return std::tanh(x); },
                       [](double x) {
                           const double th = std::tanh(x);
                           return 1.0 - th * th;
                       });
}

Var exp(Var a) {
    return elementwise("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    return elementwise("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var reshape(Var a, Shape shape) {
    Tape& t = tape_of(a);
    Tensor out = a.value().reshaped(std::move(shape));
    const Shape in_shape = a.value().shape();
    return t.record("reshape", std::move(out), {a}, [in_shape](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{g.reshaped(in_shape)};
    });
}

Var flatten(Var a) {
    const Shape& s = a.value().shape();
    if (s.empty()) throw DimensionError("flatten of rank-0 tensor");
    const std::size_t n = s[0];
    return reshape(a, Shape{n, a.value().size() / n});
}

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    const Shape in_shape = a.value().shape();
    return t.record("sum", Tensor::scalar(s), {a}, [in_shape](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{Tensor(in_shape, g[0])};
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor* av = &a.value();
    const Tensor* bv = &b.value();
    if (av->rank() != 2 || bv->rank() != 2 || av->dim(1) != bv->dim(0))
        throw DimensionError("matmul: cannot multiply " + shape_string(av->shape()) + " by " +
                             shape_string(bv->shape()));
    const auto m = static_cast<Eigen::Index>(av->dim(0));
    const auto k = static_cast<Eigen::Index>(av->dim(1));
    const auto n = static_cast<Eigen::Index>(bv->dim(1));
    Tensor out(Shape{av->dim(0), bv->dim(1)});
    MatMap(out.data().data(), m, n).noalias() = ConstMatMap(av->data().data(), m, k) * ConstMatMap(bv->data().data(), k, n);
    return t.record("matmul", std::move(out), {a, b},
                    [av, bv, m, k, n](const Tensor& g, const std::vector<bool>& needs) {
                        std::vector<Tensor> r(2);
                        ConstMatMap G(g.data().data(), m, n);
                        if (needs[0]) {
                            r[0] = Tensor(av->shape());
                            MatMap(r[0].data().data(), m, k).noalias() =
                                G * ConstMatMap(bv->data().data(), k, n).transpose();
                        }
                        if (needs[1]) {
                            r[1] = Tensor(bv->shape());
                            MatMap(r[1].data().data(), k, n).noalias() =
                                ConstMatMap(av->data().data(), m, k).transpose() * G;
                        }
                        return r;
                    });
}

Var add_bias(Var x, Var b) {
    Tape& t = tape_of(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || bv.size() != xv.dim(1))
        throw DimensionError("add_bias: " + shape_string(xv.shape()) + " with bias " + shape_string(bv.shape()));
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    Tensor out = xv;
    out.clear_grad();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bv[j];
    const Shape bshape = bv.shape();
    return t.record("add_bias", std::move(out), {x, b},
                    [rows, cols, bshape](const Tensor& g, const std::vector<bool>& needs) {
                        std::vector<Tensor> r(2);
                        if (needs[0]) r[0] = g;
                        if (needs[1]) {
                            r[1] = Tensor(bshape);
                            for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < cols; ++j) r[1][j] += g[i * cols + j];
                        }
                        return r;
                    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, f, kh, kw, pad_h, pad_w, ho, wo;
    std::size_t patch() const { return c * kh * kw; }
    std::size_t positions() const { return n * ho * wo; }
};

// cols: [C*Kh*Kw, N*Ho*Wo]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const std::size_t row = (ci * g.kh + ky) * g.kw + kx;
                double* dst = cols + row * P;
                for (std::size_t ni = 0; ni < g.n; ++ni) {
                    const double* plane = x + (ni * g.c + ci) * g.h * g.w;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_h);
                        double* out = dst + (ni * g.ho + oy) * g.wo;
                        if (iy < 0 || iy >= static_cast<long>(g.h)) {
                            std::fill(out, out + g.wo, 0.0);
                            continue;
                        }
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad_w);
                            out[ox] = (ix < 0 || ix >= static_cast<long>(g.w))
                                          ? 0.0
                                          : plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const std::size_t row = (ci * g.kh + ky) * g.kw + kx;
                const double* src = cols + row * P;
                for (std::size_t ni = 0; ni < g.n; ++ni) {
                    double* plane = dx + (ni * g.c + ci) * g.h * g.w;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad_h);
                        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                        const double* in = src + (ni * g.ho + oy) * g.wo;
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad_w);
                            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                            plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += in[ox];
                        }
                    }
                }
            }
}

}  // namespace

Var conv2d(Var x, Var kernel, Padding padding) {
    Tape& t = tape_of(x, kernel);
    const Tensor* xv = &x.value();
    const Tensor* kv = &kernel.value();
    if (xv->rank() != 4 || kv->rank() != 4)
        throw DimensionError("conv2d: expected [N,C,H,W] input and [F,C,Kh,Kw] kernel, got " +
                             shape_string(xv->shape()) + " and " + shape_string(kv->shape()));
    if (xv->dim(1) != kv->dim(1))
        throw DimensionError("conv2d: channel mismatch between input " + shape_string(xv->shape()) + " and kernel " +
                             shape_string(kv->shape()));
    ConvGeometry g{};
    g.n = xv->dim(0);
    g.c = xv->dim(1);
    g.h = xv->dim(2);
    g.w = xv->dim(3);
    g.f = kv->dim(0);
    g.kh = kv->dim(2);
    g.kw = kv->dim(3);
    if (padding == Padding::same) {
        g.pad_h = (g.kh - 1) / 2;
        g.pad_w = (g.kw - 1) / 2;
        g.ho = g.h;
        g.wo = g.w;
        if (g.kh > 2 * g.pad_h + g.h || g.kw > 2 * g.pad_w + g.w)
            throw DimensionError("conv2d: kernel larger than padded input");
    } else {
        if (g.kh > g.h || g.kw > g.w)
            throw DimensionError("conv2d: kernel " + shape_string(kv->shape()) + " larger than input " +
                                 shape_string(xv->shape()));
        g.pad_h = g.pad_w = 0;
        g.ho = g.h - g.kh + 1;
        g.wo = g.w - g.kw + 1;
    }

    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto P = static_cast<Eigen::Index>(g.positions());
    const auto F = static_cast<Eigen::Index>(g.f);
    const std::size_t hw = g.ho * g.wo;

    std::vector<double> cols(g.patch() * g.positions());
    im2col(g, xv->data().data(), cols.data());
    RowMatrix prod = ConstMatMap(kv->data().data(), F, patch) * ConstMatMap(cols.data(), patch, P);

    Tensor out(Shape{g.n, g.f, g.ho, g.wo});
    for (std::size_t ni = 0; ni < g.n; ++ni)
        for (std::size_t fi = 0; fi < g.f; ++fi)
            std::copy_n(prod.data() + fi * g.positions() + ni * hw, hw, out.data().data() + (ni * g.f + fi) * hw);

    return t.record("conv2d", std::move(out), {x, kernel},
                    [xv, kv, g, patch, P, F, hw](const Tensor& grad, const std::vector<bool>& needs) {
                        RowMatrix G(F, P);
                        for (std::size_t ni = 0; ni < g.n; ++ni)
                            for (std::size_t fi = 0; fi < g.f; ++fi)
                                std::copy_n(grad.data().data() + (ni * g.f + fi) * hw, hw,
                                            G.data() + fi * g.positions() + ni * hw);
                        std::vector<Tensor> r(2);
                        if (needs[1]) {
                            std::vector<double> cols(g.patch() * g.positions());
                            im2col(g, xv->data().data(), cols.data());
                            r[1] = Tensor(kv->shape());
                            MatMap(r[1].data().data(), F, patch).noalias() =
                                G * ConstMatMap(cols.data(), patch, P).transpose();
                        }
                        if (needs[0]) {
                            RowMatrix dcols = ConstMatMap(kv->data().data(), F, patch).transpose() * G;
                            r[0] = Tensor(xv->shape());
                            col2im(g, dcols.data(), r[0].data().data());
                        }
                        return r;
                    });
}

Var maxpool2d(Var x, std::size_t window) {
    Tape& t = tape_of(x);
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("maxpool2d: expected [N,C,H,W], got " + shape_string(xv.shape()));
    if (window == 0 || xv.dim(2) < window || xv.dim(3) < window)
        throw DimensionError("maxpool2d: window larger than input " + shape_string(xv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t ho = h / window, wo = w / window;
    Tensor out(Shape{n, c, ho, wo});
    std::vector<std::size_t> source(out.size());
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* plane = xv.data().data() + p * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (oy * window) * w + ox * window;
                for (std::size_t dy = 0; dy < window; ++dy)
                    for (std::size_t dx = 0; dx < window; ++dx) {
                        const std::size_t idx = (oy * window + dy) * w + ox * window + dx;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                const std::size_t o = (p * ho + oy) * wo + ox;
                out[o] = plane[best];
                source[o] = p * h * w + best;
            }
    }
    const Shape in_shape = xv.shape();
    return t.record("maxpool2d", std::move(out), {x},
                    [in_shape, source = std::move(source)](const Tensor& g, const std::vector<bool>&) {
                        Tensor dx(in_shape);
                        for (std::size_t o = 0; o < source.size(); ++o) dx[source[o]] += g[o];
                        return std::vector<Tensor>{std::move(dx)};
                    });
}

// ---------------------------------------------------------------------------
// Class-axis ops
// ---------------------------------------------------------------------------

namespace {

void require_logits(const Tensor& z, const char* op) {
    if (z.rank() != 2) throw DimensionError(std::string(op) + ": expected [N,C] logits, got " + shape_string(z.shape()));
}

void require_labels(const Tensor& z, const std::vector<int>& labels, const char* op) {
    if (labels.size() != z.dim(0))
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(z.dim(0)));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= z.dim(1))
            throw ParameterError(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                                 std::to_string(z.dim(1)) + ")");
}

Tensor softmax_rows(const Tensor& z) {
    const std::size_t n = z.dim(0), c = z.dim(1);
    Tensor p(z.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (p[i * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
    }
    return p;
}

}  // namespace

Var softmax(Var logits) {
    Tape& t = tape_of(logits);
    require_logits(logits.value(), "softmax");
    Tensor p = softmax_rows(logits.value());
    const std::size_t n = p.dim(0), c = p.dim(1);
    Tensor out = p;
    return t.record("softmax", std::move(out), {logits},
                    [p = std::move(p), n, c](const Tensor& g, const std::vector<bool>&) {
                        Tensor dz(p.shape());
                        for (std::size_t i = 0; i < n; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
                            for (std::size_t j = 0; j < c; ++j) dz[i * c + j] = p[i * c + j] * (g[i * c + j] - dot);
                        }
                        return std::vector<Tensor>{std::move(dz)};
                    });
}

Var log_softmax(Var logits) {
    Tape& t = tape_of(logits);
    require_logits(logits.value(), "log_softmax");
    Tensor p = softmax_rows(logits.value());
    const std::size_t n = p.dim(0), c = p.dim(1);
    const Tensor& z = logits.value();
    Tensor out(z.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
    }
    return t.record("log_softmax", std::move(out), {logits},
                    [p = std::move(p), n, c](const Tensor& g, const std::vector<bool>&) {
                        Tensor dz(p.shape());
                        for (std::size_t i = 0; i < n; ++i) {
                            double gs = 0.0;
                            for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                            for (std::size_t j = 0; j < c; ++j) dz[i * c + j] = g[i * c + j] - p[i * c + j] * gs;
                        }
                        return std::vector<Tensor>{std::move(dz)};
                    });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
    Tape& t = tape_of(logits);
    const Tensor& z = logits.value();
    require_logits(z, "cross_entropy");
    require_labels(z, labels, "cross_entropy");
    const std::size_t n = z.dim(0), c = z.dim(1);
    Tensor p = softmax_rows(z);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        loss += mx + std::log(s) - row[labels[i]];
    }
    return t.record("cross_entropy", Tensor::scalar(loss), {logits},
                    [p = std::move(p), labels, n, c](const Tensor& g, const std::vector<bool>&) {
                        Tensor dz = p;
                        for (std::size_t i = 0; i < n; ++i) dz[i * c + static_cast<std::size_t>(labels[i])] -= 1.0;
                        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= g[0];
                        return std::vector<Tensor>{std::move(dz)};
                    });
}

Var margin_loss(Var logits, const std::vector<int>& labels, double kappa) {
    Tape& t = tape_of(logits);
    const Tensor& z = logits.value();
    require_logits(z, "margin_loss");
    require_labels(z, labels, "margin_loss");
    const std::size_t n = z.dim(0), c = z.dim(1);
    if (c < 2) throw DimensionError("margin_loss needs at least two classes");
    double total = 0.0;
    std::vector<std::size_t> runner_up(n);
    std::vector<bool> active(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = z.data().data() + i * c;
        const auto y = static_cast<std::size_t>(labels[i]);
        std::size_t best = (y == 0) ? 1 : 0;
        for (std::size_t j = 0; j < c; ++j)
            if (j != y && row[j] > row[best]) best = j;
        const double m = row[y] - row[best];
        runner_up[i] = best;
        active[i] = m > -kappa;
        total += std::max(m, -kappa);
    }
    return t.record("margin_loss", Tensor::scalar(total), {logits},
                    [labels, runner_up, active, n, c](const Tensor& g, const std::vector<bool>&) {
                        Tensor dz(Shape{n, c});
                        for (std::size_t i = 0; i < n; ++i) {
                            if (!active[i]) continue;
                            dz[i * c + static_cast<std::size_t>(labels[i])] += g[0];
                            dz[i * c + runner_up[i]] -= g[0];
                        }
                        return std::vector<Tensor>{std::move(dz)};
                    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

namespace {

struct ChannelLayout {
    std::size_t n, c, inner;
};

ChannelLayout channel_layout(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.rank() != 2 && x.rank() != 4)
        throw DimensionError("batch_norm: expected [N,F] or [N,C,H,W], got " + shape_string(x.shape()));
    ChannelLayout l{x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
    if (gamma.size() != l.c || beta.size() != l.c)
        throw DimensionError("batch_norm: affine parameters do not match " + std::to_string(l.c) + " channels");
    return l;
}

}  // namespace

Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
    Tape& t = tape_of(x, gamma);
    tape_of(x, beta);
    const Tensor& xv = x.value();
    const Tensor* gv = &gamma.value();
    const ChannelLayout l = channel_layout(xv, *gv, beta.value());
    const double count = static_cast<double>(l.n * l.inner);

    std::vector<double> mu(l.c, 0.0), var(l.c, 0.0), inv_std(l.c);
    for (std::size_t ni = 0; ni < l.n; ++ni)
        for (std::size_t ci = 0; ci < l.c; ++ci) {
            const double* p = xv.data().data() + (ni * l.c + ci) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) mu[ci] += p[k];
        }
    for (auto& m : mu) m /= count;
    for (std::size_t ni = 0; ni < l.n; ++ni)
        for (std::size_t ci = 0; ci < l.c; ++ci) {
            const double* p = xv.data().data() + (ni * l.c + ci) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) var[ci] += (p[k] - mu[ci]) * (p[k] - mu[ci]);
        }
    for (std::size_t ci = 0; ci < l.c; ++ci) {
        var[ci] /= count;
        inv_std[ci] = 1.0 / std::sqrt(var[ci] + eps);
    }
    if (stats) *stats = BatchStats{mu, var};

    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    const Tensor& bv = beta.value();
    for (std::size_t ni = 0; ni < l.n; ++ni)
        for (std::size_t ci = 0; ci < l.c; ++ci) {
            const std::size_t base = (ni * l.c + ci) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) {
                xhat[base + k] = (xv[base + k] - mu[ci]) * inv_std[ci];
                out[base + k] = (*gv)[ci] * xhat[base + k] + bv[ci];
            }
        }
    return t.record("batch_norm_train", std::move(out), {x, gamma, beta},
                    [l, count, gv, xhat = std::move(xhat), inv_std](const Tensor& g, const std::vector<bool>& needs) {
                        std::vector<double> sum_g(l.c, 0.0), sum_gx(l.c, 0.0);
                        for (std::size_t ni = 0; ni < l.n; ++ni)
                            for (std::size_t ci = 0; ci < l.c; ++ci) {
                                const std::size_t base = (ni * l.c + ci) * l.inner;
                                for (std::size_t k = 0; k < l.inner; ++k) {
                                    sum_g[ci] += g[base + k];
                                    sum_gx[ci] += g[base + k] * xhat[base + k];
                                }
                            }
                        std::vector<Tensor> r(3);
                        if (needs[0]) {
                            r[0] = Tensor(xhat.shape());
                            for (std::size_t ni = 0; ni < l.n; ++ni)
                                for (std::size_t ci = 0; ci < l.c; ++ci) {
                                    const std::size_t base = (ni * l.c + ci) * l.inner;
                                    const double a = (*gv)[ci] * inv_std[ci] / count;
                                    for (std::size_t k = 0; k < l.inner; ++k)
                                        r[0][base + k] =
                                            a * (count * g[base + k] - sum_g[ci] - xhat[base + k] * sum_gx[ci]);
                                }
                        }
                        if (needs[1]) r[1] = Tensor(Shape{l.c}, sum_gx);
                        if (needs[2]) r[2] = Tensor(Shape{l.c}, sum_g);
                        return r;
                    });
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const std::vector<double>& running_mean,
                    const std::vector<double>& running_var, double eps) {
    Tape& t = tape_of(x, gamma);
    tape_of(x, beta);
    const Tensor& xv = x.value();
    const Tensor* gv = &gamma.value();
    const ChannelLayout l = channel_layout(xv, *gv, beta.value());
    if (running_mean.size() != l.c || running_var.size() != l.c)
        throw DimensionError("batch_norm: running statistics do not match channel count");
    std::vector<double> inv_std(l.c);
    for (std::size_t ci = 0; ci < l.c; ++ci) inv_std[ci] = 1.0 / std::sqrt(running_var[ci] + eps);
    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    const Tensor& bv = beta.value();
    for (std::size_t ni = 0; ni < l.n; ++ni)
        for (std::size_t ci = 0; ci < l.c; ++ci) {
            const std::size_t base = (ni * l.c + ci) * l.inner;
            for (std::size_t k = 0; k < l.inner; ++k) {
                xhat[base + k] = (xv[base + k] - running_mean[ci]) * inv_std[ci];
                out[base + k] = (*gv)[ci] * xhat[base + k] + bv[ci];
            }
        }
    return t.record("batch_norm_eval", std::move(out), {x, gamma, beta},
                    [l, gv, xhat = std::move(xhat), inv_std](const Tensor& g, const std::vector<bool>& needs) {
                        std::vector<Tensor> r(3);
                        if (needs[0]) r[0] = Tensor(xhat.shape());
                        if (needs[1]) r[1] = Tensor(Shape{l.c});
                        if (needs[2]) r[2] = Tensor(Shape{l.c});
                        for (std::size_t ni = 0; ni < l.n; ++ni)
                            for (std::size_t ci = 0; ci < l.c; ++ci) {
                                const std::size_t base = (ni * l.c + ci) * l.inner;
                                for (std::size_t k = 0; k < l.inner; ++k) {
                                    if (needs[0]) r[0][base + k] = g[base + k] * (*gv)[ci] * inv_std[ci];
                                    if (needs[1]) r[1][ci] += g[base + k] * xhat[base + k];
                                    if (needs[2]) r[2][ci] += g[base + k];
                                }
                            }
                        return r;
                    });
}

// ---------------------------------------------------------------------------
// Finite-difference check
// ---------------------------------------------------------------------------

double grad_check(const ScalarMap& f, const Tensor& x, double h) {
    Tensor analytic;
    {
        Tape tape;
        Var xv = tape.variable(x);
        Var y = f(tape, xv);
        tape.backward(y);
        analytic = tape.grad(xv);
    }
    auto eval = [&](const Tensor& at) {
        Tape tape;
        return f(tape, tape.constant(at)).value().item();
    };
    double worst = 0.0;
    Tensor probe = x;
    probe.clear_grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        // Divide by the step actually taken, which differs from 2h by rounding.
        const double hi = orig + h, lo = orig - h;
        probe[i] = hi;
        const double up = eval(probe);
        probe[i] = lo;
        const double down = eval(probe);
        probe[i] = orig;
        const double fd = (up - down) / (hi - lo);
        const double ad = analytic[i];
        if (!std::isfinite(fd) || !std::isfinite(ad)) return std::numeric_limits<double>::infinity();
        worst = std::max(worst, std::abs(ad - fd) / (std::abs(fd) + 1e-12));
    }
    return worst;
}

}  // namespace qadv
