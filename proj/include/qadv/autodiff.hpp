#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "qadv/tensor.hpp"

namespace qadv {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    Tape* tape = nullptr;

    bool valid() const { return tape != nullptr && id != npos; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

// Maps the upstream gradient of a node to one gradient per input. `needs`
// flags the inputs that require a gradient; entries for the others may be
// left empty.
using BackwardRule = std::function<std::vector<Tensor>(const Tensor& upstream, const std::vector<bool>& needs)>;

// Single-writer reverse-mode tape. Nodes are appended in evaluation order,
// so creation order is a topological order of the graph.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Untracked input.
    Var constant(Tensor value);
    // Leaf whose gradient is collected by backward().
    Var variable(Tensor value);

    // Appends an operation node. The rule is kept only when some input
    // requires a gradient.
    Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardRule rule);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    const std::string& op(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    // Accumulates d(root)/d(node) into every tracked node. The root must be
    // a one-element tensor. A second call requires zero_grad() first.
    void backward(Var root);
    // Gradient of a tracked node after backward(); zeros if none reached it.
    Tensor grad(Var v) const;
    void zero_grad();

private:
    struct Node {
        std::string op;
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardRule rule;
        bool requires_grad = false;
    };

    const Node& node(Var v) const;

    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

enum class Padding { same, valid };

// Elementwise and shape primitives.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var square(Var a);
Var relu(Var a);
Var clip(Var a, double lo, double hi);
Var sin(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var reshape(Var a, Shape shape);
// [N, ...] -> [N, prod(...)]
Var flatten(Var a);

// Reductions to a one-element tensor.
Var sum(Var a);
Var mean(Var a);

// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);
// x: [N,F], b: [F]
Var add_bias(Var x, Var b);
// Cross-correlation, stride 1. x: [N,C,H,W], kernel: [F,C,Kh,Kw].
Var conv2d(Var x, Var kernel, Padding padding);
// Non-overlapping window x window max pooling over [N,C,H,W].
Var maxpool2d(Var x, std::size_t window = 2);

// Softmax / log-softmax over the last axis of [N,C].
Var softmax(Var logits);
Var log_softmax(Var logits);
// Sum over the batch of -log softmax(logits)[label].
Var cross_entropy(Var logits, const std::vector<int>& labels);
// Sum over the batch of max(z_y - max_{j != y} z_j, -kappa).
Var margin_loss(Var logits, const std::vector<int>& labels, double kappa);

// Batch normalization over axis 1 of [N,F] or [N,C,H,W].
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;  // biased
};
Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats);
Var batch_norm_eval(Var x, Var gamma, Var beta, const std::vector<double>& running_mean,
                    const std::vector<double>& running_var, double eps);

// Largest relative discrepancy between the tape gradient of a scalar map
// and central differences with step h:
//   max_i |g_i - fd_i| / (|fd_i| + 1e-12).
// Non-finite values on either side yield +infinity.
using ScalarMap = std::function<Var(Tape&, Var)>;
double grad_check(const ScalarMap& f, const Tensor& x, double h);

}  // namespace qadv
