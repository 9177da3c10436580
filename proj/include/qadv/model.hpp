#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qadv/autodiff.hpp"
#include "qadv/dataset.hpp"
#include "qadv/quantization.hpp"

namespace qadv {

enum class Arch { desk_cnn, desk_mlp };
std::string_view to_string(Arch a);
Arch parse_arch(std::string_view s);

enum class LayerKind { conv, dense, batchnorm, relu, maxpool, softmax };
std::string_view to_string(LayerKind k);

// One layer of a block-structured network. On conv/dense layers
// `quantize_activations` marks that the block they open ends in a quantized
// activation; the relu layer of that block carries the same flag.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t width = 0;   // filters (conv) or units (dense)
    std::size_t kernel = 0;  // conv kernel extent or pooling window
    bool bias = false;
    bool quantize_weights = false;
    bool quantize_activations = false;
};

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

struct TrainingMetadata {
    std::uint64_t seed = 0;
    std::uint32_t epochs = 0;
    double final_accuracy = 0.0;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// Master parameters stay full precision; quantized copies are produced on
// every forward pass.
struct Model {
    Arch arch = Arch::desk_mlp;
    QuantScheme scheme;
    std::size_t classes = 0;
    Shape input_shape;
    std::vector<LayerSpec> layers;
    // Per layer: conv {kernel}, dense {weight[, bias]}, batchnorm {gamma, beta}.
    std::vector<std::vector<Tensor>> params;
    // Per layer; empty for non-batchnorm layers.
    std::vector<BatchNormState> bn_state;
    TrainingMetadata metadata;

    std::size_t parameter_count() const;
};

// desk-cnn: conv16-pool-BN-act, conv32-pool-BN-act, dense64-BN-act, dense C.
// desk-mlp: dense128-BN-act, dense64-BN-act, dense C.
// The first weight layer and the output layer never quantize weights.
Model build_model(Arch arch, const QuantScheme& scheme, const Shape& input_shape, std::size_t classes,
                  std::uint64_t seed);

enum class Mode { train, eval };

// Records the network on `tape`. Parameters enter as variables when
// `track_params` is set (training) and as constants otherwise. In train mode
// batch statistics are written to `batch_stats` (one entry per layer).
struct Trace {
    Var logits;
    std::vector<std::vector<Var>> params;
    std::vector<Var> activations;  // output of each activation layer
};
Trace trace_forward(Tape& tape, const Model& model, Var x, Mode mode, bool track_params,
                    std::vector<BatchStats>* batch_stats = nullptr);

// Logits [N, C] for a batch x [N, input_shape...]. Train mode uses batch
// statistics and updates the running statistics.
Tensor forward(Model& model, const Tensor& x, Mode mode);
// Eval-mode logits; never mutates the model.
Tensor predict_logits(const Model& model, const Tensor& x);
std::vector<int> predict_labels(const Model& model, const Tensor& x);

// Eval-mode outputs of every activation layer, for inspection.
std::vector<Tensor> activation_outputs(const Model& model, const Tensor& x);

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double decay = 0.5;
    // Epochs between learning-rate decays; 0 selects max(1, epochs / 3).
    std::size_t step_interval = 0;
    std::uint64_t seed = 1;

    void validate() const;
    std::size_t effective_step_interval() const;
    // lr * decay^floor(epoch / step_interval)
    double lr_at(std::size_t epoch) const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
};

// Minibatch Adam on the master parameters with straight-through gradients.
std::vector<EpochRecord> train(Model& model, const Dataset& data, const TrainConfig& cfg);

double evaluate_accuracy(const Model& model, const Dataset& data);

// d CE(x, y) / dx in eval mode. x has the model's input shape.
Tensor loss_gradient_wrt_input(const Model& model, const Tensor& x, int label);
// Per-example gradients for a batch; the loss is summed so rows decouple.
Tensor loss_gradient_wrt_input(const Model& model, const Tensor& batch, const std::vector<int>& labels);

// Prediction-only view of a model, as seen by a query-access adversary.
// Counts every example it is asked about.
class QueryModel {
public:
    explicit QueryModel(const Model& model) : model_(&model) {}
    QueryModel(const QueryModel& other) : model_(other.model_), queries_(other.queries_.load()) {}

    Tensor logits(const Tensor& batch) const;
    Tensor probabilities(const Tensor& batch) const;
    int label(const Tensor& x) const;

    std::size_t classes() const { return model_->classes; }
    const Shape& input_shape() const { return model_->input_shape; }
    std::size_t query_count() const { return queries_.load(); }

private:
    const Model* model_;
    mutable std::atomic<std::size_t> queries_{0};
};

// Adds a leading batch axis when x has exactly the model's input shape.
Tensor as_batch(const Model& model, const Tensor& x);

}  // namespace qadv
