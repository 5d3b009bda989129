#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "pqnet/data.hpp"
#include "pqnet/reshape.hpp"
#include "pqnet/tensor.hpp"

namespace pqnet {

/// y = x·W + b with W stored [c_in×c_out].
struct Linear {
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    bool has_bias = true;
    Tensor weight;
    Tensor bias;
};

/// W stored [C_out×C_in/groups×K×K].
struct Conv2d {
    ConvShape shape;
    bool has_bias = false;
    Tensor weight;
    Tensor bias;
};

/// gamma and beta are never trained; running statistics move only in
/// BnTrain mode.
struct BatchNorm2d {
    std::size_t channels = 0;
    float eps = 1e-5f;
    float momentum = 0.1f;
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
};

struct ReLU {};
struct GlobalAvgPool {};
struct Flatten {};

using Layer = std::variant<Linear, Conv2d, BatchNorm2d, ReLU, GlobalAvgPool, Flatten>;

struct LayerNode {
    std::string id;
    Layer layer;
};

/// Plain: main only. Residual: main(x) + shortcut(x), where an empty
/// shortcut is the identity.
struct Block {
    enum class Kind { Plain, Residual };
    Kind kind = Kind::Plain;
    std::vector<LayerNode> main;
    std::vector<LayerNode> shortcut;
};

enum class Mode { Eval, BnTrain };

class Network {
public:
    Shape input_shape;  // per sample, without the batch axis
    std::vector<Block> blocks;
    LayerNode classifier{"classifier", Linear{}};
    Mode mode = Mode::Eval;

    LayerNode* find(const std::string& id);
    const LayerNode* find(const std::string& id) const;
    LayerNode& at(const std::string& id);
    const LayerNode& at(const std::string& id) const;

    /// Conv2d and Linear layers in forward order, classifier last.
    std::vector<std::string> quantizable_ids() const;
    std::vector<std::string> layer_ids() const;

    /// Every tensor keyed "<layer id>.<name>" (weight, bias, gamma, beta,
    /// running_mean, running_var).
    std::map<std::string, Tensor*> tensors();
    std::map<std::string, const Tensor*> tensors() const;

    std::size_t num_classes() const;
    std::size_t parameter_count() const;

    /// Propagates the input shape through every layer; throws ShapeError
    /// naming the first incompatible layer.
    void validate() const;

    /// Kaiming-normal weights, zero biases, identity BatchNorm.
    void init_parameters(Rng& rng);

    template <typename F>
    void for_each_node(F&& f) {
        for (auto& b : blocks) {
            for (auto& n : b.main) f(n);
            for (auto& n : b.shortcut) f(n);
        }
        f(classifier);
    }
    template <typename F>
    void for_each_node(F&& f) const {
        for (const auto& b : blocks) {
            for (const auto& n : b.main) f(n);
            for (const auto& n : b.shortcut) f(n);
        }
        f(classifier);
    }
};

/// Input activation of each quantizable layer from one forward pass.
using ActivationTrace = std::map<std::string, Tensor>;

struct LayerCache {
    Tensor input;
    Tensor unfolded;  // conv im2col matrix
    Tensor xhat;      // batchnorm normalized input
    std::vector<float> inv_std;
    bool batch_stats = false;
};

/// Intermediate values needed by backward().
struct Tape {
    std::unordered_map<std::string, LayerCache> layers;
};

/// Forward pass. In BnTrain mode BatchNorm normalizes with batch statistics
/// and updates the running statistics.
Tensor forward(Network& net, const Tensor& x, Tape* tape = nullptr,
               ActivationTrace* trace = nullptr);

/// Forward pass with running BatchNorm statistics, whatever the mode.
Tensor predict(const Network& net, const Tensor& x, ActivationTrace* trace = nullptr);

struct Gradients {
    std::map<std::string, Tensor> params;  // "<id>.weight", "<id>.bias"
    Tensor input;
};

/// Analytic gradients of a scalar loss given ∂L/∂logits. BatchNorm affine
/// coefficients get no gradient but pass it through to their inputs.
Gradients backward(const Network& net, const Tape& tape, const Tensor& grad_logits);

Tensor softmax(const Tensor& logits);

/// Mean over rows of KL(teacher ‖ student); student probabilities are
/// clamped at 1e-12.
double kl_loss(const Tensor& student_probs, const Tensor& teacher_probs);

/// ∂/∂logits of kl_loss(softmax(logits), teacher): (softmax − teacher)/B.
Tensor kl_loss_grad(const Tensor& logits, const Tensor& teacher_probs);

double cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor cross_entropy_grad(const Tensor& logits, std::span<const int> labels);

struct LossAndGradients {
    double loss = 0.0;
    Gradients grads;
};

/// Distillation loss and its gradients for one batch.
LossAndGradients backward(Network& net, const Tensor& x, const Tensor& teacher_probs);

struct SgdConfig {
    double lr = 0.01;
    double weight_decay = 1e-4;
    double momentum = 0.9;
};

/// v ← μ·v + g + λ·p ;  p ← p − η·v
template <typename T>
void sgd_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity,
              const SgdConfig& cfg);

/// Momentum buffers keyed by parameter name.
struct SgdState {
    std::map<std::string, Tensor> velocity;
};

/// Applies sgd_step to every weight and bias present in `grads`.
void sgd_step(Network& net, const Gradients& grads, const SgdConfig& cfg, SgdState& state);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    SgdConfig sgd{0.05, 1e-4, 0.9};
};

/// Cross-entropy training from the current parameters.
Network train_toy_teacher(Network net, const Dataset& data, const TrainConfig& cfg, Rng& rng);

/// Top-1 accuracy with running BatchNorm statistics; ties go to the lowest
/// class index.
double evaluate(const Network& net, const Dataset& data, std::size_t batch_size = 256);

std::size_t argmax_row(const Tensor& logits, std::size_t row);

}  // namespace pqnet
