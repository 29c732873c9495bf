#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kernreg/graph.hpp"
#include "kernreg/tensor.hpp"

namespace kernreg {

// Architecture vocabulary. Conv and linear layers carry no bias terms.
struct Layer {
    enum class Kind { conv, linear, relu, softplus, avgpool, maxpool, global_maxpool, flatten };
    Kind kind;

    // conv
    std::int64_t out = 0, in = 0, kh = 0, kw = 0, stride = 1, ph = 0, pw = 0;
    // softplus sharpness
    double beta = 10.0;
    // maxpool window
    std::int64_t pool_kh = 2, pool_kw = 2;

    static Layer conv2d(std::int64_t out, std::int64_t in, std::int64_t kh, std::int64_t kw,
                        std::int64_t stride = 1, std::int64_t ph = 0, std::int64_t pw = 0);
    static Layer linear(std::int64_t out, std::int64_t in);
    static Layer relu_();
    static Layer softplus_(double beta = 10.0);
    static Layer avgpool2();
    static Layer maxpool(std::int64_t kh, std::int64_t kw);
    static Layer global_maxpool_();
    static Layer flatten_();
};

struct NetworkSpec {
    Shape input_shape;  // per example, e.g. {1,28,28} or {d}
    std::vector<Layer> layers;
};

std::string spec_to_string(const NetworkSpec& spec);
NetworkSpec spec_from_string(const std::string& text);

// Named parameter tensors W1..WL in layer order.
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    std::size_t count() const { return tensors.size(); }
    int index_of(const std::string& name) const;
    Tensor& by_name(const std::string& name);
    const Tensor& by_name(const std::string& name) const;
    std::int64_t total_elements() const;
};

enum class LossKind { cross_entropy, hinge, logistic };

std::string loss_name(LossKind k);
LossKind loss_from_name(const std::string& s);

// Validated architecture with precomputed per-layer shapes.
class Network {
public:
    explicit Network(NetworkSpec spec);

    const NetworkSpec& spec() const { return spec_; }
    const Shape& input_shape() const { return spec_.input_shape; }
    std::int64_t n_outputs() const { return n_outputs_; }
    int n_param_layers() const { return static_cast<int>(param_shapes_.size()); }
    const std::vector<Shape>& param_shapes() const { return param_shapes_; }
    const std::vector<std::string>& param_names() const { return param_names_; }

    // Forward computation recorded into a graph for a fixed batch size.
    struct ForwardGraph {
        Graph g;
        int x = -1;
        std::vector<int> params;
        int logits = -1;
        std::int64_t batch = 0;
    };
    ForwardGraph build_forward(std::int64_t batch) const;
    // Appends the forward pass to an existing graph with caller-supplied
    // input/parameter nodes; returns the logits node.
    int append_forward(Graph& g, int x_node, const std::vector<int>& param_nodes) const;

    Bindings bind(const ParamSet& params, const Tensor& batch) const;

private:
    NetworkSpec spec_;
    std::vector<Shape> param_shapes_;
    std::vector<std::string> param_names_;
    std::int64_t n_outputs_ = 0;
};

std::pair<Network, ParamSet> build_network(const NetworkSpec& spec, std::uint64_t seed);

Tensor predict(const Network& net, const ParamSet& params, const Tensor& batch);
std::vector<std::int64_t> predicted_labels(const Network& net, const Tensor& logits, bool binary_labels);
double accuracy(const Network& net, const ParamSet& params, const Tensor& inputs,
                const std::vector<std::int64_t>& labels);

// Mean loss over a batch of logits. Binary kinds expect one output column and
// labels in {-1, +1}; cross-entropy expects class indices in [0, K).
double loss_value(LossKind kind, const Tensor& logits, const std::vector<std::int64_t>& labels);
std::vector<double> loss_per_example(LossKind kind, const Tensor& logits, const std::vector<std::int64_t>& labels);
// Appends the mean-loss node for constant labels to a graph holding logits.
int append_loss(Graph& g, LossKind kind, int logits, const std::vector<std::int64_t>& labels);
// Sum of per-example losses (batched gradients stay per-example).
int append_loss_sum(Graph& g, LossKind kind, int logits, const std::vector<std::int64_t>& labels);

// Appends nodes computing d(sum_i f_k(x_i))/dx to a forward graph; the rows of
// the result are the per-example input gradients of class k.
int append_input_gradient(Network::ForwardGraph& fw, std::int64_t k);

Tensor input_gradient(const Network& net, const ParamSet& params, const Tensor& x, std::int64_t k);

// Parameter gradients of a scalar node, in parameter order, with zeros where
// the root does not depend on a parameter.
std::vector<Tensor> param_gradients(Network::ForwardGraph& fw, int scalar_node, const Bindings& b);

// presets
NetworkSpec preset_mnist_vgg(std::int64_t hw = 28, std::int64_t channels = 8, std::int64_t classes = 10,
                             bool softplus = false, double beta = 10.0);
NetworkSpec preset_conv_small(std::int64_t hw = 16, std::int64_t channels = 4, std::int64_t classes = 10,
                              bool softplus = false, double beta = 10.0);
NetworkSpec preset_seq_conv(std::int64_t alphabet = 20, std::int64_t length = 64, std::int64_t channels = 16,
                            std::int64_t classes = 1);
NetworkSpec preset_linear(std::int64_t in_dim, std::int64_t classes = 1);
NetworkSpec preset_mlp(std::int64_t in_dim, const std::vector<std::int64_t>& hidden, std::int64_t classes,
                       bool softplus = false, double beta = 10.0);

}  // namespace kernreg
