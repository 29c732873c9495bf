#include "kernreg/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "kernreg/rng.hpp"

namespace kernreg {

Layer Layer::conv2d(std::int64_t out, std::int64_t in, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                    std::int64_t ph, std::int64_t pw) {
    Layer l;
    l.kind = Kind::conv;
    l.out = out;
    l.in = in;
    l.kh = kh;
    l.kw = kw;
    l.stride = stride;
    l.ph = ph;
    l.pw = pw;
    return l;
}

Layer Layer::linear(std::int64_t out, std::int64_t in) {
    Layer l;
    l.kind = Kind::linear;
    l.out = out;
    l.in = in;
    return l;
}

Layer Layer::relu_() {
    Layer l;
    l.kind = Kind::relu;
    return l;
}

Layer Layer::softplus_(double beta) {
    Layer l;
    l.kind = Kind::softplus;
    l.beta = beta;
    return l;
}

Layer Layer::avgpool2() {
    Layer l;
    l.kind = Kind::avgpool;
    return l;
}

Layer Layer::maxpool(std::int64_t kh, std::int64_t kw) {
    Layer l;
    l.kind = Kind::maxpool;
    l.pool_kh = kh;
    l.pool_kw = kw;
    return l;
}

Layer Layer::global_maxpool_() {
    Layer l;
    l.kind = Kind::global_maxpool;
    return l;
}

Layer Layer::flatten_() {
    Layer l;
    l.kind = Kind::flatten;
    return l;
}

namespace {

const char* layer_kind_name(Layer::Kind k) {
    switch (k) {
        case Layer::Kind::conv: return "conv2d";
        case Layer::Kind::linear: return "linear";
        case Layer::Kind::relu: return "relu";
        case Layer::Kind::softplus: return "softplus";
        case Layer::Kind::avgpool: return "avgpool2d";
        case Layer::Kind::maxpool: return "maxpool";
        case Layer::Kind::global_maxpool: return "global_maxpool";
        case Layer::Kind::flatten: return "flatten";
    }
    return "?";
}

[[noreturn]] void layer_error(int idx, const Layer& l, const Shape& in, const std::string& why) {
    std::ostringstream os;
    os << "layer " << idx << " (" << layer_kind_name(l.kind) << "): " << why << " (input shape " << shape_str(in)
       << ")";
    throw_shape(os.str());
}

// Shape of one layer's output given its input (shapes exclude the batch axis).
Shape layer_out_shape(int idx, const Layer& l, const Shape& in) {
    switch (l.kind) {
        case Layer::Kind::conv: {
            if (in.size() != 3) layer_error(idx, l, in, "expects (c,h,w) input");
            if (in[0] != l.in) layer_error(idx, l, in, "expects " + std::to_string(l.in) + " input channels");
            std::int64_t oh = (in[1] + 2 * l.ph - l.kh) / l.stride + 1;
            std::int64_t ow = (in[2] + 2 * l.pw - l.kw) / l.stride + 1;
            if (oh < 1 || ow < 1) layer_error(idx, l, in, "filter larger than padded input");
            return {l.out, oh, ow};
        }
        case Layer::Kind::linear: {
            if (in.size() != 1) layer_error(idx, l, in, "expects flattened input");
            if (in[0] != l.in) layer_error(idx, l, in, "expects input dimension " + std::to_string(l.in));
            return {l.out};
        }
        case Layer::Kind::relu:
        case Layer::Kind::softplus:
            return in;
        case Layer::Kind::avgpool: {
            if (in.size() != 3) layer_error(idx, l, in, "expects (c,h,w) input");
            if (in[1] < 2 || in[2] < 2) layer_error(idx, l, in, "spatial dims too small to pool");
            return {in[0], in[1] / 2, in[2] / 2};
        }
        case Layer::Kind::maxpool: {
            if (in.size() != 3) layer_error(idx, l, in, "expects (c,h,w) input");
            if (in[1] % l.pool_kh != 0 || in[2] % l.pool_kw != 0)
                layer_error(idx, l, in, "pool window must divide spatial dims");
            return {in[0], in[1] / l.pool_kh, in[2] / l.pool_kw};
        }
        case Layer::Kind::global_maxpool: {
            if (in.size() != 3) layer_error(idx, l, in, "expects (c,h,w) input");
            return {in[0]};
        }
        case Layer::Kind::flatten: {
            return {shape_numel(in)};
        }
    }
    layer_error(idx, l, in, "unknown layer kind");
}

}  // namespace

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
    check(!spec_.input_shape.empty(), Error::Kind::shape, "network: empty input shape");
    check(!spec_.layers.empty(), Error::Kind::shape, "network: no layers");
    Shape cur = spec_.input_shape;
    int widx = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const Layer& l = spec_.layers[i];
        Shape out = layer_out_shape(static_cast<int>(i), l, cur);
        if (l.kind == Layer::Kind::conv) {
            param_shapes_.push_back({l.out, l.in, l.kh, l.kw});
            param_names_.push_back("W" + std::to_string(++widx));
        } else if (l.kind == Layer::Kind::linear) {
            param_shapes_.push_back({l.out, l.in});
            param_names_.push_back("W" + std::to_string(++widx));
        }
        cur = std::move(out);
    }
    check(cur.size() == 1, Error::Kind::shape,
          "network: output must be a logit vector, got shape " + shape_str(cur) + " (missing flatten?)");
    n_outputs_ = cur[0];
    check(!param_names_.empty(), Error::Kind::shape, "network: no parameterized layers");
}

int Network::append_forward(Graph& g, int x_node, const std::vector<int>& param_nodes) const {
    check(param_nodes.size() == param_shapes_.size(), Error::Kind::shape,
          "append_forward: expected " + std::to_string(param_shapes_.size()) + " parameter nodes");
    std::int64_t batch = g.at(x_node).shape[0];
    int cur = x_node;
    std::size_t widx = 0;
    for (const Layer& l : spec_.layers) {
        switch (l.kind) {
            case Layer::Kind::conv:
                cur = g.conv2d(cur, param_nodes[widx++], l.stride, l.ph, l.pw);
                break;
            case Layer::Kind::linear:
                // x (n,d) * W^T (d,out)
                cur = g.matmul(cur, g.transpose(param_nodes[widx++]));
                break;
            case Layer::Kind::relu:
                cur = g.relu(cur);
                break;
            case Layer::Kind::softplus:
                cur = g.softplus(cur, l.beta);
                break;
            case Layer::Kind::avgpool:
                cur = g.avgpool2(cur);
                break;
            case Layer::Kind::maxpool:
                cur = g.maxpool2d(cur, l.pool_kh, l.pool_kw);
                break;
            case Layer::Kind::global_maxpool:
                cur = g.global_maxpool(cur);
                break;
            case Layer::Kind::flatten: {
                const Shape& s = g.at(cur).shape;
                std::int64_t flat = 1;
                for (std::size_t i = 1; i < s.size(); ++i) flat *= s[i];
                cur = g.reshape(cur, {batch, flat});
                break;
            }
        }
    }
    return cur;
}

Network::ForwardGraph Network::build_forward(std::int64_t batch) const {
    ForwardGraph fw;
    fw.batch = batch;
    Shape xs;
    xs.push_back(batch);
    for (auto d : spec_.input_shape) xs.push_back(d);
    fw.x = fw.g.input("x", xs);
    for (std::size_t i = 0; i < param_shapes_.size(); ++i)
        fw.params.push_back(fw.g.param(param_names_[i], param_shapes_[i]));
    fw.logits = append_forward(fw.g, fw.x, fw.params);
    return fw;
}

Bindings Network::bind(const ParamSet& params, const Tensor& batch) const {
    check(params.count() == param_shapes_.size(), Error::Kind::shape, "bind: parameter count mismatch");
    Bindings b;
    for (std::size_t i = 0; i < params.count(); ++i) {
        check(params.tensors[i].shape == param_shapes_[i], Error::Kind::shape,
              "bind: parameter " + param_names_[i] + " has shape " + shape_str(params.tensors[i].shape) +
                  ", expected " + shape_str(param_shapes_[i]));
        b[param_names_[i]] = params.tensors[i];
    }
    b["x"] = batch;
    return b;
}

int ParamSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

Tensor& ParamSet::by_name(const std::string& name) {
    int i = index_of(name);
    check(i >= 0, Error::Kind::shape, "no parameter named " + name);
    return tensors[static_cast<std::size_t>(i)];
}

const Tensor& ParamSet::by_name(const std::string& name) const {
    int i = index_of(name);
    check(i >= 0, Error::Kind::shape, "no parameter named " + name);
    return tensors[static_cast<std::size_t>(i)];
}

std::int64_t ParamSet::total_elements() const {
    std::int64_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

std::pair<Network, ParamSet> build_network(const NetworkSpec& spec, std::uint64_t seed) {
    Network net(spec);
    ParamSet params;
    Rng rng(seed);
    for (int i = 0; i < net.n_param_layers(); ++i) {
        const Shape& s = net.param_shapes()[static_cast<std::size_t>(i)];
        std::int64_t fan_in = 1;
        for (std::size_t d = 1; d < s.size(); ++d) fan_in *= s[d];
        double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
        Rng sub = rng.split(static_cast<std::uint64_t>(i));
        Tensor w(s);
        for (auto& v : w.data) v = sub.uniform(-bound, bound);
        params.names.push_back(net.param_names()[static_cast<std::size_t>(i)]);
        params.tensors.push_back(std::move(w));
    }
    return {std::move(net), std::move(params)};
}

Tensor predict(const Network& net, const ParamSet& params, const Tensor& batch) {
    check(batch.rank() >= 2, Error::Kind::shape, "predict: batch must have a leading example axis");
    auto fw = net.build_forward(batch.shape[0]);
    return fw.g.eval(fw.logits, net.bind(params, batch));
}

std::vector<std::int64_t> predicted_labels(const Network& net, const Tensor& logits, bool binary_labels) {
    std::int64_t n = logits.shape[0], k = logits.shape[1];
    std::vector<std::int64_t> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        if (net.n_outputs() == 1 && binary_labels) {
            out[static_cast<std::size_t>(i)] = logits.data[static_cast<std::size_t>(i)] > 0 ? 1 : -1;
        } else {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < k; ++j)
                if (logits.data[i * k + j] > logits.data[i * k + best]) best = j;
            out[static_cast<std::size_t>(i)] = best;
        }
    }
    return out;
}

double accuracy(const Network& net, const ParamSet& params, const Tensor& inputs,
                const std::vector<std::int64_t>& labels) {
    if (labels.empty()) return 0.0;
    Tensor logits = predict(net, params, inputs);
    bool binary = net.n_outputs() == 1;
    auto pred = predicted_labels(net, logits, binary);
    std::int64_t good = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (pred[i] == labels[i]) ++good;
    return static_cast<double>(good) / static_cast<double>(labels.size());
}

namespace {

void check_labels(LossKind kind, const Tensor& logits, const std::vector<std::int64_t>& labels) {
    check(static_cast<std::int64_t>(labels.size()) == logits.shape[0], Error::Kind::data,
          "loss: batch has " + std::to_string(logits.shape[0]) + " rows but " + std::to_string(labels.size()) +
              " labels");
    if (kind == LossKind::cross_entropy) {
        for (auto y : labels)
            check(y >= 0 && y < logits.shape[1], Error::Kind::data,
                  "cross-entropy: label " + std::to_string(y) + " outside [0," + std::to_string(logits.shape[1]) + ")");
    } else {
        check(logits.shape[1] == 1, Error::Kind::data, "binary loss needs a single output column");
        for (auto y : labels)
            check(y == 1 || y == -1, Error::Kind::data, "binary loss: labels must be +1/-1, got " + std::to_string(y));
    }
}

}  // namespace

int append_loss_sum(Graph& g, LossKind kind, int logits, const std::vector<std::int64_t>& labels) {
    const Shape& s = g.at(logits).shape;
    std::int64_t n = s[0], k = s[1];
    check(static_cast<std::int64_t>(labels.size()) == n, Error::Kind::data, "loss: label count mismatch");
    if (kind == LossKind::cross_entropy) {
        Tensor onehot({n, k});
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t y = labels[static_cast<std::size_t>(i)];
            check(y >= 0 && y < k, Error::Kind::data, "cross-entropy: bad label " + std::to_string(y));
            onehot.data[i * k + y] = 1.0;
        }
        int lse = g.logsumexp_rows(logits);                                  // (n,1)
        int picked = g.sum_axis(g.mul(logits, g.constant(onehot)), 1);       // (n,1)
        return g.sum_all(g.sub(lse, picked));
    }
    Tensor ys({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        check(y == 1 || y == -1, Error::Kind::data, "binary loss: labels must be +1/-1");
        ys.data[static_cast<std::size_t>(i)] = static_cast<double>(y);
    }
    check(k == 1, Error::Kind::data, "binary loss needs a single output column");
    int margin = g.mul(logits, g.constant(ys));  // (n,1) y*f
    if (kind == LossKind::hinge) return g.sum_all(g.relu(g.add_const(g.scale(margin, -1.0), 1.0)));
    return g.sum_all(g.softplus(g.neg(margin), 1.0));  // logistic: log(1+exp(-yf))
}

int append_loss(Graph& g, LossKind kind, int logits, const std::vector<std::int64_t>& labels) {
    int total = append_loss_sum(g, kind, logits, labels);
    return g.scale(total, 1.0 / static_cast<double>(labels.size()));
}

std::vector<double> loss_per_example(LossKind kind, const Tensor& logits, const std::vector<std::int64_t>& labels) {
    check_labels(kind, logits, labels);
    std::int64_t n = logits.shape[0], k = logits.shape[1];
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = logits.ptr() + i * k;
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (kind == LossKind::cross_entropy) {
            double m = row[0];
            for (std::int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
            double se = 0;
            for (std::int64_t j = 0; j < k; ++j) se += std::exp(row[j] - m);
            out[static_cast<std::size_t>(i)] = m + std::log(se) - row[y];
        } else {
            double yf = static_cast<double>(y) * row[0];
            if (kind == LossKind::hinge)
                out[static_cast<std::size_t>(i)] = std::max(0.0, 1.0 - yf);
            else {
                double z = -yf;
                out[static_cast<std::size_t>(i)] = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            }
        }
    }
    return out;
}

double loss_value(LossKind kind, const Tensor& logits, const std::vector<std::int64_t>& labels) {
    auto per = loss_per_example(kind, logits, labels);
    double s = 0;
    for (double v : per) s += v;
    return s / static_cast<double>(per.size());
}

int append_input_gradient(Network::ForwardGraph& fw, std::int64_t k) {
    int fk = fw.g.col(fw.logits, k);
    int s = fw.g.sum_all(fk);
    int gnode = fw.g.grad_node(s, fw.x);
    check(gnode >= 0, Error::Kind::internal, "input gradient is structurally zero");
    return gnode;
}

Tensor input_gradient(const Network& net, const ParamSet& params, const Tensor& x, std::int64_t k) {
    check(k >= 0 && k < net.n_outputs(), Error::Kind::shape,
          "input_gradient: class " + std::to_string(k) + " out of range");
    bool single = x.rank() == static_cast<int>(net.input_shape().size());
    Tensor batch = x;
    if (single) {
        Shape s;
        s.push_back(1);
        for (auto d : x.shape) s.push_back(d);
        batch = x.reshaped(s);
    }
    auto fw = net.build_forward(batch.shape[0]);
    int gnode = append_input_gradient(fw, k);
    Tensor g = fw.g.eval(gnode, net.bind(params, batch));
    return single ? g.reshaped(x.shape) : g;
}

std::vector<Tensor> param_gradients(Network::ForwardGraph& fw, int scalar_node, const Bindings& b) {
    return eval_gradients(fw.g, scalar_node, fw.params, b);
}

std::string loss_name(LossKind k) {
    switch (k) {
        case LossKind::cross_entropy: return "cross-entropy";
        case LossKind::hinge: return "hinge";
        case LossKind::logistic: return "logistic";
    }
    return "?";
}

LossKind loss_from_name(const std::string& s) {
    if (s == "cross-entropy") return LossKind::cross_entropy;
    if (s == "hinge") return LossKind::hinge;
    if (s == "logistic") return LossKind::logistic;
    throw_config("unknown loss kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// spec serialization

namespace {
using nlohmann::json;

json layer_to_json(const Layer& l) {
    json j;
    j["kind"] = layer_kind_name(l.kind);
    switch (l.kind) {
        case Layer::Kind::conv:
            j["out"] = l.out;
            j["in"] = l.in;
            j["kh"] = l.kh;
            j["kw"] = l.kw;
            j["stride"] = l.stride;
            j["ph"] = l.ph;
            j["pw"] = l.pw;
            break;
        case Layer::Kind::linear:
            j["out"] = l.out;
            j["in"] = l.in;
            break;
        case Layer::Kind::softplus:
            j["beta"] = l.beta;
            break;
        case Layer::Kind::maxpool:
            j["kh"] = l.pool_kh;
            j["kw"] = l.pool_kw;
            break;
        default:
            break;
    }
    return j;
}

Layer layer_from_json(const json& j) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv2d")
        return Layer::conv2d(j.at("out").get<std::int64_t>(), j.at("in").get<std::int64_t>(),
                             j.at("kh").get<std::int64_t>(), j.at("kw").get<std::int64_t>(),
                             j.at("stride").get<std::int64_t>(), j.at("ph").get<std::int64_t>(),
                             j.at("pw").get<std::int64_t>());
    if (kind == "linear") return Layer::linear(j.at("out").get<std::int64_t>(), j.at("in").get<std::int64_t>());
    if (kind == "relu") return Layer::relu_();
    if (kind == "softplus") return Layer::softplus_(j.at("beta").get<double>());
    if (kind == "avgpool2d") return Layer::avgpool2();
    if (kind == "maxpool") return Layer::maxpool(j.at("kh").get<std::int64_t>(), j.at("kw").get<std::int64_t>());
    if (kind == "global_maxpool") return Layer::global_maxpool_();
    if (kind == "flatten") return Layer::flatten_();
    throw_data("unknown layer kind '" + kind + "' in network description");
}

}  // namespace

std::string spec_to_string(const NetworkSpec& spec) {
    json j;
    j["input_shape"] = spec.input_shape;
    json ls = json::array();
    for (const Layer& l : spec.layers) ls.push_back(layer_to_json(l));
    j["layers"] = ls;
    return j.dump();
}

NetworkSpec spec_from_string(const std::string& text) {
    json j = json::parse(text, nullptr, true);
    NetworkSpec spec;
    spec.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
    return spec;
}

// ---------------------------------------------------------------------------
// presets

NetworkSpec preset_mnist_vgg(std::int64_t hw, std::int64_t channels, std::int64_t classes, bool softplus,
                             double beta) {
    NetworkSpec s;
    s.input_shape = {1, hw, hw};
    auto act = [&] { return softplus ? Layer::softplus_(beta) : Layer::relu_(); };
    std::int64_t c = channels;
    s.layers = {Layer::conv2d(c, 1, 3, 3, 1, 1, 1),         act(), Layer::avgpool2(),
                Layer::conv2d(2 * c, c, 3, 3, 1, 1, 1),     act(), Layer::avgpool2(),
                Layer::conv2d(4 * c, 2 * c, 3, 3, 1, 1, 1), act(), Layer::avgpool2(),
                Layer::conv2d(4 * c, 4 * c, 3, 3, 1, 1, 1), act(), Layer::global_maxpool_(),
                Layer::linear(classes, 4 * c)};
    return s;
}

NetworkSpec preset_conv_small(std::int64_t hw, std::int64_t channels, std::int64_t classes, bool softplus,
                              double beta) {
    NetworkSpec s;
    s.input_shape = {1, hw, hw};
    auto act = [&] { return softplus ? Layer::softplus_(beta) : Layer::relu_(); };
    std::int64_t c = channels;
    s.layers = {Layer::conv2d(c, 1, 3, 3, 1, 1, 1),     act(), Layer::avgpool2(),
                Layer::conv2d(2 * c, c, 3, 3, 1, 1, 1), act(), Layer::avgpool2(),
                Layer::conv2d(4 * c, 2 * c, 3, 3, 1, 1, 1), act(), Layer::global_maxpool_(),
                Layer::linear(classes, 4 * c)};
    return s;
}

NetworkSpec preset_seq_conv(std::int64_t alphabet, std::int64_t length, std::int64_t channels,
                            std::int64_t classes) {
    // One-hot sequences as (alphabet, 1, length) images; width-5 filters,
    // width-2 max-pooling after the second conv, then global max-pooling.
    NetworkSpec s;
    s.input_shape = {alphabet, 1, length};
    std::int64_t c = channels;
    s.layers = {Layer::conv2d(c, alphabet, 1, 5, 1, 0, 2), Layer::relu_(),
                Layer::conv2d(c, c, 1, 5, 1, 0, 2),        Layer::relu_(), Layer::maxpool(1, 2),
                Layer::conv2d(c, c, 1, 5, 1, 0, 2),        Layer::relu_(), Layer::global_maxpool_(),
                Layer::linear(classes, c)};
    return s;
}

NetworkSpec preset_linear(std::int64_t in_dim, std::int64_t classes) {
    NetworkSpec s;
    s.input_shape = {in_dim};
    s.layers = {Layer::linear(classes, in_dim)};
    return s;
}

NetworkSpec preset_mlp(std::int64_t in_dim, const std::vector<std::int64_t>& hidden, std::int64_t classes,
                       bool softplus, double beta) {
    NetworkSpec s;
    s.input_shape = {in_dim};
    std::int64_t cur = in_dim;
    for (auto h : hidden) {
        s.layers.push_back(Layer::linear(h, cur));
        s.layers.push_back(softplus ? Layer::softplus_(beta) : Layer::relu_());
        cur = h;
    }
    s.layers.push_back(Layer::linear(classes, cur));
    return s;
}

}  // namespace kernreg
