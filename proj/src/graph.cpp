#include "kernreg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "kernreg/parallel.hpp"

namespace kernreg {

const char* op_name(Op op) {
    switch (op) {
        case Op::kParam: return "param";
        case Op::kInput: return "input";
        case Op::kConst: return "const";
        case Op::kAdd: return "add";
        case Op::kSub: return "sub";
        case Op::kMul: return "mul";
        case Op::kScale: return "scale";
        case Op::kAddC: return "add_const";
        case Op::kMatMul: return "matmul";
        case Op::kTranspose: return "transpose";
        case Op::kConv2d: return "conv2d";
        case Op::kConv2dInputGrad: return "conv2d_input_grad";
        case Op::kConv2dWeightGrad: return "conv2d_weight_grad";
        case Op::kAvgPool2: return "avgpool2d";
        case Op::kAvgPool2Grad: return "avgpool2d_grad";
        case Op::kRelu: return "relu";
        case Op::kStep: return "step";
        case Op::kSoftplus: return "softplus";
        case Op::kSigmoid: return "sigmoid";
        case Op::kSquare: return "square";
        case Op::kSqrt: return "sqrt";
        case Op::kRecip: return "recip";
        case Op::kExp: return "exp";
        case Op::kLog: return "log";
        case Op::kReshape: return "reshape";
        case Op::kSumAll: return "sum";
        case Op::kBroadcast: return "broadcast";
        case Op::kSumAxis: return "sum_axis";
        case Op::kMaxAxis: return "max_axis";
        case Op::kScatterMaxAxis: return "scatter_max_axis";
        case Op::kGatherMaxAxis: return "gather_max_axis";
        case Op::kExpand: return "expand";
        case Op::kCol: return "col";
        case Op::kColScatter: return "col_scatter";
    }
    return "?";
}

namespace {

std::string node_desc(int idx, Op op) {
    std::ostringstream os;
    os << "node " << idx << " (" << op_name(op) << ")";
    return os.str();
}

void axis_extents(const Shape& s, int axis, std::int64_t& outer, std::int64_t& axn, std::int64_t& inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    axn = s[static_cast<std::size_t>(axis)];
    inner = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

double softplus_val(double x, double beta) {
    double z = beta * x;
    if (z > 0) return x + std::log1p(std::exp(-z)) / beta;
    return std::log1p(std::exp(z)) / beta;
}

double sigmoid_val(double x, double beta) {
    double z = beta * x;
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::check_valid(int i, const char* who) const {
    check(i >= 0 && i < n_nodes(), Error::Kind::shape,
          std::string(who) + ": parent index " + std::to_string(i) + " out of range");
}

int Graph::param(std::string name, Shape s) {
    shape_numel(s);
    Node nd;
    nd.op = Op::kParam;
    nd.shape = std::move(s);
    nd.name = std::move(name);
    return push(std::move(nd));
}

int Graph::input(std::string name, Shape s) {
    shape_numel(s);
    Node nd;
    nd.op = Op::kInput;
    nd.shape = std::move(s);
    nd.name = std::move(name);
    return push(std::move(nd));
}

int Graph::constant(Tensor t) {
    Node nd;
    nd.op = Op::kConst;
    nd.shape = t.shape;
    nd.value = std::move(t);
    return push(std::move(nd));
}

static void require_same_shape(const Graph& g, int a, int b, int next_idx, Op op) {
    check(g.at(a).shape == g.at(b).shape, Error::Kind::shape,
          node_desc(next_idx, op) + ": operand shapes " + shape_str(g.at(a).shape) + " and " +
              shape_str(g.at(b).shape) + " differ");
}

int Graph::add(int a, int b) {
    check_valid(a, "add");
    check_valid(b, "add");
    require_same_shape(*this, a, b, n_nodes(), Op::kAdd);
    Node nd;
    nd.op = Op::kAdd;
    nd.a = a;
    nd.b = b;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::sub(int a, int b) {
    check_valid(a, "sub");
    check_valid(b, "sub");
    require_same_shape(*this, a, b, n_nodes(), Op::kSub);
    Node nd;
    nd.op = Op::kSub;
    nd.a = a;
    nd.b = b;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::mul(int a, int b) {
    check_valid(a, "mul");
    check_valid(b, "mul");
    require_same_shape(*this, a, b, n_nodes(), Op::kMul);
    Node nd;
    nd.op = Op::kMul;
    nd.a = a;
    nd.b = b;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::scale(int a, double c) {
    check_valid(a, "scale");
    Node nd;
    nd.op = Op::kScale;
    nd.a = a;
    nd.c = c;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::add_const(int a, double c) {
    check_valid(a, "add_const");
    Node nd;
    nd.op = Op::kAddC;
    nd.a = a;
    nd.c = c;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::matmul(int a, int b) {
    check_valid(a, "matmul");
    check_valid(b, "matmul");
    const Shape& sa = n(a).shape;
    const Shape& sb = n(b).shape;
    check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], Error::Kind::shape,
          node_desc(n_nodes(), Op::kMatMul) + ": incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    Node nd;
    nd.op = Op::kMatMul;
    nd.a = a;
    nd.b = b;
    nd.shape = {sa[0], sb[1]};
    return push(std::move(nd));
}

int Graph::transpose(int a) {
    check_valid(a, "transpose");
    const Shape& s = n(a).shape;
    check(s.size() == 2, Error::Kind::shape, node_desc(n_nodes(), Op::kTranspose) + ": needs a matrix, got " + shape_str(s));
    Node nd;
    nd.op = Op::kTranspose;
    nd.a = a;
    nd.shape = {s[1], s[0]};
    return push(std::move(nd));
}

int Graph::conv2d(int x, int w, std::int64_t stride, std::int64_t ph, std::int64_t pw) {
    check_valid(x, "conv2d");
    check_valid(w, "conv2d");
    const Shape& sx = n(x).shape;
    const Shape& sw = n(w).shape;
    check(sx.size() == 4 && sw.size() == 4, Error::Kind::shape,
          node_desc(n_nodes(), Op::kConv2d) + ": needs 4-d input and filter, got " + shape_str(sx) + " and " + shape_str(sw));
    check(sx[1] == sw[1], Error::Kind::shape,
          node_desc(n_nodes(), Op::kConv2d) + ": channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
    check(stride >= 1 && ph >= 0 && pw >= 0, Error::Kind::shape, "conv2d: bad stride/padding");
    std::int64_t oh = (sx[2] + 2 * ph - sw[2]) / stride + 1;
    std::int64_t ow = (sx[3] + 2 * pw - sw[3]) / stride + 1;
    check(oh >= 1 && ow >= 1, Error::Kind::shape,
          node_desc(n_nodes(), Op::kConv2d) + ": filter " + shape_str(sw) + " larger than padded input " + shape_str(sx));
    Node nd;
    nd.op = Op::kConv2d;
    nd.a = x;
    nd.b = w;
    nd.shape = {sx[0], sw[0], oh, ow};
    nd.attr = {stride, ph, pw};
    return push(std::move(nd));
}

int Graph::conv2d_igrad(int g, int w, std::int64_t stride, std::int64_t ph, std::int64_t pw,
                        std::int64_t in_h, std::int64_t in_w) {
    const Shape& sg = n(g).shape;
    const Shape& sw = n(w).shape;
    Node nd;
    nd.op = Op::kConv2dInputGrad;
    nd.a = g;
    nd.b = w;
    nd.shape = {sg[0], sw[1], in_h, in_w};
    nd.attr = {stride, ph, pw};
    return push(std::move(nd));
}

int Graph::conv2d_wgrad(int g, int x, std::int64_t stride, std::int64_t ph, std::int64_t pw,
                        std::int64_t kh, std::int64_t kw) {
    const Shape& sg = n(g).shape;
    const Shape& sx = n(x).shape;
    Node nd;
    nd.op = Op::kConv2dWeightGrad;
    nd.a = g;
    nd.b = x;
    nd.shape = {sg[1], sx[1], kh, kw};
    nd.attr = {stride, ph, pw};
    return push(std::move(nd));
}

int Graph::avgpool2(int x) {
    check_valid(x, "avgpool2d");
    const Shape& s = n(x).shape;
    check(s.size() == 4 && s[2] >= 2 && s[3] >= 2, Error::Kind::shape,
          node_desc(n_nodes(), Op::kAvgPool2) + ": needs (n,c,h,w) with h,w >= 2, got " + shape_str(s));
    Node nd;
    nd.op = Op::kAvgPool2;
    nd.a = x;
    nd.shape = {s[0], s[1], s[2] / 2, s[3] / 2};
    return push(std::move(nd));
}

int Graph::avgpool2_grad(int g, std::int64_t in_h, std::int64_t in_w) {
    const Shape& s = n(g).shape;
    Node nd;
    nd.op = Op::kAvgPool2Grad;
    nd.a = g;
    nd.shape = {s[0], s[1], in_h, in_w};
    return push(std::move(nd));
}

int Graph::relu(int a) {
    check_valid(a, "relu");
    Node nd;
    nd.op = Op::kRelu;
    nd.a = a;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::step_mask(int a) {
    check_valid(a, "step");
    Node nd;
    nd.op = Op::kStep;
    nd.a = a;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::softplus(int a, double beta) {
    check_valid(a, "softplus");
    check(beta > 0, Error::Kind::shape, "softplus: beta must be positive");
    Node nd;
    nd.op = Op::kSoftplus;
    nd.a = a;
    nd.c = beta;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

int Graph::sigmoid(int a, double beta) {
    check_valid(a, "sigmoid");
    check(beta > 0, Error::Kind::shape, "sigmoid: beta must be positive");
    Node nd;
    nd.op = Op::kSigmoid;
    nd.a = a;
    nd.c = beta;
    nd.shape = n(a).shape;
    return push(std::move(nd));
}

#define KERNREG_SIMPLE_UNARY(fn, opk)          \
    int Graph::fn(int a) {                     \
        check_valid(a, #fn);                   \
        Node nd;                               \
        nd.op = opk;                           \
        nd.a = a;                              \
        nd.shape = n(a).shape;                 \
        return push(std::move(nd));            \
    }

KERNREG_SIMPLE_UNARY(square, Op::kSquare)
KERNREG_SIMPLE_UNARY(sqrt_node, Op::kSqrt)
KERNREG_SIMPLE_UNARY(recip, Op::kRecip)
KERNREG_SIMPLE_UNARY(exp_node, Op::kExp)
KERNREG_SIMPLE_UNARY(log_node, Op::kLog)
#undef KERNREG_SIMPLE_UNARY

int Graph::reshape(int a, Shape s) {
    check_valid(a, "reshape");
    check(shape_numel(s) == shape_numel(n(a).shape), Error::Kind::shape,
          node_desc(n_nodes(), Op::kReshape) + ": cannot reshape " + shape_str(n(a).shape) + " to " + shape_str(s));
    Node nd;
    nd.op = Op::kReshape;
    nd.a = a;
    nd.shape = std::move(s);
    return push(std::move(nd));
}

int Graph::sum_all(int a) {
    check_valid(a, "sum");
    Node nd;
    nd.op = Op::kSumAll;
    nd.a = a;
    nd.shape = {1};
    return push(std::move(nd));
}

int Graph::broadcast(int a, Shape s) {
    check_valid(a, "broadcast");
    check(shape_numel(n(a).shape) == 1, Error::Kind::shape,
          node_desc(n_nodes(), Op::kBroadcast) + ": source must be scalar, got " + shape_str(n(a).shape));
    Node nd;
    nd.op = Op::kBroadcast;
    nd.a = a;
    nd.shape = std::move(s);
    return push(std::move(nd));
}

static void check_axis(const Graph& g, int a, int axis, Op op, int idx) {
    check(axis >= 0 && axis < static_cast<int>(g.at(a).shape.size()), Error::Kind::shape,
          node_desc(idx, op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(g.at(a).shape));
}

int Graph::sum_axis(int a, int axis) {
    check_valid(a, "sum_axis");
    check_axis(*this, a, axis, Op::kSumAxis, n_nodes());
    Node nd;
    nd.op = Op::kSumAxis;
    nd.a = a;
    nd.attr = {axis};
    nd.shape = n(a).shape;
    nd.shape[static_cast<std::size_t>(axis)] = 1;
    return push(std::move(nd));
}

int Graph::max_axis(int a, int axis) {
    check_valid(a, "max_axis");
    check_axis(*this, a, axis, Op::kMaxAxis, n_nodes());
    Node nd;
    nd.op = Op::kMaxAxis;
    nd.a = a;
    nd.attr = {axis};
    nd.shape = n(a).shape;
    nd.shape[static_cast<std::size_t>(axis)] = 1;
    return push(std::move(nd));
}

int Graph::scatter_max_axis(int g, int x, int axis) {
    Node nd;
    nd.op = Op::kScatterMaxAxis;
    nd.a = g;
    nd.b = x;
    nd.attr = {axis};
    nd.shape = n(x).shape;
    return push(std::move(nd));
}

int Graph::gather_max_axis(int h, int x, int axis) {
    Node nd;
    nd.op = Op::kGatherMaxAxis;
    nd.a = h;
    nd.b = x;
    nd.attr = {axis};
    nd.shape = n(x).shape;
    nd.shape[static_cast<std::size_t>(static_cast<int>(nd.attr[0]))] = 1;
    return push(std::move(nd));
}

int Graph::expand(int a, int axis, std::int64_t m) {
    check_valid(a, "expand");
    check_axis(*this, a, axis, Op::kExpand, n_nodes());
    check(n(a).shape[static_cast<std::size_t>(axis)] == 1, Error::Kind::shape,
          node_desc(n_nodes(), Op::kExpand) + ": axis " + std::to_string(axis) + " must have size 1 in " +
              shape_str(n(a).shape));
    Node nd;
    nd.op = Op::kExpand;
    nd.a = a;
    nd.attr = {axis};
    nd.shape = n(a).shape;
    nd.shape[static_cast<std::size_t>(axis)] = m;
    return push(std::move(nd));
}

int Graph::col(int a, std::int64_t j) {
    check_valid(a, "col");
    const Shape& s = n(a).shape;
    check(s.size() == 2 && j >= 0 && j < s[1], Error::Kind::shape,
          node_desc(n_nodes(), Op::kCol) + ": column " + std::to_string(j) + " out of range for " + shape_str(s));
    Node nd;
    nd.op = Op::kCol;
    nd.a = a;
    nd.attr = {j};
    nd.shape = {s[0], 1};
    return push(std::move(nd));
}

int Graph::col_scatter(int src, std::int64_t j, std::int64_t ncols) {
    Node nd;
    nd.op = Op::kColScatter;
    nd.a = src;
    nd.attr = {j};
    nd.shape = {n(src).shape[0], ncols};
    return push(std::move(nd));
}

int Graph::mean_all(int a) {
    double inv = 1.0 / static_cast<double>(shape_numel(n(a).shape));
    return scale(sum_all(a), inv);
}

int Graph::global_maxpool(int x) {
    const Shape s = n(x).shape;  // by value: push() may reallocate nodes_
    check(s.size() == 4, Error::Kind::shape, "global_maxpool: needs (n,c,h,w), got " + shape_str(s));
    int m = max_axis(max_axis(x, 3), 2);
    return reshape(m, {s[0], s[1]});
}

int Graph::maxpool2d(int x, std::int64_t kh, std::int64_t kw) {
    const Shape s = n(x).shape;
    check(s.size() == 4 && s[2] % kh == 0 && s[3] % kw == 0, Error::Kind::shape,
          "maxpool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) + " must divide dims of " + shape_str(s));
    int r = reshape(x, {s[0], s[1], s[2] / kh, kh, s[3] / kw, kw});
    int m = max_axis(max_axis(r, 5), 3);
    return reshape(m, {s[0], s[1], s[2] / kh, s[3] / kw});
}

int Graph::logsumexp_rows(int z) {
    const Shape s = n(z).shape;
    check(s.size() == 2, Error::Kind::shape, "logsumexp_rows: needs (n,K), got " + shape_str(s));
    int m = max_axis(z, 1);
    int e = exp_node(sub(z, expand(m, 1, s[1])));
    return add(log_node(sum_axis(e, 1)), m);
}

std::vector<int> Graph::leaves(LeafKind kind) const {
    std::vector<int> out;
    Op want = kind == LeafKind::param ? Op::kParam : Op::kInput;
    for (int i = 0; i < n_nodes(); ++i)
        if (nodes_[static_cast<std::size_t>(i)].op == want) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// evaluation kernels

namespace {

struct ConvDims {
    std::int64_t n, ci, h, w, co, kh, kw, oh, ow, s, ph, pw;
};

// q range keeping iw = q*s + j - pw inside [0, w)
inline void q_range(std::int64_t j, std::int64_t pw, std::int64_t s, std::int64_t w, std::int64_t ow,
                    std::int64_t& q0, std::int64_t& q1) {
    std::int64_t lo = pw - j;
    q0 = lo <= 0 ? 0 : (lo + s - 1) / s;
    std::int64_t hi = w - 1 + pw - j;  // q*s <= hi
    q1 = hi < 0 ? 0 : std::min(ow, hi / s + 1);
    if (q0 > q1) q0 = q1;
}

void conv2d_forward(const ConvDims& d, const double* X, const double* W, double* Y) {
    parallel_for(d.n, [&](std::int64_t n0, std::int64_t n1) {
        for (std::int64_t nn = n0; nn < n1; ++nn)
            for (std::int64_t o = 0; o < d.co; ++o)
                for (std::int64_t c = 0; c < d.ci; ++c) {
                    const double* wbase = W + ((o * d.ci + c) * d.kh) * d.kw;
                    const double* xbase = X + ((nn * d.ci + c) * d.h) * d.w;
                    double* ybase = Y + ((nn * d.co + o) * d.oh) * d.ow;
                    for (std::int64_t i = 0; i < d.kh; ++i)
                        for (std::int64_t j = 0; j < d.kw; ++j) {
                            double wv = wbase[i * d.kw + j];
                            if (wv == 0.0) continue;
                            std::int64_t q0, q1;
                            q_range(j, d.pw, d.s, d.w, d.ow, q0, q1);
                            for (std::int64_t p = 0; p < d.oh; ++p) {
                                std::int64_t ih = p * d.s + i - d.ph;
                                if (ih < 0 || ih >= d.h) continue;
                                const double* xrow = xbase + ih * d.w + (j - d.pw);
                                double* yrow = ybase + p * d.ow;
                                if (d.s == 1) {
                                    for (std::int64_t q = q0; q < q1; ++q) yrow[q] += wv * xrow[q];
                                } else {
                                    for (std::int64_t q = q0; q < q1; ++q) yrow[q] += wv * xrow[q * d.s];
                                }
                            }
                        }
                }
    });
}

void conv2d_input_grad(const ConvDims& d, const double* G, const double* W, double* GX) {
    parallel_for(d.n, [&](std::int64_t n0, std::int64_t n1) {
        for (std::int64_t nn = n0; nn < n1; ++nn)
            for (std::int64_t o = 0; o < d.co; ++o)
                for (std::int64_t c = 0; c < d.ci; ++c) {
                    const double* wbase = W + ((o * d.ci + c) * d.kh) * d.kw;
                    const double* gbase = G + ((nn * d.co + o) * d.oh) * d.ow;
                    double* xbase = GX + ((nn * d.ci + c) * d.h) * d.w;
                    for (std::int64_t i = 0; i < d.kh; ++i)
                        for (std::int64_t j = 0; j < d.kw; ++j) {
                            double wv = wbase[i * d.kw + j];
                            if (wv == 0.0) continue;
                            std::int64_t q0, q1;
                            q_range(j, d.pw, d.s, d.w, d.ow, q0, q1);
                            for (std::int64_t p = 0; p < d.oh; ++p) {
                                std::int64_t ih = p * d.s + i - d.ph;
                                if (ih < 0 || ih >= d.h) continue;
                                double* xrow = xbase + ih * d.w + (j - d.pw);
                                const double* grow = gbase + p * d.ow;
                                if (d.s == 1) {
                                    for (std::int64_t q = q0; q < q1; ++q) xrow[q] += wv * grow[q];
                                } else {
                                    for (std::int64_t q = q0; q < q1; ++q) xrow[q * d.s] += wv * grow[q];
                                }
                            }
                        }
                }
    });
}

void conv2d_weight_grad(const ConvDims& d, const double* G, const double* X, double* GW) {
    parallel_for(d.co, [&](std::int64_t o0, std::int64_t o1) {
        for (std::int64_t o = o0; o < o1; ++o)
            for (std::int64_t nn = 0; nn < d.n; ++nn)
                for (std::int64_t c = 0; c < d.ci; ++c) {
                    const double* gbase = G + ((nn * d.co + o) * d.oh) * d.ow;
                    const double* xbase = X + ((nn * d.ci + c) * d.h) * d.w;
                    double* wbase = GW + ((o * d.ci + c) * d.kh) * d.kw;
                    for (std::int64_t i = 0; i < d.kh; ++i)
                        for (std::int64_t j = 0; j < d.kw; ++j) {
                            std::int64_t q0, q1;
                            q_range(j, d.pw, d.s, d.w, d.ow, q0, q1);
                            double acc = 0.0;
                            for (std::int64_t p = 0; p < d.oh; ++p) {
                                std::int64_t ih = p * d.s + i - d.ph;
                                if (ih < 0 || ih >= d.h) continue;
                                const double* xrow = xbase + ih * d.w + (j - d.pw);
                                const double* grow = gbase + p * d.ow;
                                if (d.s == 1) {
                                    for (std::int64_t q = q0; q < q1; ++q) acc += grow[q] * xrow[q];
                                } else {
                                    for (std::int64_t q = q0; q < q1; ++q) acc += grow[q] * xrow[q * d.s];
                                }
                            }
                            wbase[i * d.kw + j] += acc;
                        }
                }
    });
}

void matmul_kernel(std::int64_t n, std::int64_t m, std::int64_t p, const double* A, const double* B, double* C) {
    parallel_for(n, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            double* crow = C + i * p;
            const double* arow = A + i * m;
            for (std::int64_t k = 0; k < m; ++k) {
                double a = arow[k];
                if (a == 0.0) continue;
                const double* brow = B + k * p;
                for (std::int64_t j = 0; j < p; ++j) crow[j] += a * brow[j];
            }
        }
    });
}

}  // namespace

Tensor Graph::eval(int root, const Bindings& b) const {
    int roots[1] = {root};
    return eval_many(std::span<const int>(roots, 1), b)[0];
}

std::vector<Tensor> Graph::eval_many(std::span<const int> roots, const Bindings& b) const {
    const int nn = n_nodes();
    std::vector<char> need(static_cast<std::size_t>(nn), 0);
    {
        std::vector<int> stack;
        for (int r : roots) {
            check_valid(r, "eval");
            stack.push_back(r);
        }
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            if (need[static_cast<std::size_t>(i)]) continue;
            need[static_cast<std::size_t>(i)] = 1;
            const Node& nd = n(i);
            if (nd.a >= 0) stack.push_back(nd.a);
            if (nd.b >= 0) stack.push_back(nd.b);
        }
    }

    std::vector<Tensor> vals(static_cast<std::size_t>(nn));
    for (int i = 0; i < nn; ++i) {
        if (!need[static_cast<std::size_t>(i)]) continue;
        const Node& nd = n(i);
        Tensor& out = vals[static_cast<std::size_t>(i)];
        const Tensor* A = nd.a >= 0 ? &vals[static_cast<std::size_t>(nd.a)] : nullptr;
        const Tensor* B = nd.b >= 0 ? &vals[static_cast<std::size_t>(nd.b)] : nullptr;

        switch (nd.op) {
            case Op::kParam:
            case Op::kInput: {
                auto it = b.find(nd.name);
                check(it != b.end(), Error::Kind::shape, node_desc(i, nd.op) + ": leaf '" + nd.name + "' is not bound");
                check(it->second.shape == nd.shape, Error::Kind::shape,
                      node_desc(i, nd.op) + ": leaf '" + nd.name + "' bound with shape " + shape_str(it->second.shape) +
                          ", declared " + shape_str(nd.shape));
                out = it->second;
                break;
            }
            case Op::kConst:
                out = nd.value;
                break;
            case Op::kAdd: {
                out = *A;
                for (std::int64_t k = 0; k < out.size(); ++k) out.data[k] += B->data[k];
                break;
            }
            case Op::kSub: {
                out = *A;
                for (std::int64_t k = 0; k < out.size(); ++k) out.data[k] -= B->data[k];
                break;
            }
            case Op::kMul: {
                out = *A;
                for (std::int64_t k = 0; k < out.size(); ++k) out.data[k] *= B->data[k];
                break;
            }
            case Op::kScale: {
                out = *A;
                for (auto& v : out.data) v *= nd.c;
                break;
            }
            case Op::kAddC: {
                out = *A;
                for (auto& v : out.data) v += nd.c;
                break;
            }
            case Op::kMatMul: {
                out = Tensor(nd.shape);
                matmul_kernel(A->shape[0], A->shape[1], B->shape[1], A->ptr(), B->ptr(), out.ptr());
                break;
            }
            case Op::kTranspose: {
                out = Tensor(nd.shape);
                std::int64_t r = A->shape[0], c = A->shape[1];
                for (std::int64_t x = 0; x < r; ++x)
                    for (std::int64_t y = 0; y < c; ++y) out.data[y * r + x] = A->data[x * c + y];
                break;
            }
            case Op::kConv2d: {
                out = Tensor(nd.shape);
                ConvDims d{A->shape[0], A->shape[1], A->shape[2], A->shape[3], B->shape[0], B->shape[2], B->shape[3],
                           nd.shape[2], nd.shape[3], nd.attr[0], nd.attr[1], nd.attr[2]};
                conv2d_forward(d, A->ptr(), B->ptr(), out.ptr());
                break;
            }
            case Op::kConv2dInputGrad: {
                out = Tensor(nd.shape);
                ConvDims d{nd.shape[0], nd.shape[1], nd.shape[2], nd.shape[3], B->shape[0], B->shape[2], B->shape[3],
                           A->shape[2], A->shape[3], nd.attr[0], nd.attr[1], nd.attr[2]};
                conv2d_input_grad(d, A->ptr(), B->ptr(), out.ptr());
                break;
            }
            case Op::kConv2dWeightGrad: {
                out = Tensor(nd.shape);
                ConvDims d{B->shape[0], B->shape[1], B->shape[2], B->shape[3], A->shape[1], nd.shape[2], nd.shape[3],
                           A->shape[2], A->shape[3], nd.attr[0], nd.attr[1], nd.attr[2]};
                conv2d_weight_grad(d, A->ptr(), B->ptr(), out.ptr());
                break;
            }
            case Op::kAvgPool2: {
                out = Tensor(nd.shape);
                std::int64_t nb = nd.shape[0] * nd.shape[1], oh = nd.shape[2], ow = nd.shape[3];
                std::int64_t h = A->shape[2], w = A->shape[3];
                for (std::int64_t m = 0; m < nb; ++m) {
                    const double* src = A->ptr() + m * h * w;
                    double* dst = out.ptr() + m * oh * ow;
                    for (std::int64_t p = 0; p < oh; ++p)
                        for (std::int64_t q = 0; q < ow; ++q) {
                            const double* s0 = src + 2 * p * w + 2 * q;
                            dst[p * ow + q] = 0.25 * (s0[0] + s0[1] + s0[w] + s0[w + 1]);
                        }
                }
                break;
            }
            case Op::kAvgPool2Grad: {
                out = Tensor(nd.shape);
                std::int64_t nb = nd.shape[0] * nd.shape[1], h = nd.shape[2], w = nd.shape[3];
                std::int64_t oh = A->shape[2], ow = A->shape[3];
                for (std::int64_t m = 0; m < nb; ++m) {
                    const double* src = A->ptr() + m * oh * ow;
                    double* dst = out.ptr() + m * h * w;
                    for (std::int64_t p = 0; p < oh; ++p)
                        for (std::int64_t q = 0; q < ow; ++q) {
                            double v = 0.25 * src[p * ow + q];
                            double* d0 = dst + 2 * p * w + 2 * q;
                            d0[0] += v;
                            d0[1] += v;
                            d0[w] += v;
                            d0[w + 1] += v;
                        }
                }
                break;
            }
            case Op::kRelu: {
                out = *A;
                for (auto& v : out.data) v = v > 0 ? v : 0.0;
                break;
            }
            case Op::kStep: {
                out = *A;
                for (auto& v : out.data) v = v > 0 ? 1.0 : 0.0;
                break;
            }
            case Op::kSoftplus: {
                out = *A;
                for (auto& v : out.data) v = softplus_val(v, nd.c);
                break;
            }
            case Op::kSigmoid: {
                out = *A;
                for (auto& v : out.data) v = sigmoid_val(v, nd.c);
                break;
            }
            case Op::kSquare: {
                out = *A;
                for (auto& v : out.data) v *= v;
                break;
            }
            case Op::kSqrt: {
                out = *A;
                for (auto& v : out.data) v = std::sqrt(v);
                break;
            }
            case Op::kRecip: {
                out = *A;
                for (auto& v : out.data) v = 1.0 / v;
                break;
            }
            case Op::kExp: {
                out = *A;
                for (auto& v : out.data) v = std::exp(v);
                break;
            }
            case Op::kLog: {
                out = *A;
                for (auto& v : out.data) v = std::log(v);
                break;
            }
            case Op::kReshape: {
                out = A->reshaped(nd.shape);
                break;
            }
            case Op::kSumAll: {
                double s = 0;
                for (double v : A->data) s += v;
                out = Tensor::scalar(s);
                break;
            }
            case Op::kBroadcast: {
                out = Tensor::full(nd.shape, A->data[0]);
                break;
            }
            case Op::kSumAxis: {
                out = Tensor(nd.shape);
                std::int64_t outer, axn, inner;
                axis_extents(A->shape, static_cast<int>(nd.attr[0]), outer, axn, inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t in2 = 0; in2 < inner; ++in2) {
                        double s = 0;
                        for (std::int64_t k = 0; k < axn; ++k) s += A->data[(o * axn + k) * inner + in2];
                        out.data[o * inner + in2] = s;
                    }
                break;
            }
            case Op::kMaxAxis: {
                out = Tensor(nd.shape);
                std::int64_t outer, axn, inner;
                axis_extents(A->shape, static_cast<int>(nd.attr[0]), outer, axn, inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t in2 = 0; in2 < inner; ++in2) {
                        double m = A->data[o * axn * inner + in2];
                        for (std::int64_t k = 1; k < axn; ++k) {
                            double v = A->data[(o * axn + k) * inner + in2];
                            if (v > m) m = v;
                        }
                        out.data[o * inner + in2] = m;
                    }
                break;
            }
            case Op::kScatterMaxAxis: {
                out = Tensor(nd.shape);
                std::int64_t outer, axn, inner;
                axis_extents(B->shape, static_cast<int>(nd.attr[0]), outer, axn, inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t in2 = 0; in2 < inner; ++in2) {
                        std::int64_t best = 0;
                        double m = B->data[o * axn * inner + in2];
                        for (std::int64_t k = 1; k < axn; ++k) {
                            double v = B->data[(o * axn + k) * inner + in2];
                            if (v > m) {
                                m = v;
                                best = k;
                            }
                        }
                        out.data[(o * axn + best) * inner + in2] = A->data[o * inner + in2];
                    }
                break;
            }
            case Op::kGatherMaxAxis: {
                out = Tensor(nd.shape);
                std::int64_t outer, axn, inner;
                axis_extents(B->shape, static_cast<int>(nd.attr[0]), outer, axn, inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t in2 = 0; in2 < inner; ++in2) {
                        std::int64_t best = 0;
                        double m = B->data[o * axn * inner + in2];
                        for (std::int64_t k = 1; k < axn; ++k) {
                            double v = B->data[(o * axn + k) * inner + in2];
                            if (v > m) {
                                m = v;
                                best = k;
                            }
                        }
                        out.data[o * inner + in2] = A->data[(o * axn + best) * inner + in2];
                    }
                break;
            }
            case Op::kExpand: {
                out = Tensor(nd.shape);
                std::int64_t outer, axn, inner;
                axis_extents(nd.shape, static_cast<int>(nd.attr[0]), outer, axn, inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t k = 0; k < axn; ++k)
                        std::memcpy(out.ptr() + (o * axn + k) * inner, A->ptr() + o * inner,
                                    static_cast<std::size_t>(inner) * sizeof(double));
                break;
            }
            case Op::kCol: {
                out = Tensor(nd.shape);
                std::int64_t rows = A->shape[0], cols = A->shape[1], j = nd.attr[0];
                for (std::int64_t r = 0; r < rows; ++r) out.data[r] = A->data[r * cols + j];
                break;
            }
            case Op::kColScatter: {
                out = Tensor(nd.shape);
                std::int64_t rows = nd.shape[0], cols = nd.shape[1], j = nd.attr[0];
                for (std::int64_t r = 0; r < rows; ++r) out.data[r * cols + j] = A->data[r];
                break;
            }
        }
    }

    std::vector<Tensor> out;
    out.reserve(roots.size());
    for (int r : roots) {
        const Tensor& t = vals[static_cast<std::size_t>(r)];
        check(t.all_finite(), Error::Kind::divergence, node_desc(r, n(r).op) + ": non-finite value in result");
        out.push_back(t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// reverse mode

std::vector<int> Graph::backward(int root, std::span<const int> wrt) {
    check_valid(root, "backward");
    check(shape_numel(n(root).shape) == 1, Error::Kind::shape,
          "backward: root must be scalar, " + node_desc(root, n(root).op) + " has shape " + shape_str(n(root).shape));

    const int base = n_nodes();
    std::vector<char> live(static_cast<std::size_t>(base), 0);
    {
        std::vector<int> stack{root};
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            if (live[static_cast<std::size_t>(i)]) continue;
            live[static_cast<std::size_t>(i)] = 1;
            const Node& nd = n(i);
            if (nd.a >= 0) stack.push_back(nd.a);
            if (nd.b >= 0) stack.push_back(nd.b);
        }
    }

    std::vector<int> adj(static_cast<std::size_t>(base), -1);
    adj[static_cast<std::size_t>(root)] = constant(Tensor::full(n(root).shape, 1.0));

    auto accumulate = [&](int parent, int contrib) {
        if (parent < 0 || contrib < 0) return;
        int& slot = adj[static_cast<std::size_t>(parent)];
        slot = slot < 0 ? contrib : add(slot, contrib);
    };

    for (int i = root; i >= 0; --i) {
        if (!live[static_cast<std::size_t>(i)]) continue;
        int g = adj[static_cast<std::size_t>(i)];
        if (g < 0) continue;
        const Node nd = n(i);  // copy: push() may reallocate nodes_
        switch (nd.op) {
            case Op::kParam:
            case Op::kInput:
            case Op::kConst:
                break;
            case Op::kAdd:
                accumulate(nd.a, g);
                accumulate(nd.b, g);
                break;
            case Op::kSub:
                accumulate(nd.a, g);
                accumulate(nd.b, scale(g, -1.0));
                break;
            case Op::kMul:
                accumulate(nd.a, mul(g, nd.b));
                accumulate(nd.b, mul(g, nd.a));
                break;
            case Op::kScale:
                accumulate(nd.a, scale(g, nd.c));
                break;
            case Op::kAddC:
                accumulate(nd.a, g);
                break;
            case Op::kMatMul:
                accumulate(nd.a, matmul(g, transpose(nd.b)));
                accumulate(nd.b, matmul(transpose(nd.a), g));
                break;
            case Op::kTranspose:
                accumulate(nd.a, transpose(g));
                break;
            case Op::kConv2d: {
                const Shape sx = n(nd.a).shape;
                const Shape sw = n(nd.b).shape;
                accumulate(nd.a, conv2d_igrad(g, nd.b, nd.attr[0], nd.attr[1], nd.attr[2], sx[2], sx[3]));
                accumulate(nd.b, conv2d_wgrad(g, nd.a, nd.attr[0], nd.attr[1], nd.attr[2], sw[2], sw[3]));
                break;
            }
            case Op::kConv2dInputGrad: {
                // y = igrad(G, W); dG = conv2d(g, W), dW = wgrad(G, g)
                const Shape sw = n(nd.b).shape;
                accumulate(nd.a, conv2d(g, nd.b, nd.attr[0], nd.attr[1], nd.attr[2]));
                accumulate(nd.b, conv2d_wgrad(nd.a, g, nd.attr[0], nd.attr[1], nd.attr[2], sw[2], sw[3]));
                break;
            }
            case Op::kConv2dWeightGrad: {
                // y = wgrad(G, X); dG = conv2d(X, g), dX = igrad(G, g)
                const Shape sx = n(nd.b).shape;
                accumulate(nd.a, conv2d(nd.b, g, nd.attr[0], nd.attr[1], nd.attr[2]));
                accumulate(nd.b, conv2d_igrad(nd.a, g, nd.attr[0], nd.attr[1], nd.attr[2], sx[2], sx[3]));
                break;
            }
            case Op::kAvgPool2: {
                const Shape sx = n(nd.a).shape;
                accumulate(nd.a, avgpool2_grad(g, sx[2], sx[3]));
                break;
            }
            case Op::kAvgPool2Grad:
                accumulate(nd.a, avgpool2(g));
                break;
            case Op::kRelu:
                accumulate(nd.a, mul(g, step_mask(nd.a)));
                break;
            case Op::kStep:
                break;  // piecewise constant
            case Op::kSoftplus:
                accumulate(nd.a, mul(g, sigmoid(nd.a, nd.c)));
                break;
            case Op::kSigmoid: {
                int one_minus = add_const(scale(i, -1.0), 1.0);
                accumulate(nd.a, scale(mul(g, mul(i, one_minus)), nd.c));
                break;
            }
            case Op::kSquare:
                accumulate(nd.a, scale(mul(g, nd.a), 2.0));
                break;
            case Op::kSqrt:
                accumulate(nd.a, scale(mul(g, recip(i)), 0.5));
                break;
            case Op::kRecip:
                accumulate(nd.a, scale(mul(g, square(i)), -1.0));
                break;
            case Op::kExp:
                accumulate(nd.a, mul(g, i));
                break;
            case Op::kLog:
                accumulate(nd.a, mul(g, recip(nd.a)));
                break;
            case Op::kReshape:
                accumulate(nd.a, reshape(g, n(nd.a).shape));
                break;
            case Op::kSumAll:
                accumulate(nd.a, broadcast(g, n(nd.a).shape));
                break;
            case Op::kBroadcast:
                accumulate(nd.a, sum_all(g));
                break;
            case Op::kSumAxis:
                accumulate(nd.a, expand(g, static_cast<int>(nd.attr[0]), n(nd.a).shape[static_cast<std::size_t>(nd.attr[0])]));
                break;
            case Op::kMaxAxis:
                accumulate(nd.a, scatter_max_axis(g, nd.a, static_cast<int>(nd.attr[0])));
                break;
            case Op::kScatterMaxAxis:
                accumulate(nd.a, gather_max_axis(g, nd.b, static_cast<int>(nd.attr[0])));
                break;  // selector input gets no gradient
            case Op::kGatherMaxAxis:
                accumulate(nd.a, scatter_max_axis(g, nd.b, static_cast<int>(nd.attr[0])));
                break;
            case Op::kExpand:
                accumulate(nd.a, sum_axis(g, static_cast<int>(nd.attr[0])));
                break;
            case Op::kCol:
                accumulate(nd.a, col_scatter(g, nd.attr[0], n(nd.a).shape[1]));
                break;
            case Op::kColScatter:
                accumulate(nd.a, col(g, nd.attr[0]));
                break;
        }
    }

    std::vector<int> out;
    out.reserve(wrt.size());
    for (int w : wrt) {
        check_valid(w, "backward");
        out.push_back(w < base ? adj[static_cast<std::size_t>(w)] : -1);
    }
    return out;
}

int Graph::grad_node(int root, int wrt) {
    int ws[1] = {wrt};
    return backward(root, std::span<const int>(ws, 1))[0];
}

std::vector<Tensor> eval_gradients(Graph& g, int root, std::span<const int> wrt, const Bindings& b) {
    std::vector<int> gnodes = g.backward(root, wrt);
    std::vector<int> present;
    for (int gn : gnodes)
        if (gn >= 0) present.push_back(gn);
    std::vector<Tensor> vals = present.empty() ? std::vector<Tensor>{} : g.eval_many(present, b);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        if (gnodes[i] >= 0)
            out.push_back(vals[k++]);
        else
            out.push_back(Tensor::zeros(g.at(wrt[i]).shape));
    }
    return out;
}

}  // namespace kernreg
