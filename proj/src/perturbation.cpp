#include "kernreg/perturbation.hpp"

#include <algorithm>
#include <cmath>

namespace kernreg {

Geometry geometry_from_name(const std::string& s) {
    if (s == "l2") return Geometry::l2;
    if (s == "linf") return Geometry::linf;
    throw_config("unknown geometry '" + s + "' (expected l2 or linf)");
}

std::string geometry_name(Geometry g) { return g == Geometry::l2 ? "l2" : "linf"; }

double AttackConfig::effective_step() const {
    if (step_size > 0) return step_size;
    double span = geometry == Geometry::l2 ? 2.0 : 2.5;
    return span * epsilon / static_cast<double>(steps);
}

namespace {

std::int64_t example_stride(const Tensor& batch) { return batch.size() / batch.shape[0]; }

// Projects each example's perturbation into the epsilon ball.
void project_ball(Tensor& delta, double eps, Geometry geom) {
    std::int64_t n = delta.shape[0], stride = example_stride(delta);
    if (geom == Geometry::linf) {
        for (auto& v : delta.data) v = std::clamp(v, -eps, eps);
        return;
    }
    for (std::int64_t i = 0; i < n; ++i) {
        double* d = delta.ptr() + i * stride;
        double nrm = 0;
        for (std::int64_t j = 0; j < stride; ++j) nrm += d[j] * d[j];
        nrm = std::sqrt(nrm);
        if (nrm > eps) {
            double s = eps / nrm;
            for (std::int64_t j = 0; j < stride; ++j) d[j] *= s;
        }
    }
}

void ascent_step(Tensor& delta, const Tensor& grad, double step, Geometry geom) {
    std::int64_t n = delta.shape[0], stride = example_stride(delta);
    for (std::int64_t i = 0; i < n; ++i) {
        double* d = delta.ptr() + i * stride;
        const double* g = grad.ptr() + i * stride;
        if (geom == Geometry::linf) {
            for (std::int64_t j = 0; j < stride; ++j) {
                double s = g[j] > 0 ? 1.0 : (g[j] < 0 ? -1.0 : 0.0);
                d[j] += step * s;
            }
        } else {
            double nrm = 0;
            for (std::int64_t j = 0; j < stride; ++j) nrm += g[j] * g[j];
            nrm = std::sqrt(nrm);
            if (nrm == 0) continue;
            double s = step / nrm;
            for (std::int64_t j = 0; j < stride; ++j) d[j] += s * g[j];
        }
    }
}

Tensor random_start_delta(const Shape& shape, double eps, Geometry geom, Rng& rng) {
    Tensor d(shape);
    for (auto& v : d.data) v = rng.uniform(-eps, eps);
    project_ball(d, eps, geom);
    return d;
}

}  // namespace

AdvPenalty adv_penalty(const Network& net, const ParamSet& params, const Tensor& batch, const AttackConfig& cfg,
                       bool squared, std::vector<Tensor>* warm_deltas) {
    check(batch.rank() >= 2 && batch.shape[0] >= 1, Error::Kind::data, "adv_penalty: empty batch");
    const std::int64_t n = batch.shape[0];
    const std::int64_t K = net.n_outputs();
    const std::int64_t stride = example_stride(batch);

    AdvPenalty pen;
    pen.squared = squared;
    pen.class_gaps.assign(static_cast<std::size_t>(K), 0.0);
    pen.witnesses.resize(static_cast<std::size_t>(K));
    if (warm_deltas && static_cast<std::int64_t>(warm_deltas->size()) != K)
        warm_deltas->assign(static_cast<std::size_t>(K), Tensor());

    // batched graph: per-class value column and input gradient of its sum
    auto fw = net.build_forward(n);
    Bindings base = net.bind(params, batch);
    Tensor clean_logits = fw.g.eval(fw.logits, base);

    for (std::int64_t k = 0; k < K; ++k) {
        Network::ForwardGraph fg = net.build_forward(n);
        int fk = fg.g.col(fg.logits, k);
        int gx = fg.g.grad_node(fg.g.sum_all(fk), fg.x);
        std::vector<int> roots{fk};
        if (gx >= 0) roots.push_back(gx);

        Tensor delta(batch.shape);
        if (warm_deltas && (*warm_deltas)[static_cast<std::size_t>(k)].size() == batch.size())
            delta = (*warm_deltas)[static_cast<std::size_t>(k)];
        project_ball(delta, cfg.epsilon, cfg.geometry);

        std::vector<double> best_gap(static_cast<std::size_t>(n), 0.0);  // delta = 0 baseline
        Tensor best_delta(batch.shape);

        Bindings b = net.bind(params, batch);
        auto consider = [&](const Tensor& d) {
            Tensor xb = batch;
            for (std::int64_t i = 0; i < xb.size(); ++i) xb.data[i] += d.data[i];
            b["x"] = xb;
            auto vals = fg.g.eval_many(roots, b);
            for (std::int64_t i = 0; i < n; ++i) {
                double gap = vals[0].data[i] - clean_logits.data[i * K + k];
                if (gap > best_gap[static_cast<std::size_t>(i)]) {
                    best_gap[static_cast<std::size_t>(i)] = gap;
                    for (std::int64_t j = 0; j < stride; ++j)
                        best_delta.data[i * stride + j] = d.data[i * stride + j];
                }
            }
            return vals.size() > 1 ? vals[1] : Tensor();
        };

        if (cfg.epsilon > 0 && gx >= 0) {
            Tensor grad = consider(delta);
            double step = cfg.effective_step();
            for (int it = 0; it < cfg.steps; ++it) {
                ascent_step(delta, grad, step, cfg.geometry);
                project_ball(delta, cfg.epsilon, cfg.geometry);
                grad = consider(delta);
            }
        }

        std::int64_t star = 0;
        for (std::int64_t i = 1; i < n; ++i)
            if (best_gap[static_cast<std::size_t>(i)] > best_gap[static_cast<std::size_t>(star)]) star = i;
        double gap = best_gap[static_cast<std::size_t>(star)];
        pen.class_gaps[static_cast<std::size_t>(k)] = gap;
        pen.value += squared ? gap * gap : gap;

        AdvWitness& w = pen.witnesses[static_cast<std::size_t>(k)];
        w.example = star;
        w.gap = gap;
        w.x = batch.row(star);
        w.delta = best_delta.row(star);
        if (warm_deltas) (*warm_deltas)[static_cast<std::size_t>(k)] = best_delta;
    }
    return pen;
}

std::vector<Tensor> adv_penalty_param_grad(const Network& net, const ParamSet& params, const AdvPenalty& pen) {
    std::vector<Tensor> grads;
    for (const Shape& s : net.param_shapes()) grads.push_back(Tensor::zeros(s));

    for (const AdvWitness& w : pen.witnesses) {
        if (w.example < 0 || w.gap <= 0) continue;
        std::int64_t k = static_cast<std::int64_t>(&w - pen.witnesses.data());
        Graph g;
        Shape xs;
        xs.push_back(1);
        for (auto d : net.input_shape()) xs.push_back(d);
        int xa = g.input("xa", xs);
        int xb = g.input("xb", xs);
        std::vector<int> pnodes;
        for (std::size_t i = 0; i < params.count(); ++i)
            pnodes.push_back(g.param(params.names[i], params.tensors[i].shape));
        int la = net.append_forward(g, xa, pnodes);
        int lb = net.append_forward(g, xb, pnodes);
        int gap = g.sum_all(g.sub(g.col(la, k), g.col(lb, k)));
        int scalar = pen.squared ? g.square(gap) : gap;

        Bindings b;
        for (std::size_t i = 0; i < params.count(); ++i) b[params.names[i]] = params.tensors[i];
        b["xa"] = (w.x + w.delta).reshaped(xs);
        b["xb"] = w.x.reshaped(xs);
        auto gs = eval_gradients(g, scalar, pnodes, b);
        for (std::size_t i = 0; i < grads.size(); ++i) axpy(1.0, gs[i], grads[i]);
    }
    return grads;
}

namespace {

std::vector<double> dual_norms_per_example(const Tensor& gx, Geometry geom) {
    std::int64_t n = gx.shape[0], stride = example_stride(gx);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* g = gx.ptr() + i * stride;
        double acc = 0;
        if (geom == Geometry::l2) {
            for (std::int64_t j = 0; j < stride; ++j) acc += g[j] * g[j];
            out[static_cast<std::size_t>(i)] = std::sqrt(acc);
        } else {
            for (std::int64_t j = 0; j < stride; ++j) acc += std::abs(g[j]);
            out[static_cast<std::size_t>(i)] = acc;
        }
    }
    return out;
}

}  // namespace

GradNormPenalty grad_norm_penalty(const Network& net, const ParamSet& params, const Tensor& batch, Geometry geom) {
    check(batch.rank() >= 2 && batch.shape[0] >= 1, Error::Kind::data, "grad_norm_penalty: empty batch");
    const std::int64_t n = batch.shape[0];
    const std::int64_t K = net.n_outputs();
    GradNormPenalty pen;
    pen.geometry = geom;

    for (std::int64_t k = 0; k < K; ++k) {
        auto fw = net.build_forward(n);
        int gx = append_input_gradient(fw, k);
        Tensor g = fw.g.eval(gx, net.bind(params, batch));
        auto norms = dual_norms_per_example(g, geom);
        std::int64_t star = 0;
        for (std::int64_t i = 1; i < n; ++i)
            if (norms[static_cast<std::size_t>(i)] > norms[static_cast<std::size_t>(star)]) star = i;
        pen.class_norms.push_back(norms[static_cast<std::size_t>(star)]);
        pen.witnesses.push_back(star);
        pen.value += norms[static_cast<std::size_t>(star)] * norms[static_cast<std::size_t>(star)];
    }
    return pen;
}

std::vector<Tensor> grad_norm_param_grad(const Network& net, const ParamSet& params, const Tensor& batch,
                                         const GradNormPenalty& pen) {
    std::vector<Tensor> grads;
    for (const Shape& s : net.param_shapes()) grads.push_back(Tensor::zeros(s));

    for (std::size_t k = 0; k < pen.witnesses.size(); ++k) {
        if (pen.class_norms[k] == 0) continue;
        auto fw = net.build_forward(1);
        int gx = append_input_gradient(fw, static_cast<std::int64_t>(k));
        int scalar = pen.geometry == Geometry::l2 ? fw.g.sq_l2(gx) : fw.g.square(fw.g.l1norm(gx));
        Tensor x = batch.row(pen.witnesses[k]);
        Shape xs;
        xs.push_back(1);
        for (auto d : net.input_shape()) xs.push_back(d);
        auto gs = param_gradients(fw, scalar, net.bind(params, x.reshaped(xs)));
        for (std::size_t i = 0; i < grads.size(); ++i) axpy(1.0, gs[i], grads[i]);
    }
    return grads;
}

Tensor pgd_attack(const Network& net, const ParamSet& params, LossKind kind, const Tensor& x,
                  const std::vector<std::int64_t>& y, const AttackConfig& cfg, const Tensor* warm, Rng* rng) {
    check(x.rank() >= 2 && x.shape[0] >= 1, Error::Kind::data, "pgd_attack: empty batch");
    const std::int64_t n = x.shape[0];
    const std::int64_t stride = example_stride(x);
    if (cfg.epsilon <= 0) return Tensor::zeros(x.shape);

    auto fw = net.build_forward(n);
    int loss_sum = append_loss_sum(fw.g, kind, fw.logits, y);
    int gx = fw.g.grad_node(loss_sum, fw.x);
    std::vector<int> roots{fw.logits};
    if (gx >= 0) roots.push_back(gx);

    Tensor delta(x.shape);
    if (warm && warm->size() == x.size()) delta = *warm;
    else if (cfg.random_start && rng) delta = random_start_delta(x.shape, cfg.epsilon, cfg.geometry, *rng);
    project_ball(delta, cfg.epsilon, cfg.geometry);

    std::vector<double> best_loss(static_cast<std::size_t>(n), -1.0);
    Tensor best_delta(x.shape);
    {
        // delta = 0 is always a candidate
        Tensor logits = fw.g.eval(fw.logits, net.bind(params, x));
        auto losses = loss_per_example(kind, logits, y);
        for (std::int64_t i = 0; i < n; ++i) best_loss[static_cast<std::size_t>(i)] = losses[static_cast<std::size_t>(i)];
    }

    Bindings b = net.bind(params, x);
    auto consider = [&](const Tensor& d) {
        Tensor xb = x;
        for (std::int64_t i = 0; i < xb.size(); ++i) xb.data[i] += d.data[i];
        b["x"] = xb;
        auto vals = fw.g.eval_many(roots, b);
        auto losses = loss_per_example(kind, vals[0], y);
        for (std::int64_t i = 0; i < n; ++i) {
            if (losses[static_cast<std::size_t>(i)] > best_loss[static_cast<std::size_t>(i)]) {
                best_loss[static_cast<std::size_t>(i)] = losses[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < stride; ++j) best_delta.data[i * stride + j] = d.data[i * stride + j];
            }
        }
        return vals.size() > 1 ? vals[1] : Tensor();
    };

    if (gx >= 0) {
        Tensor grad = consider(delta);
        double step = cfg.effective_step();
        for (int it = 0; it < cfg.steps; ++it) {
            ascent_step(delta, grad, step, cfg.geometry);
            project_ball(delta, cfg.epsilon, cfg.geometry);
            grad = consider(delta);
        }
    }
    return best_delta;
}

std::pair<double, std::vector<Tensor>> loss_grad_penalty(const Network& net, const ParamSet& params,
                                                         const Tensor& batch, const std::vector<std::int64_t>& labels,
                                                         LossKind kind, Geometry geom, bool with_grad) {
    check(batch.rank() >= 2 && batch.shape[0] >= 1, Error::Kind::data, "loss_grad_penalty: empty batch");
    const std::int64_t n = batch.shape[0];
    auto fw = net.build_forward(n);
    int loss_sum = append_loss_sum(fw.g, kind, fw.logits, labels);
    int gx = fw.g.grad_node(loss_sum, fw.x);

    std::vector<Tensor> grads;
    if (gx < 0) {  // loss independent of inputs
        if (with_grad)
            for (const Shape& s : net.param_shapes()) grads.push_back(Tensor::zeros(s));
        return {0.0, std::move(grads)};
    }

    // per-example rows of gx are independent, so the batch mean is one sum
    double inv_n = 1.0 / static_cast<double>(n);
    int scalar = geom == Geometry::l2 ? fw.g.scale(fw.g.sum_all(fw.g.square(gx)), inv_n)
                                      : fw.g.scale(fw.g.l1norm(gx), inv_n);
    Bindings b = net.bind(params, batch);
    double value = fw.g.eval(scalar, b).item();
    if (with_grad) grads = param_gradients(fw, scalar, b);
    return {value, std::move(grads)};
}

}  // namespace kernreg
