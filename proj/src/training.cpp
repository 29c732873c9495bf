#include "kernreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace kernreg {

PenaltySpec PenaltySpec::weight_decay(double lambda) {
    PenaltySpec p;
    p.kind = Kind::weight_decay;
    p.lambda = lambda;
    return p;
}

PenaltySpec PenaltySpec::sn_penalty(double lambda, SnMethod m) {
    PenaltySpec p;
    p.kind = Kind::sn_penalty;
    p.lambda = lambda;
    p.sn_method = m;
    return p;
}

PenaltySpec PenaltySpec::sn_project(double tau0, double kappa_epochs) {
    PenaltySpec p;
    p.kind = Kind::sn_project;
    p.continuation.tau0 = tau0;
    p.continuation.kappa = kappa_epochs;
    return p;
}

PenaltySpec PenaltySpec::adv(double lambda, AttackConfig cfg, bool squared) {
    PenaltySpec p;
    p.kind = Kind::adv;
    p.lambda = lambda;
    p.attack = cfg;
    p.squared = squared;
    return p;
}

PenaltySpec PenaltySpec::grad_norm(double lambda, Geometry g) {
    PenaltySpec p;
    p.kind = Kind::grad_norm;
    p.lambda = lambda;
    p.geometry = g;
    return p;
}

PenaltySpec PenaltySpec::loss_grad(double lambda, Geometry g) {
    PenaltySpec p;
    p.kind = Kind::loss_grad;
    p.lambda = lambda;
    p.geometry = g;
    return p;
}

PenaltySpec PenaltySpec::pgd_robust(AttackConfig cfg) {
    PenaltySpec p;
    p.kind = Kind::pgd_robust;
    p.attack = cfg;
    return p;
}

PenaltySpec PenaltySpec::deform_adv(double lambda, DeformFamily family, int m) {
    PenaltySpec p;
    p.kind = Kind::deform_adv;
    p.lambda = lambda;
    p.family = family;
    p.m = m;
    return p;
}

PenaltySpec PenaltySpec::tangent_prop(double lambda, DeformFamily family, int q) {
    PenaltySpec p;
    p.kind = Kind::tangent_prop;
    p.lambda = lambda;
    p.family = family;
    p.q = q;
    return p;
}

std::string PenaltySpec::name() const {
    switch (kind) {
        case Kind::weight_decay: return "weight_decay";
        case Kind::sn_penalty: return "sn_penalty";
        case Kind::sn_project: return "sn_project";
        case Kind::adv: return "adv";
        case Kind::grad_norm: return "grad_norm";
        case Kind::loss_grad: return "loss_grad";
        case Kind::pgd_robust: return "pgd_robust";
        case Kind::deform_adv: return "deform_adv";
        case Kind::tangent_prop: return "tangent_prop";
    }
    return "?";
}

namespace {

void validate_penalties(const std::vector<PenaltySpec>& penalties) {
    int n_project = 0, n_robust = 0;
    for (const auto& p : penalties) {
        check(p.lambda >= 0, Error::Kind::config, p.name() + ": lambda must be nonnegative");
        if (p.kind == PenaltySpec::Kind::sn_project) ++n_project;
        if (p.kind == PenaltySpec::Kind::pgd_robust) ++n_robust;
    }
    check(n_project <= 1, Error::Kind::config, "objective holds more than one sn_project");
    check(n_robust <= 1, Error::Kind::config, "objective holds more than one pgd_robust");
}

const PenaltySpec* find_kind(const std::vector<PenaltySpec>& ps, PenaltySpec::Kind k) {
    for (const auto& p : ps)
        if (p.kind == k) return &p;
    return nullptr;
}

}  // namespace

Objective compose_objective(const Network& net, const ParamSet& params, LossKind loss,
                            const std::vector<PenaltySpec>& penalties, const Tensor& batch,
                            const std::vector<std::int64_t>& labels, SpectralState* sn_state, Rng* rng,
                            double steps_per_epoch) {
    (void)steps_per_epoch;
    validate_penalties(penalties);
    Objective obj;
    for (const Shape& s : net.param_shapes()) obj.grads.push_back(Tensor::zeros(s));

    // base term: clean mean loss, or the robust loss at the attacked points
    const PenaltySpec* robust = find_kind(penalties, PenaltySpec::Kind::pgd_robust);
    {
        Tensor x = batch;
        if (robust && robust->attack.epsilon > 0) {
            Tensor delta = pgd_attack(net, params, loss, batch, labels, robust->attack, nullptr, rng);
            for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] += delta.data[i];
        }
        auto fw = net.build_forward(x.shape[0]);
        int loss_node = append_loss(fw.g, loss, fw.logits, labels);
        Bindings b = net.bind(params, x);
        obj.base_loss = fw.g.eval(loss_node, b).item();
        obj.value = obj.base_loss;
        auto gs = param_gradients(fw, loss_node, b);
        for (std::size_t i = 0; i < gs.size(); ++i) axpy(1.0, gs[i], obj.grads[i]);
        if (robust) {
            // ascent never returns a worse point than delta = 0
            double clean = loss_value(loss, predict(net, params, batch), labels);
            check(obj.base_loss >= clean - 1e-12, Error::Kind::internal,
                  "robust loss fell below the clean loss");
            obj.parts["pgd_robust"] = obj.base_loss;
            obj.parts["clean_loss"] = clean;
        }
    }

    for (const auto& p : penalties) {
        switch (p.kind) {
            case PenaltySpec::Kind::weight_decay: {
                double v = 0;
                for (std::size_t i = 0; i < params.count(); ++i) {
                    v += dot(params.tensors[i], params.tensors[i]);
                    axpy(2.0 * p.lambda, params.tensors[i], obj.grads[i]);
                }
                obj.parts["weight_decay"] = v;
                obj.value += p.lambda * v;
                break;
            }
            case PenaltySpec::Kind::sn_penalty: {
                auto [v, gs] = sn_penalty_term(params, p.lambda, p.sn_method, sn_state);
                obj.parts["sn_penalty"] = p.lambda > 0 ? v / p.lambda : 0.0;
                obj.value += v;
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(1.0, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::adv: {
                AdvPenalty pen = adv_penalty(net, params, batch, p.attack, p.squared);
                obj.parts["adv"] = pen.value;
                obj.value += p.lambda * pen.value;
                auto gs = adv_penalty_param_grad(net, params, pen);
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(p.lambda, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::grad_norm: {
                GradNormPenalty pen = grad_norm_penalty(net, params, batch, p.geometry);
                obj.parts["grad_norm"] = pen.value;
                obj.value += p.lambda * pen.value;
                auto gs = grad_norm_param_grad(net, params, batch, pen);
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(p.lambda, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::loss_grad: {
                auto [v, gs] = loss_grad_penalty(net, params, batch, labels, loss, p.geometry, true);
                obj.parts["loss_grad"] = v;
                obj.value += p.lambda * v;
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(p.lambda, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::deform_adv: {
                check(rng != nullptr, Error::Kind::config, "deform_adv needs a sampling stream");
                Rng sub = rng->split(0xdef0);
                DeformPenalty pen = adv_deform_penalty(net, params, batch, p.family, p.m, sub);
                obj.parts["deform_adv"] = pen.value;
                obj.value += p.lambda * pen.value;
                auto gs = deform_penalty_param_grad(net, params, pen);
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(p.lambda, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::tangent_prop: {
                check(rng != nullptr, Error::Kind::config, "tangent_prop needs a sampling stream");
                Rng sub = rng->split(0x7a9);
                auto tangents = sample_tangents(p.family, batch, p.q, sub);
                TangentPenalty pen = tangent_prop_penalty(net, params, batch, tangents);
                obj.parts["tangent_prop"] = pen.value;
                obj.value += p.lambda * pen.value;
                auto gs = tangent_prop_param_grad(net, params, batch, tangents, pen);
                for (std::size_t i = 0; i < gs.size(); ++i) axpy(p.lambda, gs[i], obj.grads[i]);
                break;
            }
            case PenaltySpec::Kind::sn_project:
            case PenaltySpec::Kind::pgd_robust:
                break;  // handled by the trainer / base term
        }
    }
    return obj;
}

namespace {

struct OptimizerState {
    std::vector<Tensor> momentum;
    std::vector<Tensor> adam_m, adam_v;
    std::int64_t adam_t = 0;
};

void apply_update(const TrainConfig& cfg, double lr, OptimizerState& st, const std::vector<Tensor>& grads,
                  ParamSet& params) {
    if (cfg.optimizer == TrainConfig::Optimizer::sgd) {
        if (st.momentum.empty())
            for (const auto& t : params.tensors) st.momentum.push_back(Tensor::zeros(t.shape));
        for (std::size_t i = 0; i < params.count(); ++i) {
            Tensor& buf = st.momentum[i];
            for (std::int64_t j = 0; j < buf.size(); ++j) {
                buf.data[j] = cfg.momentum * buf.data[j] + grads[i].data[j];
                params.tensors[i].data[j] -= lr * buf.data[j];
            }
        }
        return;
    }
    if (st.adam_m.empty()) {
        for (const auto& t : params.tensors) {
            st.adam_m.push_back(Tensor::zeros(t.shape));
            st.adam_v.push_back(Tensor::zeros(t.shape));
        }
    }
    ++st.adam_t;
    double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(st.adam_t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(st.adam_t));
    for (std::size_t i = 0; i < params.count(); ++i) {
        for (std::int64_t j = 0; j < params.tensors[i].size(); ++j) {
            double g = grads[i].data[j];
            st.adam_m[i].data[j] = b1 * st.adam_m[i].data[j] + (1 - b1) * g;
            st.adam_v[i].data[j] = b2 * st.adam_v[i].data[j] + (1 - b2) * g * g;
            double mh = st.adam_m[i].data[j] / c1;
            double vh = st.adam_v[i].data[j] / c2;
            params.tensors[i].data[j] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
    }
}

bool grads_finite(const std::vector<Tensor>& grads) {
    for (const auto& g : grads)
        if (!g.all_finite()) return false;
    return true;
}

double subset_accuracy(const Network& net, const ParamSet& params, const Dataset& data,
                       const std::vector<std::int64_t>& idx, std::int64_t cap) {
    if (idx.empty()) return 0.0;
    std::vector<std::int64_t> use(idx.begin(), idx.begin() + std::min<std::int64_t>(cap, static_cast<std::int64_t>(idx.size())));
    return accuracy(net, params, data.gather_inputs(use), data.gather_labels(use));
}

}  // namespace

std::pair<ParamSet, TrainRecord> train(const Network& net, ParamSet params, const Dataset& data,
                                       const TrainConfig& cfg, const StepHook* hook) {
    check(!data.train_idx.empty(), Error::Kind::data, "train: empty training split");
    check(cfg.lr > 0 && cfg.epochs >= 1 && cfg.batch_size >= 1, Error::Kind::config, "train: bad optimizer settings");
    validate_penalties(cfg.penalties);

    const std::int64_t train_n = static_cast<std::int64_t>(data.train_idx.size());
    const std::int64_t steps_per_epoch = (train_n + cfg.batch_size - 1) / cfg.batch_size;

    const PenaltySpec* project = find_kind(cfg.penalties, PenaltySpec::Kind::sn_project);
    ContinuationConfig cont;
    if (project) {
        cont = project->continuation;
        cont.steps_per_epoch = static_cast<double>(steps_per_epoch);
    }

    TrainRecord rec;
    OptimizerState opt;
    SpectralState sn_state;
    Rng root(cfg.seed);
    ParamSet snapshot = params;  // last epoch-end state for divergence recovery

    std::int64_t t = 0;  // global step, 1-based at projection time
    double tau_t = std::numeric_limits<double>::quiet_NaN();

    for (int epoch = 0; epoch < cfg.epochs && !rec.diverged; ++epoch) {
        double lr = cfg.lr * std::pow(0.5, epoch / cfg.lr_halve_every);
        Rng shuffle_rng = root.split(0x5u + static_cast<std::uint64_t>(epoch));
        auto perm = shuffle_rng.permutation(train_n);

        double loss_sum = 0, base_sum = 0;
        std::map<std::string, double> part_sums;
        std::int64_t steps_done = 0;

        for (std::int64_t lo = 0; lo < train_n; lo += cfg.batch_size) {
            std::int64_t hi = std::min(lo + cfg.batch_size, train_n);
            std::vector<std::int64_t> idx;
            for (std::int64_t i = lo; i < hi; ++i) idx.push_back(data.train_idx[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
            Tensor batch = data.gather_inputs(idx);
            auto labels = data.gather_labels(idx);

            ++t;
            Rng step_rng = root.split(0x9000u + static_cast<std::uint64_t>(t));
            if (cfg.augment_deform) {
                Rng aug = step_rng.split(0xa06);
                batch = augment_batch(batch, cfg.augment_family, aug);
            }
            if (cfg.augment_mutate_p > 0) {
                Rng aug = step_rng.split(0xa07);
                for (std::int64_t bi = 0; bi < batch.shape[0]; ++bi)
                    batch.set_row(bi, mutate_sequence(batch.row(bi), cfg.augment_mutate_p, aug));
            }

            std::vector<PenaltySpec> step_penalties = cfg.penalties;
            for (auto& p : step_penalties) {
                if (p.ramp_epochs > 0 &&
                    (p.kind == PenaltySpec::Kind::pgd_robust || p.kind == PenaltySpec::Kind::adv)) {
                    double frac = std::min(1.0, static_cast<double>(t) /
                                                    (p.ramp_epochs * static_cast<double>(steps_per_epoch)));
                    p.attack.epsilon *= frac;
                }
            }
            Objective obj;
            bool ok = true;
            try {
                obj = compose_objective(net, params, cfg.loss, step_penalties, batch, labels, &sn_state, &step_rng,
                                        static_cast<double>(steps_per_epoch));
            } catch (const Error& e) {
                if (e.kind() != Error::Kind::divergence) throw;
                ok = false;
            }
            if (!ok || !std::isfinite(obj.value) || !grads_finite(obj.grads)) {
                params = snapshot;  // last good checkpoint
                rec.diverged = true;
                break;
            }

            apply_update(cfg, lr, opt, obj.grads, params);
            bool exploded = false;
            for (const auto& p : params.tensors)
                if (!p.all_finite()) exploded = true;
            if (exploded) {
                params = snapshot;
                rec.diverged = true;
                break;
            }
            if (project) {
                tau_t = continuation_tau(t, cont);
                project_params(params, tau_t);
            }
            if (hook) (*hook)(t, tau_t, params);

            loss_sum += obj.value;
            base_sum += obj.base_loss;
            for (const auto& [k, v] : obj.parts) part_sums[k] += v;
            ++steps_done;
        }
        if (rec.diverged) break;

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        st.loss = loss_sum / static_cast<double>(std::max<std::int64_t>(1, steps_done));
        st.base_loss = base_sum / static_cast<double>(std::max<std::int64_t>(1, steps_done));
        for (const auto& [k, v] : part_sums) st.penalty_values[k] = v / static_cast<double>(std::max<std::int64_t>(1, steps_done));
        try {
            st.train_acc = subset_accuracy(net, params, data, data.train_idx, 512);
            st.val_acc = subset_accuracy(net, params, data, data.val_idx, 2048);
        } catch (const Error& e) {
            if (e.kind() != Error::Kind::divergence) throw;
            params = snapshot;
            rec.diverged = true;
            break;
        }
        st.layer_norms = layer_spectral_norms(params);
        if (project) st.tau = tau_t;
        rec.epochs.push_back(std::move(st));

        if (rec.epochs.back().val_acc >= rec.best_val_acc || rec.best_epoch < 0) {
            rec.best_val_acc = rec.epochs.back().val_acc;
            rec.best_epoch = epoch;
            rec.best_params = params;
        }
        snapshot = params;
    }

    rec.steps = t;
    if (rec.best_epoch < 0) {
        rec.best_params = params;
        rec.best_epoch = 0;
    }

    // post-training lower/upper chain check on a training sample
    if (!rec.diverged) {
        std::int64_t sample_n = std::min<std::int64_t>(128, train_n);
        std::vector<std::int64_t> idx(data.train_idx.begin(), data.train_idx.begin() + sample_n);
        Tensor sample = data.gather_inputs(idx);
        double eps = 0.25;
        AttackConfig probe{eps, 10, 0, Geometry::l2, false};
        AdvPenalty pen = adv_penalty(net, params, sample, probe);
        double upper = spectral_norm_product(params);
        rec.report_upper = upper;
        rec.chain_checked = true;
        rec.chain_ok = true;
        double max_lower = 0;
        for (double gap : pen.class_gaps) {
            double lower = gap / eps;
            max_lower = std::max(max_lower, lower);
            if (lower > upper + 1e-6) rec.chain_ok = false;
        }
        rec.report_lower = max_lower;
        check(rec.chain_ok, Error::Kind::internal,
              "trained model violates the lower<=upper norm chain: lower=" + std::to_string(max_lower) +
                  " upper=" + std::to_string(upper));
    }
    return {std::move(params), std::move(rec)};
}

GridResult grid_search(const NetworkSpec& spec, const Dataset& data, const std::vector<GridPoint>& grid) {
    check(!grid.empty(), Error::Kind::config, "grid_search: empty grid");
    GridResult res;
    double best = -1;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        auto [net, params] = build_network(spec, grid[gi].cfg.seed);
        auto [final_params, rec] = train(net, std::move(params), data, grid[gi].cfg);
        (void)final_params;
        GridRow row;
        row.label = grid[gi].label;
        row.best_val_acc = rec.best_val_acc;
        row.best_epoch = rec.best_epoch;
        row.diverged = rec.diverged;
        row.final_train_loss = rec.epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : rec.epochs.back().loss;
        if (!data.test_idx.empty())
            row.test_acc = accuracy(net, rec.best_params, data.gather_inputs(data.test_idx),
                                    data.gather_labels(data.test_idx));
        res.table.push_back(row);
        if (row.best_val_acc > best) {
            best = row.best_val_acc;
            res.best_index = static_cast<int>(gi);
        }
    }
    return res;
}

}  // namespace kernreg
