#include "kernreg/evaluation.hpp"

#include <algorithm>
#include <cmath>

namespace kernreg {

bool NormReport::chain_ok(double tol) const {
    for (double l : lower_per_class)
        if (l > upper + tol) return false;
    return true;
}

NormReport norm_report(const Network& net, const ParamSet& params, const Tensor& sample, double epsilon,
                       int attack_steps) {
    check(epsilon > 0, Error::Kind::config, "norm_report: epsilon must be positive");
    NormReport rep;
    rep.epsilon = epsilon;
    rep.per_layer = layer_spectral_norms(params);
    rep.upper = 1;
    for (double s : rep.per_layer) rep.upper *= s;

    AttackConfig cfg = AttackConfig::eval_default(epsilon);
    cfg.steps = attack_steps;
    AdvPenalty pen = adv_penalty(net, params, sample, cfg);
    double acc = 0;
    for (double gap : pen.class_gaps) {
        double l = gap / epsilon;
        rep.lower_per_class.push_back(l);
        acc += l * l;
    }
    rep.lower = std::sqrt(acc);
    return rep;
}

namespace {

std::vector<char> fooled_mask(const Network& net, const ParamSet& params, const Tensor& inputs,
                              const std::vector<std::int64_t>& labels, const Tensor& delta) {
    Tensor x = inputs;
    for (std::int64_t i = 0; i < x.size(); ++i) x.data[i] += delta.data[i];
    Tensor logits = predict(net, params, x);
    auto pred = predicted_labels(net, logits, net.n_outputs() == 1);
    std::vector<char> fooled(labels.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) fooled[i] = pred[i] != labels[i];
    return fooled;
}

}  // namespace

double robust_accuracy(const Network& net, const ParamSet& params, const Tensor& inputs,
                       const std::vector<std::int64_t>& labels, LossKind kind, const AttackConfig& cfg) {
    check(!labels.empty(), Error::Kind::data, "robust_accuracy: empty dataset");
    // ascend a smooth surrogate: the hinge plateau (y*f > 1) has zero gradient
    // and would leave flippable points unattacked
    LossKind attack_kind = kind == LossKind::hinge ? LossKind::logistic : kind;
    Tensor delta = cfg.epsilon > 0 ? pgd_attack(net, params, attack_kind, inputs, labels, cfg)
                                   : Tensor::zeros(inputs.shape);
    auto fooled = fooled_mask(net, params, inputs, labels, delta);
    std::int64_t good = 0;
    for (char f : fooled) good += f ? 0 : 1;
    return static_cast<double>(good) / static_cast<double>(labels.size());
}

std::vector<std::pair<double, double>> robust_accuracy_sweep(const Network& net, const ParamSet& params,
                                                             const Tensor& inputs,
                                                             const std::vector<std::int64_t>& labels, LossKind kind,
                                                             std::vector<double> eps_grid, int steps, Geometry geom) {
    std::sort(eps_grid.begin(), eps_grid.end());
    std::vector<std::pair<double, double>> out;
    std::vector<char> ever_fooled(labels.size(), 0);
    Tensor warm = Tensor::zeros(inputs.shape);
    for (double eps : eps_grid) {
        if (eps > 0) {
            AttackConfig cfg{eps, steps, 0, geom, false};
            LossKind attack_kind = kind == LossKind::hinge ? LossKind::logistic : kind;
            Tensor delta = pgd_attack(net, params, attack_kind, inputs, labels, cfg, &warm);
            warm = delta;
            auto fooled = fooled_mask(net, params, inputs, labels, delta);
            for (std::size_t i = 0; i < fooled.size(); ++i) ever_fooled[i] |= fooled[i];
        } else {
            auto fooled = fooled_mask(net, params, inputs, labels, Tensor::zeros(inputs.shape));
            for (std::size_t i = 0; i < fooled.size(); ++i) ever_fooled[i] |= fooled[i];
        }
        std::int64_t good = 0;
        for (char f : ever_fooled) good += f ? 0 : 1;
        out.emplace_back(eps, static_cast<double>(good) / static_cast<double>(labels.size()));
    }
    return out;
}

std::vector<double> raw_margins(const Network& net, const ParamSet& params, const Tensor& inputs,
                                const std::vector<std::int64_t>& labels) {
    Tensor logits = predict(net, params, inputs);
    std::int64_t n = logits.shape[0], k = logits.shape[1];
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t y = labels[static_cast<std::size_t>(i)];
        if (net.n_outputs() == 1) {
            check(y == 1 || y == -1, Error::Kind::data, "raw_margins: binary labels must be +-1");
            out[static_cast<std::size_t>(i)] = static_cast<double>(y) * logits.data[i];
        } else {
            check(y >= 0 && y < k, Error::Kind::data, "raw_margins: label out of range");
            double own = logits.data[i * k + y];
            double other = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < k; ++j)
                if (j != y) other = std::max(other, logits.data[i * k + j]);
            out[static_cast<std::size_t>(i)] = own - other;
        }
    }
    return out;
}

MarginReport margin_cdf(const Network& net, const ParamSet& params, const Tensor& inputs,
                        const std::vector<std::int64_t>& labels, MarginProxy proxy, const NormReport& report) {
    MarginReport rep;
    rep.proxy = proxy == MarginProxy::f_delta ? report.lower : report.upper;
    rep.proxy_tag = proxy == MarginProxy::f_delta ? "f_delta" : "spectral_product";
    check(rep.proxy > 0, Error::Kind::data,
          "margin_cdf: cannot normalize margins by a zero " + rep.proxy_tag + " proxy");

    auto raw = raw_margins(net, params, inputs, labels);
    for (double r : raw) rep.records.push_back({r, r / rep.proxy, 0});
    std::sort(rep.records.begin(), rep.records.end(),
              [](const MarginRecord& a, const MarginRecord& b) { return a.normalized < b.normalized; });
    std::int64_t n = static_cast<std::int64_t>(rep.records.size());
    for (std::int64_t i = 0; i < n; ++i)
        rep.records[static_cast<std::size_t>(i)].cdf = static_cast<double>(i + 1) / static_cast<double>(n);
    return rep;
}

MarginBound margin_bound(const std::vector<double>& raw, double norm_n, double epsilon, double gamma, double b_bar,
                         double confidence_delta, double c1, double c2) {
    check(gamma > 0, Error::Kind::config, "margin_bound: gamma must be positive");
    check(epsilon >= 0, Error::Kind::config, "margin_bound: epsilon must be nonnegative");
    check(norm_n > 0, Error::Kind::config, "margin_bound: norm must be positive");
    check(!raw.empty(), Error::Kind::data, "margin_bound: no margins");
    check(confidence_delta > 0 && confidence_delta < 1, Error::Kind::config,
          "margin_bound: confidence must be in (0,1)");

    MarginBound mb;
    mb.c1 = c1;
    mb.c2 = c2;
    double n = static_cast<double>(raw.size());
    double threshold = gamma + 2.0 * epsilon * norm_n;
    std::int64_t count = 0;
    for (double r : raw)
        if (r < threshold) ++count;
    mb.first_term = static_cast<double>(count) / n;
    mb.complexity_term = c1 * norm_n * b_bar / (gamma * std::sqrt(n)) + c2 * std::sqrt(std::log(1.0 / confidence_delta) / n);
    mb.value = mb.first_term + mb.complexity_term;
    mb.value_clamped = std::clamp(mb.value, 0.0, 1.0);
    return mb;
}

}  // namespace kernreg
