#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kernreg/perturbation.hpp"
#include "kernreg/spectral.hpp"
#include "testutil.hpp"

using namespace kernreg;
using namespace kernreg::testutil;

namespace {

// one-output linear model with fixed weights
std::pair<Network, ParamSet> linear_model(const std::vector<double>& w) {
    auto [net, params] = build_network(preset_linear(static_cast<std::int64_t>(w.size()), 1), 0);
    for (std::size_t i = 0; i < w.size(); ++i) params.tensors[0].data[i] = w[i];
    return {std::move(net), std::move(params)};
}

}  // namespace

TEST_CASE("adv_penalty: closed forms on linear models") {
    auto [net, params] = linear_model({3.0, 4.0});
    Rng rng(3);
    Tensor batch = random_tensor({5, 2}, rng);

    // epsilon = 0: empty ball
    AdvPenalty p0 = adv_penalty(net, params, batch, AttackConfig::eval_default(0.0));
    CHECK(p0.value == 0.0);

    // l2: ||f||_delta = eps * ||w||_2 = 0.5 * 5, penalty (eps||w||)^2, batch independent
    AdvPenalty p = adv_penalty(net, params, batch, AttackConfig::eval_default(0.5));
    CHECK(p.class_gaps[0] == doctest::Approx(2.5).epsilon(1e-6));
    CHECK(p.value == doctest::Approx(6.25).epsilon(1e-6));
    Tensor other = random_tensor({3, 2}, rng, 10.0);
    AdvPenalty p2 = adv_penalty(net, params, other, AttackConfig::eval_default(0.5));
    CHECK(p2.class_gaps[0] == doctest::Approx(2.5).epsilon(1e-6));

    // linf: ||f||_delta = eps * ||w||_1
    auto [net3, params3] = linear_model({3.0, -4.0});
    AdvPenalty p3 = adv_penalty(net3, params3, batch, AttackConfig::eval_default(0.1, Geometry::linf));
    CHECK(p3.class_gaps[0] == doctest::Approx(0.7).epsilon(1e-6));

    // scale equivariance: doubling w doubles the gap exactly
    auto [net4, params4] = linear_model({6.0, 8.0});
    AdvPenalty p4 = adv_penalty(net4, params4, batch, AttackConfig::eval_default(0.5));
    CHECK(p4.class_gaps[0] == doctest::Approx(2 * p.class_gaps[0]).epsilon(1e-9));
}

TEST_CASE("adv_penalty: monotone in epsilon with warm starts") {
    Rng rng(7);
    auto [net, params] = build_network(preset_mlp(4, {6}, 3), 11);
    Tensor batch = random_tensor({6, 4}, rng);
    std::vector<Tensor> warm;
    double prev = -1;
    for (double eps : {0.05, 0.1, 0.2, 0.4, 0.8}) {
        AdvPenalty p = adv_penalty(net, params, batch, AttackConfig::train_default(eps), true, &warm);
        CHECK(p.value >= prev - 1e-12);
        prev = p.value;
    }
}

TEST_CASE("adv_penalty: witnesses and squared flag") {
    Rng rng(13);
    auto [net, params] = build_network(preset_mlp(3, {5}, 2), 17);
    Tensor batch = random_tensor({4, 3}, rng);
    AttackConfig cfg = AttackConfig::train_default(0.3);

    AdvPenalty sq = adv_penalty(net, params, batch, cfg, true);
    AdvPenalty lin = adv_penalty(net, params, batch, cfg, false);
    double sum_sq = 0, sum_lin = 0;
    for (std::size_t k = 0; k < sq.class_gaps.size(); ++k) {
        sum_sq += sq.class_gaps[k] * sq.class_gaps[k];
        sum_lin += lin.class_gaps[k];
        CHECK(sq.class_gaps[k] >= 0.0);
        // witness reproduces its gap
        const AdvWitness& w = sq.witnesses[k];
        Tensor xa = predict(net, params, (w.x + w.delta).reshaped({1, 3}));
        Tensor xb = predict(net, params, w.x.reshaped({1, 3}));
        CHECK(xa.data[k] - xb.data[k] == doctest::Approx(w.gap).epsilon(1e-9));
        CHECK(l2_norm(w.delta) <= cfg.epsilon + 1e-9);
    }
    CHECK(sq.value == doctest::Approx(sum_sq).epsilon(1e-12));
    CHECK(lin.value == doctest::Approx(sum_lin).epsilon(1e-12));
}

TEST_CASE("adv_penalty parameter gradient: frozen witnesses match finite differences") {
    Rng rng(19);
    auto [net, params] = build_network(preset_mlp(3, {4}, 2, /*softplus=*/true, 6.0), 23);
    Tensor batch = random_tensor({3, 3}, rng);
    AttackConfig cfg = AttackConfig::train_default(0.25);
    AdvPenalty pen = adv_penalty(net, params, batch, cfg);
    auto grads = adv_penalty_param_grad(net, params, pen);

    // finite differences of sum_k (f_k(x+d)-f_k(x))^2 at the frozen witnesses
    for (std::size_t li = 0; li < params.count(); ++li) {
        ParamSet p2 = params;
        Tensor fd = fd_gradient(
            [&](const Tensor& w) {
                p2.tensors[li] = w;
                double acc = 0;
                for (std::size_t k = 0; k < pen.witnesses.size(); ++k) {
                    const AdvWitness& wt = pen.witnesses[k];
                    if (wt.gap <= 0) continue;
                    Tensor a = predict(net, p2, (wt.x + wt.delta).reshaped({1, 3}));
                    Tensor b = predict(net, p2, wt.x.reshaped({1, 3}));
                    double gap = a.data[k] - b.data[k];
                    acc += gap * gap;
                }
                return acc;
            },
            params.tensors[li]);
        CHECK(rel_err(grads[li], fd) < 1e-6);
    }
}

TEST_CASE("grad_norm_penalty: linear and quadratic fixtures") {
    // linear model: ||w||_2^2 per class regardless of the batch
    auto [net, params] = linear_model({1.0, -2.0, 2.0});
    Rng rng(29);
    Tensor batch = random_tensor({7, 3}, rng);
    GradNormPenalty pen = grad_norm_penalty(net, params, batch, Geometry::l2);
    CHECK(pen.value == doctest::Approx(9.0).epsilon(1e-12));
    // linf geometry measures the dual l1 norm
    GradNormPenalty pen1 = grad_norm_penalty(net, params, batch, Geometry::linf);
    CHECK(pen1.value == doctest::Approx(25.0).epsilon(1e-12));

    // f(x) = ||x||^2/2 has gradient x: batch {(1,0),(0,2)} -> max ||grad||^2 = 4.
    // Realized as a deep quadratic via graph check in the module test below;
    // here the closed form uses input_gradient directly.
    Graph g;
    int x = g.input("x", {2, 2});
    int root = g.scale(g.sum_all(g.square(x)), 0.5);
    int gx = g.grad_node(root, x);
    Tensor b({2, 2}, {1.0, 0.0, 0.0, 2.0});
    Tensor got = g.eval(gx, {{"x", b}});
    double m = 0;
    for (std::int64_t i = 0; i < 2; ++i) {
        double nrm = got.data[i * 2] * got.data[i * 2] + got.data[i * 2 + 1] * got.data[i * 2 + 1];
        m = std::max(m, nrm);
    }
    CHECK(m == doctest::Approx(4.0).epsilon(1e-12));

    // scale equivariance: doubling w doubles max ||grad f||_2
    auto [net2, params2] = linear_model({2.0, -4.0, 4.0});
    GradNormPenalty pen2 = grad_norm_penalty(net2, params2, batch, Geometry::l2);
    CHECK(std::sqrt(pen2.value) == doctest::Approx(2 * std::sqrt(pen.value)).epsilon(1e-12));
}

TEST_CASE("grad_norm_penalty: bounded by spectral product on matrix-layer nets") {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
        auto [net, params] = build_network(preset_mlp(4, {5}, 2), 100 + t);
        Tensor batch = random_tensor({8, 4}, rng);
        GradNormPenalty pen = grad_norm_penalty(net, params, batch, Geometry::l2);
        double bound = spectral_norm_product(params);
        for (double cn : pen.class_norms) CHECK(cn <= bound + 1e-6);
    }
}

TEST_CASE("grad_norm parameter gradient matches finite differences (witness frozen)") {
    Rng rng(37);
    auto [net, params] = build_network(preset_mlp(3, {4}, 2, true, 5.0), 41);
    Tensor batch = random_tensor({4, 3}, rng);
    GradNormPenalty pen = grad_norm_penalty(net, params, batch, Geometry::l2);
    auto grads = grad_norm_param_grad(net, params, batch, pen);
    for (std::size_t li = 0; li < params.count(); ++li) {
        ParamSet p2 = params;
        Tensor fd = fd_gradient(
            [&](const Tensor& w) {
                p2.tensors[li] = w;
                double acc = 0;
                for (std::size_t k = 0; k < pen.witnesses.size(); ++k) {
                    Tensor gx = input_gradient(net, p2, batch.row(pen.witnesses[k]), static_cast<std::int64_t>(k));
                    acc += dot(gx, gx);
                }
                return acc;
            },
            params.tensors[li]);
        CHECK(rel_err(grads[li], fd) < 1e-4);
    }
}

TEST_CASE("pgd_attack: closed-form worst cases on linear models") {
    Rng rng(43);
    auto [net, params] = linear_model({2.0, -1.0, 0.5});
    Tensor w = params.tensors[0];
    double wn = l2_norm(w);

    // eps = 0 -> zero perturbation
    Tensor x0 = random_tensor({2, 3}, rng);
    Tensor d0 = pgd_attack(net, params, LossKind::hinge, x0, {1, -1}, AttackConfig::eval_default(0.0));
    CHECK(max_abs(d0) == 0.0);

    // hinge in the active region: delta* = -eps*y*w/||w|| and the loss
    // increase is exactly eps*||w||
    for (int t = 0; t < 20; ++t) {
        Tensor x = random_tensor({1, 3}, rng);
        std::int64_t y = t % 2 == 0 ? 1 : -1;
        double f = dot(x, w.reshaped({3}).reshaped({1, 3}));
        double eps = 0.3;
        if (y * f >= 1 - eps * wn - 0.05) continue;  // stay inside the linear region
        Tensor d = pgd_attack(net, params, LossKind::hinge, x, {y}, AttackConfig::eval_default(eps));
        Tensor want = (-eps * static_cast<double>(y) / wn) * w.reshaped({1, 3});
        CHECK(max_abs(d - want) < 1e-9);
        double clean = std::max(0.0, 1.0 - y * f);
        double robust = loss_value(LossKind::hinge, predict(net, params, x + d), {y});
        CHECK(robust == doctest::Approx(clean + eps * wn).epsilon(1e-9));
        CHECK(robust == doctest::Approx(std::max(0.0, 1.0 - y * f + eps * wn)).epsilon(1e-9));
    }

    // linf + logistic: delta* = -eps*y*sign(w) per coordinate
    for (int t = 0; t < 10; ++t) {
        Tensor x = random_tensor({1, 3}, rng);
        std::int64_t y = t % 2 == 0 ? 1 : -1;
        double eps = 0.2;
        Tensor d = pgd_attack(net, params, LossKind::logistic, x, {y}, AttackConfig::eval_default(eps, Geometry::linf));
        for (std::int64_t j = 0; j < 3; ++j) {
            double want = -eps * static_cast<double>(y) * (w.data[j] > 0 ? 1.0 : -1.0);
            CHECK(d.data[j] == doctest::Approx(want).epsilon(1e-6));
        }
    }
}

TEST_CASE("pgd_attack never returns a worse point than delta = 0") {
    Rng rng(47);
    auto [net, params] = build_network(preset_mlp(4, {6}, 3), 53);
    Tensor x = random_tensor({8, 4}, rng);
    std::vector<std::int64_t> y;
    for (int i = 0; i < 8; ++i) y.push_back(rng.below(3));
    for (double eps : {0.1, 0.5, 2.0}) {
        Tensor d = pgd_attack(net, params, LossKind::cross_entropy, x, y, AttackConfig::train_default(eps));
        auto clean = loss_per_example(LossKind::cross_entropy, predict(net, params, x), y);
        auto pert = loss_per_example(LossKind::cross_entropy, predict(net, params, x + d), y);
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(pert[i] >= clean[i] - 1e-12);
    }
}

TEST_CASE("hinge robust value equals the exact identity against sufficient-step pgd") {
    Rng rng(59);
    auto [net, params] = linear_model({1.5, -2.5});
    Tensor w = params.tensors[0];
    double wn = l2_norm(w);
    for (int t = 0; t < 30; ++t) {
        Tensor x = random_tensor({1, 2}, rng);
        std::int64_t y = t % 2 == 0 ? 1 : -1;
        double f = w.data[0] * x.data[0] + w.data[1] * x.data[1];
        if (y * f >= 1) continue;  // spec case: y<w,x> < 1
        double eps = 0.25;
        Tensor d = pgd_attack(net, params, LossKind::hinge, x, {y}, AttackConfig::eval_default(eps));
        double robust = loss_value(LossKind::hinge, predict(net, params, x + d), {y});
        double identity = std::max(0.0, 1.0 - y * f + eps * wn);
        CHECK(std::abs(robust - identity) < 1e-9);
    }
}

TEST_CASE("loss_grad_penalty: flat regions, logistic slope, first-order expansion") {
    // hinge with y*f > 1 on a linear model: exactly flat, penalty 0
    auto [net, params] = linear_model({1.0, 1.0});
    Tensor x({1, 2}, {2.0, 2.0});  // f = 4, y = 1
    auto [flat, fg] = loss_grad_penalty(net, params, x, {1}, LossKind::hinge, Geometry::l2, true);
    CHECK(flat == 0.0);
    for (const auto& g : fg) CHECK(max_abs(g) == 0.0);

    // logistic at y*f = 0: gradient slope 1/2, penalty ||w||^2/4
    auto [net2, params2] = linear_model({3.0, 4.0});
    Tensor x0({1, 2}, {0.0, 0.0});
    auto [lg, lgg] = loss_grad_penalty(net2, params2, x0, {1}, LossKind::logistic, Geometry::l2, false);
    (void)lgg;
    CHECK(lg == doctest::Approx(25.0 / 4.0).epsilon(1e-12));

    // small-eps prediction: robust_loss ~= loss + eps*grad_norm, error o(eps)
    Rng rng(61);
    auto [net3, params3] = build_network(preset_mlp(3, {5}, 1, true, 4.0), 67);
    Tensor xb = random_tensor({4, 3}, rng);
    std::vector<std::int64_t> yb{1, -1, 1, -1};
    double clean = loss_value(LossKind::logistic, predict(net3, params3, xb), yb);
    auto residual = [&](double eps) {
        Tensor d = pgd_attack(net3, params3, LossKind::logistic, xb, yb, AttackConfig::eval_default(eps));
        double robust = loss_value(LossKind::logistic, predict(net3, params3, xb + d), yb);
        // mean gradient-norm first-order model
        auto fw = net3.build_forward(4);
        int ls = append_loss_sum(fw.g, LossKind::logistic, fw.logits, yb);
        int gx = fw.g.grad_node(ls, fw.x);
        Tensor g = fw.g.eval(gx, net3.bind(params3, xb));
        double mean_gn = 0;
        for (std::int64_t i = 0; i < 4; ++i) {
            double nr = 0;
            for (std::int64_t j = 0; j < 3; ++j) nr += g.data[i * 3 + j] * g.data[i * 3 + j];
            mean_gn += std::sqrt(nr);
        }
        mean_gn /= 4;
        return std::abs(robust - (clean + eps * mean_gn));
    };
    double e1 = residual(0.1), e2 = residual(0.05);
    CHECK(e2 <= 0.6 * e1 + 1e-12);  // superlinear shrink: o(eps)
}

TEST_CASE("loss_grad_penalty parameter gradients match finite differences") {
    Rng rng(71);
    auto [net, params] = build_network(preset_mlp(3, {4}, 2, true, 5.0), 73);
    Tensor batch = random_tensor({3, 3}, rng);
    std::vector<std::int64_t> labels{0, 1, 0};
    for (Geometry geom : {Geometry::l2, Geometry::linf}) {
        auto [value, grads] = loss_grad_penalty(net, params, batch, labels, LossKind::cross_entropy, geom, true);
        (void)value;
        for (std::size_t li = 0; li < params.count(); ++li) {
            ParamSet p2 = params;
            Tensor fd = fd_gradient(
                [&](const Tensor& w) {
                    p2.tensors[li] = w;
                    return loss_grad_penalty(net, p2, batch, labels, LossKind::cross_entropy, geom, false).first;
                },
                params.tensors[li]);
            CHECK(rel_err(grads[li], fd) < 1e-4);
        }
    }
}

TEST_CASE("lower bound chain: per-class gap and gradient norms under the spectral product") {
    Rng rng(79);
    for (int t = 0; t < 20; ++t) {
        auto [net, params] = build_network(preset_mlp(4, {6, 5}, 3), 200 + t);
        Tensor batch = random_tensor({6, 4}, rng);
        double eps = 0.5;
        AdvPenalty adv = adv_penalty(net, params, batch, AttackConfig::train_default(eps));
        GradNormPenalty gn = grad_norm_penalty(net, params, batch, Geometry::l2);
        double upper = spectral_norm_product(params);
        for (std::size_t k = 0; k < adv.class_gaps.size(); ++k) {
            CHECK(adv.class_gaps[k] / eps <= upper + 1e-6);
            CHECK(gn.class_norms[k] <= upper + 1e-6);
        }
    }
}
