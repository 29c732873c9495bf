#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "kernreg/network.hpp"
#include "kernreg/rng.hpp"
#include "kernreg/tensor.hpp"

namespace kernreg {

// l2 pairs euclidean perturbation balls with euclidean gradient norms; linf
// pairs sup-norm balls with the dual l1 gradient norm.
enum class Geometry { l2, linf };

Geometry geometry_from_name(const std::string& s);
std::string geometry_name(Geometry g);

struct AttackConfig {
    double epsilon = 0.1;
    int steps = 5;          // 5 for training, 40 for evaluation
    double step_size = 0;   // 0 picks the default rule below
    Geometry geometry = Geometry::l2;
    bool random_start = false;

    // Constant ascent step traversing the ball: 2*eps/steps for l2,
    // 2.5*eps/steps per coordinate for linf.
    double effective_step() const;

    static AttackConfig train_default(double eps, Geometry geom = Geometry::l2) { return {eps, 5, 0, geom, false}; }
    static AttackConfig eval_default(double eps, Geometry geom = Geometry::l2) { return {eps, 40, 0, geom, false}; }
};

// Per-class witness of the maximized perturbation gap.
struct AdvWitness {
    std::int64_t example = -1;
    Tensor x;       // clean input (no batch axis)
    Tensor delta;   // maximizing perturbation
    double gap = 0; // f_k(x+delta) - f_k(x), >= 0
};

struct AdvPenalty {
    double value = 0;                 // sum_k gap_k^2 (or sum_k gap_k when not squared)
    std::vector<double> class_gaps;   // per-class ||f_k||_delta estimates
    std::vector<AdvWitness> witnesses;
    bool squared = true;
};

// Maximizes f_k(x+delta) - f_k(x) over the batch and the epsilon-ball with
// projected gradient ascent, separately per class. warm_deltas (optional,
// in/out, one (n, input) tensor per class) carries ascent iterates across
// calls so nested-epsilon sweeps stay monotone.
AdvPenalty adv_penalty(const Network& net, const ParamSet& params, const Tensor& batch, const AttackConfig& cfg,
                       bool squared = true, std::vector<Tensor>* warm_deltas = nullptr);

// Parameter gradients of the penalty with witnesses frozen.
std::vector<Tensor> adv_penalty_param_grad(const Network& net, const ParamSet& params, const AdvPenalty& pen);

struct GradNormPenalty {
    double value = 0;                    // sum_k (max_i ||grad_x f_k(x_i)||_dual)^2
    std::vector<double> class_norms;     // max-over-batch dual norms per class
    std::vector<std::int64_t> witnesses; // maximizing example per class
    Geometry geometry = Geometry::l2;
};

GradNormPenalty grad_norm_penalty(const Network& net, const ParamSet& params, const Tensor& batch, Geometry geom);
std::vector<Tensor> grad_norm_param_grad(const Network& net, const ParamSet& params, const Tensor& batch,
                                         const GradNormPenalty& pen);

// Projected gradient ascent on the loss around labeled examples. Keeps the
// best iterate per example (delta=0 is always a candidate), so the returned
// perturbation never decreases the loss.
Tensor pgd_attack(const Network& net, const ParamSet& params, LossKind kind, const Tensor& x,
                  const std::vector<std::int64_t>& y, const AttackConfig& cfg, const Tensor* warm = nullptr,
                  Rng* rng = nullptr);

// Mean over the batch of ||grad_x loss||^2 (l2) or ||grad_x loss||_1 (linf),
// optionally with parameter gradients via double backpropagation.
std::pair<double, std::vector<Tensor>> loss_grad_penalty(const Network& net, const ParamSet& params,
                                                         const Tensor& batch, const std::vector<std::int64_t>& labels,
                                                         LossKind kind, Geometry geom, bool with_grad);

}  // namespace kernreg
