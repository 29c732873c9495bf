#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kernreg/data_io.hpp"
#include "kernreg/deformation.hpp"
#include "kernreg/network.hpp"
#include "kernreg/perturbation.hpp"
#include "kernreg/spectral.hpp"

namespace kernreg {

// One regularizer in an objective. pgd_robust replaces the clean loss term;
// everything else adds lambda-weighted penalties. At most one sn_project.
struct PenaltySpec {
    enum class Kind {
        weight_decay,
        sn_penalty,
        sn_project,
        adv,
        grad_norm,
        loss_grad,
        pgd_robust,
        deform_adv,
        tangent_prop
    };
    Kind kind = Kind::weight_decay;
    double lambda = 0;

    SnMethod sn_method;            // sn_penalty
    ContinuationConfig continuation;  // sn_project (steps_per_epoch filled by the trainer)
    AttackConfig attack;           // adv, pgd_robust
    Geometry geometry = Geometry::l2;  // grad_norm, loss_grad
    DeformFamily family;           // deform_adv, tangent_prop
    int m = 32;                    // deform_adv samples per example
    int q = 30;                    // tangent_prop tangents per example
    bool squared = true;           // adv: penalize the squared bound
    double ramp_epochs = 0;        // attack-radius warmup for pgd_robust/adv (0 = off)

    static PenaltySpec weight_decay(double lambda);
    static PenaltySpec sn_penalty(double lambda, SnMethod m = {});
    static PenaltySpec sn_project(double tau0, double kappa_epochs);
    static PenaltySpec adv(double lambda, AttackConfig cfg, bool squared = true);
    static PenaltySpec grad_norm(double lambda, Geometry g = Geometry::l2);
    static PenaltySpec loss_grad(double lambda, Geometry g = Geometry::l2);
    static PenaltySpec pgd_robust(AttackConfig cfg);
    static PenaltySpec deform_adv(double lambda, DeformFamily family, int m = 32);
    static PenaltySpec tangent_prop(double lambda, DeformFamily family, int q = 30);

    std::string name() const;
};

struct TrainConfig {
    enum class Optimizer { sgd, adam };
    Optimizer optimizer = Optimizer::sgd;
    double lr = 0.05;
    double momentum = 0.9;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int epochs = 10;
    std::int64_t batch_size = 32;
    int lr_halve_every = 40;  // epochs
    std::uint64_t seed = 0;
    LossKind loss = LossKind::cross_entropy;
    std::vector<PenaltySpec> penalties;
    bool augment_deform = false;
    DeformFamily augment_family;
    double augment_mutate_p = 0;  // one-hot sequence mutation rate (0 = off)
};

struct EpochStats {
    int epoch = 0;
    double lr = 0;
    double loss = 0;       // mean composed objective over the epoch's steps
    double base_loss = 0;  // clean (or robust) loss term alone
    double train_acc = 0;
    double val_acc = 0;
    std::map<std::string, double> penalty_values;  // epoch means per penalty
    std::vector<double> layer_norms;               // exact per-layer spectral norms
    double tau = std::numeric_limits<double>::quiet_NaN();  // present iff sn_project
};

struct TrainRecord {
    std::vector<EpochStats> epochs;
    bool diverged = false;
    int best_epoch = -1;
    double best_val_acc = 0;
    ParamSet best_params;
    std::int64_t steps = 0;
    // post-training lower/upper report on a training sample
    double report_lower = 0, report_upper = 0;
    bool chain_checked = false, chain_ok = false;
};

// Per-step instrumentation (step index from 1, tau_t, params after the step).
using StepHook = std::function<void(std::int64_t, double, const ParamSet&)>;

struct Objective {
    double value = 0;
    double base_loss = 0;
    std::map<std::string, double> parts;
    std::vector<Tensor> grads;
};

// Scalar objective and its exact parameter gradient with all inner maximizers
// frozen at their witnesses. rng drives penalty sampling (deformations).
Objective compose_objective(const Network& net, const ParamSet& params, LossKind loss,
                            const std::vector<PenaltySpec>& penalties, const Tensor& batch,
                            const std::vector<std::int64_t>& labels, SpectralState* sn_state, Rng* rng,
                            double steps_per_epoch = 1);

std::pair<ParamSet, TrainRecord> train(const Network& net, ParamSet params, const Dataset& data,
                                       const TrainConfig& cfg, const StepHook* hook = nullptr);

struct GridPoint {
    std::string label;
    TrainConfig cfg;
};

struct GridRow {
    std::string label;
    double best_val_acc = 0;
    int best_epoch = -1;
    double test_acc = 0;
    double final_train_loss = 0;
    bool diverged = false;
};

struct GridResult {
    std::vector<GridRow> table;
    int best_index = -1;
};

// Trains every grid point from the same initialization seed and selects by
// validation accuracy at the best recorded epoch.
GridResult grid_search(const NetworkSpec& spec, const Dataset& data, const std::vector<GridPoint>& grid);

// Default per-method hyperparameter grids shipped with the experiments.
namespace grids {
// image benchmark, small subsets
inline const std::vector<double> kCifarWeightDecay{0, 1e-4, 2e-4, 4e-4, 8e-4, 1e-3, 2e-3};
inline const std::vector<double> kCifarSnPenalty{0.001, 0.003, 0.01, 0.03, 0.1, 0.3};
inline const std::vector<double> kCifarSnProjectTau{0.5, 0.6, 0.8, 1.0, 1.2, 1.4};
inline const std::vector<double> kCifarAdv{0.001, 0.003, 0.01, 0.03, 0.1};
inline const std::vector<double> kCifarGradNorm{3e-5, 1e-4, 3e-4, 0.001, 0.003, 0.01, 0.03};
inline const std::vector<double> kCifarPgdL2Eps{0.003, 0.01, 0.03, 0.1, 0.3, 1.0};
inline const std::vector<double> kCifarPgdLinfEps{0.001, 0.003, 0.01, 0.03, 0.1, 0.3};
inline const std::vector<double> kCifarLossGradL2{0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0};
inline const std::vector<double> kCifarLossGradL1{1e-4, 3e-4, 0.001, 0.003, 0.01, 0.03};
inline const std::vector<double> kCifarLr{0.003, 0.01, 0.03, 0.1};

// deformed-digit benchmark
inline const std::vector<double> kMnistWeightDecay{0, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 0.01, 0.03, 0.1};
inline const std::vector<double> kMnistSnProjectTau{1.0, 1.2, 1.4, 1.6, 1.8};
inline const std::vector<double> kMnistLossGradL2{0.1, 0.3, 1.0, 3.0, 10.0};
inline const std::vector<double> kMnistAdv{0.1, 0.3, 1.0, 3.0};
inline const std::vector<double> kMnistGradNorm{3e-4, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3};
inline const std::vector<double> kMnistTangentProp{0.003, 0.01, 0.03, 0.1, 0.3};
inline const std::vector<double> kMnistDeformAdv{0.03, 0.1, 0.3, 1.0, 3.0};
inline const std::vector<double> kMnistCombinedDeform{0.1, 0.3, 1.0};  // x kMnistCombinedAdv
inline const std::vector<double> kMnistCombinedAdv{0.03, 0.1};
inline const std::vector<double> kMnistLr{0.005, 0.05, 0.5};

// protein-style sequence tasks
inline const std::vector<double> kProteinWeightDecay{0, 0.01, 0.001, 1e-4, 1e-5};
inline const std::vector<double> kProteinSnProjectTau{10, 1.0, 0.1};
inline const std::vector<double> kProteinPgdEps{100.0, 10.0, 1.0, 0.1};
inline const std::vector<double> kProteinLossGrad{100.0, 10.0, 1.0, 0.1, 0.01, 0.001};
inline const std::vector<double> kProteinAdv{10.0, 1.0, 0.1};
inline const std::vector<double> kProteinGradNorm{10.0, 1.0, 0.1, 0.01, 0.001, 1e-4};
}  // namespace grids

}  // namespace kernreg
