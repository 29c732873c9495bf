#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kernreg/network.hpp"
#include "kernreg/perturbation.hpp"
#include "kernreg/spectral.hpp"

namespace kernreg {

// Lower-bound estimates from maximized perturbation gaps against the exact
// product of per-layer spectral norms.
struct NormReport {
    double epsilon = 0;
    std::vector<double> lower_per_class;  // ||f_k||_delta / epsilon
    double lower = 0;                     // sqrt(sum_k lower_k^2)
    double upper = 1;                     // prod_l sigma_l, exact SVD
    std::vector<double> per_layer;

    bool chain_ok(double tol = 1e-6) const;
};

NormReport norm_report(const Network& net, const ParamSet& params, const Tensor& sample, double epsilon,
                       int attack_steps = 40);

double robust_accuracy(const Network& net, const ParamSet& params, const Tensor& inputs,
                       const std::vector<std::int64_t>& labels, LossKind kind, const AttackConfig& cfg);

// Accuracies over an increasing epsilon grid with warm-started attacks; an
// example fooled at a smaller radius stays fooled (nested balls), so the
// curve is nonincreasing by construction.
std::vector<std::pair<double, double>> robust_accuracy_sweep(const Network& net, const ParamSet& params,
                                                             const Tensor& inputs,
                                                             const std::vector<std::int64_t>& labels, LossKind kind,
                                                             std::vector<double> eps_grid, int steps,
                                                             Geometry geom = Geometry::l2);

enum class MarginProxy { f_delta, spectral_product };

struct MarginRecord {
    double raw = 0;         // y*f binary, f_y - max_other multi-class
    double normalized = 0;  // raw / proxy
    double cdf = 0;
};

struct MarginReport {
    std::vector<MarginRecord> records;  // sorted by normalized margin
    std::string proxy_tag;
    double proxy = 0;
};

std::vector<double> raw_margins(const Network& net, const ParamSet& params, const Tensor& inputs,
                                const std::vector<std::int64_t>& labels);

MarginReport margin_cdf(const Network& net, const ParamSet& params, const Tensor& inputs,
                        const std::vector<std::int64_t>& labels, MarginProxy proxy, const NormReport& report);

// First term counts margins below gamma + 2*eps*N; the complexity term keeps
// its unspecified leading constants explicit (default 1). Values are reported
// clamped to [0,1] alongside the raw sum.
struct MarginBound {
    double first_term = 0;
    double complexity_term = 0;
    double value = 0;          // unclamped
    double value_clamped = 0;
    double c1 = 1, c2 = 1;
};

MarginBound margin_bound(const std::vector<double>& raw, double norm_n, double epsilon, double gamma, double b_bar,
                         double confidence_delta, double c1 = 1.0, double c2 = 1.0);

}  // namespace kernreg
