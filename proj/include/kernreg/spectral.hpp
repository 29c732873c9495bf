#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kernreg/network.hpp"
#include "kernreg/tensor.hpp"

namespace kernreg {

struct SpectralEstimate {
    double sigma = 0;
    Tensor u, v;  // unit left/right singular vectors
    enum class Method { svd, power } method = Method::svd;
    int iterations = 0;
    bool degenerate = false;  // zero matrix under the power method
};

// Conv parameters (out,in,kh,kw) reshape to (out, in*kh*kw); matrices pass
// through unchanged.
Tensor filter_matrix(const Tensor& param);
Tensor unflatten_filter(const Tensor& matrix, const Shape& original);

SpectralEstimate spectral_norm_svd(const Tensor& w);
// Warm-startable power iteration on W^T W; the estimate never exceeds the true
// sigma and is nondecreasing in the iteration count. warm (optional, in/out)
// carries the right singular vector across calls.
SpectralEstimate spectral_norm_power(const Tensor& w, int iterations, Tensor* warm = nullptr);

struct SnMethod {
    enum class Kind { svd, power } kind = Kind::power;
    int iterations = 1;
};

// Per-layer warm-start vectors owned by the trainer.
struct SpectralState {
    std::vector<Tensor> warm;
};

// lambda * sum_l ||W_l||^2 with per-layer subgradients 2*lambda*sigma*u*v^T
// reshaped back to each parameter's shape.
std::pair<double, std::vector<Tensor>> sn_penalty_term(const ParamSet& params, double lambda, SnMethod method,
                                                       SpectralState* state = nullptr);

// Frobenius-nearest matrix with spectral norm <= tau (singular value clipping).
Tensor project_spectral(const Tensor& w, double tau);
// Applies the projection to every layer through its filter matrix.
void project_params(ParamSet& params, double tau);

struct ContinuationConfig {
    double tau0 = 1.0;          // target radius
    double kappa = 2.0;         // time constant, in epochs
    double steps_per_epoch = 1; // step-index conversion
};

// tau * (1 + exp(-t/kappa)) with t in steps.
double continuation_tau(std::int64_t t, const ContinuationConfig& cfg);

std::vector<double> layer_spectral_norms(const ParamSet& params);
double spectral_norm_product(const ParamSet& params);

}  // namespace kernreg
