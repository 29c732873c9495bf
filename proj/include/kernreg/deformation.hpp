#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kernreg/network.hpp"
#include "kernreg/rng.hpp"
#include "kernreg/tensor.hpp"

namespace kernreg {

// Per-pixel displacement field tau(u) acting on images as x(u - tau(u)).
struct DeformField {
    std::int64_t h = 0, w = 0;
    std::vector<double> dy, dx;  // row/column displacement, h*w each

    DeformField() = default;
    DeformField(std::int64_t h_, std::int64_t w_) : h(h_), w(w_), dy(static_cast<std::size_t>(h_ * w_), 0.0),
                                                    dx(static_cast<std::size_t>(h_ * w_), 0.0) {}

    // max_u |tau(u)| in pixels
    double max_displacement() const;
    // max_u ||J tau(u)||_2 (2x2 Jacobian by central differences)
    double max_jacobian_norm() const;
    bool finite() const;

    DeformField scaled(double a) const;
    DeformField negated() const { return scaled(-1.0); }
};

struct DeformFamily {
    enum class Kind { translation, rotation, scaling, elastic, composed };
    Kind kind = Kind::translation;

    double max_shift = 0;       // translation: displacement magnitude bound, pixels
    double max_angle = 0;       // rotation: radians
    double max_log_scale = 0;   // scaling: |log zoom|
    double elastic_sigma = 2;   // elastic: smoothing width, pixels
    double elastic_amplitude = 0;  // elastic: displacement magnitude bound
    std::vector<DeformFamily> parts;  // composed

    static DeformFamily translation(double max_shift);
    static DeformFamily rotation(double max_angle);
    static DeformFamily scaling(double max_log_scale);
    static DeformFamily elastic(double sigma, double amplitude);
    static DeformFamily composed(std::vector<DeformFamily> parts);
};

// Field within the family's declared magnitude bounds, reproducible from rng.
DeformField sample_field(const DeformFamily& family, std::int64_t h, std::int64_t w, Rng& rng);

// Bilinear interpolation at u - tau(u); out-of-domain samples read as zero.
// Accepts (h,w), (c,h,w) or a batch (n,c,h,w) warped with the same field.
Tensor warp(const Tensor& image, const DeformField& field);

// tau(u) . grad x(u), image gradient by central differences with replicate
// borders; same shape as the image.
Tensor tangent_vector(const Tensor& image, const DeformField& field);

struct DeformWitness {
    std::int64_t example = -1;
    std::int64_t field_index = -1;
    Tensor x, warped;
    double sq_gap = 0;  // (f_k(x_tau) - f_k(x))^2
};

struct DeformPenalty {
    double value = 0;                    // sum_k max_{example,field} (f_k(x_tau)-f_k(x))^2
    std::vector<double> class_sq_gaps;   // per-class ||f_k||_tau^2
    std::vector<DeformWitness> witnesses;
};

// Per-example fields are drawn from deterministic substreams of rng, so
// growing m extends the sampled set (the penalty is monotone in m).
DeformPenalty adv_deform_penalty(const Network& net, const ParamSet& params, const Tensor& batch,
                                 const DeformFamily& family, int m, Rng& rng);
// Explicit-field variant used by tests and sweeps.
DeformPenalty adv_deform_penalty_fields(const Network& net, const ParamSet& params, const Tensor& batch,
                                        const std::vector<std::vector<DeformField>>& fields_per_example);
std::vector<Tensor> deform_penalty_param_grad(const Network& net, const ParamSet& params, const DeformPenalty& pen);

struct TangentPenalty {
    double value = 0;                   // sum_k max_i sum_q <grad f_k(x_i), t_iq>^2
    std::vector<double> class_values;
    std::vector<std::int64_t> witnesses;
};

TangentPenalty tangent_prop_penalty(const Network& net, const ParamSet& params, const Tensor& batch,
                                    const std::vector<std::vector<Tensor>>& tangents_per_example);
std::vector<Tensor> tangent_prop_param_grad(const Network& net, const ParamSet& params, const Tensor& batch,
                                            const std::vector<std::vector<Tensor>>& tangents_per_example,
                                            const TangentPenalty& pen);

// q tangent vectors per example from family samples.
std::vector<std::vector<Tensor>> sample_tangents(const DeformFamily& family, const Tensor& batch, int q, Rng& rng);

// Random warp of every example with per-example fields (data augmentation).
Tensor augment_batch(const Tensor& batch, const DeformFamily& family, Rng& rng);

}  // namespace kernreg
