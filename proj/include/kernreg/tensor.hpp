#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "kernreg/error.hpp"

namespace kernreg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major array of 64-bit reals. Scalars use shape {1}.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    Tensor(Shape s, std::vector<double> d);

    static Tensor scalar(double v);
    static Tensor zeros(const Shape& s) { return Tensor(s); }
    static Tensor full(const Shape& s, double v);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double item() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    // Debug accessor; no bounds checks beyond the assert in at_index.
    double& at(std::initializer_list<std::int64_t> idx);
    double at(std::initializer_list<std::int64_t> idx) const;

    Tensor reshaped(Shape s) const;
    // Leading-axis row of a batched tensor, reshaped to the remaining dims.
    Tensor row(std::int64_t i) const;
    void set_row(std::int64_t i, const Tensor& r);
};

// Plumbing used by optimizers and attacks outside recorded graphs.
void axpy(double a, const Tensor& x, Tensor& y);  // y += a*x
void scale_inplace(Tensor& x, double a);
double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double l1_norm(const Tensor& a);
double max_abs(const Tensor& a);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double a, const Tensor& x);

}  // namespace kernreg
