#include "kernreg/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>

namespace kernreg {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        check(d > 0, Error::Kind::shape, "dimension sizes must be positive, got " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    check(static_cast<std::int64_t>(data.size()) == shape_numel(shape), Error::Kind::shape,
          "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::full(const Shape& s, double v) {
    Tensor t(s);
    for (auto& x : t.data) x = v;
    return t;
}

double Tensor::item() const {
    check(size() == 1, Error::Kind::shape, "item() on non-scalar tensor of shape " + shape_str(shape));
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

static std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> idx) {
    assert(idx.size() == shape.size());
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        assert(i >= 0 && i < shape[k]);
        flat = flat * shape[k] + i;
        ++k;
    }
    return flat;
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) { return data[static_cast<std::size_t>(flat_index(shape, idx))]; }
double Tensor::at(std::initializer_list<std::int64_t> idx) const { return data[static_cast<std::size_t>(flat_index(shape, idx))]; }

Tensor Tensor::reshaped(Shape s) const {
    check(shape_numel(s) == size(), Error::Kind::shape,
          "reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
}

Tensor Tensor::row(std::int64_t i) const {
    check(rank() >= 1 && i >= 0 && i < shape[0], Error::Kind::shape, "row index out of range");
    Shape rest(shape.begin() + 1, shape.end());
    if (rest.empty()) rest = {1};
    std::int64_t stride = size() / shape[0];
    Tensor t(rest);
    std::copy(data.begin() + i * stride, data.begin() + (i + 1) * stride, t.data.begin());
    return t;
}

void Tensor::set_row(std::int64_t i, const Tensor& r) {
    std::int64_t stride = size() / shape[0];
    check(r.size() == stride, Error::Kind::shape, "row size mismatch");
    std::copy(r.data.begin(), r.data.end(), data.begin() + i * stride);
}

void axpy(double a, const Tensor& x, Tensor& y) {
    check(x.same_shape(y), Error::Kind::shape, "axpy shape mismatch");
    for (std::int64_t i = 0; i < x.size(); ++i) y.data[i] += a * x.data[i];
}

void scale_inplace(Tensor& x, double a) {
    for (auto& v : x.data) v *= a;
}

double dot(const Tensor& a, const Tensor& b) {
    check(a.size() == b.size(), Error::Kind::shape, "dot size mismatch");
    double s = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double l1_norm(const Tensor& a) {
    double s = 0;
    for (double v : a.data) s += std::abs(v);
    return s;
}

double max_abs(const Tensor& a) {
    double m = 0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), Error::Kind::shape, "add shape mismatch");
    Tensor r = a;
    for (std::int64_t i = 0; i < r.size(); ++i) r.data[i] += b.data[i];
    return r;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), Error::Kind::shape, "sub shape mismatch");
    Tensor r = a;
    for (std::int64_t i = 0; i < r.size(); ++i) r.data[i] -= b.data[i];
    return r;
}

Tensor operator*(double a, const Tensor& x) {
    Tensor r = x;
    scale_inplace(r, a);
    return r;
}

}  // namespace kernreg
