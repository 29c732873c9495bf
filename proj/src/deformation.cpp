#include "kernreg/deformation.hpp"

#include <algorithm>
#include <cmath>

namespace kernreg {

double DeformField::max_displacement() const {
    double m = 0;
    for (std::size_t i = 0; i < dy.size(); ++i) m = std::max(m, std::sqrt(dy[i] * dy[i] + dx[i] * dx[i]));
    return m;
}

double DeformField::max_jacobian_norm() const {
    auto at = [&](const std::vector<double>& f, std::int64_t r, std::int64_t c) {
        r = std::clamp<std::int64_t>(r, 0, h - 1);
        c = std::clamp<std::int64_t>(c, 0, w - 1);
        return f[static_cast<std::size_t>(r * w + c)];
    };
    double m = 0;
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double a = (at(dy, r + 1, c) - at(dy, r - 1, c)) / 2.0;  // d dy / dr
            double b = (at(dy, r, c + 1) - at(dy, r, c - 1)) / 2.0;  // d dy / dc
            double d = (at(dx, r + 1, c) - at(dx, r - 1, c)) / 2.0;
            double e = (at(dx, r, c + 1) - at(dx, r, c - 1)) / 2.0;
            // largest singular value of [[a,b],[d,e]]
            double g11 = a * a + d * d, g12 = a * b + d * e, g22 = b * b + e * e;
            double tr = g11 + g22, det = g11 * g22 - g12 * g12;
            double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
            m = std::max(m, std::sqrt(std::max(0.0, tr / 2.0 + disc)));
        }
    return m;
}

bool DeformField::finite() const {
    for (double v : dy)
        if (!std::isfinite(v)) return false;
    for (double v : dx)
        if (!std::isfinite(v)) return false;
    return true;
}

DeformField DeformField::scaled(double a) const {
    DeformField f = *this;
    for (auto& v : f.dy) v *= a;
    for (auto& v : f.dx) v *= a;
    return f;
}

DeformFamily DeformFamily::translation(double max_shift) {
    DeformFamily f;
    f.kind = Kind::translation;
    f.max_shift = max_shift;
    return f;
}

DeformFamily DeformFamily::rotation(double max_angle) {
    DeformFamily f;
    f.kind = Kind::rotation;
    f.max_angle = max_angle;
    return f;
}

DeformFamily DeformFamily::scaling(double max_log_scale) {
    DeformFamily f;
    f.kind = Kind::scaling;
    f.max_log_scale = max_log_scale;
    return f;
}

DeformFamily DeformFamily::elastic(double sigma, double amplitude) {
    DeformFamily f;
    f.kind = Kind::elastic;
    f.elastic_sigma = sigma;
    f.elastic_amplitude = amplitude;
    return f;
}

DeformFamily DeformFamily::composed(std::vector<DeformFamily> parts) {
    DeformFamily f;
    f.kind = Kind::composed;
    f.parts = std::move(parts);
    return f;
}

namespace {

void add_center_linear(DeformField& f, double m00, double m01, double m10, double m11) {
    // tau(u) += M (u - center)
    double cy = static_cast<double>(f.h - 1) / 2.0, cx = static_cast<double>(f.w - 1) / 2.0;
    for (std::int64_t r = 0; r < f.h; ++r)
        for (std::int64_t c = 0; c < f.w; ++c) {
            double vy = static_cast<double>(r) - cy, vx = static_cast<double>(c) - cx;
            f.dy[static_cast<std::size_t>(r * f.w + c)] += m00 * vy + m01 * vx;
            f.dx[static_cast<std::size_t>(r * f.w + c)] += m10 * vy + m11 * vx;
        }
}

void gaussian_blur_inplace(std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
    std::int64_t radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    std::vector<double> tmp(img.size());
    auto clampr = [&](std::int64_t v, std::int64_t n) { return std::clamp<std::int64_t>(v, 0, n - 1); };
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double acc = 0;
            for (std::int64_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * img[static_cast<std::size_t>(r * w + clampr(c + i, w))];
            tmp[static_cast<std::size_t>(r * w + c)] = acc;
        }
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double acc = 0;
            for (std::int64_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(clampr(r + i, h) * w + c)];
            img[static_cast<std::size_t>(r * w + c)] = acc;
        }
}

void sample_into(const DeformFamily& family, DeformField& f, Rng& rng) {
    switch (family.kind) {
        case DeformFamily::Kind::translation: {
            // uniform in the disc of radius max_shift
            double sy = 0, sx = 0;
            if (family.max_shift > 0) {
                do {
                    sy = rng.uniform(-family.max_shift, family.max_shift);
                    sx = rng.uniform(-family.max_shift, family.max_shift);
                } while (sy * sy + sx * sx > family.max_shift * family.max_shift);
            }
            for (auto& v : f.dy) v += sy;
            for (auto& v : f.dx) v += sx;
            break;
        }
        case DeformFamily::Kind::rotation: {
            double alpha = rng.uniform(-family.max_angle, family.max_angle);
            // tau(u) = (I - R(-alpha)) (u - center)
            double ca = std::cos(alpha), sa = std::sin(alpha);
            add_center_linear(f, 1.0 - ca, -sa, sa, 1.0 - ca);
            break;
        }
        case DeformFamily::Kind::scaling: {
            double s = rng.uniform(-family.max_log_scale, family.max_log_scale);
            double k = 1.0 - std::exp(-s);
            add_center_linear(f, k, 0.0, 0.0, k);
            break;
        }
        case DeformFamily::Kind::elastic: {
            DeformField e(f.h, f.w);
            for (auto& v : e.dy) v = rng.normal();
            for (auto& v : e.dx) v = rng.normal();
            gaussian_blur_inplace(e.dy, f.h, f.w, family.elastic_sigma);
            gaussian_blur_inplace(e.dx, f.h, f.w, family.elastic_sigma);
            double m = e.max_displacement();
            if (m > 0 && family.elastic_amplitude > 0) {
                double s = family.elastic_amplitude / m;
                for (std::size_t i = 0; i < e.dy.size(); ++i) {
                    f.dy[i] += s * e.dy[i];
                    f.dx[i] += s * e.dx[i];
                }
            }
            break;
        }
        case DeformFamily::Kind::composed: {
            for (const auto& part : family.parts) sample_into(part, f, rng);
            break;
        }
    }
}

}  // namespace

DeformField sample_field(const DeformFamily& family, std::int64_t h, std::int64_t w, Rng& rng) {
    check(h >= 1 && w >= 1, Error::Kind::shape, "sample_field: empty grid");
    DeformField f(h, w);
    sample_into(family, f, rng);
    return f;
}

namespace {

void warp_plane(const double* src, double* dst, std::int64_t h, std::int64_t w, const DeformField& f) {
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double sy = static_cast<double>(r) - f.dy[static_cast<std::size_t>(r * w + c)];
            double sx = static_cast<double>(c) - f.dx[static_cast<std::size_t>(r * w + c)];
            double fy = std::floor(sy), fx = std::floor(sx);
            double wy = sy - fy, wx = sx - fx;
            std::int64_t iy = static_cast<std::int64_t>(fy), ix = static_cast<std::int64_t>(fx);
            auto sample = [&](std::int64_t y, std::int64_t x) {
                return (y >= 0 && y < h && x >= 0 && x < w) ? src[y * w + x] : 0.0;  // zero padding
            };
            dst[r * w + c] = (1 - wy) * (1 - wx) * sample(iy, ix) + (1 - wy) * wx * sample(iy, ix + 1) +
                             wy * (1 - wx) * sample(iy + 1, ix) + wy * wx * sample(iy + 1, ix + 1);
        }
}

void image_dims(const Tensor& image, std::int64_t& planes, std::int64_t& h, std::int64_t& w) {
    check(image.rank() >= 2, Error::Kind::shape, "warp: image must have at least 2 dims");
    h = image.shape[static_cast<std::size_t>(image.rank() - 2)];
    w = image.shape[static_cast<std::size_t>(image.rank() - 1)];
    planes = image.size() / (h * w);
}

}  // namespace

Tensor warp(const Tensor& image, const DeformField& field) {
    std::int64_t planes, h, w;
    image_dims(image, planes, h, w);
    check(h == field.h && w == field.w, Error::Kind::shape,
          "warp: field grid " + std::to_string(field.h) + "x" + std::to_string(field.w) + " does not match image " +
              shape_str(image.shape));
    Tensor out(image.shape);
    for (std::int64_t p = 0; p < planes; ++p) warp_plane(image.ptr() + p * h * w, out.ptr() + p * h * w, h, w, field);
    return out;
}

Tensor tangent_vector(const Tensor& image, const DeformField& field) {
    std::int64_t planes, h, w;
    image_dims(image, planes, h, w);
    check(h == field.h && w == field.w, Error::Kind::shape, "tangent_vector: field grid does not match image");
    Tensor out(image.shape);
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = image.ptr() + p * h * w;
        double* dst = out.ptr() + p * h * w;
        auto at = [&](std::int64_t r, std::int64_t c) {
            r = std::clamp<std::int64_t>(r, 0, h - 1);
            c = std::clamp<std::int64_t>(c, 0, w - 1);
            return src[r * w + c];
        };
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                double gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
                double gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
                dst[r * w + c] = field.dy[static_cast<std::size_t>(r * w + c)] * gy +
                                 field.dx[static_cast<std::size_t>(r * w + c)] * gx;
            }
    }
    return out;
}

namespace {

// Forward pass in fixed-size chunks to bound activation memory.
Tensor predict_chunked(const Network& net, const ParamSet& params, const Tensor& batch, std::int64_t chunk = 256) {
    std::int64_t n = batch.shape[0];
    if (n <= chunk) return predict(net, params, batch);
    Tensor out({n, net.n_outputs()});
    for (std::int64_t lo = 0; lo < n; lo += chunk) {
        std::int64_t hi = std::min(lo + chunk, n);
        Shape s = batch.shape;
        s[0] = hi - lo;
        Tensor piece(s);
        std::int64_t stride = batch.size() / n;
        std::copy(batch.data.begin() + lo * stride, batch.data.begin() + hi * stride, piece.data.begin());
        Tensor logits = predict(net, params, piece);
        std::copy(logits.data.begin(), logits.data.end(), out.data.begin() + lo * net.n_outputs());
    }
    return out;
}

}  // namespace

DeformPenalty adv_deform_penalty_fields(const Network& net, const ParamSet& params, const Tensor& batch,
                                        const std::vector<std::vector<DeformField>>& fields_per_example) {
    const std::int64_t n = batch.shape[0];
    check(static_cast<std::int64_t>(fields_per_example.size()) == n, Error::Kind::data,
          "adv_deform_penalty: need one field list per example");
    const std::int64_t K = net.n_outputs();

    Tensor clean = predict_chunked(net, params, batch);

    // stack all warped versions
    std::int64_t total = 0;
    for (const auto& fs : fields_per_example) total += static_cast<std::int64_t>(fs.size());
    check(total > 0, Error::Kind::data, "adv_deform_penalty: need at least one field");
    Shape ws = batch.shape;
    ws[0] = total;
    Tensor warped(ws);
    std::int64_t stride = batch.size() / n;
    std::vector<std::pair<std::int64_t, std::int64_t>> origin;  // (example, field idx)
    std::int64_t row = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor xi = batch.row(i);
        for (std::size_t j = 0; j < fields_per_example[static_cast<std::size_t>(i)].size(); ++j) {
            Tensor wx = warp(xi, fields_per_example[static_cast<std::size_t>(i)][j]);
            std::copy(wx.data.begin(), wx.data.end(), warped.data.begin() + row * stride);
            origin.emplace_back(i, static_cast<std::int64_t>(j));
            ++row;
        }
    }
    Tensor wlogits = predict_chunked(net, params, warped);

    DeformPenalty pen;
    pen.class_sq_gaps.assign(static_cast<std::size_t>(K), 0.0);
    pen.witnesses.resize(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        double best = 0;
        std::int64_t best_row = -1;
        for (std::int64_t r = 0; r < total; ++r) {
            double gap = wlogits.data[r * K + k] - clean.data[origin[static_cast<std::size_t>(r)].first * K + k];
            if (gap * gap > best) {
                best = gap * gap;
                best_row = r;
            }
        }
        pen.class_sq_gaps[static_cast<std::size_t>(k)] = best;
        pen.value += best;
        DeformWitness& wit = pen.witnesses[static_cast<std::size_t>(k)];
        wit.sq_gap = best;
        if (best_row >= 0) {
            wit.example = origin[static_cast<std::size_t>(best_row)].first;
            wit.field_index = origin[static_cast<std::size_t>(best_row)].second;
            wit.x = batch.row(wit.example);
            wit.warped = warped.row(best_row);
        }
    }
    return pen;
}

DeformPenalty adv_deform_penalty(const Network& net, const ParamSet& params, const Tensor& batch,
                                 const DeformFamily& family, int m, Rng& rng) {
    check(m >= 1, Error::Kind::data, "adv_deform_penalty: m must be at least 1");
    const std::int64_t n = batch.shape[0];
    std::int64_t h = batch.shape[static_cast<std::size_t>(batch.rank() - 2)];
    std::int64_t w = batch.shape[static_cast<std::size_t>(batch.rank() - 1)];
    std::vector<std::vector<DeformField>> fields(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng sub = rng.split(static_cast<std::uint64_t>(i));  // per-example stream: larger m extends the set
        for (int j = 0; j < m; ++j) fields[static_cast<std::size_t>(i)].push_back(sample_field(family, h, w, sub));
    }
    return adv_deform_penalty_fields(net, params, batch, fields);
}

std::vector<Tensor> deform_penalty_param_grad(const Network& net, const ParamSet& params, const DeformPenalty& pen) {
    std::vector<Tensor> grads;
    for (const Shape& s : net.param_shapes()) grads.push_back(Tensor::zeros(s));

    for (std::size_t k = 0; k < pen.witnesses.size(); ++k) {
        const DeformWitness& w = pen.witnesses[k];
        if (w.example < 0 || w.sq_gap <= 0) continue;
        Graph g;
        Shape xs;
        xs.push_back(1);
        for (auto d : net.input_shape()) xs.push_back(d);
        int xa = g.input("xa", xs);
        int xb = g.input("xb", xs);
        std::vector<int> pnodes;
        for (std::size_t i = 0; i < params.count(); ++i)
            pnodes.push_back(g.param(params.names[i], params.tensors[i].shape));
        int la = net.append_forward(g, xa, pnodes);
        int lb = net.append_forward(g, xb, pnodes);
        int scalar = g.square(g.sum_all(g.sub(g.col(la, static_cast<std::int64_t>(k)), g.col(lb, static_cast<std::int64_t>(k)))));

        Bindings b;
        for (std::size_t i = 0; i < params.count(); ++i) b[params.names[i]] = params.tensors[i];
        b["xa"] = w.warped.reshaped(xs);
        b["xb"] = w.x.reshaped(xs);
        auto gs = eval_gradients(g, scalar, pnodes, b);
        for (std::size_t i = 0; i < grads.size(); ++i) axpy(1.0, gs[i], grads[i]);
    }
    return grads;
}

TangentPenalty tangent_prop_penalty(const Network& net, const ParamSet& params, const Tensor& batch,
                                    const std::vector<std::vector<Tensor>>& tangents_per_example) {
    const std::int64_t n = batch.shape[0];
    check(static_cast<std::int64_t>(tangents_per_example.size()) == n, Error::Kind::data,
          "tangent_prop_penalty: need one tangent list per example");
    const std::int64_t K = net.n_outputs();
    const std::int64_t stride = batch.size() / n;

    TangentPenalty pen;
    for (std::int64_t k = 0; k < K; ++k) {
        auto fw = net.build_forward(n);
        int gx = append_input_gradient(fw, k);
        Tensor g = fw.g.eval(gx, net.bind(params, batch));
        double best = 0;
        std::int64_t star = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            double acc = 0;
            for (const Tensor& t : tangents_per_example[static_cast<std::size_t>(i)]) {
                double dd = 0;
                for (std::int64_t j = 0; j < stride; ++j) dd += g.data[i * stride + j] * t.data[j];
                acc += dd * dd;
            }
            if (acc > best) {
                best = acc;
                star = i;
            }
        }
        pen.class_values.push_back(best);
        pen.witnesses.push_back(star);
        pen.value += best;
    }
    return pen;
}

std::vector<Tensor> tangent_prop_param_grad(const Network& net, const ParamSet& params, const Tensor& batch,
                                            const std::vector<std::vector<Tensor>>& tangents_per_example,
                                            const TangentPenalty& pen) {
    std::vector<Tensor> grads;
    for (const Shape& s : net.param_shapes()) grads.push_back(Tensor::zeros(s));
    Shape xs;
    xs.push_back(1);
    for (auto d : net.input_shape()) xs.push_back(d);

    for (std::size_t k = 0; k < pen.witnesses.size(); ++k) {
        if (pen.class_values[k] <= 0) continue;
        std::int64_t star = pen.witnesses[k];
        auto fw = net.build_forward(1);
        int gx = append_input_gradient(fw, static_cast<std::int64_t>(k));
        int scalar = -1;
        for (const Tensor& t : tangents_per_example[static_cast<std::size_t>(star)]) {
            int dd = fw.g.sum_all(fw.g.mul(gx, fw.g.constant(t.reshaped(xs))));
            int sq = fw.g.square(dd);
            scalar = scalar < 0 ? sq : fw.g.add(scalar, sq);
        }
        if (scalar < 0) continue;
        auto gs = param_gradients(fw, scalar, net.bind(params, batch.row(star).reshaped(xs)));
        for (std::size_t i = 0; i < grads.size(); ++i) axpy(1.0, gs[i], grads[i]);
    }
    return grads;
}

std::vector<std::vector<Tensor>> sample_tangents(const DeformFamily& family, const Tensor& batch, int q, Rng& rng) {
    check(q >= 1, Error::Kind::data, "sample_tangents: q must be at least 1");
    const std::int64_t n = batch.shape[0];
    std::int64_t h = batch.shape[static_cast<std::size_t>(batch.rank() - 2)];
    std::int64_t w = batch.shape[static_cast<std::size_t>(batch.rank() - 1)];
    std::vector<std::vector<Tensor>> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng sub = rng.split(static_cast<std::uint64_t>(i) | (1ULL << 40));
        Tensor xi = batch.row(i);
        for (int j = 0; j < q; ++j)
            out[static_cast<std::size_t>(i)].push_back(tangent_vector(xi, sample_field(family, h, w, sub)));
    }
    return out;
}

Tensor augment_batch(const Tensor& batch, const DeformFamily& family, Rng& rng) {
    const std::int64_t n = batch.shape[0];
    std::int64_t h = batch.shape[static_cast<std::size_t>(batch.rank() - 2)];
    std::int64_t w = batch.shape[static_cast<std::size_t>(batch.rank() - 1)];
    Tensor out(batch.shape);
    for (std::int64_t i = 0; i < n; ++i) {
        DeformField f = sample_field(family, h, w, rng);
        out.set_row(i, warp(batch.row(i), f));
    }
    return out;
}

}  // namespace kernreg
