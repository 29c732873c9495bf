#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kernreg/spectral.hpp"
#include "testutil.hpp"

using namespace kernreg;
using namespace kernreg::testutil;

namespace {

// Test-side one-sided Jacobi SVD (Hestenes). Independent of the Eigen-backed
// implementation path; good to ~1e-12 on small well-conditioned matrices.
struct OracleSvd {
    std::vector<double> sigma;       // descending
    std::vector<Tensor> u, v;        // columns
};

OracleSvd jacobi_svd_oracle(const Tensor& w) {
    std::int64_t rows = w.shape[0], cols = w.shape[1];
    std::vector<std::vector<double>> A(cols, std::vector<double>(rows));  // columns of W
    std::vector<std::vector<double>> V(cols, std::vector<double>(cols, 0.0));
    for (std::int64_t j = 0; j < cols; ++j) {
        V[j][j] = 1.0;
        for (std::int64_t i = 0; i < rows; ++i) A[j][i] = w.data[i * cols + j];
    }
    auto coldot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0;
        for (std::int64_t p = 0; p < cols - 1; ++p)
            for (std::int64_t q = p + 1; q < cols; ++q) {
                double apq = coldot(A[p], A[q]);
                double app = coldot(A[p], A[p]);
                double aqq = coldot(A[q], A[q]);
                off = std::max(off, std::abs(apq) / std::sqrt(std::max(app * aqq, 1e-300)));
                if (std::abs(apq) < 1e-15 * std::sqrt(app * aqq)) continue;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
                for (std::int64_t i = 0; i < rows; ++i) {
                    double ap = A[p][i], aq = A[q][i];
                    A[p][i] = c * ap - s * aq;
                    A[q][i] = s * ap + c * aq;
                }
                for (std::int64_t i = 0; i < cols; ++i) {
                    double vp = V[p][i], vq = V[q][i];
                    V[p][i] = c * vp - s * vq;
                    V[q][i] = s * vp + c * vq;
                }
            }
        if (off < 1e-14) break;
    }
    OracleSvd out;
    std::vector<std::int64_t> order(cols);
    std::vector<double> norms(cols);
    for (std::int64_t j = 0; j < cols; ++j) {
        order[j] = j;
        norms[j] = std::sqrt(coldot(A[j], A[j]));
    }
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return norms[a] > norms[b]; });
    for (std::int64_t k = 0; k < cols; ++k) {
        std::int64_t j = order[k];
        out.sigma.push_back(norms[j]);
        Tensor uc({rows}), vc({cols});
        for (std::int64_t i = 0; i < rows; ++i) uc.data[i] = norms[j] > 0 ? A[j][i] / norms[j] : 0.0;
        for (std::int64_t i = 0; i < cols; ++i) vc.data[i] = V[j][i];
        out.u.push_back(uc);
        out.v.push_back(vc);
    }
    return out;
}

Tensor oracle_clip(const Tensor& w, double tau) {
    OracleSvd svd = jacobi_svd_oracle(w);
    Tensor out(w.shape);
    std::int64_t rows = w.shape[0], cols = w.shape[1];
    for (std::size_t k = 0; k < svd.sigma.size(); ++k) {
        double s = std::min(svd.sigma[k], tau);
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) out.data[i * cols + j] += s * svd.u[k].data[i] * svd.v[k].data[j];
    }
    return out;
}

// max ||Wx|| over unit x via many random starts plus local maximization.
double randomized_max_gain(const Tensor& w, Rng& rng, int starts = 30, int iters = 200) {
    std::int64_t rows = w.shape[0], cols = w.shape[1];
    double best = 0;
    for (int s = 0; s < starts; ++s) {
        Tensor x = random_tensor({cols}, rng);
        double nx = l2_norm(x);
        for (auto& v : x.data) v /= nx;
        for (int it = 0; it < iters; ++it) {
            // ascent direction of ||Wx||^2 is W^T W x
            Tensor wx({rows});
            for (std::int64_t i = 0; i < rows; ++i) {
                double acc = 0;
                for (std::int64_t j = 0; j < cols; ++j) acc += w.data[i * cols + j] * x.data[j];
                wx.data[i] = acc;
            }
            Tensor dir({cols});
            for (std::int64_t j = 0; j < cols; ++j) {
                double acc = 0;
                for (std::int64_t i = 0; i < rows; ++i) acc += w.data[i * cols + j] * wx.data[i];
                dir.data[j] = acc;
            }
            double nd = l2_norm(dir);
            if (nd == 0) break;
            for (std::int64_t j = 0; j < cols; ++j) x.data[j] = dir.data[j] / nd;
        }
        Tensor wx({rows});
        for (std::int64_t i = 0; i < rows; ++i) {
            double acc = 0;
            for (std::int64_t j = 0; j < cols; ++j) acc += w.data[i * cols + j] * x.data[j];
            wx.data[i] = acc;
        }
        best = std::max(best, l2_norm(wx));
    }
    return best;
}

Tensor diag_matrix(std::initializer_list<double> d) {
    std::int64_t n = static_cast<std::int64_t>(d.size());
    Tensor t({n, n});
    std::int64_t i = 0;
    for (double v : d) {
        t.data[i * n + i] = v;
        ++i;
    }
    return t;
}

}  // namespace

TEST_CASE("filter_matrix shapes and round trip") {
    Rng rng(3);
    Tensor conv = random_tensor({8, 3, 5, 5}, rng);
    Tensor m = filter_matrix(conv);
    CHECK(m.shape == Shape{8, 75});
    Tensor back = unflatten_filter(m, conv.shape);
    CHECK(back.data == conv.data);  // exact round trip

    Tensor tiny({1, 1, 1, 1}, {7.0});
    CHECK(filter_matrix(tiny).shape == Shape{1, 1});
    CHECK(filter_matrix(tiny).data[0] == 7.0);

    Tensor lin = random_tensor({4, 6}, rng);
    CHECK(filter_matrix(lin).data == lin.data);  // pass-through

    CHECK_THROWS_AS(filter_matrix(random_tensor({3, 3, 3}, rng)), Error);
}

TEST_CASE("spectral_norm: svd exactness on simple matrices") {
    SpectralEstimate id3 = spectral_norm_svd(diag_matrix({1, 1, 1}));
    CHECK(id3.sigma == doctest::Approx(1.0).epsilon(1e-12));

    SpectralEstimate d = spectral_norm_svd(diag_matrix({3, 1}));
    CHECK(d.sigma == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(std::abs(d.u.data[0]) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(d.v.data[0]) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(d.u.data[1]) < 1e-9);

    // unit singular vectors
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        Tensor w = random_tensor({6, 4}, rng);
        SpectralEstimate e = spectral_norm_svd(w);
        CHECK(std::abs(l2_norm(e.u) - 1.0) < 1e-9);
        CHECK(std::abs(l2_norm(e.v) - 1.0) < 1e-9);
        // W v = sigma u
        for (std::int64_t i = 0; i < 6; ++i) {
            double acc = 0;
            for (std::int64_t j = 0; j < 4; ++j) acc += w.data[i * 4 + j] * e.v.data[j];
            CHECK(acc == doctest::Approx(e.sigma * e.u.data[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("spectral_norm svd equals randomized maximization oracle") {
    Rng rng(7);
    for (int t = 0; t < 10; ++t) {
        Tensor w = random_tensor({5, 3}, rng);
        double oracle = randomized_max_gain(w, rng);
        CHECK(rel_err(spectral_norm_svd(w).sigma, oracle) < 1e-9);
    }
}

TEST_CASE("power iteration: underestimate, monotone, converges") {
    Rng rng(11);
    Tensor w = random_tensor({64, 64}, rng);
    double exact = spectral_norm_svd(w).sigma;

    double prev = 0;
    for (int k : {1, 2, 5, 10, 30, 100}) {
        SpectralEstimate e = spectral_norm_power(w, k);  // fixed start each call
        CHECK(e.sigma <= exact + 1e-12);
        CHECK(e.sigma >= prev - 1e-12);  // nondecreasing in k
        prev = e.sigma;
    }
    SpectralEstimate e100 = spectral_norm_power(w, 100);
    CHECK(std::abs(e100.sigma - exact) / exact < 0.01);

    // warm start carries across calls: one warm iteration beats one cold one
    Tensor warm;
    spectral_norm_power(w, 20, &warm);
    SpectralEstimate warm1 = spectral_norm_power(w, 1, &warm);
    SpectralEstimate cold1 = spectral_norm_power(w, 1);
    CHECK(warm1.sigma >= cold1.sigma - 1e-12);
}

TEST_CASE("power iteration flags the zero matrix") {
    Tensor z({4, 3});
    SpectralEstimate e = spectral_norm_power(z, 5);
    CHECK(e.degenerate);
    CHECK(e.sigma == 0.0);
    CHECK(std::abs(l2_norm(e.u) - 1.0) < 1e-12);
    CHECK(std::abs(l2_norm(e.v) - 1.0) < 1e-12);
}

TEST_CASE("sn_penalty_term values and gradients") {
    ParamSet ps;
    ps.names = {"W1"};
    ps.tensors = {diag_matrix({3, 1})};

    auto [val, grads] = sn_penalty_term(ps, 1.0, {SnMethod::Kind::svd, 0});
    CHECK(val == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(grads[0].at({0, 0}) == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(std::abs(grads[0].at({0, 1})) < 1e-12);
    CHECK(std::abs(grads[0].at({1, 1})) < 1e-12);

    auto [v0, g0] = sn_penalty_term(ps, 0.0, {SnMethod::Kind::svd, 0});
    CHECK(v0 == 0.0);
    CHECK(max_abs(g0[0]) == 0.0);

    // random layer with a clear top singular value: gradient vs finite differences
    Rng rng(13);
    for (int t = 0; t < 5; ++t) {
        Tensor w = random_tensor({8, 5}, rng);
        ParamSet rp;
        rp.names = {"W1"};
        rp.tensors = {w};
        double lambda = 0.37;
        auto [pv, pg] = sn_penalty_term(rp, lambda, {SnMethod::Kind::svd, 0});
        (void)pv;
        Tensor fd = fd_gradient(
            [&](const Tensor& q) {
                double s = spectral_norm_svd(q).sigma;
                return lambda * s * s;
            },
            w);
        CHECK(rel_err(pg[0], fd) < 1e-5);
    }

    // conv parameters flow through the filter matrix and back
    Rng rng2(17);
    ParamSet cp;
    cp.names = {"W1"};
    cp.tensors = {random_tensor({4, 2, 3, 3}, rng2)};
    auto [cv, cg] = sn_penalty_term(cp, 1.0, {SnMethod::Kind::svd, 0});
    double sig = spectral_norm_svd(filter_matrix(cp.tensors[0])).sigma;
    CHECK(cv == doctest::Approx(sig * sig).epsilon(1e-12));
    CHECK(cg[0].shape == Shape{4, 2, 3, 3});
}

TEST_CASE("projection: truncation, interior points, idempotence, oracle equality") {
    // diag(3,1) with tau=2 -> diag(2,1)
    Tensor d = diag_matrix({3, 1});
    Tensor p = project_spectral(d, 2.0);
    CHECK(p.at({0, 0}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(p.at({1, 1}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(p.at({0, 1})) < 1e-12);

    // interior point untouched, exactly
    Rng rng(19);
    Tensor w = random_tensor({4, 4}, rng);
    double sigma = spectral_norm_svd(w).sigma;
    Tensor wsmall = (0.5 / sigma) * w;
    Tensor same = project_spectral(wsmall, 1.0);
    CHECK(same.data == wsmall.data);

    int checked = 0;
    for (int t = 0; t < 100; ++t) {
        Tensor m = random_tensor({10, 6}, rng);
        double tau = rng.uniform(0.3, 0.9) * spectral_norm_svd(m).sigma;
        Tensor proj = project_spectral(m, tau);

        // norm cap
        CHECK(spectral_norm_svd(proj).sigma <= tau + 1e-9);
        // idempotence (KKT fixed point)
        Tensor twice = project_spectral(proj, tau);
        CHECK(max_abs(twice - proj) < 1e-9);
        // independent SVD-clip oracle
        Tensor oracle = oracle_clip(m, tau);
        CHECK(max_abs(proj - oracle) < 1e-10);
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("projection minimizes Frobenius distance over feasible candidates") {
    Rng rng(23);
    for (int t = 0; t < 20; ++t) {
        Tensor m = random_tensor({6, 4}, rng);
        double tau = 0.6 * spectral_norm_svd(m).sigma;
        Tensor proj = project_spectral(m, tau);
        double dproj = l2_norm(m - proj);
        for (int c = 0; c < 20; ++c) {
            Tensor cand = proj + random_tensor({6, 4}, rng, 0.05 * (c + 1));
            // keep only feasible candidates
            if (spectral_norm_svd(cand).sigma > tau) {
                cand = project_spectral(cand, tau);
            }
            CHECK(l2_norm(m - cand) >= dproj - 1e-9);
        }
    }
}

TEST_CASE("projection is a contraction between random pairs") {
    Rng rng(29);
    for (int t = 0; t < 30; ++t) {
        Tensor a = random_tensor({5, 7}, rng);
        Tensor b = random_tensor({5, 7}, rng);
        double tau = rng.uniform(0.2, 2.0);
        CHECK(l2_norm(project_spectral(a, tau) - project_spectral(b, tau)) <= l2_norm(a - b) + 1e-9);
    }
}

TEST_CASE("continuation schedule") {
    ContinuationConfig cfg{1.7, 3.0, 1.0};
    CHECK(continuation_tau(0, cfg) == doctest::Approx(2 * 1.7).epsilon(1e-15));
    CHECK(continuation_tau(3, cfg) == doctest::Approx(1.7 * (1 + std::exp(-1.0))).epsilon(1e-15));
    CHECK(std::abs(continuation_tau(60, cfg) - 1.7) < 1e-8);
    // strictly decreasing
    double prev = continuation_tau(0, cfg);
    for (int t = 1; t < 30; ++t) {
        double cur = continuation_tau(t, cfg);
        CHECK(cur < prev);
        prev = cur;
    }
    // epoch/step conversion
    ContinuationConfig per_step{1.0, 2.0, 10.0};
    CHECK(continuation_tau(20, per_step) == doctest::Approx(1.0 * (1 + std::exp(-1.0))).epsilon(1e-15));
    CHECK_THROWS_AS(continuation_tau(0, ContinuationConfig{0.0, 1.0, 1.0}), Error);
}
