#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <vector>

#include "helpers.hpp"
#include "poisonlab/theory.hpp"
#include "poisonlab/vecops.hpp"

using namespace poisonlab;

namespace {

std::vector<double> random_symmetric(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> a(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = rng.normal() * scale;
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    return a;
}

std::vector<double> eigen_oracle(const std::vector<double>& a, std::size_t n) {
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a[i * n + j];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = es.eigenvalues()(static_cast<Eigen::Index>(i));
    return out;
}

// Matrix-free application of a dense symmetric matrix.
auto matrix_op(const std::vector<double>& a, std::size_t n) {
    return [&a, n](std::span<const double> v) {
        std::vector<double> y(n, 0.0);
        matvec(a, n, n, v, y);
        return y;
    };
}

// Quadratic loss half theta' A theta with its exact gradient.
LossGradFn quadratic_loss(const std::vector<double>& a, std::size_t n) {
    return [&a, n](std::span<const double> theta) {
        LossAndGrad lg;
        lg.grad.assign(n, 0.0);
        matvec(a, n, n, theta, lg.grad);
        lg.value = 0.5 * dot(theta, lg.grad);
        return lg;
    };
}

}  // namespace

TEST_CASE("embedding contraction reproduces the exact per-step factor") {
    Rng rng(600);
    const std::size_t n = 32, d = 6;
    std::vector<double> embs(n * d);
    for (double& v : embs) v = rng.normal();

    for (double gl : {0.05, 0.1, 0.25}) {
        ContractionTrace tr = embedding_gd_contraction(embs, n, d, 0.5, 2.0 * gl, 100);
        const double factor = std::abs(1.0 - 2.0 * gl);
        CHECK(tr.contraction_factor == factor);
        REQUIRE(tr.radius.size() == 101);
        REQUIRE(tr.step_ratio.size() == 100);
        REQUIRE(tr.centroid.size() == 101);
        for (double r : tr.step_ratio)
            CHECK(std::abs(r - factor) <= 1e-12 * factor);
        CHECK(std::abs(tr.rate_estimate - factor) <= 1e-10 * factor);
        // The proof's centroid-invariance line, taken literally: every
        // recorded centroid is the same bit pattern.
        for (std::size_t t = 1; t < tr.centroid.size(); ++t) {
            REQUIRE(tr.centroid[t].size() == d);
            CHECK(std::memcmp(tr.centroid[t].data(), tr.centroid[0].data(), d * sizeof(double)) ==
                  0);
        }
        // Radius decays geometrically from the start value.
        for (std::size_t t = 0; t < tr.radius.size(); ++t)
            CHECK(tr.radius[t] ==
                  doctest::Approx(tr.radius[0] * std::pow(factor, static_cast<double>(t)))
                      .epsilon(1e-10));
    }
}

TEST_CASE("contraction handles overshoot and degenerate inputs") {
    Rng rng(601);
    std::vector<double> embs(8 * 3);
    for (double& v : embs) v = rng.normal();
    // gamma*lambda = 0.75 flips the deviations each step but still contracts.
    ContractionTrace tr = embedding_gd_contraction(embs, 8, 3, 1.0, 0.75, 10);
    CHECK(tr.contraction_factor == doctest::Approx(0.5));
    for (double r : tr.step_ratio) CHECK(r == doctest::Approx(0.5).epsilon(1e-12));

    // A single point has zero radius everywhere.
    ContractionTrace one = embedding_gd_contraction({embs.data(), 3}, 1, 3, 0.5, 0.1, 5);
    for (double r : one.radius) CHECK(r == 0.0);
    for (double r : one.step_ratio) CHECK(r == 0.0);
    CHECK(one.rate_estimate == 0.0);

    CHECK_THROWS_AS(embedding_gd_contraction(embs, 7, 3, 0.5, 0.1, 5), std::invalid_argument);
    CHECK_THROWS_AS(embedding_gd_contraction(embs, 8, 3, 0.5, 0.1, -1), std::invalid_argument);
}

TEST_CASE("alignment run matches the scalar recurrence and freezes inside the margin") {
    Rng rng(602);
    const std::size_t n = 16, d = 4;
    std::vector<double> embs(n * d);
    for (double& v : embs) v = rng.normal();
    std::vector<double> centroid = row_mean(embs, n, d);
    // Place the target two units away from the starting centroid.
    std::vector<double> target = centroid;
    target[0] += 2.0;

    const double gamma = 0.5, lt2t = 0.2, lmpe = 0.1, eps = 0.01;
    const int steps = 200;
    AlignmentTrace tr = centroid_alignment_run(embs, n, d, target, eps, gamma, lt2t, lmpe, steps);
    REQUIRE(tr.centroid_dist.size() == static_cast<std::size_t>(steps) + 1);

    // Independent scalar prediction: the centroid moves along the straight
    // line to the target, so its distance obeys a one-dimensional recurrence.
    double s = tr.centroid_dist[0];
    const double pull = 2.0 * gamma * lmpe;
    int first_hit = s <= std::sqrt(eps) ? 0 : -1;
    for (int t = 0; t < steps; ++t) {
        if (s * s - eps > 0.0) s = std::abs(s * (1.0 - pull));
        CHECK(tr.centroid_dist[static_cast<std::size_t>(t) + 1] ==
              doctest::Approx(s).epsilon(1e-12));
        if (first_hit < 0 && s <= std::sqrt(eps)) first_hit = t + 1;
    }
    CHECK(tr.first_hit_step == first_hit);
    CHECK(tr.stayed_inside);
    for (std::size_t t = static_cast<std::size_t>(tr.first_hit_step); t < tr.centroid_dist.size();
         ++t)
        CHECK(tr.centroid_dist[t] <= std::sqrt(eps));

    // The deviation radius contracts at the compactness factor, independent
    // of the centroid pull.
    const double dev_factor = std::abs(1.0 - 2.0 * gamma * lt2t);
    for (std::size_t t = 0; t + 1 < tr.radius.size(); ++t)
        if (tr.radius[t] > 0.0)
            CHECK(tr.radius[t + 1] / tr.radius[t] == doctest::Approx(dev_factor).epsilon(1e-12));
}

TEST_CASE("alignment without a pull never reaches a distant target") {
    Rng rng(603);
    std::vector<double> embs(8 * 3);
    for (double& v : embs) v = rng.normal();
    std::vector<double> target(3, 50.0);
    AlignmentTrace tr = centroid_alignment_run(embs, 8, 3, target, 0.01, 0.5, 0.1, 0.0, 50);
    CHECK(tr.first_hit_step == -1);
    CHECK_FALSE(tr.stayed_inside);

    // Starting inside the margin counts as an immediate hit.
    std::vector<double> near = row_mean(embs, 8, 3);
    AlignmentTrace hit = centroid_alignment_run(embs, 8, 3, near, 0.01, 0.5, 0.1, 0.1, 10);
    CHECK(hit.first_hit_step == 0);
    CHECK(hit.stayed_inside);

    CHECK_THROWS_AS(centroid_alignment_run(embs, 8, 3, target, -0.1, 0.5, 0.1, 0.1, 10),
                    std::invalid_argument);
}

TEST_CASE("cosine summaries interpolate quantiles") {
    CodirStats s = summarize_cosines({1.0, -1.0, 0.0});
    CHECK(s.count == 3);
    CHECK(s.mean == doctest::Approx(0.0));
    CHECK(s.median == doctest::Approx(0.0));
    CHECK(s.q25 == doctest::Approx(-0.5));
    CHECK(s.q75 == doctest::Approx(0.5));
    CHECK(s.p_pos == doctest::Approx(1.0 / 3.0));

    CodirStats empty = summarize_cosines({});
    CHECK(empty.count == 0);
    CHECK(empty.mean == 0.0);
}

TEST_CASE("identical batches are perfectly co-directional and gated at zero distance") {
    EncoderSpec spec = testutil::small_spec();
    ParamVector p = init_params(spec, 700);
    Rng rng(604);

    std::vector<std::vector<double>> images(3, std::vector<double>(9));
    std::vector<std::vector<std::int32_t>> caps(3);
    for (auto& img : images)
        for (double& v : img) v = rng.uniform();
    for (auto& c : caps) {
        c.resize(3);
        for (auto& tok : c) tok = static_cast<std::int32_t>(rng.below(8));
    }
    EncodedBatch batch;
    for (auto& img : images) batch.images.emplace_back(img);
    for (auto& c : caps) batch.captions.emplace_back(c);

    const std::size_t d = static_cast<std::size_t>(spec.embed_dim);
    std::vector<double> emb = encode_images(p, batch.images);
    std::vector<double> centroid = row_mean(emb, 3, d);

    LossWeights w;
    CodirReport rep = grad_codirectionality(p, {{batch, batch}}, 1e-9, centroid, w);
    REQUIRE(rep.cosines.size() == 1);
    CHECK(rep.cosines[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.gate_mask[0]);
    CHECK(rep.gated.count == 1);
    CHECK(rep.ungated.p_pos == 1.0);
    CHECK(rep.skipped_zero_grad == 0);

    // Zero parameters produce zero gradients on both sides; the pair is
    // skipped rather than scored.
    ParamVector zero = p;
    std::fill(zero.values.begin(), zero.values.end(), 0.0);
    std::vector<double> zc(d, 0.0);
    CodirReport skipped = grad_codirectionality(zero, {{batch, batch}}, 1.0, zc, w);
    CHECK(skipped.skipped_zero_grad == 1);
    CHECK(skipped.cosines.empty());

    std::vector<double> bad(d + 1, 0.0);
    CHECK_THROWS_AS(grad_codirectionality(p, {{batch, batch}}, 1.0, bad, w),
                    std::invalid_argument);
}

TEST_CASE("jacobi eigenvalues match the dense library oracle") {
    Rng rng(605);
    for (std::size_t n : {1UL, 2UL, 5UL, 20UL, 50UL}) {
        std::vector<double> a = random_symmetric(rng, n, 2.0);
        std::vector<double> mine = symmetric_eigenvalues(a, n);
        std::vector<double> oracle = eigen_oracle(a, n);
        REQUIRE(mine.size() == n);
        double scale = 0.0;
        for (double v : oracle) scale = std::max(scale, std::abs(v));
        for (std::size_t i = 0; i < n; ++i)
            CHECK(std::abs(mine[i] - oracle[i]) <= 1e-10 * std::max(scale, 1.0));
    }

    std::vector<double> known = {2, 1, 1, 2};
    std::vector<double> eig = symmetric_eigenvalues(known, 2);
    CHECK(eig[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(eig[1] == doctest::Approx(3.0).epsilon(1e-14));

    std::vector<double> asym = {1, 2, 3, 4};
    CHECK_THROWS_AS(symmetric_eigenvalues(asym, 2), std::invalid_argument);
    CHECK_THROWS_AS(symmetric_eigenvalues(known, 3), std::invalid_argument);
}

TEST_CASE("surrogate inequalities hold on randomized PSD trials") {
    Rng rng(606);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + rng.below(7);
        std::vector<double> u(d), delta(d);
        for (double& v : u) v = rng.normal();
        for (double& v : delta) v = rng.normal() * 0.5;

        // G = M' M + small ridge keeps it PSD and invertible.
        std::vector<double> m(d * d);
        for (double& v : m) v = rng.normal();
        std::vector<double> g(d * d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) s += m[k * d + i] * m[k * d + j];
                g[i * d + j] = s + (i == j ? 1e-3 : 0.0);
            }

        SurrogateReport r = surrogate_bound_check(u, delta, g, d, 0.01);
        CHECK(r.identity_holds);
        CHECK(r.metric_holds);
        CHECK(r.m == doctest::Approx(norm2(u)).epsilon(1e-14));
        CHECK(r.delta_norm == doctest::Approx(norm2(delta)).epsilon(1e-14));
        CHECK(r.kappa == doctest::Approx(r.sigma_max / r.sigma_min).epsilon(1e-14));

        std::vector<double> oracle = eigen_oracle(g, d);
        CHECK(r.sigma_min == doctest::Approx(oracle.front()).epsilon(1e-8));
        CHECK(r.sigma_max == doctest::Approx(oracle.back()).epsilon(1e-8));
    }
}

TEST_CASE("surrogate check validates its inputs and the margin condition") {
    std::vector<double> u = {10.0, 0.0}, delta = {0.0, 0.0};
    std::vector<double> g = {2.0, 0.0, 0.0, 1.0};
    SurrogateReport r = surrogate_bound_check(u, delta, g, 2, 0.01);
    CHECK(r.margin_condition);  // 10 > 2 * 0.01
    SurrogateReport tight = surrogate_bound_check(std::vector<double>{1e-4, 0.0}, delta, g, 2, 1.0);
    CHECK_FALSE(tight.margin_condition);

    std::vector<double> indef = {1.0, 0.0, 0.0, -1.0};
    CHECK_THROWS_AS(surrogate_bound_check(u, delta, indef, 2, 0.01), std::invalid_argument);
    std::vector<double> singular = {1.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(surrogate_bound_check(u, delta, singular, 2, 0.01), std::invalid_argument);
    CHECK_THROWS_AS(surrogate_bound_check(u, delta, g, 3, 0.01), std::invalid_argument);
}

TEST_CASE("gram condition number matches an SVD of the jacobian") {
    EncoderSpec spec = testutil::small_spec();
    ParamVector p = init_params(spec, 800);
    Rng rng(607);
    std::vector<std::vector<double>> images(6, std::vector<double>(9));
    for (auto& img : images)
        for (double& v : img) v = rng.uniform();
    std::vector<ImageView> views(images.begin(), images.end());

    GramResult g = compute_gram(p, views);
    const std::size_t d = g.d;
    REQUIRE(d == static_cast<std::size_t>(spec.embed_dim));
    REQUIRE(g.G.size() == d * d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(g.G[i * d + j] == g.G[j * d + i]);

    MeanEmbeddingJacobian J = mean_embedding_jacobian(p, views);
    Eigen::MatrixXd jm(J.rows, J.cols);
    for (std::size_t i = 0; i < J.rows; ++i)
        for (std::size_t j = 0; j < J.cols; ++j)
            jm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                J.values[i * J.cols + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(jm);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);

    CHECK(g.sigma_max == doctest::Approx(smax * smax).epsilon(1e-8));
    CHECK(g.sigma_min == doctest::Approx(smin * smin).epsilon(1e-8));
    CHECK(g.kappa == doctest::Approx((smax / smin) * (smax / smin)).epsilon(1e-8));
}

TEST_CASE("hessian-vector products are exact on quadratics") {
    Rng rng(608);
    const std::size_t n = 12;
    std::vector<double> a = random_symmetric(rng, n);
    LossGradFn fn = quadratic_loss(a, n);
    std::vector<double> theta(n), v(n);
    for (double& x : theta) x = rng.normal();
    for (double& x : v) x = rng.normal();

    std::vector<double> hv = hvp(fn, theta, v);
    std::vector<double> exact(n, 0.0);
    matvec(a, n, n, v, exact);
    double scale = 0.0;
    for (double x : exact) scale = std::max(scale, std::abs(x));
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(hv[i] - exact[i]) <= 1e-9 * scale);

    std::vector<double> zero(n, 0.0);
    std::vector<double> hz = hvp(fn, theta, zero);
    for (double x : hz) CHECK(x == 0.0);
}

TEST_CASE("hessian-vector products agree with a value-based dense hessian") {
    // Smooth non-quadratic test function: exp(a'x) * (1 + |x|^2). The dense
    // oracle uses second differences of the value only, so it shares no code
    // with the gradient-based product.
    Rng rng(609);
    const std::size_t n = 14;
    std::vector<double> a(n);
    for (double& x : a) x = rng.normal() * 0.2;
    auto value = [&](std::span<const double> x) {
        double sq = 0.0;
        for (double t : x) sq += t * t;
        return std::exp(dot(a, x)) * (1.0 + sq);
    };
    LossGradFn fn = [&](std::span<const double> x) {
        LossAndGrad lg;
        double sq = 0.0;
        for (double t : x) sq += t * t;
        const double e = std::exp(dot(a, x));
        lg.value = e * (1.0 + sq);
        lg.grad.resize(n);
        for (std::size_t i = 0; i < n; ++i) lg.grad[i] = e * (a[i] * (1.0 + sq) + 2.0 * x[i]);
        return lg;
    };

    std::vector<double> theta(n), v(n);
    for (double& x : theta) x = rng.uniform(-0.5, 0.5);
    for (double& x : v) x = rng.normal();

    const double h = 3e-4;
    std::vector<double> hess(n * n);
    std::vector<double> probe(theta);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            probe = theta;
            probe[i] += h;
            probe[j] += h;
            const double pp = value(probe);
            probe[j] -= 2 * h;
            const double pm = value(probe);
            probe[i] -= 2 * h;
            const double mm = value(probe);
            probe[j] += 2 * h;
            const double mp = value(probe);
            hess[i * n + j] = (pp - pm - mp + mm) / (4.0 * h * h);
        }
    std::vector<double> oracle(n, 0.0);
    matvec(hess, n, n, v, oracle);

    std::vector<double> hv = hvp(fn, theta, v);
    CHECK(std::sqrt(sq_dist(hv, oracle)) <= 1e-4 * std::max(1.0, norm2(oracle)));
}

TEST_CASE("power iteration recovers known spectra") {
    const std::size_t n = 10;
    std::vector<double> diag(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) diag[i * n + i] = static_cast<double>(i + 1);
    PowerResult r = power_lambda_max(matrix_op(diag, n), n, 1, 5000, 1e-12);
    CHECK(r.converged);
    CHECK(r.lambda == doctest::Approx(10.0).epsilon(1e-6));

    // Rank-1: a tiny residual pins both the value and the direction.
    Rng rng(610);
    std::vector<double> u(6);
    for (double& x : u) x = rng.normal();
    const double un = norm2(u);
    for (double& x : u) x /= un;
    std::vector<double> rank1(36);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) rank1[i * 6 + j] = 3.5 * u[i] * u[j];
    PowerResult r1 = power_lambda_max(matrix_op(rank1, 6), 6, 2, 5000, 1e-14);
    CHECK(r1.lambda == doctest::Approx(3.5).epsilon(1e-10));
    CHECK(r1.residual <= 1e-8);

    // Zero operator annihilates immediately.
    std::vector<double> zero(16, 0.0);
    PowerResult rz = power_lambda_max(matrix_op(zero, 4), 4, 3, 100, 1e-12);
    CHECK(rz.converged);
    CHECK(rz.lambda == 0.0);

    CHECK_THROWS_AS(power_lambda_max(matrix_op(zero, 4), 0, 1, 10, 1e-12), std::invalid_argument);
    CHECK_THROWS_AS(power_lambda_max(matrix_op(zero, 4), 4, 1, 0, 1e-12), std::invalid_argument);
}

TEST_CASE("power iteration reports the top eigenvalue when the dominant one is negative") {
    // diag(-10, 3, 1): plain iteration locks onto -10, the shifted second
    // pass must recover 3.
    std::vector<double> a = {-10, 0, 0, 0, 3, 0, 0, 0, 1};
    PowerResult r = power_lambda_max(matrix_op(a, 3), 3, 4, 5000, 1e-13);
    CHECK(r.lambda == doctest::Approx(3.0).epsilon(1e-8));
    CHECK(r.converged);

    // Entirely negative spectrum: the top eigenvalue is still the answer.
    std::vector<double> neg = {-5, 0, 0, -3};
    PowerResult rn = power_lambda_max(matrix_op(neg, 2), 2, 5, 5000, 1e-13);
    CHECK(rn.lambda == doctest::Approx(-3.0).epsilon(1e-8));
}

TEST_CASE("power iteration matches the dense oracle and never overshoots") {
    Rng rng(611);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 50;
        std::vector<double> a = random_symmetric(rng, n);
        const double top = eigen_oracle(a, n).back();
        PowerResult r = power_lambda_max(matrix_op(a, n), n, 100 + static_cast<std::uint64_t>(trial),
                                         20000, 1e-13);
        CHECK(std::abs(r.lambda - top) <= 1e-6 * std::abs(top));
        CHECK(r.lambda <= top + 1e-9 * std::max(1.0, std::abs(top)));
    }

    // Starved iteration budget: reported unconverged with the last estimate.
    std::vector<double> eye(9, 0.0);
    for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    PowerResult starved = power_lambda_max(matrix_op(eye, 3), 3, 6, 1, 1e-12);
    CHECK_FALSE(starved.converged);
    CHECK(starved.lambda == doctest::Approx(1.0));
}

TEST_CASE("hessian power iteration handles indefinite quadratics") {
    Rng rng(612);
    const std::size_t n = 20;
    std::vector<double> a = random_symmetric(rng, n);
    LossGradFn fn = quadratic_loss(a, n);
    std::vector<double> theta(n);
    for (double& x : theta) x = rng.normal();
    PowerResult r = hessian_lambda_max(fn, theta, 7, 20000, 1e-13);
    const double top = eigen_oracle(a, n).back();
    CHECK(r.lambda == doctest::Approx(top).epsilon(1e-6));
}

TEST_CASE("forgetting bound matches the closed form on diagonal quadratics") {
    Rng rng(613);
    const std::size_t n = 8;
    std::vector<double> b(n * n, 0.0), c(n * n, 0.0);
    double bmax = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        b[i * n + i] = rng.uniform(0.1, 4.0);
        c[i * n + i] = rng.uniform(-2.0, 2.0);
        bmax = std::max(bmax, b[i * n + i]);
    }
    LossGradFn bd = quadratic_loss(b, n), ft = quadratic_loss(c, n);
    std::vector<double> theta(n);
    for (double& x : theta) x = rng.normal();

    const double eta = 1e-2, safety = 1.05;
    BoundReport rep = forgetting_bound_check(bd, ft, theta, eta, 5, safety, 11, 20000, 1e-13);

    double inner = 0.0, gsq = 0.0, gbg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = c[i * n + i] * theta[i];
        inner += b[i * n + i] * theta[i] * gi;
        gsq += gi * gi;
        gbg += gi * b[i * n + i] * gi;
    }
    CHECK(rep.inner == doctest::Approx(inner).epsilon(1e-12));
    CHECK(rep.g_ft_norm == doctest::Approx(std::sqrt(gsq)).epsilon(1e-12));
    CHECK(rep.delta_actual ==
          doctest::Approx(-eta * inner + 0.5 * eta * eta * gbg).epsilon(1e-9));
    REQUIRE(rep.path_lambdas.size() == 5);
    for (double l : rep.path_lambdas) CHECK(l == doctest::Approx(bmax).epsilon(1e-6));
    CHECK(rep.kappa_bd == doctest::Approx(safety * bmax).epsilon(1e-6));
    CHECK(rep.bound ==
          doctest::Approx(-eta * rep.inner +
                          0.5 * rep.kappa_bd * eta * eta * rep.g_ft_norm * rep.g_ft_norm)
              .epsilon(1e-12));
    const double slack_closed = 0.5 * eta * eta * (safety * bmax * gsq - gbg);
    CHECK(rep.slack == doctest::Approx(slack_closed).epsilon(1e-6));
    CHECK(rep.slack >= 0.0);
}

TEST_CASE("forgetting bound is exact at a zero step and clamps negative curvature") {
    Rng rng(614);
    const std::size_t n = 6;
    std::vector<double> b = random_symmetric(rng, n);
    std::vector<double> c = random_symmetric(rng, n);
    LossGradFn bd = quadratic_loss(b, n), ft = quadratic_loss(c, n);
    std::vector<double> theta(n);
    for (double& x : theta) x = rng.normal();

    BoundReport zero = forgetting_bound_check(bd, ft, theta, 0.0, 3, 1.05, 12, 2000, 1e-12);
    CHECK(zero.delta_actual == 0.0);
    CHECK(zero.bound == 0.0);
    CHECK(zero.slack == 0.0);

    // Concave backdoor loss: the sampled curvature is negative, the
    // envelope clamps at zero, and the remainder term only helps.
    std::vector<double> negdef(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) negdef[i * n + i] = -1.0;
    BoundReport concave = forgetting_bound_check(quadratic_loss(negdef, n), ft, theta, 1e-2, 3,
                                                 1.05, 13, 2000, 1e-12);
    CHECK(concave.kappa_bd == 0.0);
    CHECK(concave.slack >= 0.0);

    CHECK_THROWS_AS(forgetting_bound_check(bd, ft, theta, -1e-3, 3, 1.05, 1, 10, 1e-6),
                    std::invalid_argument);
    CHECK_THROWS_AS(forgetting_bound_check(bd, ft, theta, 1e-3, 1, 1.05, 1, 10, 1e-6),
                    std::invalid_argument);
    CHECK_THROWS_AS(forgetting_bound_check(bd, ft, theta, 1e-3, 3, 0.9, 1, 10, 1e-6),
                    std::invalid_argument);
}

TEST_CASE("curvature monitor respects the self-bounding ratio on linear residuals") {
    // Residuals r_k = a_k . theta give a constant Hessian sum(a_k a_k') and
    // loss 0.5 * sum r_k^2, so the local self-bounding constant at a point is
    // B1 = max_k |a_k| / |r_k| with B2 = 0 and the ratio bound is 2 B1^2.
    Rng rng(615);
    const std::size_t n = 4, kres = 3;
    std::vector<std::vector<double>> rows(kres, std::vector<double>(n));
    for (auto& r : rows)
        for (double& x : r) x = rng.normal();

    LossGradFn fn = [&](std::span<const double> theta) {
        LossAndGrad lg;
        lg.grad.assign(n, 0.0);
        for (const auto& r : rows) {
            const double res = dot(r, theta);
            lg.value += 0.5 * res * res;
            axpy(res, r, lg.grad);
        }
        return lg;
    };

    std::vector<double> theta0(n);
    for (double& x : theta0) x = rng.uniform(0.5, 1.5);
    std::vector<std::vector<double>> traj;
    traj.push_back(std::vector<double>(n, 0.0));  // zero loss, must be skipped
    for (int i = 0; i < 4; ++i) {
        std::vector<double> t = theta0;
        for (double& x : t) x *= std::pow(0.5, i);
        traj.push_back(t);
    }

    CurvatureReport rep = curvature_monitor(fn, traj, 20, 20000, 1e-13);
    REQUIRE(rep.samples.size() == 4);  // the zero point is skipped

    std::vector<double> hess(n * n, 0.0);
    for (const auto& r : rows) outer_acc(hess, n, n, 1.0, r, r);
    const double top = eigen_oracle(hess, n).back();
    for (const auto& s : rep.samples) {
        CHECK(s.lambda_max == doctest::Approx(top).epsilon(1e-6));
        const auto& t = traj[s.index];
        double b1 = 0.0;
        for (const auto& r : rows) b1 = std::max(b1, norm2(r) / std::abs(dot(r, t)));
        CHECK(s.ratio <= 2.0 * b1 * b1 * (1.0 + 1e-6));
        CHECK(s.ratio == doctest::Approx(s.lambda_max / s.loss).epsilon(1e-12));
    }

    // Loss shrinks fourfold per point under constant curvature, so the
    // final ratio is 64x the first: the superlinear tripwire fires.
    CHECK(rep.superlinear_flag);
    CHECK(rep.max_ratio == doctest::Approx(rep.samples.back().ratio).epsilon(1e-12));

    CurvatureReport flat = curvature_monitor(fn, {theta0, theta0}, 21, 2000, 1e-12);
    CHECK_FALSE(flat.superlinear_flag);
}
