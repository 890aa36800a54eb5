#include "poisonlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

constexpr double kZeroGradFloor = 1e-15;

std::vector<double> deviations(std::span<const double> embs, std::size_t n, std::size_t d,
                               const std::vector<double>& centroid) {
    std::vector<double> dev(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) dev[i * d + j] = embs[i * d + j] - centroid[j];
    return dev;
}

double max_row_norm(const std::vector<double>& rows, std::size_t n, std::size_t d) {
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        r = std::max(r, norm2({rows.data() + i * d, d}));
    return r;
}

}  // namespace

ContractionTrace embedding_gd_contraction(std::span<const double> embs, std::size_t n,
                                          std::size_t d, double gamma, double lambda_t2t,
                                          int steps) {
    if (n == 0 || embs.size() != n * d) throw std::invalid_argument("contraction: bad shape");
    if (steps < 0) throw std::invalid_argument("contraction: negative step count");

    std::vector<double> centroid = row_mean(embs, n, d);
    std::vector<double> dev = deviations(embs, n, d, centroid);
    const double factor = 1.0 - 2.0 * gamma * lambda_t2t;

    ContractionTrace tr;
    tr.contraction_factor = std::abs(factor);
    tr.radius.push_back(max_row_norm(dev, n, d));
    tr.centroid.push_back(centroid);
    for (int t = 0; t < steps; ++t) {
        for (double& v : dev) v *= factor;
        tr.radius.push_back(max_row_norm(dev, n, d));
        tr.centroid.push_back(centroid);
        const double prev = tr.radius[tr.radius.size() - 2];
        tr.step_ratio.push_back(prev > 0.0 ? tr.radius.back() / prev : 0.0);
    }

    double log_sum = 0.0;
    std::size_t counted = 0;
    for (double r : tr.step_ratio)
        if (r > 0.0) {
            log_sum += std::log(r);
            ++counted;
        }
    tr.rate_estimate = counted > 0 ? std::exp(log_sum / static_cast<double>(counted)) : 0.0;
    return tr;
}

AlignmentTrace centroid_alignment_run(std::span<const double> embs, std::size_t n, std::size_t d,
                                      std::span<const double> target, double eps_mpe, double gamma,
                                      double lambda_t2t, double lambda_mpe, int steps) {
    if (n == 0 || embs.size() != n * d || target.size() != d)
        throw std::invalid_argument("alignment: bad shape");
    if (eps_mpe < 0.0) throw std::invalid_argument("alignment: negative margin");

    std::vector<double> centroid = row_mean(embs, n, d);
    std::vector<double> dev = deviations(embs, n, d, centroid);
    const double dev_factor = 1.0 - 2.0 * gamma * lambda_t2t;
    const double pull = 2.0 * gamma * lambda_mpe;
    const double hit = std::sqrt(eps_mpe);

    AlignmentTrace tr;
    auto dist = [&] {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double diff = centroid[j] - target[j];
            s += diff * diff;
        }
        return std::sqrt(s);
    };
    tr.centroid_dist.push_back(dist());
    tr.radius.push_back(max_row_norm(dev, n, d));
    bool inside_since_hit = tr.centroid_dist[0] <= hit;
    if (inside_since_hit) tr.first_hit_step = 0;

    for (int t = 0; t < steps; ++t) {
        const double gap = tr.centroid_dist.back() * tr.centroid_dist.back() - eps_mpe;
        if (gap > 0.0)
            for (std::size_t j = 0; j < d; ++j) centroid[j] -= pull * (centroid[j] - target[j]);
        for (double& v : dev) v *= dev_factor;
        tr.centroid_dist.push_back(dist());
        tr.radius.push_back(max_row_norm(dev, n, d));
        const bool inside = tr.centroid_dist.back() <= hit;
        if (inside && tr.first_hit_step < 0) {
            tr.first_hit_step = t + 1;
            inside_since_hit = true;
        } else if (!inside && tr.first_hit_step >= 0) {
            inside_since_hit = false;
        }
    }
    tr.stayed_inside = tr.first_hit_step >= 0 && inside_since_hit;
    return tr;
}

CodirStats summarize_cosines(const std::vector<double>& values) {
    CodirStats s;
    s.count = values.size();
    if (values.empty()) return s;
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    std::size_t pos = 0;
    for (double v : sorted) {
        sum += v;
        if (v > 0.0) ++pos;
    }
    s.mean = sum / static_cast<double>(sorted.size());
    s.p_pos = static_cast<double>(pos) / static_cast<double>(sorted.size());
    auto quantile = [&](double q) {
        const double h = q * static_cast<double>(sorted.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = h - static_cast<double>(lo);
        return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    };
    s.q25 = quantile(0.25);
    s.median = quantile(0.5);
    s.q75 = quantile(0.75);
    return s;
}

CodirReport grad_codirectionality(const ParamVector& p,
                                  const std::vector<std::pair<EncodedBatch, EncodedBatch>>& pairs,
                                  double eps_align, std::span<const double> target_centroid,
                                  const LossWeights& w) {
    const std::size_t d = static_cast<std::size_t>(p.spec.embed_dim);
    if (target_centroid.size() != d)
        throw std::invalid_argument("codirectionality: centroid dimension mismatch");

    CodirReport rep;
    std::vector<double> gated;
    for (const auto& [clean, trig] : pairs) {
        LossAndGrad gc = total_loss(p, clean.images, clean.captions, w);
        LossAndGrad gt = total_loss(p, trig.images, trig.captions, w);
        const double nc = norm2(gc.grad), nt = norm2(gt.grad);
        if (nc < kZeroGradFloor || nt < kZeroGradFloor) {
            ++rep.skipped_zero_grad;
            continue;
        }
        const double cos = dot(gc.grad, gt.grad) / (nc * nt);

        std::vector<double> emb = encode_images(p, trig.images);
        std::vector<double> c = row_mean(emb, trig.images.size(), d);
        const double cdist = std::sqrt(sq_dist(c, target_centroid));
        const bool in_gate = cdist <= eps_align;

        rep.cosines.push_back(cos);
        rep.gate_mask.push_back(in_gate);
        rep.gate_dist.push_back(cdist);
        if (in_gate) gated.push_back(cos);
    }
    rep.ungated = summarize_cosines(rep.cosines);
    rep.gated = summarize_cosines(gated);
    return rep;
}

std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    if (a.size() != n * n) throw std::invalid_argument("eigenvalues: bad shape");
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) scale = std::max(scale, std::abs(a[i * n + j]));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(a[i * n + j] - a[j * n + i]) > 1e-9 * std::max(scale, 1.0))
                throw std::invalid_argument("eigenvalues: matrix not symmetric");

    // Cyclic Jacobi sweeps; quadratic convergence once off-diagonal mass is
    // small. n stays modest here (embedding dimension or test sizes).
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (std::sqrt(off) <= 1e-14 * std::max(scale, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end());
    return eig;
}

SurrogateReport surrogate_bound_check(std::span<const double> u, std::span<const double> delta,
                                      std::span<const double> G, std::size_t d, double eps) {
    if (u.size() != d || delta.size() != d || G.size() != d * d)
        throw std::invalid_argument("surrogate: bad shape");

    std::vector<double> eig = symmetric_eigenvalues({G.begin(), G.end()}, d);
    if (eig.front() < -1e-10) throw std::invalid_argument("surrogate: G is not PSD");
    const double sigma_min = std::max(eig.front(), 0.0);
    const double sigma_max = eig.back();
    if (!(sigma_min > 0.0))
        throw std::invalid_argument("surrogate: G is singular, condition number undefined");

    SurrogateReport r;
    r.m = norm2(u);
    r.delta_norm = norm2(delta);
    r.sigma_min = sigma_min;
    r.sigma_max = sigma_max;
    r.kappa = sigma_max / sigma_min;

    std::vector<double> w(d);  // u + delta
    for (std::size_t i = 0; i < d; ++i) w[i] = u[i] + delta[i];
    r.identity_lhs = dot(u, w);
    r.identity_rhs = r.m * (r.m - r.delta_norm);

    std::vector<double> Gw(d);
    matvec(G, d, d, w, Gw);
    r.metric_lhs = dot(u, Gw);
    r.metric_rhs = r.m * (sigma_min * r.m - sigma_max * r.delta_norm);

    auto holds = [](double lhs, double rhs) {
        const double scale = std::max({1.0, std::abs(lhs), std::abs(rhs)});
        return lhs - rhs >= -1e-12 * scale;
    };
    r.identity_holds = holds(r.identity_lhs, r.identity_rhs);
    r.metric_holds = holds(r.metric_lhs, r.metric_rhs);
    r.margin_condition = r.m > r.kappa * eps;
    return r;
}

GramResult compute_gram(const ParamVector& p, const std::vector<ImageView>& images) {
    MeanEmbeddingJacobian J = mean_embedding_jacobian(p, images);
    GramResult g;
    g.d = J.rows;
    g.G.assign(J.rows * J.rows, 0.0);
    for (std::size_t i = 0; i < J.rows; ++i)
        for (std::size_t j = i; j < J.rows; ++j) {
            const double v = dot({J.values.data() + i * J.cols, J.cols},
                                 {J.values.data() + j * J.cols, J.cols});
            g.G[i * J.rows + j] = v;
            g.G[j * J.rows + i] = v;
        }
    g.eigenvalues = symmetric_eigenvalues(g.G, g.d);
    if (g.eigenvalues.front() < -1e-10)
        throw std::runtime_error("gram: negative eigenvalue beyond tolerance");
    g.sigma_min = std::max(g.eigenvalues.front(), 0.0);
    g.sigma_max = g.eigenvalues.back();
    if (!(g.sigma_min > 0.0))
        throw std::runtime_error("gram: rank-deficient, condition number undefined");
    g.kappa = g.sigma_max / g.sigma_min;
    return g;
}

std::vector<double> hvp(const LossGradFn& fn, std::span<const double> theta,
                        std::span<const double> v, double step) {
    const double vn = norm2(v);
    if (vn == 0.0) return std::vector<double>(theta.size(), 0.0);
    double h = step;
    if (h <= 0.0)
        h = std::cbrt(std::numeric_limits<double>::epsilon()) * (1.0 + norm2(theta)) / vn;

    std::vector<double> plus(theta.begin(), theta.end());
    std::vector<double> minus(theta.begin(), theta.end());
    axpy(h, v, plus);
    axpy(-h, v, minus);
    LossAndGrad gp = fn(plus);
    LossAndGrad gm = fn(minus);
    if (gp.grad.size() != theta.size() || gm.grad.size() != theta.size())
        throw std::runtime_error("hvp: gradient size mismatch");

    std::vector<double> out(theta.size());
    const double inv = 1.0 / (2.0 * h);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp.grad[i] - gm.grad[i]) * inv;
    if (!all_finite(out)) throw std::runtime_error("hvp: non-finite result");
    return out;
}

namespace {

struct PowerPass {
    PowerResult res;
    std::vector<double> x;  // final unit iterate
};

PowerPass run_power(const std::function<std::vector<double>(std::span<const double>)>& apply,
                    std::vector<double> x, int max_iters, double tol) {
    const std::size_t dim = x.size();
    PowerPass pass;
    double lambda_prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= max_iters; ++k) {
        std::vector<double> y = apply(x);
        if (y.size() != dim) throw std::runtime_error("power iteration: operator size mismatch");
        pass.res.lambda = dot(x, y);
        pass.res.iterations = k;

        double rnorm = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            const double r = y[i] - pass.res.lambda * x[i];
            rnorm += r * r;
        }
        pass.res.residual = std::sqrt(rnorm) / std::max(std::abs(pass.res.lambda), 1e-300);

        const double yn = norm2(y);
        if (yn <= 1e-300) {
            // x is (numerically) annihilated: Rayleigh quotient is exact.
            pass.res.converged = true;
            break;
        }
        for (std::size_t i = 0; i < dim; ++i) x[i] = y[i] / yn;
        if (std::abs(pass.res.lambda - lambda_prev) <=
            tol * std::max(std::abs(pass.res.lambda), 1e-30)) {
            pass.res.converged = true;
            break;
        }
        lambda_prev = pass.res.lambda;
    }
    pass.x = std::move(x);
    return pass;
}

}  // namespace

PowerResult power_lambda_max(
    const std::function<std::vector<double>(std::span<const double>)>& apply, std::size_t dim,
    std::uint64_t seed, int max_iters, double tol) {
    if (dim == 0 || max_iters < 1) throw std::invalid_argument("power iteration: bad arguments");
    Rng rng = Rng::for_stage(seed, "power-iteration");
    auto draw_unit = [&] {
        std::vector<double> x(dim);
        for (double& v : x) v = rng.normal();
        const double xn = norm2(x);
        for (double& v : x) v /= xn;
        return x;
    };

    PowerPass first = run_power(apply, draw_unit(), max_iters, tol);
    if (first.res.lambda >= 0.0) return first.res;

    // The magnitude-dominant Rayleigh limit is negative, which estimates the
    // bottom of the spectrum, not the top. Rerun on the nonnegative-shifted
    // operator A - mu I (mu < 0) whose dominant eigenvalue is lambda_max - mu,
    // then undo the shift. The combined value is still a Rayleigh quotient of
    // the original operator, so it never exceeds the true top eigenvalue.
    const double mu = first.res.lambda;
    auto shifted = [&](std::span<const double> v) {
        std::vector<double> y = apply(v);
        if (y.size() != dim) throw std::runtime_error("power iteration: operator size mismatch");
        for (std::size_t i = 0; i < dim; ++i) y[i] -= mu * v[i];
        return y;
    };
    PowerPass second = run_power(shifted, draw_unit(), max_iters, tol);

    PowerResult res;
    res.lambda = second.res.lambda + mu;
    res.iterations = first.res.iterations + second.res.iterations;
    res.converged = first.res.converged && second.res.converged;

    std::vector<double> y = apply(second.x);
    double rnorm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double r = y[i] - res.lambda * second.x[i];
        rnorm += r * r;
    }
    res.residual = std::sqrt(rnorm) / std::max(std::abs(res.lambda), 1e-300);
    return res;
}

PowerResult hessian_lambda_max(const LossGradFn& fn, std::span<const double> theta,
                               std::uint64_t seed, int max_iters, double tol) {
    auto apply = [&](std::span<const double> v) { return hvp(fn, theta, v); };
    return power_lambda_max(apply, theta.size(), seed, max_iters, tol);
}

BoundReport forgetting_bound_check(const LossGradFn& backdoor_loss, const LossGradFn& clean_loss,
                                   std::span<const double> theta, double eta, int path_samples,
                                   double safety, std::uint64_t seed, int power_iters,
                                   double power_tol) {
    if (eta < 0.0) throw std::invalid_argument("bound check: negative step");
    if (path_samples < 2) throw std::invalid_argument("bound check: need >= 2 path samples");
    if (safety < 1.0) throw std::invalid_argument("bound check: safety factor below 1");

    LossAndGrad ft = clean_loss(theta);
    LossAndGrad bd = backdoor_loss(theta);

    BoundReport rep;
    rep.eta = eta;
    rep.inner = dot(bd.grad, ft.grad);
    rep.g_ft_norm = norm2(ft.grad);

    std::vector<double> moved(theta.begin(), theta.end());
    axpy(-eta, ft.grad, moved);
    rep.delta_actual = backdoor_loss(moved).value - bd.value;

    double path_max = 0.0;  // negative curvature only helps; the bound uses max(. , 0)
    for (int i = 0; i < path_samples; ++i) {
        const double s = static_cast<double>(i) / static_cast<double>(path_samples - 1);
        std::vector<double> at(theta.begin(), theta.end());
        axpy(-s * eta, ft.grad, at);
        PowerResult pr = hessian_lambda_max(backdoor_loss, at, seed + static_cast<std::uint64_t>(i),
                                            power_iters, power_tol);
        rep.path_lambdas.push_back(pr.lambda);
        path_max = std::max(path_max, pr.lambda);
    }
    rep.kappa_bd = safety * path_max;
    rep.bound = -eta * rep.inner + 0.5 * rep.kappa_bd * eta * eta * rep.g_ft_norm * rep.g_ft_norm;
    rep.slack = rep.bound - rep.delta_actual;
    return rep;
}

CurvatureReport curvature_monitor(const LossGradFn& align_fn,
                                  const std::vector<std::vector<double>>& trajectory,
                                  std::uint64_t seed, int power_iters, double power_tol) {
    CurvatureReport rep;
    double first_ratio = 0.0, last_ratio = 0.0;
    for (std::size_t i = 0; i < trajectory.size(); ++i) {
        LossAndGrad lg = align_fn(trajectory[i]);
        if (lg.value < 1e-12) continue;  // ratio blows up on a vanished loss; skip
        PowerResult pr = hessian_lambda_max(align_fn, trajectory[i],
                                            seed + static_cast<std::uint64_t>(i), power_iters,
                                            power_tol);
        CurvatureSample s;
        s.index = i;
        s.loss = lg.value;
        s.lambda_max = pr.lambda;
        s.residual = pr.residual;
        s.ratio = pr.lambda / lg.value;
        rep.samples.push_back(s);
        rep.max_ratio = std::max(rep.max_ratio, s.ratio);
        if (first_ratio == 0.0 && s.ratio > 0.0) first_ratio = s.ratio;
        last_ratio = s.ratio;
    }
    rep.superlinear_flag = first_ratio > 0.0 && last_ratio > 10.0 * first_ratio;
    return rep;
}

}  // namespace poisonlab
