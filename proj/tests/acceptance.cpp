// Acceptance suite. Each criterion runs end to end at its stated tolerance
// and contributes exactly one PASS/FAIL line with the measured values; the
// process exits nonzero when any criterion fails. argv[1] names the CLI
// binary, used by the byte-determinism criterion.
//
// Oracles are independent of the paths they check: dense eigendecompositions
// and SVDs come from Eigen, finite differences are computed coordinate-wise
// from loss values, and selection baselines are recomputed from the
// documented scoring contract.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "poisonlab/config.hpp"
#include "poisonlab/losses.hpp"
#include "poisonlab/pipeline.hpp"
#include "poisonlab/poisoning.hpp"
#include "poisonlab/synth.hpp"
#include "poisonlab/theory.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;
using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

struct Outcome {
    bool ok = false;
    std::string detail;
};

// ---- shared numeric helpers ----

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::vector<double> x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double step = h * (1.0 + std::abs(x[i]));
        const double keep = x[i];
        x[i] = keep + step;
        const double up = f(x);
        x[i] = keep - step;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

// Worst coordinate error relative to the gradient's own scale.
double max_rel_err(std::span<const double> analytic, std::span<const double> fd) {
    double scale = 1.0;
    for (double v : analytic) scale = std::max(scale, std::abs(v));
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / scale);
    return worst;
}

EncoderSpec small_spec() {
    EncoderSpec s;
    s.image_h = 3;
    s.image_w = 3;
    s.hidden_dim = 4;
    s.text_embed_dim = 3;
    s.embed_dim = 4;
    s.vocab_size = 8;
    return s;
}

ParamVector with_values(const ParamVector& like, std::span<const double> v) {
    ParamVector p = like;
    p.values.assign(v.begin(), v.end());
    return p;
}

struct SmallBatch {
    std::vector<std::vector<double>> image_store;
    std::vector<std::vector<std::int32_t>> caption_store;
    std::vector<ImageView> images;
    std::vector<CaptionView> captions;
};

SmallBatch random_small_batch(Rng& rng, const EncoderSpec& spec, std::size_t n) {
    SmallBatch b;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> img(static_cast<std::size_t>(spec.image_h * spec.image_w));
        for (double& v : img) v = rng.uniform();
        b.image_store.push_back(std::move(img));
        std::vector<std::int32_t> cap(3 + rng.below(3));
        for (auto& t : cap) t = static_cast<std::int32_t>(rng.below(spec.vocab_size));
        b.caption_store.push_back(std::move(cap));
    }
    for (const auto& img : b.image_store) b.images.emplace_back(img);
    for (const auto& cap : b.caption_store) b.captions.emplace_back(cap);
    return b;
}

std::vector<double> random_params_point(Rng& rng, const EncoderSpec& spec) {
    ParamVector base = init_params(spec, rng.next_u64());
    for (double& v : base.values) v += 0.3 * rng.normal();
    return base.values;
}

// ---- criterion 1: analytic gradients against central differences ----

Outcome criterion_gradients() {
    const auto t0 = clock_type::now();
    const EncoderSpec spec = small_spec();
    const ParamVector proto = init_params(spec, 1);
    const std::size_t d = static_cast<std::size_t>(spec.embed_dim);
    Rng rng(20240901);
    LossWeights w;

    const int points = 20;
    double worst_smooth = 0.0;
    double worst_ewc = 0.0;

    // contrastive loss through both towers
    {
        SmallBatch b = random_small_batch(rng, spec, 5);
        for (int i = 0; i < points; ++i) {
            std::vector<double> theta = random_params_point(rng, spec);
            LossAndGrad lg = total_loss(with_values(proto, theta), b.images, b.captions, w);
            auto value = [&](std::span<const double> x) {
                return total_loss(with_values(proto, x), b.images, b.captions, w).value;
            };
            worst_smooth = std::max(worst_smooth, max_rel_err(lg.grad, fd_gradient(value, theta)));
        }
    }

    // cross-modal misalignment over poisoned pairs
    {
        SmallBatch b = random_small_batch(rng, spec, 4);
        std::vector<AlignPair> pairs;
        for (std::size_t i = 0; i < b.images.size(); ++i)
            pairs.push_back({b.images[i], b.captions[i]});
        for (int i = 0; i < points; ++i) {
            std::vector<double> theta = random_params_point(rng, spec);
            LossAndGrad lg = align_loss(with_values(proto, theta), pairs);
            auto value = [&](std::span<const double> x) {
                return align_loss(with_values(proto, x), pairs).value;
            };
            worst_smooth = std::max(worst_smooth, max_rel_err(lg.grad, fd_gradient(value, theta)));
        }
    }

    // quadratic anchor; the tolerance is tighter because the loss is exactly
    // quadratic and central differences are exact up to rounding
    {
        ParamVector anchor = init_params(spec, 7);
        std::vector<double> fisher(anchor.values.size());
        for (double& v : fisher) v = rng.uniform();
        for (int i = 0; i < points; ++i) {
            std::vector<double> theta = random_params_point(rng, spec);
            LossAndGrad lg = ewc_loss(with_values(proto, theta), anchor, fisher);
            auto value = [&](std::span<const double> x) {
                return ewc_loss(with_values(proto, x), anchor, fisher).value;
            };
            worst_ewc = std::max(worst_ewc, max_rel_err(lg.grad, fd_gradient(value, theta)));
        }
    }

    // combined poisoned-training objective
    {
        SmallBatch clean = random_small_batch(rng, spec, 5);
        SmallBatch pois = random_small_batch(rng, spec, 3);
        std::vector<AlignPair> pairs;
        for (std::size_t i = 0; i < pois.images.size(); ++i)
            pairs.push_back({pois.images[i], pois.captions[i]});
        ParamVector anchor = init_params(spec, 9);
        std::vector<double> fisher(anchor.values.size());
        for (double& v : fisher) v = rng.uniform();
        for (int i = 0; i < points; ++i) {
            std::vector<double> theta = random_params_point(rng, spec);
            ModelObjectiveResult mo = model_objective(with_values(proto, theta), clean.images,
                                                      clean.captions, pairs, anchor, fisher, w);
            auto value = [&](std::span<const double> x) {
                return model_objective(with_values(proto, x), clean.images, clean.captions, pairs,
                                       anchor, fisher, w)
                    .value;
            };
            worst_smooth = std::max(worst_smooth, max_rel_err(mo.grad, fd_gradient(value, theta)));
        }
    }

    // embedding-space losses, gradients with respect to the stacked rows
    {
        const std::size_t n = 6;
        for (int i = 0; i < points; ++i) {
            std::vector<double> embs(n * d);
            for (double& v : embs) v = rng.normal();

            LossAndGrad tg = t2t_loss(embs, n, d);
            auto tval = [&](std::span<const double> x) { return t2t_loss(x, n, d).value; };
            worst_smooth = std::max(worst_smooth, max_rel_err(tg.grad, fd_gradient(tval, embs)));

            // keep the sampled point away from the hinge kink so the central
            // stencil stays on one branch
            std::vector<double> target(d);
            double margin = 0.0;
            do {
                for (double& v : target) v = rng.normal();
                std::vector<double> mean(d, 0.0);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < d; ++j) mean[j] += embs[r * d + j] / double(n);
                margin = 0.0;
                for (std::size_t j = 0; j < d; ++j)
                    margin += (mean[j] - target[j]) * (mean[j] - target[j]);
                margin -= w.eps_mpe;
            } while (std::abs(margin) < 1e-3);
            LossAndGrad mg = mpe_loss(embs, n, d, target, w.eps_mpe);
            auto mval = [&](std::span<const double> x) {
                return mpe_loss(x, n, d, target, w.eps_mpe).value;
            };
            worst_smooth = std::max(worst_smooth, max_rel_err(mg.grad, fd_gradient(mval, embs)));

            std::vector<double> targets_rows(n * d);
            for (double& v : targets_rows) v = rng.normal();
            LossAndGrad ig = i2t_loss(embs, n, d, targets_rows);
            auto ival = [&](std::span<const double> x) {
                return i2t_loss(x, n, d, targets_rows).value;
            };
            worst_smooth = std::max(worst_smooth, max_rel_err(ig.grad, fd_gradient(ival, embs)));
        }
    }

    // patch objective, gradient with respect to the trigger values only
    {
        SmallBatch b = random_small_batch(rng, spec, 4);
        std::vector<TriggerBatchItem> items;
        for (std::size_t i = 0; i < b.images.size(); ++i)
            items.push_back({b.images[i], {static_cast<int>(rng.below(2)),
                                           static_cast<int>(rng.below(2))},
                             i % 2});
        SmallBatch frag = random_small_batch(rng, spec, 2);
        std::vector<double> frag_embs = encode_texts(proto, frag.captions);
        std::vector<double> centroid(d);
        for (double& v : centroid) v = rng.normal();
        double nc = 0.0;
        for (double v : centroid) nc += v * v;
        for (double& v : centroid) v /= std::sqrt(nc);

        TriggerPattern trig;
        trig.height = 2;
        trig.width = 2;
        for (int i = 0; i < points; ++i) {
            trig.values.assign(4, 0.0);
            for (double& v : trig.values) v = 0.05 + 0.9 * rng.uniform();
            TriggerObjectiveResult r = trigger_objective(proto, trig, items, spec.image_h,
                                                         spec.image_w, frag_embs, centroid, w);
            auto value = [&](std::span<const double> x) {
                TriggerPattern t2 = trig;
                t2.values.assign(x.begin(), x.end());
                return trigger_objective(proto, t2, items, spec.image_h, spec.image_w, frag_embs,
                                         centroid, w)
                    .value;
            };
            worst_smooth =
                std::max(worst_smooth, max_rel_err(r.grad_trigger, fd_gradient(value, trig.values)));
        }
    }

    const double elapsed = seconds_since(t0);
    const bool ok = worst_smooth <= 1e-5 && worst_ewc <= 1e-8 && elapsed < 30.0;
    return {ok, fmt("max rel err %.2e (anchor %.2e), 20 points per loss, %.1f s", worst_smooth,
                    worst_ewc, elapsed)};
}

// ---- criterion 2: exact embedding-space contraction ----

Outcome criterion_contraction() {
    const auto t0 = clock_type::now();
    Rng rng(77);
    const std::size_t n = 16, d = 8;
    double worst = 0.0;
    bool centroids_fixed = true;
    for (double gl : {0.05, 0.1, 0.25}) {
        std::vector<double> embs(n * d);
        for (double& v : embs) v = rng.normal();
        ContractionTrace tr = embedding_gd_contraction(embs, n, d, gl, 1.0, 100);
        const double factor = std::abs(1.0 - 2.0 * gl);
        for (double ratio : tr.step_ratio)
            worst = std::max(worst, std::abs(ratio - factor) / factor);
        for (const auto& c : tr.centroid)
            if (c != tr.centroid.front()) centroids_fixed = false;
    }
    const double elapsed = seconds_since(t0);
    const bool ok = worst <= 1e-10 && centroids_fixed && elapsed < 1.0;
    return {ok, fmt("ratio err %.2e, centroid bit-identical %s, %.2f s", worst,
                    centroids_fixed ? "yes" : "NO", elapsed)};
}

// ---- criterion 3: centroid alignment reaches and keeps the margin ----

Outcome criterion_alignment() {
    const auto t0 = clock_type::now();
    const std::size_t n = 16, d = 8;
    int converged = 0, held = 0, runs = 0;
    int worst_hit = -1;
    for (double eps : {0.01, 0.1}) {
        for (int i = 0; i < 50; ++i) {
            Rng rng(9000 + static_cast<std::uint64_t>(i) + (eps < 0.05 ? 0 : 1000));
            std::vector<double> embs(n * d);
            for (double& v : embs) v = rng.normal();
            std::vector<double> target(d);
            double nt = 0.0;
            for (double& v : target) {
                v = rng.normal();
                nt += v * v;
            }
            for (double& v : target) v = 2.0 * v / std::sqrt(nt);
            AlignmentTrace tr =
                centroid_alignment_run(embs, n, d, target, eps, 0.125, 0.1, 1.0, 10000);
            ++runs;
            if (tr.first_hit_step >= 0 && tr.first_hit_step <= 10000) {
                ++converged;
                worst_hit = std::max(worst_hit, tr.first_hit_step);
            }
            if (tr.stayed_inside) ++held;
        }
    }
    const double elapsed = seconds_since(t0);
    const bool ok = converged == runs && held == runs && elapsed < 10.0;
    return {ok, fmt("%d/%d inits hit the margin (worst step %d), %d/%d stayed inside, %.2f s",
                    converged, runs, worst_hit, held, runs, elapsed)};
}

// ---- criterion 4: inner-product surrogate algebra + Gram conditioning ----

Outcome criterion_surrogate() {
    const auto t0 = clock_type::now();
    Rng rng(4242);
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = 2 + rng.below(7);
        const double scale = std::pow(10.0, rng.uniform(-3.0, 3.0));
        std::vector<double> u(d), delta(d);
        for (double& v : u) v = scale * rng.normal();
        for (double& v : delta) v = scale * rng.normal();
        std::vector<double> a(d * d), G(d * d, 0.0);
        for (double& v : a) v = rng.normal();
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) s += a[k * d + i] * a[k * d + j];
                G[i * d + j] = s;
            }
        SurrogateReport rep = surrogate_bound_check(u, delta, G, d, 0.1);
        if (!rep.identity_holds || !rep.metric_holds) ++violations;
    }

    // conditioning of the mean-embedding Gram against an SVD of the Jacobian
    const EncoderSpec spec = small_spec();
    ParamVector p = init_params(spec, 3);
    SmallBatch b = random_small_batch(rng, spec, 6);
    GramResult gram = compute_gram(p, b.images);
    MeanEmbeddingJacobian J = mean_embedding_jacobian(p, b.images);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> jm(
        J.values.data(), static_cast<Eigen::Index>(J.rows), static_cast<Eigen::Index>(J.cols));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(jm);
    const auto& sv = svd.singularValues();
    const double kappa_svd =
        (sv(sv.size() - 1) > 0.0) ? std::pow(sv(0) / sv(sv.size() - 1), 2.0) : 0.0;
    const double kappa_err = std::abs(gram.kappa - kappa_svd) / kappa_svd;

    const double elapsed = seconds_since(t0);
    const bool ok = violations == 0 && kappa_err <= 1e-8 && elapsed < 30.0;
    return {ok, fmt("0 of 1000 trials allowed, violations %d; kappa vs SVD rel err %.2e; %.1f s",
                    violations, kappa_err, elapsed)};
}

// ---- criterion 5: power iteration and HVP against dense oracles ----

Outcome criterion_curvature_oracles() {
    const auto t0 = clock_type::now();
    Rng rng(515151);
    double worst_lambda = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + rng.below(196);
        std::vector<double> A(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = rng.normal();
                A[i * n + j] = v;
                A[j * n + i] = v;
            }
        LossGradFn quad = [&](std::span<const double> x) {
            LossAndGrad lg;
            lg.grad.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += A[i * n + j] * x[j];
                lg.grad[i] = s;
                lg.value += 0.5 * x[i] * s;
            }
            return lg;
        };
        std::vector<double> theta(n);
        for (double& v : theta) v = rng.normal();
        PowerResult pr = hessian_lambda_max(quad, theta, 1234 + trial, 20000, 1e-13);
        Eigen::Map<const Eigen::MatrixXd> am(A.data(), static_cast<Eigen::Index>(n),
                                             static_cast<Eigen::Index>(n));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(am);
        const double truth = es.eigenvalues().maxCoeff();
        worst_lambda = std::max(worst_lambda, std::abs(pr.lambda - truth) / std::abs(truth));
    }

    // HVP against a dense finite-difference Hessian of the contrastive loss
    const EncoderSpec spec = small_spec();
    const ParamVector proto = init_params(spec, 5);
    SmallBatch b = random_small_batch(rng, spec, 4);
    LossGradFn fn = [&](std::span<const double> x) {
        return total_loss(with_values(proto, x), b.images, b.captions, LossWeights{});
    };
    double worst_hvp = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<double> theta = random_params_point(rng, spec);
        const std::size_t n = theta.size();
        std::vector<double> v(n);
        for (double& x : v) x = rng.normal();
        std::vector<double> hv = hvp(fn, theta, v);

        const double h = 1e-5;
        std::vector<double> dense_hv(n, 0.0);
        std::vector<double> probe = theta;
        for (std::size_t j = 0; j < n; ++j) {
            const double step = h * (1.0 + std::abs(theta[j]));
            probe[j] = theta[j] + step;
            std::vector<double> gp = fn(probe).grad;
            probe[j] = theta[j] - step;
            std::vector<double> gm = fn(probe).grad;
            probe[j] = theta[j];
            for (std::size_t i = 0; i < n; ++i)
                dense_hv[i] += (gp[i] - gm[i]) / (2.0 * step) * v[j];
        }
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            num += (hv[i] - dense_hv[i]) * (hv[i] - dense_hv[i]);
            den += dense_hv[i] * dense_hv[i];
        }
        worst_hvp = std::max(worst_hvp, std::sqrt(num / den));
    }

    const double elapsed = seconds_since(t0);
    const bool ok = worst_lambda <= 1e-6 && worst_hvp <= 1e-4 && elapsed < 60.0;
    return {ok, fmt("lambda_max rel err %.2e over 20 quadratics; hvp vs dense rel err %.2e; %.1f s",
                    worst_lambda, worst_hvp, elapsed)};
}

// ---- criterion 6: one-step forgetting bound on the trained model ----

Outcome criterion_forgetting(const ExperimentResult& run) {
    const auto t0 = clock_type::now();
    const RunConfig& cfg = run.config;
    Dataset d = generate_dataset(cfg.synth_config());
    LossWeights w = cfg.loss_weights();
    TargetDescriptionSet targets =
        make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);

    std::vector<std::size_t> nontarget;
    for (std::size_t idx : run.split.eval)
        if (d.labels[idx] != cfg.data.target_class) nontarget.push_back(idx);

    Rng clean_rng = Rng::for_stage(cfg.seed, "acceptance/bound-clean");
    Rng bd_rng = Rng::for_stage(cfg.seed, "acceptance/bound-backdoor");
    const std::size_t bsz = 32;
    double min_slack = 1e300;
    int violations = 0;
    for (int pair = 0; pair < 20; ++pair) {
        std::vector<std::size_t> cp = clean_rng.sample_without_replacement(run.ft_set.size(), bsz);
        std::vector<ImageView> cimgs;
        std::vector<CaptionView> ccaps;
        for (std::size_t pick : cp) {
            cimgs.emplace_back(d.images[run.ft_set[pick]]);
            ccaps.emplace_back(d.captions[run.ft_set[pick]]);
        }

        std::vector<std::vector<double>> bimg_store;
        std::vector<std::vector<std::int32_t>> bcap_store;
        std::vector<std::size_t> bp = bd_rng.sample_without_replacement(nontarget.size(), bsz);
        for (std::size_t pick : bp) {
            const std::size_t idx = nontarget[pick];
            Placement at =
                random_placement(d.config.grid_h, d.config.grid_w, run.stage1.trigger, bd_rng);
            bimg_store.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                              run.stage1.trigger, at, /*deploy=*/true));
            const auto& frag = targets.fragments[bd_rng.below(targets.fragments.size())];
            bcap_store.push_back(
                fuse_caption(d.captions[idx], frag, bd_rng.below(d.captions[idx].size() + 1),
                             static_cast<std::size_t>(d.config.caption_len_max)));
        }
        std::vector<ImageView> bimgs;
        std::vector<CaptionView> bcaps;
        for (const auto& img : bimg_store) bimgs.emplace_back(img);
        for (const auto& cap : bcap_store) bcaps.emplace_back(cap);

        LossGradFn clean_fn = [&](std::span<const double> x) {
            return total_loss(with_values(run.theta_star, x), cimgs, ccaps, w);
        };
        LossGradFn bd_fn = [&](std::span<const double> x) {
            return total_loss(with_values(run.theta_star, x), bimgs, bcaps, w);
        };
        const std::uint64_t pair_seed =
            Rng::for_stage(cfg.seed, "acceptance/bound-probe", static_cast<std::uint64_t>(pair))
                .next_u64();
        BoundReport rep = forgetting_bound_check(bd_fn, clean_fn, run.theta_star.values, 1e-3, 5,
                                                 1.05, pair_seed, 200, 1e-6);
        min_slack = std::min(min_slack, rep.slack);
        if (rep.slack < -1e-8) ++violations;
    }
    const double elapsed = seconds_since(t0);
    const bool ok = violations == 0 && elapsed < 300.0;
    return {ok, fmt("min slack %.3e over 20 batch pairs at eta 1e-3, violations %d, %.0f s",
                    min_slack, violations, elapsed)};
}

// ---- criterion 7: selection against exhaustive baselines ----

struct TinySelection {
    Dataset d;
    ParamVector theta0;
    TargetDescriptionSet targets;
    std::vector<std::size_t> pool;
    std::vector<std::vector<double>> fused_embs;  // canonical scoring embedding per candidate
    std::vector<double> centroid;
};

TinySelection tiny_selection_instance(std::uint64_t seed) {
    TinySelection t;
    SynthConfig sc;
    sc.num_classes = 2;
    sc.vocab_size = 8;
    sc.grid_h = 6;
    sc.grid_w = 6;
    sc.samples_per_class = 4;
    sc.caption_len_min = 3;
    sc.caption_len_max = 6;
    sc.seed = seed;
    t.d = generate_dataset(sc);

    EncoderSpec spec;
    spec.image_h = 6;
    spec.image_w = 6;
    spec.hidden_dim = 6;
    spec.text_embed_dim = 4;
    spec.embed_dim = 4;
    spec.vocab_size = 8;
    t.theta0 = init_params(spec, seed + 1);
    t.targets = make_target_set(t.d, 0, 2, seed);
    for (std::size_t i = 0; i < t.d.size(); ++i) t.pool.push_back(i);

    // canonical scoring fusion: fragment = position mod m, insert at n/2
    const std::size_t d_emb = static_cast<std::size_t>(spec.embed_dim);
    std::vector<CaptionView> frag_views;
    for (const auto& f : t.targets.fragments) frag_views.emplace_back(f);
    std::vector<double> frag_embs = encode_texts(t.theta0, frag_views);
    t.centroid.assign(d_emb, 0.0);
    for (std::size_t r = 0; r < frag_views.size(); ++r)
        for (std::size_t j = 0; j < d_emb; ++j)
            t.centroid[j] += frag_embs[r * d_emb + j] / double(frag_views.size());

    for (std::size_t pos = 0; pos < t.pool.size(); ++pos) {
        const auto& cap = t.d.captions[t.pool[pos]];
        std::vector<std::int32_t> fused =
            fuse_caption(cap, t.targets.fragments[pos % t.targets.fragments.size()],
                         cap.size() / 2, static_cast<std::size_t>(sc.caption_len_max));
        std::vector<CaptionView> one{fused};
        t.fused_embs.push_back(encode_texts(t.theta0, one));
    }
    return t;
}

double subset_objective(const TinySelection& t, const std::vector<std::size_t>& positions) {
    const std::size_t d_emb = t.centroid.size();
    std::vector<double> mean(d_emb, 0.0);
    for (std::size_t pos : positions)
        for (std::size_t j = 0; j < d_emb; ++j)
            mean[j] += t.fused_embs[pos][j] / double(positions.size());
    double sq = 0.0;
    for (std::size_t j = 0; j < d_emb; ++j)
        sq += (mean[j] - t.centroid[j]) * (mean[j] - t.centroid[j]);
    return std::sqrt(sq);
}

Outcome criterion_selection() {
    const auto t0 = clock_type::now();
    int first_pick_matches = 0;
    int greedy_le_rank = 0;
    int greedy_matches_brute = 0;
    double brute_gap_sum = 0.0;
    const int instances = 100;
    for (int inst = 0; inst < instances; ++inst) {
        TinySelection t = tiny_selection_instance(5000 + static_cast<std::uint64_t>(inst));
        SelectionProblem prob;
        prob.theta0 = &t.theta0;
        prob.dataset = &t.d;
        prob.pool = t.pool;
        prob.targets = &t.targets;

        SelectionResult greedy = gma_select(prob, 3);
        SelectionResult rank = rank_select(prob, 3);

        // global single-sample argmin
        std::size_t best_pos = 0;
        double best = 1e300;
        for (std::size_t pos = 0; pos < t.pool.size(); ++pos) {
            const double v = subset_objective(t, {pos});
            if (v < best) {
                best = v;
                best_pos = pos;
            }
        }
        if (greedy.chosen.front() == t.pool[best_pos]) ++first_pick_matches;
        if (greedy.final_objective <= rank.final_objective + 1e-12) ++greedy_le_rank;

        // all 56 subsets of size 3
        double brute = 1e300;
        for (std::size_t a = 0; a < 8; ++a)
            for (std::size_t b = a + 1; b < 8; ++b)
                for (std::size_t c = b + 1; c < 8; ++c)
                    brute = std::min(brute, subset_objective(t, {a, b, c}));
        if (std::abs(greedy.final_objective - brute) <= 1e-12) ++greedy_matches_brute;
        brute_gap_sum += greedy.final_objective - brute;
    }
    const double elapsed = seconds_since(t0);
    const bool ok = first_pick_matches == instances && greedy_le_rank == instances &&
                    elapsed < 10.0;
    return {ok, fmt("first pick exact %d/%d, greedy<=rank %d/%d; brute-force optimum matched "
                    "%d/%d (mean gap %.2e); %.1f s",
                    first_pick_matches, instances, greedy_le_rank, instances, greedy_matches_brute,
                    instances, brute_gap_sum / instances, elapsed)};
}

// ---- criterion 8: end-to-end attack at the shipped defaults ----

Outcome criterion_end_to_end(ExperimentResult& out_run) {
    const auto t0 = clock_type::now();
    RunConfig cfg;
    cfg.seed = 42;
    out_run = run_experiment(cfg, "");
    const double elapsed = seconds_since(t0);

    ExperimentResult again = run_experiment(cfg, "");
    const bool deterministic = again.theta_star.values == out_run.theta_star.values &&
                               again.eval_poisoned.asr == out_run.eval_poisoned.asr &&
                               again.eval_poisoned.ca == out_run.eval_poisoned.ca;

    const double ca_clean = out_run.eval_clean.ca;
    const double ca = out_run.eval_poisoned.ca;
    const double asr = out_run.eval_poisoned.asr;
    const bool ok = asr >= 0.90 && ca >= ca_clean - 0.05 && deterministic && elapsed < 600.0;
    return {ok, fmt("ASR %.4f (need >= 0.90), CA %.4f vs clean %.4f, deterministic %s, %.0f s",
                    asr, ca, ca_clean, deterministic ? "yes" : "NO", elapsed)};
}

// ---- criteria 9 and 10: ablation ladder and gated co-directionality ----

RunConfig desk_config(std::uint64_t seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.stage1.opt.lr = 0.1;
    cfg.stage1.opt.epochs = 60;
    cfg.stage1.opt.batch_size = 32;
    cfg.stage2.lambda_align = 1.0;
    return cfg;
}

struct LadderRuns {
    std::vector<ExperimentResult> full, no_stability;
};

Outcome criterion_ablation(LadderRuns& keep) {
    const auto t0 = clock_type::now();
    const std::vector<std::uint64_t> seeds = {42, 43, 44, 45, 46};
    double mean[4] = {0.0, 0.0, 0.0, 0.0};
    for (int variant = 0; variant < 4; ++variant) {
        for (std::uint64_t s : seeds) {
            RunConfig cfg = desk_config(s);
            if (variant == 1) cfg.stage2.controllable = false;
            if (variant == 2) cfg.selection.mode = SelectionMode::Random;
            if (variant == 3) {
                cfg.stage1.lambda_t2t = 0.0;
                cfg.stage1.lambda_mpe = 0.0;
            }
            ExperimentResult r = run_experiment(cfg, "");
            mean[variant] += r.eval_post_ft.asr / double(seeds.size());
            if (variant == 0) keep.full.push_back(std::move(r));
            else if (variant == 1) keep.no_stability.push_back(std::move(r));
        }
    }
    const double gap = mean[0] - mean[3];
    const bool ordered = mean[0] >= mean[1] && mean[1] >= mean[2] && mean[2] >= mean[3];
    const double elapsed = seconds_since(t0);
    const bool ok = ordered && gap >= 0.10 && elapsed < 3600.0;
    return {ok, fmt("mean post-FT ASR: full %.4f, no-stability %.4f, random-select %.4f, "
                    "no-trigger-opt %.4f; gap %.4f (need >= 0.10); %.0f s",
                    mean[0], mean[1], mean[2], mean[3], gap, elapsed)};
}

Outcome criterion_codirectionality(LadderRuns& runs) {
    const auto t0 = clock_type::now();
    bool all_ordered = true, all_above_half = true;
    std::string per_seed;
    for (std::size_t i = 0; i < runs.full.size(); ++i) {
        auto gated_p = [](ExperimentResult& r) {
            r.config.theory.bound_batches = 0;  // only the gradient pairing matters here
            r.config.theory.power_iters = 5;
            TheoryRunReport rep = run_theory_checks(r);
            return std::make_pair(rep.codir.gated.p_pos, rep.codir.gated.count);
        };
        auto [pf, nf] = gated_p(runs.full[i]);
        auto [pn, nn] = gated_p(runs.no_stability[i]);
        if (!(pf > pn)) all_ordered = false;
        if (!(pf > 0.5)) all_above_half = false;
        per_seed += fmt(" s%llu %.2f(n%zu)>%.2f(n%zu)",
                        (unsigned long long)runs.full[i].config.seed, pf, nf, pn, nn);
    }
    const double elapsed = seconds_since(t0);
    const bool ok = all_ordered && all_above_half && !runs.full.empty() && elapsed < 300.0;
    return {ok, fmt("gated P+ full vs no-stability per seed:%s; %.0f s", per_seed.c_str(),
                    elapsed)};
}

// ---- criterion 11: byte-identical artifacts across repeated runs ----

Outcome criterion_determinism(const std::string& cli) {
    const auto t0 = clock_type::now();
    if (cli.empty()) return {false, "CLI binary path missing (argv[1])"};
    const fs::path base = fs::temp_directory_path() / "poisonlab_acceptance";
    std::error_code ec;
    fs::remove_all(base, ec);
    fs::create_directories(base);
    const fs::path cfg_path = base / "run.ini";
    {
        RunConfig cfg;
        std::ofstream out(cfg_path);
        out << emit_config(cfg);
    }
    for (const char* leg : {"a", "b"}) {
        const std::string cmd = cli + " run-all --config " + cfg_path.string() + " --out " +
                                (base / leg).string() + " > /dev/null";
        if (std::system(cmd.c_str()) != 0) return {false, "run-all exited nonzero"};
    }

    std::map<std::string, fs::path> a_files, b_files;
    for (const auto& e : fs::recursive_directory_iterator(base / "a"))
        if (e.is_regular_file()) a_files[fs::relative(e.path(), base / "a").string()] = e.path();
    for (const auto& e : fs::recursive_directory_iterator(base / "b"))
        if (e.is_regular_file()) b_files[fs::relative(e.path(), base / "b").string()] = e.path();

    bool identical = a_files.size() == b_files.size();
    std::size_t compared = 0;
    std::string first_diff;
    for (const auto& [rel, pa] : a_files) {
        auto it = b_files.find(rel);
        if (it == b_files.end()) {
            identical = false;
            first_diff = rel + " missing";
            break;
        }
        std::ifstream fa(pa, std::ios::binary), fb(it->second, std::ios::binary);
        std::ostringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        ++compared;
        if (sa.str() != sb.str()) {
            identical = false;
            first_diff = rel;
            break;
        }
    }
    fs::remove_all(base, ec);
    const double elapsed = seconds_since(t0);
    if (!identical)
        return {false, fmt("artifact mismatch at %s after %zu files, %.0f s", first_diff.c_str(),
                           compared, elapsed)};
    return {true, fmt("%zu artifact files byte-identical across two runs, %.0f s", compared,
                      elapsed)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    std::vector<std::pair<std::string, Outcome>> results(11);

    auto guarded = [&](int idx, const std::string& name, const std::function<Outcome()>& body) {
        try {
            results[idx] = {name, body()};
        } catch (const std::exception& e) {
            results[idx] = {name, {false, std::string("exception: ") + e.what()}};
        }
    };

    guarded(0, "gradient correctness", criterion_gradients);
    guarded(1, "contraction exactness", criterion_contraction);
    guarded(2, "centroid alignment", criterion_alignment);
    guarded(3, "surrogate algebra", criterion_surrogate);
    guarded(4, "curvature oracles", criterion_curvature_oracles);

    ExperimentResult default_run;
    guarded(7, "end-to-end attack", [&] { return criterion_end_to_end(default_run); });
    guarded(5, "forgetting bound", [&]() -> Outcome {
        if (default_run.theta_star.values.empty())
            return {false, "skipped: the end-to-end run did not complete"};
        return criterion_forgetting(default_run);
    });
    guarded(6, "selection oracles", criterion_selection);

    LadderRuns ladder;
    guarded(8, "ablation ordering", [&] { return criterion_ablation(ladder); });
    guarded(9, "co-directionality ordering", [&] { return criterion_codirectionality(ladder); });
    guarded(10, "determinism", [&] { return criterion_determinism(cli); });

    int failures = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& [name, out] = results[i];
        if (!out.ok) ++failures;
        std::printf("%s criterion %2zu (%s): %s\n", out.ok ? "PASS" : "FAIL", i + 1, name.c_str(),
                    out.detail.c_str());
    }
    std::printf("%d of 11 criteria passed\n", 11 - failures);
    return failures == 0 ? 0 : 1;
}
