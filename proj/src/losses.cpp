#include "poisonlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

constexpr double kNormFloor = 1e-300;

// Row-stabilized log-sum-exp over one row of length n.
double lse(const double* row, std::size_t n) {
    double m = row[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - m);
    return m + std::log(s);
}

}  // namespace

InfoNceResult info_nce(std::span<const double> image_embs, std::span<const double> text_embs,
                       std::size_t batch, std::size_t dim, double temperature) {
    if (batch == 0) throw std::invalid_argument("info_nce: empty batch");
    if (image_embs.size() != batch * dim || text_embs.size() != batch * dim)
        throw std::invalid_argument("info_nce: embedding size mismatch");
    if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");

    const std::size_t N = batch;
    std::vector<double> S(N * N);  // similarity logits, image rows x text columns
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
            S[i * N + j] =
                dot(image_embs.subspan(i * dim, dim), text_embs.subspan(j * dim, dim)) /
                temperature;

    // Value: per-row and per-column cross entropy of the diagonal.
    double loss = 0.0;
    std::vector<double> col(N);
    for (std::size_t i = 0; i < N; ++i) {
        loss += lse(S.data() + i * N, N) - S[i * N + i];
        for (std::size_t r = 0; r < N; ++r) col[r] = S[r * N + i];
        loss += lse(col.data(), N) - S[i * N + i];
    }
    loss /= 2.0 * static_cast<double>(N);

    // dL/dS = [(row softmax - I) + (column softmax - I)] / 2N.
    std::vector<double> dS(N * N, 0.0);
    std::vector<double> p(N);
    const double inv_2n = 1.0 / (2.0 * static_cast<double>(N));
    for (std::size_t i = 0; i < N; ++i) {
        const double z = lse(S.data() + i * N, N);
        for (std::size_t j = 0; j < N; ++j)
            dS[i * N + j] += inv_2n * (std::exp(S[i * N + j] - z) - (i == j ? 1.0 : 0.0));
    }
    for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t r = 0; r < N; ++r) col[r] = S[r * N + j];
        const double z = lse(col.data(), N);
        for (std::size_t i = 0; i < N; ++i)
            dS[i * N + j] += inv_2n * (std::exp(S[i * N + j] - z) - (i == j ? 1.0 : 0.0));
    }

    InfoNceResult res;
    res.value = loss;
    res.grad_images.assign(N * dim, 0.0);
    res.grad_texts.assign(N * dim, 0.0);
    const double inv_t = 1.0 / temperature;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const double g = dS[i * N + j] * inv_t;
            axpy(g, text_embs.subspan(j * dim, dim), {res.grad_images.data() + i * dim, dim});
            axpy(g, image_embs.subspan(i * dim, dim), {res.grad_texts.data() + j * dim, dim});
        }
    return res;
}

LossAndGrad total_loss(const ParamVector& p, const std::vector<ImageView>& images,
                       const std::vector<CaptionView>& captions, const LossWeights& w) {
    if (images.size() != captions.size())
        throw std::invalid_argument("total_loss: image/caption count mismatch");
    const std::size_t d = static_cast<std::size_t>(p.spec.embed_dim);
    std::vector<double> V = encode_images(p, images);
    std::vector<double> T = encode_texts(p, captions);
    InfoNceResult nce = info_nce(V, T, images.size(), d, w.temperature);

    ImageVjpResult iv = image_vjp(p, images, nce.grad_images);
    TextVjpResult tv = text_vjp(p, captions, nce.grad_texts);

    LossAndGrad out;
    // The auxiliary objective is identically zero here; the weight is kept so
    // the composite reads like the full formula.
    out.value = nce.value + w.lambda_aux * 0.0;
    out.grad = std::move(iv.grad_params);
    axpy(1.0, tv.grad_params, out.grad);
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na <= kNormFloor || nb <= kNormFloor) return 0.0;  // zero-row convention
    return dot(a, b) / (na * nb);
}

void cosine_grad_acc(std::span<const double> a, std::span<const double> b, double scale,
                     std::span<double> ga, std::span<double> gb) {
    const double na = norm2(a), nb = norm2(b);
    if (na <= kNormFloor || nb <= kNormFloor) return;  // value pinned to 0, locally constant
    const double ab = dot(a, b);
    const double inv = 1.0 / (na * nb);
    if (!ga.empty())
        for (std::size_t i = 0; i < a.size(); ++i)
            ga[i] += scale * (b[i] * inv - ab * a[i] / (na * na * na * nb));
    if (!gb.empty())
        for (std::size_t i = 0; i < b.size(); ++i)
            gb[i] += scale * (a[i] * inv - ab * b[i] / (nb * nb * nb * na));
}

LossAndGrad t2t_loss(std::span<const double> embs, std::size_t n, std::size_t d) {
    if (n == 0 || embs.size() != n * d) throw std::invalid_argument("t2t: bad shape");
    std::vector<double> mean = row_mean(embs, n, d);
    LossAndGrad out;
    out.grad.assign(n * d, 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.value += sq_dist(embs.subspan(i * d, d), mean) * inv_n;
        // The centroid's own dependence cancels: deviations sum to zero.
        for (std::size_t j = 0; j < d; ++j)
            out.grad[i * d + j] = 2.0 * inv_n * (embs[i * d + j] - mean[j]);
    }
    return out;
}

LossAndGrad mpe_loss(std::span<const double> embs, std::size_t n, std::size_t d,
                     std::span<const double> target_centroid, double eps) {
    if (n == 0 || embs.size() != n * d || target_centroid.size() != d)
        throw std::invalid_argument("mpe: bad shape");
    if (eps < 0.0) throw std::invalid_argument("mpe: negative margin");
    std::vector<double> mean = row_mean(embs, n, d);
    const double gap = sq_dist(mean, target_centroid) - eps;

    LossAndGrad out;
    out.grad.assign(n * d, 0.0);
    out.value = std::max(gap, 0.0);
    if (gap > 0.0) {
        const double c = 2.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out.grad[i * d + j] = c * (mean[j] - target_centroid[j]);
    }
    return out;
}

LossAndGrad i2t_loss(std::span<const double> embs, std::size_t n, std::size_t d,
                     std::span<const double> targets) {
    if (n == 0 || embs.size() != n * d || targets.size() != n * d)
        throw std::invalid_argument("i2t: bad shape");
    LossAndGrad out;
    out.grad.assign(n * d, 0.0);
    const double scale = -1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.value += scale * cosine(embs.subspan(i * d, d), targets.subspan(i * d, d));
        cosine_grad_acc(embs.subspan(i * d, d), targets.subspan(i * d, d), scale,
                        {out.grad.data() + i * d, d}, {});
    }
    return out;
}

TriggerObjectiveResult trigger_objective(const ParamVector& theta0, const TriggerPattern& trigger,
                                         const std::vector<TriggerBatchItem>& items, int grid_h,
                                         int grid_w, std::span<const double> target_text_embs,
                                         std::span<const double> target_image_centroid,
                                         const LossWeights& w) {
    if (items.empty()) throw std::invalid_argument("trigger_objective: empty batch");
    const std::size_t n = items.size();
    const std::size_t d = static_cast<std::size_t>(theta0.spec.embed_dim);
    if (target_image_centroid.size() != d)
        throw std::invalid_argument("trigger_objective: centroid dimension mismatch");
    const std::size_t m = target_text_embs.size() / d;
    if (target_text_embs.size() != m * d || m == 0)
        throw std::invalid_argument("trigger_objective: bad target embedding matrix");

    std::vector<std::vector<double>> injected;
    injected.reserve(n);
    std::vector<ImageView> views;
    views.reserve(n);
    for (const auto& it : items) {
        if (it.target_index >= m)
            throw std::invalid_argument("trigger_objective: target index out of range");
        injected.push_back(
            inject_image(it.image, grid_h, grid_w, trigger, it.placement, /*deploy=*/false));
        views.emplace_back(injected.back());
    }

    std::vector<double> V = encode_images(theta0, views);
    std::vector<double> per_sample_targets(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            per_sample_targets[i * d + j] = target_text_embs[items[i].target_index * d + j];

    LossAndGrad t2t = t2t_loss(V, n, d);
    LossAndGrad mpe = mpe_loss(V, n, d, target_image_centroid, w.eps_mpe);
    LossAndGrad i2t = i2t_loss(V, n, d, per_sample_targets);

    std::vector<double> upstream(n * d, 0.0);
    axpy(w.lambda_t2t, t2t.grad, upstream);
    axpy(w.lambda_mpe, mpe.grad, upstream);
    axpy(1.0, i2t.grad, upstream);

    ImageVjpResult vjp = image_vjp(theta0, views, upstream);

    TriggerObjectiveResult res;
    res.t2t = t2t.value;
    res.mpe = mpe.value;
    res.i2t = i2t.value;
    res.value = w.lambda_t2t * t2t.value + w.lambda_mpe * mpe.value + i2t.value;
    res.grad_trigger.assign(static_cast<std::size_t>(trigger.height) * trigger.width, 0.0);
    const std::size_t pixels = static_cast<std::size_t>(grid_h) * grid_w;
    for (std::size_t i = 0; i < n; ++i) {
        const Placement at = items[i].placement;
        for (int r = 0; r < trigger.height; ++r)
            for (int c = 0; c < trigger.width; ++c)
                res.grad_trigger[static_cast<std::size_t>(r) * trigger.width + c] +=
                    vjp.grad_inputs[i * pixels +
                                    static_cast<std::size_t>(at.row + r) * grid_w + (at.col + c)];
    }

    res.centroid = row_mean(V, n, d);
    for (std::size_t i = 0; i < n; ++i)
        res.radius = std::max(res.radius, std::sqrt(sq_dist({V.data() + i * d, d}, res.centroid)));
    return res;
}

LossAndGrad align_loss(const ParamVector& p, const std::vector<AlignPair>& pairs) {
    const ParamLayout L = p.layout();
    LossAndGrad out;
    out.grad.assign(L.total, 0.0);
    if (pairs.empty()) return out;  // no poisoned pairs: zero by convention

    const std::size_t d = static_cast<std::size_t>(p.spec.embed_dim);
    std::vector<ImageView> images;
    std::vector<CaptionView> captions;
    for (const auto& pr : pairs) {
        images.push_back(pr.image);
        captions.push_back(pr.caption);
    }
    std::vector<double> V = encode_images(p, images);
    std::vector<double> T = encode_texts(p, captions);

    const std::size_t n = pairs.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> uv(n * d, 0.0), ut(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        out.value += inv_n * (1.0 - cosine({V.data() + i * d, d}, {T.data() + i * d, d}));
        cosine_grad_acc({V.data() + i * d, d}, {T.data() + i * d, d}, -inv_n,
                        {uv.data() + i * d, d}, {ut.data() + i * d, d});
    }
    ImageVjpResult iv = image_vjp(p, images, uv);
    TextVjpResult tv = text_vjp(p, captions, ut);
    out.grad = std::move(iv.grad_params);
    axpy(1.0, tv.grad_params, out.grad);
    return out;
}

LossAndGrad ewc_loss(const ParamVector& p, const ParamVector& theta0,
                     std::span<const double> fisher) {
    if (p.values.size() != theta0.values.size() || fisher.size() != p.values.size())
        throw std::invalid_argument("ewc: size mismatch");
    LossAndGrad out;
    out.grad.assign(p.values.size(), 0.0);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        const double diff = p.values[i] - theta0.values[i];
        out.value += fisher[i] * diff * diff;
        out.grad[i] = 2.0 * fisher[i] * diff;
    }
    return out;
}

std::vector<double> estimate_fisher_diag(const ParamVector& p,
                                         const std::vector<FisherBatch>& batches,
                                         const LossWeights& w) {
    if (batches.empty()) throw std::invalid_argument("fisher: no batches");
    std::vector<double> fisher(p.layout().total, 0.0);
    for (const auto& b : batches) {
        LossAndGrad lg = total_loss(p, b.images, b.captions, w);
        for (std::size_t i = 0; i < fisher.size(); ++i) fisher[i] += lg.grad[i] * lg.grad[i];
    }
    const double inv = 1.0 / static_cast<double>(batches.size());
    for (double& f : fisher) f *= inv;
    return fisher;
}

ModelObjectiveResult model_objective(const ParamVector& p, const std::vector<ImageView>& images,
                                     const std::vector<CaptionView>& captions,
                                     const std::vector<AlignPair>& poisoned_pairs,
                                     const ParamVector& theta0, std::span<const double> fisher,
                                     const LossWeights& w) {
    LossAndGrad clip = total_loss(p, images, captions, w);
    LossAndGrad align = align_loss(p, poisoned_pairs);
    LossAndGrad ewc = ewc_loss(p, theta0, fisher);

    ModelObjectiveResult res;
    res.clip = clip.value;
    res.align = align.value;
    res.ewc = ewc.value;
    res.value = w.lambda_total * clip.value + w.lambda_align * align.value + w.lambda_ewc * ewc.value;
    res.grad.assign(p.values.size(), 0.0);
    axpy(w.lambda_total, clip.grad, res.grad);
    axpy(w.lambda_align, align.grad, res.grad);
    axpy(w.lambda_ewc, ewc.grad, res.grad);
    return res;
}

}  // namespace poisonlab
