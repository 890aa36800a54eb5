#include "poisonlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "poisonlab/jsonio.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const std::size_t end = std::min(at + batch_size, order.size());
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

void require_finite(double loss, std::span<const double> grad, const char* stage) {
    if (!std::isfinite(loss) || !all_finite(grad))
        throw std::runtime_error(std::string(stage) + ": training diverged (non-finite loss or gradient)");
}

double distance(std::span<const double> a, std::span<const double> b) {
    return std::sqrt(sq_dist(a, b));
}

}  // namespace

Optimizer::Optimizer(OptimizerKind kind, double lr, std::size_t dim) : kind_(kind), lr_(lr) {
    if (kind_ == OptimizerKind::AdaptiveMoment) {
        m_.assign(dim, 0.0);
        v_.assign(dim, 0.0);
    }
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
    if (grad.size() != params.size()) throw std::invalid_argument("optimizer: size mismatch");
    if (kind_ == OptimizerKind::GradientDescent) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
        return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
        params[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
    }
}

PretrainResult pretrain_clean(const EncoderSpec& spec, const Dataset& d,
                              const std::vector<std::size_t>& train, const OptimizerConfig& opt,
                              double temperature, std::uint64_t seed) {
    if (train.empty()) throw std::invalid_argument("pretrain: empty train set");
    PretrainResult res;
    res.params = init_params(spec, seed);
    if (opt.epochs == 0) return res;

    LossWeights w;
    w.temperature = temperature;
    Optimizer optim(opt.kind, opt.lr, res.params.values.size());
    Rng shuffle_rng = Rng::for_stage(seed, "pretrain/shuffle");
    std::vector<std::size_t> order = train;

    for (int e = 0; e < opt.epochs; ++e) {
        shuffle_rng.shuffle(order);
        double sum = 0.0;
        std::size_t batches = 0;
        for (const auto& batch : make_batches(order, static_cast<std::size_t>(opt.batch_size))) {
            std::vector<ImageView> images;
            std::vector<CaptionView> captions;
            for (std::size_t idx : batch) {
                images.emplace_back(d.images[idx]);
                captions.emplace_back(d.captions[idx]);
            }
            LossAndGrad lg = total_loss(res.params, images, captions, w);
            require_finite(lg.value, lg.grad, "pretrain");
            optim.step(res.params.values, lg.grad);
            sum += lg.value;
            ++batches;
        }
        res.epoch_loss.push_back(sum / static_cast<double>(batches));
    }
    return res;
}

Stage1Result stage1_optimize_trigger(const ParamVector& theta0, const Dataset& d,
                                     const std::vector<std::size_t>& opt_set,
                                     const TargetDescriptionSet& targets, const Stage1Config& cfg,
                                     std::uint64_t seed) {
    if (opt_set.empty()) throw std::invalid_argument("stage1: empty optimization set");
    const int gh = d.config.grid_h, gw = d.config.grid_w;
    if (cfg.trigger_h > gh || cfg.trigger_w > gw)
        throw std::invalid_argument("stage1: trigger larger than the image grid");
    const std::size_t dim = static_cast<std::size_t>(theta0.spec.embed_dim);

    LossWeights w;
    w.lambda_t2t = cfg.lambda_t2t;
    w.lambda_mpe = cfg.lambda_mpe;
    w.eps_mpe = cfg.eps_mpe;

    Stage1Result res;

    // Frozen references under the clean model: the clean target-class image
    // centroid over the optimization set and the fragment text embeddings.
    {
        std::vector<ImageView> target_images;
        for (std::size_t idx : opt_set)
            if (d.labels[idx] == targets.target_class) target_images.emplace_back(d.images[idx]);
        if (target_images.empty())
            throw std::runtime_error("stage1: optimization set has no target-class images");
        std::vector<double> embs = encode_images(theta0, target_images);
        res.target_centroid = row_mean(embs, target_images.size(), dim);

        std::vector<CaptionView> frags;
        for (const auto& f : targets.fragments) frags.emplace_back(f);
        res.fragment_embs = encode_texts(theta0, frags);
    }

    if (cfg.trigger_init_min < 0.0 || cfg.trigger_init_min > 1.0)
        throw std::invalid_argument("stage1: trigger_init_min outside [0, 1]");
    TriggerPattern trigger = random_trigger(cfg.trigger_h, cfg.trigger_w, seed);
    trigger.binarize_on_deploy = cfg.binarize_on_deploy;
    // Remap the uniform draw into [init_min, 1]; values stay inside the pixel
    // range so the pattern invariant holds before the first step.
    for (double& v : trigger.values) v = cfg.trigger_init_min + (1.0 - cfg.trigger_init_min) * v;

    // One fixed assignment for the per-epoch trace, so consecutive entries
    // measure the same objective. Training assignments are redrawn per epoch.
    std::vector<TriggerBatchItem> eval_items(opt_set.size());
    {
        Rng rng = Rng::for_stage(seed, "stage1/eval-assignment");
        for (std::size_t i = 0; i < opt_set.size(); ++i) {
            eval_items[i].image = d.images[opt_set[i]];
            eval_items[i].placement = random_placement(gh, gw, trigger, rng);
            eval_items[i].target_index = rng.below(targets.fragments.size());
        }
    }
    auto trace_entry = [&]() {
        TriggerObjectiveResult r = trigger_objective(theta0, trigger, eval_items, gh, gw,
                                                     res.fragment_embs, res.target_centroid, w);
        Stage1Epoch e;
        e.objective = r.value;
        e.t2t = r.t2t;
        e.mpe = r.mpe;
        e.i2t = r.i2t;
        e.radius = r.radius;
        e.centroid_dist = distance(r.centroid, res.target_centroid);
        return e;
    };
    res.trace.push_back(trace_entry());

    Optimizer optim(cfg.opt.kind, cfg.opt.lr, trigger.values.size());
    Rng train_rng = Rng::for_stage(seed, "stage1/train");
    std::vector<std::size_t> order(opt_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int e = 0; e < cfg.opt.epochs; ++e) {
        // Fresh placements and fragment assignments break spatial and textual
        // consistency so the patch cannot overfit one location or caption.
        std::vector<TriggerBatchItem> items(opt_set.size());
        for (std::size_t i = 0; i < opt_set.size(); ++i) {
            items[i].image = d.images[opt_set[i]];
            items[i].placement = random_placement(gh, gw, trigger, train_rng);
            items[i].target_index = train_rng.below(targets.fragments.size());
        }
        train_rng.shuffle(order);
        for (const auto& batch : make_batches(order, static_cast<std::size_t>(cfg.opt.batch_size))) {
            std::vector<TriggerBatchItem> slice;
            slice.reserve(batch.size());
            for (std::size_t pos : batch) slice.push_back(items[pos]);
            TriggerObjectiveResult r = trigger_objective(theta0, trigger, slice, gh, gw,
                                                         res.fragment_embs, res.target_centroid, w);
            require_finite(r.value, r.grad_trigger, "stage1");
            optim.step(trigger.values, r.grad_trigger);
            for (double& v : trigger.values) v = std::clamp(v, 0.0, 1.0);
        }
        res.trace.push_back(trace_entry());
    }
    res.trigger = trigger;
    return res;
}

Stage2Result stage2_poison_train(const ParamVector& theta0, const Dataset& d,
                                 const std::vector<std::size_t>& train, const PoisonPlan& plan,
                                 const TriggerPattern& trigger, const Stage2Config& cfg,
                                 const LossWeights& w, std::uint64_t seed) {
    if (train.empty()) throw std::invalid_argument("stage2: empty train set");
    {
        std::set<std::size_t> train_set(train.begin(), train.end());
        for (std::size_t idx : plan.indices)
            if (!train_set.contains(idx))
                throw std::invalid_argument("stage2: plan replaces a row outside the train set");
    }

    // Materialize the poisoned rows once; training batches view either the
    // dataset row or its substitute. The victim trains on the deployed form
    // of the trigger, so injection here uses deploy mode.
    std::vector<std::vector<double>> poison_images(plan.indices.size());
    std::vector<std::size_t> slot_of(d.size(), static_cast<std::size_t>(-1));
    std::vector<AlignPair> poison_pairs(plan.indices.size());
    for (std::size_t i = 0; i < plan.indices.size(); ++i) {
        const std::size_t idx = plan.indices[i];
        poison_images[i] = inject_image(d.images[idx], d.config.grid_h, d.config.grid_w, trigger,
                                        plan.placements[i], /*deploy=*/true);
        slot_of[idx] = i;
        poison_pairs[i] = {poison_images[i], plan.fused_captions[i]};
    }

    Stage2Result res;
    res.params = theta0;
    res.fisher.assign(theta0.values.size(), 0.0);

    if (cfg.controllable) {
        // Fisher from clean rows only, frozen before the first update.
        std::vector<std::size_t> clean_rows;
        for (std::size_t idx : train)
            if (slot_of[idx] == static_cast<std::size_t>(-1)) clean_rows.push_back(idx);
        if (clean_rows.size() < static_cast<std::size_t>(cfg.fisher_batch_size))
            throw std::runtime_error("stage2: not enough clean rows for the Fisher estimate");
        Rng fisher_rng = Rng::for_stage(seed, "stage2/fisher");
        std::vector<FisherBatch> batches(static_cast<std::size_t>(cfg.fisher_batches));
        for (auto& b : batches) {
            std::vector<std::size_t> picks = fisher_rng.sample_without_replacement(
                clean_rows.size(), static_cast<std::size_t>(cfg.fisher_batch_size));
            for (std::size_t pick : picks) {
                b.images.emplace_back(d.images[clean_rows[pick]]);
                b.captions.emplace_back(d.captions[clean_rows[pick]]);
            }
        }
        res.fisher = estimate_fisher_diag(theta0, batches, w);
    }

    auto snapshot = [&] { res.snapshots.push_back(res.params.values); };
    snapshot();

    Optimizer optim(cfg.opt.kind, cfg.opt.lr, res.params.values.size());
    Rng shuffle_rng = Rng::for_stage(seed, "stage2/shuffle");
    std::vector<std::size_t> order = train;
    for (int e = 0; e < cfg.opt.epochs; ++e) {
        shuffle_rng.shuffle(order);
        Stage2Epoch mean;
        std::size_t batches = 0;
        for (const auto& batch : make_batches(order, static_cast<std::size_t>(cfg.opt.batch_size))) {
            std::vector<ImageView> images;
            std::vector<CaptionView> captions;
            for (std::size_t idx : batch) {
                const std::size_t slot = slot_of[idx];
                if (slot == static_cast<std::size_t>(-1)) {
                    images.emplace_back(d.images[idx]);
                    captions.emplace_back(d.captions[idx]);
                } else {
                    images.emplace_back(poison_images[slot]);
                    captions.emplace_back(plan.fused_captions[slot]);
                }
            }
            if (cfg.controllable) {
                ModelObjectiveResult r =
                    model_objective(res.params, images, captions, poison_pairs, theta0, res.fisher, w);
                require_finite(r.value, r.grad, "stage2");
                optim.step(res.params.values, r.grad);
                mean.objective += r.value;
                mean.clip += r.clip;
                mean.align += r.align;
                mean.ewc += r.ewc;
            } else {
                LossAndGrad lg = total_loss(res.params, images, captions, w);
                require_finite(lg.value, lg.grad, "stage2");
                scale(lg.grad, w.lambda_total);
                optim.step(res.params.values, lg.grad);
                mean.objective += w.lambda_total * lg.value;
                mean.clip += lg.value;
            }
            ++batches;
        }
        const double inv = 1.0 / static_cast<double>(batches);
        mean.objective *= inv;
        mean.clip *= inv;
        mean.align *= inv;
        mean.ewc *= inv;
        res.trace.push_back(mean);
        if ((e + 1) % std::max(cfg.snapshot_every, 1) == 0) snapshot();
    }
    if (cfg.opt.epochs % std::max(cfg.snapshot_every, 1) != 0) snapshot();
    return res;
}

FinetuneResult clean_finetune(const ParamVector& start, const Dataset& d,
                              const std::vector<std::size_t>& ft_set, const OptimizerConfig& opt,
                              double temperature, std::uint64_t seed) {
    if (ft_set.empty()) throw std::invalid_argument("finetune: empty set");
    FinetuneResult res;
    res.params = start;
    res.snapshots.push_back(res.params.values);

    LossWeights w;
    w.temperature = temperature;
    Optimizer optim(opt.kind, opt.lr, res.params.values.size());
    Rng shuffle_rng = Rng::for_stage(seed, "finetune/shuffle");
    std::vector<std::size_t> order = ft_set;
    for (int e = 0; e < opt.epochs; ++e) {
        shuffle_rng.shuffle(order);
        double sum = 0.0;
        std::size_t batches = 0;
        for (const auto& batch : make_batches(order, static_cast<std::size_t>(opt.batch_size))) {
            std::vector<ImageView> images;
            std::vector<CaptionView> captions;
            for (std::size_t idx : batch) {
                images.emplace_back(d.images[idx]);
                captions.emplace_back(d.captions[idx]);
            }
            LossAndGrad lg = total_loss(res.params, images, captions, w);
            require_finite(lg.value, lg.grad, "finetune");
            optim.step(res.params.values, lg.grad);
            sum += lg.value;
            ++batches;
        }
        res.epoch_loss.push_back(sum / static_cast<double>(batches));
        res.snapshots.push_back(res.params.values);
    }
    return res;
}

namespace {

// Zero-shot prediction: argmax over class prompts of the embedding dot
// product (rows are unit or zero, so this is cosine); exact ties keep the
// lowest class index.
std::vector<int> predict_classes(const ParamVector& p, const std::vector<ImageView>& images,
                                 const std::vector<double>& prompt_embs, int num_classes) {
    const std::size_t dim = static_cast<std::size_t>(p.spec.embed_dim);
    std::vector<double> embs = encode_images(p, images);
    std::vector<int> pred(images.size(), 0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        double best = -2.0;
        int arg = 0;
        for (int c = 0; c < num_classes; ++c) {
            const double s = dot({embs.data() + i * dim, dim},
                                 {prompt_embs.data() + static_cast<std::size_t>(c) * dim, dim});
            if (s > best) {
                best = s;
                arg = c;
            }
        }
        pred[i] = arg;
    }
    return pred;
}

}  // namespace

EvalResult evaluate(const ParamVector& p, const Dataset& d, const std::vector<std::size_t>& eval_idx,
                    const TriggerPattern* trigger, int target_class, bool headline_binarize,
                    std::uint64_t seed) {
    if (eval_idx.empty()) throw std::invalid_argument("evaluate: empty eval set");
    if (target_class < 0 || target_class >= d.config.num_classes)
        throw std::invalid_argument("evaluate: target class out of range");
    const int C = d.config.num_classes;

    // Bare class-name prompts.
    std::vector<std::vector<std::int32_t>> prompts;
    for (int c = 0; c < C; ++c) prompts.push_back({d.class_name_tokens[static_cast<std::size_t>(c)]});
    std::vector<CaptionView> prompt_views;
    for (const auto& pr : prompts) prompt_views.emplace_back(pr);
    std::vector<double> prompt_embs = encode_texts(p, prompt_views);

    EvalResult res;
    res.n_eval = eval_idx.size();
    res.per_class_accuracy.assign(static_cast<std::size_t>(C), 0.0);
    std::vector<std::size_t> class_counts(static_cast<std::size_t>(C), 0);

    std::vector<ImageView> clean_views;
    for (std::size_t idx : eval_idx) clean_views.emplace_back(d.images[idx]);
    std::vector<int> clean_pred = predict_classes(p, clean_views, prompt_embs, C);

    std::size_t hits = 0, control_hits = 0, n_asr = 0;
    for (std::size_t i = 0; i < eval_idx.size(); ++i) {
        const int label = d.labels[eval_idx[i]];
        ++class_counts[static_cast<std::size_t>(label)];
        if (clean_pred[i] == label) {
            ++hits;
            res.per_class_accuracy[static_cast<std::size_t>(label)] += 1.0;
        }
        if (label != target_class) {
            ++n_asr;
            if (clean_pred[i] == target_class) ++control_hits;
        }
    }
    res.ca = static_cast<double>(hits) / static_cast<double>(eval_idx.size());
    for (int c = 0; c < C; ++c)
        if (class_counts[static_cast<std::size_t>(c)] > 0)
            res.per_class_accuracy[static_cast<std::size_t>(c)] /=
                static_cast<double>(class_counts[static_cast<std::size_t>(c)]);
    res.n_asr = n_asr;
    res.asr_control = n_asr > 0 ? static_cast<double>(control_hits) / static_cast<double>(n_asr) : 0.0;

    if (trigger != nullptr && n_asr > 0) {
        // Fresh placements, drawn per non-target row; the same placement is
        // reused for both deployment modes so they differ only in values.
        TriggerPattern continuous = *trigger;
        continuous.binarize_on_deploy = false;
        TriggerPattern binarized = *trigger;
        binarized.binarize_on_deploy = true;

        Rng rng = Rng::for_stage(seed, "eval/asr-placements");
        std::vector<std::vector<double>> cont_store, bin_store;
        std::vector<ImageView> cont_views, bin_views;
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < eval_idx.size(); ++i) {
            const std::size_t idx = eval_idx[i];
            if (d.labels[idx] == target_class) continue;
            Placement at = random_placement(d.config.grid_h, d.config.grid_w, *trigger, rng);
            cont_store.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                              continuous, at, /*deploy=*/true));
            bin_store.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                             binarized, at, /*deploy=*/true));
            rows.push_back(idx);
        }
        for (const auto& img : cont_store) cont_views.emplace_back(img);
        for (const auto& img : bin_store) bin_views.emplace_back(img);
        std::vector<int> cont_pred = predict_classes(p, cont_views, prompt_embs, C);
        std::vector<int> bin_pred = predict_classes(p, bin_views, prompt_embs, C);

        std::size_t cont_hits = 0, bin_hits = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (cont_pred[i] == target_class) ++cont_hits;
            if (bin_pred[i] == target_class) ++bin_hits;
        }
        res.asr_continuous = static_cast<double>(cont_hits) / static_cast<double>(n_asr);
        res.asr_binarized = static_cast<double>(bin_hits) / static_cast<double>(n_asr);
        const bool use_binarized = headline_binarize || trigger->binarize_on_deploy;
        res.asr = use_binarized ? res.asr_binarized : res.asr_continuous;
    }
    return res;
}

void export_embeddings(const ParamVector& p, const Dataset& d,
                       const std::vector<std::size_t>& eval_idx, const TriggerPattern& trigger,
                       int target_class, const std::string& csv_path, std::uint64_t seed) {
    const std::size_t dim = static_cast<std::size_t>(p.spec.embed_dim);
    std::ostringstream out;
    out << "set";
    for (std::size_t j = 0; j < dim; ++j) out << ",dim_" << j;
    out << "\n";

    auto write_rows = [&](const char* name, const std::vector<ImageView>& views) {
        std::vector<double> embs = encode_images(p, views);
        for (std::size_t i = 0; i < views.size(); ++i) {
            out << name;
            for (std::size_t j = 0; j < dim; ++j) out << ',' << format_double(embs[i * dim + j]);
            out << "\n";
        }
    };

    std::vector<ImageView> target_views, other_views;
    std::vector<std::vector<double>> trig_store;
    Rng rng = Rng::for_stage(seed, "export/placements");
    for (std::size_t idx : eval_idx) {
        if (d.labels[idx] == target_class) {
            target_views.emplace_back(d.images[idx]);
        } else {
            other_views.emplace_back(d.images[idx]);
            Placement at = random_placement(d.config.grid_h, d.config.grid_w, trigger, rng);
            trig_store.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                              trigger, at, /*deploy=*/true));
        }
    }
    std::vector<ImageView> trig_views;
    for (const auto& img : trig_store) trig_views.emplace_back(img);

    write_rows("clean_target", target_views);
    write_rows("triggered", trig_views);
    write_rows("clean_other", other_views);
    write_text_file(csv_path, out.str());
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out << "run_id,stage,CA,ASR,loss_total,loss_align,loss_ewc,seed\n";
    for (const auto& r : rows)
        out << r.run_id << ',' << r.stage << ',' << format_double(r.ca) << ','
            << format_double(r.asr) << ',' << format_double(r.loss_total) << ','
            << format_double(r.loss_align) << ',' << format_double(r.loss_ewc) << ',' << r.seed
            << "\n";
    return out.str();
}

}  // namespace poisonlab
