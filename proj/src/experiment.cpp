#include "poisonlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "poisonlab/artifacts.hpp"
#include "poisonlab/jsonio.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

ParamVector with_values(const EncoderSpec& spec, std::span<const double> v) {
    ParamVector p;
    p.spec = spec;
    p.values.assign(v.begin(), v.end());
    return p;
}

// Poisoned rows rebuilt from a plan. `pairs` views `images` and the plan's
// fused captions; both must outlive any use.
struct MaterializedPlan {
    std::vector<std::vector<double>> images;
    std::vector<AlignPair> pairs;
};

MaterializedPlan materialize_plan(const Dataset& d, const PoisonPlan& plan,
                                  const TriggerPattern& trigger) {
    MaterializedPlan out;
    out.images.reserve(plan.indices.size());
    out.pairs.reserve(plan.indices.size());
    for (std::size_t i = 0; i < plan.indices.size(); ++i)
        out.images.push_back(inject_image(d.images[plan.indices[i]], d.config.grid_h,
                                          d.config.grid_w, trigger, plan.placements[i],
                                          /*deploy=*/true));
    for (std::size_t i = 0; i < plan.indices.size(); ++i)
        out.pairs.push_back({out.images[i], plan.fused_captions[i]});
    return out;
}

std::vector<double> class_centroid(const ParamVector& p, const Dataset& d,
                                   const std::vector<std::size_t>& rows, int wanted_class) {
    std::vector<ImageView> views;
    for (std::size_t idx : rows)
        if (d.labels[idx] == wanted_class) views.emplace_back(d.images[idx]);
    if (views.empty()) throw std::runtime_error("no rows of the requested class");
    std::vector<double> embs = encode_images(p, views);
    return row_mean(embs, views.size(), static_cast<std::size_t>(p.spec.embed_dim));
}

void append_metrics_row(std::vector<MetricsRow>& rows, const ExperimentResult& run,
                        const Dataset& d, const std::vector<std::size_t>& probe,
                        const MaterializedPlan& poison, const std::string& stage,
                        const ParamVector& p, const EvalResult& e) {
    LossWeights w = run.config.loss_weights();
    std::vector<ImageView> images;
    std::vector<CaptionView> captions;
    for (std::size_t idx : probe) {
        images.emplace_back(d.images[idx]);
        captions.emplace_back(d.captions[idx]);
    }
    MetricsRow row;
    row.run_id = run.run_id;
    row.stage = stage;
    row.ca = e.ca;
    row.asr = e.asr;
    row.loss_total = total_loss(p, images, captions, w).value;
    row.loss_align = align_loss(p, poison.pairs).value;
    row.loss_ewc = ewc_loss(p, run.theta0, run.stage2.fisher).value;
    row.seed = run.config.seed;
    rows.push_back(row);
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& cfg, const std::string& out_dir) {
    ExperimentResult run;
    run.config = cfg;
    run.run_id = "r" + std::to_string(cfg.seed);

    Dataset d = generate_dataset(cfg.synth_config());
    run.split = split_dataset(d, cfg.data.train_fraction, cfg.seed);
    auto carved = carve_subsets(run.split.train,
                                {static_cast<std::size_t>(cfg.data.opt_size),
                                 static_cast<std::size_t>(cfg.data.ft_size)},
                                cfg.seed);
    run.opt_set = carved[0];
    run.ft_set = carved[1];
    // Candidates exclude the fine-tune rows, so the poisoned subset and the
    // clean fine-tuning set can never intersect.
    {
        std::set<std::size_t> ft(run.ft_set.begin(), run.ft_set.end());
        for (std::size_t idx : run.split.train)
            if (!ft.contains(idx)) run.selection_pool.push_back(idx);
    }

    PretrainResult pre = pretrain_clean(cfg.encoder_spec(), d, run.split.train,
                                        cfg.model.pretrain, cfg.model.temperature, cfg.seed);
    run.theta0 = pre.params;

    TargetDescriptionSet targets =
        make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);
    run.stage1 = stage1_optimize_trigger(run.theta0, d, run.opt_set, targets, cfg.stage1, cfg.seed);

    const bool headline_bin = cfg.eval.deploy_binarize || cfg.stage1.binarize_on_deploy;
    run.eval_clean = evaluate(run.theta0, d, run.split.eval, &run.stage1.trigger,
                              cfg.data.target_class, headline_bin, cfg.seed);

    SelectionProblem prob;
    prob.theta0 = &run.theta0;
    prob.dataset = &d;
    prob.pool = run.selection_pool;
    prob.targets = &targets;
    const std::size_t k = static_cast<std::size_t>(cfg.selection.poison_count);
    switch (cfg.selection.mode) {
        case SelectionMode::Greedy: run.selection = gma_select(prob, k); break;
        case SelectionMode::Rank: run.selection = rank_select(prob, k); break;
        case SelectionMode::Random: run.selection = random_select(prob, k, cfg.seed); break;
    }
    run.plan = build_poison_plan(d, run.selection.chosen, targets, run.stage1.trigger, cfg.seed);

    LossWeights w = cfg.loss_weights();
    run.stage2 = stage2_poison_train(run.theta0, d, run.split.train, run.plan, run.stage1.trigger,
                                     cfg.stage2, w, cfg.seed);
    run.theta_star = run.stage2.params;
    run.eval_poisoned = evaluate(run.theta_star, d, run.split.eval, &run.stage1.trigger,
                                 cfg.data.target_class, headline_bin, cfg.seed);

    run.finetune = clean_finetune(run.theta_star, d, run.ft_set, cfg.finetune.opt,
                                  cfg.model.temperature, cfg.seed);
    run.theta_ft = run.finetune.params;
    run.eval_post_ft = evaluate(run.theta_ft, d, run.split.eval, &run.stage1.trigger,
                                cfg.data.target_class, headline_bin, cfg.seed);

    {
        // Loss columns measured on one fixed clean probe batch so the three
        // rows are comparable.
        Rng rng = Rng::for_stage(cfg.seed, "metrics/probe");
        const std::size_t probe_size = std::min<std::size_t>(
            static_cast<std::size_t>(cfg.stage2.opt.batch_size), run.split.train.size());
        std::vector<std::size_t> picks =
            rng.sample_without_replacement(run.split.train.size(), probe_size);
        std::vector<std::size_t> probe;
        for (std::size_t pick : picks) probe.push_back(run.split.train[pick]);
        MaterializedPlan poison = materialize_plan(d, run.plan, run.stage1.trigger);
        append_metrics_row(run.metrics, run, d, probe, poison, "clean", run.theta0,
                           run.eval_clean);
        append_metrics_row(run.metrics, run, d, probe, poison, "poisoned", run.theta_star,
                           run.eval_poisoned);
        append_metrics_row(run.metrics, run, d, probe, poison, "post_ft", run.theta_ft,
                           run.eval_post_ft);
    }

    if (cfg.theory.enabled) run.theory = run_theory_checks(run);
    if (!out_dir.empty()) write_experiment_artifacts(run, out_dir);
    return run;
}

TheoryRunReport run_theory_checks(const ExperimentResult& run) {
    const RunConfig& cfg = run.config;
    const TheoryConfig& tc = cfg.theory;
    if (!tc.allow_adaptive && (cfg.stage2.opt.kind == OptimizerKind::AdaptiveMoment ||
                               cfg.finetune.opt.kind == OptimizerKind::AdaptiveMoment))
        throw std::runtime_error(
            "theory checks assume plain gradient-descent poisoned training and fine-tuning; "
            "set theory.allow_adaptive=true to probe an adaptive run anyway");

    Dataset d = generate_dataset(cfg.synth_config());
    const EncoderSpec spec = cfg.encoder_spec();
    const std::size_t dim = static_cast<std::size_t>(spec.embed_dim);
    LossWeights w = cfg.loss_weights();
    const double eps_margin = std::sqrt(cfg.stage1.eps_mpe);

    TheoryRunReport rep;

    {
        Rng rng = Rng::for_stage(cfg.seed, "theory/contraction");
        const std::size_t n = 32;
        std::vector<double> embs(n * dim);
        for (double& v : embs) v = rng.normal();
        rep.contraction = embedding_gd_contraction(embs, n, dim, tc.contraction_gamma,
                                                   tc.contraction_lambda, tc.contraction_steps);
    }

    {
        Rng rng = Rng::for_stage(cfg.seed, "theory/alignment");
        const std::size_t n = 32;
        std::vector<double> embs(n * dim);
        for (double& v : embs) v = rng.normal();
        // Target well outside the hinge margin so the pull phase is observed.
        std::vector<double> target(dim);
        for (double& v : target) v = rng.normal();
        const double tn = norm2(target);
        for (double& v : target) v = 2.0 * v / tn;
        rep.alignment =
            centroid_alignment_run(embs, n, dim, target, cfg.stage1.eps_mpe, tc.contraction_gamma,
                                   cfg.stage1.lambda_t2t, cfg.stage1.lambda_mpe,
                                   tc.alignment_steps);
    }

    std::vector<double> target_centroid =
        class_centroid(run.theta_star, d, run.split.eval, cfg.data.target_class);

    std::vector<std::size_t> nontarget_eval;
    for (std::size_t idx : run.split.eval)
        if (d.labels[idx] != cfg.data.target_class) nontarget_eval.push_back(idx);
    if (nontarget_eval.size() < static_cast<std::size_t>(tc.codir_batch_size) ||
        nontarget_eval.size() < static_cast<std::size_t>(tc.bound_batch_size))
        throw std::runtime_error("theory checks: too few non-target eval rows");

    {
        std::vector<ImageView> gram_batch;
        const std::size_t take = std::min<std::size_t>(
            static_cast<std::size_t>(tc.codir_batch_size), run.split.eval.size());
        for (std::size_t i = 0; i < take; ++i) gram_batch.emplace_back(d.images[run.split.eval[i]]);
        rep.gram = compute_gram(run.theta_star, gram_batch);

        // u separates the clean target centroid from the clean non-target
        // centroid; Delta is the displacement the deployed trigger adds.
        Rng rng = Rng::for_stage(cfg.seed, "theory/surrogate-placements");
        std::vector<std::vector<double>> trig_store;
        std::vector<ImageView> clean_views, trig_views;
        for (std::size_t idx : nontarget_eval) {
            clean_views.emplace_back(d.images[idx]);
            Placement at =
                random_placement(d.config.grid_h, d.config.grid_w, run.stage1.trigger, rng);
            trig_store.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                              run.stage1.trigger, at, /*deploy=*/true));
        }
        for (const auto& img : trig_store) trig_views.emplace_back(img);
        std::vector<double> clean_embs = encode_images(run.theta_star, clean_views);
        std::vector<double> trig_embs = encode_images(run.theta_star, trig_views);
        std::vector<double> neg_centroid = row_mean(clean_embs, clean_views.size(), dim);
        std::vector<double> trig_centroid = row_mean(trig_embs, trig_views.size(), dim);

        std::vector<double> u(dim), delta(dim);
        for (std::size_t j = 0; j < dim; ++j) {
            u[j] = target_centroid[j] - neg_centroid[j];
            delta[j] = trig_centroid[j] - target_centroid[j];
        }
        rep.surrogate = surrogate_bound_check(u, delta, rep.gram.G, dim, eps_margin);
    }

    // Backdoor batches pair a triggered non-target image with the sample's
    // own caption fused with a random target fragment, mirroring how
    // poisoned rows enter training.
    TargetDescriptionSet targets =
        make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);
    struct BatchStore {
        std::vector<std::vector<double>> images;
        std::vector<std::vector<std::int32_t>> captions;
    };
    auto draw_backdoor_batch = [&](Rng& rng, std::size_t count, BatchStore& store) {
        EncodedBatch batch;
        std::vector<std::size_t> picks =
            rng.sample_without_replacement(nontarget_eval.size(), count);
        for (std::size_t pick : picks) {
            const std::size_t idx = nontarget_eval[pick];
            Placement at =
                random_placement(d.config.grid_h, d.config.grid_w, run.stage1.trigger, rng);
            store.images.push_back(inject_image(d.images[idx], d.config.grid_h, d.config.grid_w,
                                                run.stage1.trigger, at, /*deploy=*/true));
            const auto& frag = targets.fragments[rng.below(targets.fragments.size())];
            const std::size_t kpos = rng.below(d.captions[idx].size() + 1);
            store.captions.push_back(
                fuse_caption(d.captions[idx], frag, kpos,
                             static_cast<std::size_t>(d.config.caption_len_max)));
        }
        for (std::size_t i = store.images.size() - count; i < store.images.size(); ++i) {
            batch.images.emplace_back(store.images[i]);
            batch.captions.emplace_back(store.captions[i]);
        }
        return batch;
    };
    auto draw_clean_batch = [&](Rng& rng, std::size_t count) {
        EncodedBatch batch;
        std::vector<std::size_t> picks = rng.sample_without_replacement(run.ft_set.size(), count);
        for (std::size_t pick : picks) {
            const std::size_t idx = run.ft_set[pick];
            batch.images.emplace_back(d.images[idx]);
            batch.captions.emplace_back(d.captions[idx]);
        }
        return batch;
    };

    {
        Rng clean_rng = Rng::for_stage(cfg.seed, "theory/codir-clean");
        Rng bd_rng = Rng::for_stage(cfg.seed, "theory/codir-backdoor");
        // The backdoor side of each pair samples the materialized plan: the
        // gate asks whether the rows the attack trained on still sit inside
        // the alignment margin at theta_star.
        MaterializedPlan poison = materialize_plan(d, run.plan, run.stage1.trigger);
        std::vector<std::pair<EncodedBatch, EncodedBatch>> pairs;
        const std::size_t bsz = static_cast<std::size_t>(tc.codir_batch_size);
        for (int i = 0; i < tc.codir_batches; ++i) {
            EncodedBatch bd;
            std::vector<std::size_t> picks = bd_rng.sample_without_replacement(
                poison.images.size(), std::min(bsz, poison.images.size()));
            for (std::size_t pick : picks) {
                bd.images.emplace_back(poison.images[pick]);
                bd.captions.emplace_back(run.plan.fused_captions[pick]);
            }
            pairs.emplace_back(draw_clean_batch(clean_rng, bsz), std::move(bd));
        }
        rep.codir = grad_codirectionality(run.theta_star, pairs, eps_margin, target_centroid, w);
    }

    {
        Rng clean_rng = Rng::for_stage(cfg.seed, "theory/bound-clean");
        Rng bd_rng = Rng::for_stage(cfg.seed, "theory/bound-backdoor");
        const std::size_t bsz = static_cast<std::size_t>(tc.bound_batch_size);
        for (int i = 0; i < tc.bound_batches; ++i) {
            EncodedBatch clean = draw_clean_batch(clean_rng, bsz);
            BatchStore store;
            store.images.reserve(bsz);
            store.captions.reserve(bsz);
            EncodedBatch backdoor = draw_backdoor_batch(bd_rng, bsz, store);
            LossGradFn clean_fn = [&](std::span<const double> theta) {
                return total_loss(with_values(spec, theta), clean.images, clean.captions, w);
            };
            LossGradFn bd_fn = [&](std::span<const double> theta) {
                return total_loss(with_values(spec, theta), backdoor.images, backdoor.captions, w);
            };
            const std::uint64_t pair_seed =
                Rng::for_stage(cfg.seed, "theory/bound-probe", static_cast<std::uint64_t>(i))
                    .next_u64();
            rep.bounds.push_back(forgetting_bound_check(bd_fn, clean_fn, run.theta_star.values,
                                                        tc.bound_eta, tc.path_samples, tc.safety,
                                                        pair_seed, tc.power_iters, tc.power_tol));
        }
    }

    {
        MaterializedPlan poison = materialize_plan(d, run.plan, run.stage1.trigger);
        LossGradFn align_fn = [&](std::span<const double> theta) {
            return align_loss(with_values(spec, theta), poison.pairs);
        };
        rep.curvature = curvature_monitor(align_fn, run.stage2.snapshots, cfg.seed,
                                          tc.power_iters, tc.power_tol);
    }

    return rep;
}

void write_experiment_artifacts(const ExperimentResult& run, const std::string& out_dir) {
    if (out_dir.empty()) throw std::invalid_argument("write_experiment_artifacts: empty out dir");
    auto at = [&](const std::string& name) { return out_dir + "/" + name; };

    write_text_file(at("config.ini"), emit_config(run.config));

    Dataset d = generate_dataset(run.config.synth_config());
    save_dataset(d, at("dataset.json"));
    write_text_file(at("indices.json"), indices_json(run));

    save_checkpoint(run.theta0, at("theta0.json"));
    save_checkpoint(run.theta_star, at("theta_star.json"));
    save_checkpoint(run.theta_ft, at("theta_ft.json"));

    save_trigger(run.stage1.trigger, at("trigger.json"));
    write_text_file(at("stage1_trace.json"), stage1_trace_json(run.stage1));
    write_text_file(at("selection.json"), selection_json(run.selection, run.config.selection.mode));
    save_plan(run.plan, at("plan.json"));
    write_text_file(at("stage2.json"), stage2_json(run.stage2));
    write_text_file(at("fisher.json"), fisher_json(run.stage2));
    write_text_file(at("snapshots.json"), snapshots_json(run.stage2));
    write_text_file(at("finetune.json"), epoch_losses_json(run.finetune.epoch_loss));

    write_text_file(at("eval_clean.json"), eval_json(run.eval_clean));
    write_text_file(at("eval_poisoned.json"), eval_json(run.eval_poisoned));
    write_text_file(at("eval_post_ft.json"), eval_json(run.eval_post_ft));
    write_text_file(at("metrics.csv"), metrics_csv(run.metrics));

    export_embeddings(run.theta_star, d, run.split.eval, run.stage1.trigger,
                      run.config.data.target_class, at("embeddings.csv"), run.config.seed);

    write_text_file(at("report.json"), report_json(run));
    if (run.theory.has_value()) {
        write_text_file(at("theory_report.json"), theory_json(*run.theory));
        write_text_file(at("contraction_trace.csv"), contraction_csv(run.theory->contraction));
        write_text_file(at("curvature_trace.csv"), curvature_csv(run.theory->curvature));
    }
}

}  // namespace poisonlab
