// Command-line front end. Each stage command consumes the artifacts of the
// stages before it from the output directory and writes its own next to
// them; `run-all` executes the whole pipeline in memory and writes
// everything at once. Index sets (split, carve, pool) are derived from the
// config seed, so they are recomputed identically instead of persisted.
//
// Errors print a one-line JSON object to stderr and exit nonzero.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poisonlab/artifacts.hpp"
#include "poisonlab/jsonio.hpp"
#include "poisonlab/pipeline.hpp"

namespace pl = poisonlab;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool json_out = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "experiment config file (defaults when omitted)");
    sub->add_option("--out", o.out, "artifact directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "override the config seed")
        ->each([&o](const std::string&) { o.seed_set = true; });
    sub->add_flag("--json", o.json_out, "machine-readable stdout");
}

pl::RunConfig resolve_config(const CommonOpts& o) {
    pl::RunConfig cfg = o.config_path.empty() ? pl::RunConfig{} : pl::load_config(o.config_path);
    if (o.seed_set) cfg.seed = o.seed;
    return cfg;
}

std::string artifact(const CommonOpts& o, const std::string& name) { return o.out + "/" + name; }

void require_file(const std::string& path, const std::string& producer) {
    if (!std::filesystem::exists(path))
        throw std::runtime_error(path + " not found; run `" + producer + "` first");
}

pl::Dataset require_dataset(const pl::RunConfig& cfg, const CommonOpts& o) {
    const std::string path = artifact(o, "dataset.json");
    require_file(path, "gen-data");
    pl::Dataset d = pl::load_dataset(path);
    if (!(d.config == cfg.synth_config()))
        throw std::runtime_error(path + " was generated under a different [data] section");
    return d;
}

struct DerivedSets {
    pl::SplitIndices split;
    std::vector<std::size_t> opt_set, ft_set, pool;
};

DerivedSets derive_sets(const pl::RunConfig& cfg, const pl::Dataset& d) {
    DerivedSets s;
    s.split = pl::split_dataset(d, cfg.data.train_fraction, cfg.seed);
    auto carved = pl::carve_subsets(s.split.train,
                                    {static_cast<std::size_t>(cfg.data.opt_size),
                                     static_cast<std::size_t>(cfg.data.ft_size)},
                                    cfg.seed);
    s.opt_set = carved[0];
    s.ft_set = carved[1];
    std::set<std::size_t> ft(s.ft_set.begin(), s.ft_set.end());
    for (std::size_t idx : s.split.train)
        if (!ft.contains(idx)) s.pool.push_back(idx);
    return s;
}

bool headline_binarize(const pl::RunConfig& cfg) {
    return cfg.eval.deploy_binarize || cfg.stage1.binarize_on_deploy;
}

void print_line(const CommonOpts& o, const std::string& human, const std::string& json) {
    std::cout << (o.json_out ? json : human) << "\n";
}

// ---- stage commands ----

void cmd_gen_data(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = pl::generate_dataset(cfg.synth_config());
    pl::save_dataset(d, artifact(o, "dataset.json"));
    std::vector<std::size_t> all(d.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const double sep = pl::nearest_prototype_accuracy(d, all);
    pl::JsonWriter w;
    w.obj_open().kv("samples", d.size()).kv("classes", d.config.num_classes);
    w.kv("prototype_separability", sep).obj_close();
    print_line(o,
               "dataset: " + std::to_string(d.size()) + " samples, " +
                   std::to_string(d.config.num_classes) +
                   " classes, prototype separability " + pl::format_double(sep),
               w.text());
}

void cmd_pretrain(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    pl::PretrainResult res = pl::pretrain_clean(cfg.encoder_spec(), d, s.split.train,
                                                cfg.model.pretrain, cfg.model.temperature,
                                                cfg.seed);
    pl::save_checkpoint(res.params, artifact(o, "theta0.json"));
    pl::write_text_file(artifact(o, "pretrain.json"), pl::epoch_losses_json(res.epoch_loss));
    const double last = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
    pl::JsonWriter w;
    w.obj_open().kv("epochs", res.epoch_loss.size()).kv("final_loss", last).obj_close();
    print_line(o, "pretrain: " + std::to_string(res.epoch_loss.size()) + " epochs, final loss " +
                      pl::format_double(last),
               w.text());
}

void cmd_optimize_trigger(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    require_file(artifact(o, "theta0.json"), "pretrain");
    pl::ParamVector theta0 = pl::load_checkpoint(artifact(o, "theta0.json"));
    pl::TargetDescriptionSet targets =
        pl::make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);
    pl::Stage1Result res =
        pl::stage1_optimize_trigger(theta0, d, s.opt_set, targets, cfg.stage1, cfg.seed);
    pl::save_trigger(res.trigger, artifact(o, "trigger.json"));
    pl::write_text_file(artifact(o, "stage1_trace.json"), pl::stage1_trace_json(res));
    pl::JsonWriter w;
    w.obj_open().kv("initial_objective", res.trace.front().objective);
    w.kv("final_objective", res.trace.back().objective);
    w.kv("final_centroid_dist", res.trace.back().centroid_dist).obj_close();
    print_line(o, "trigger: objective " + pl::format_double(res.trace.front().objective) + " -> " +
                      pl::format_double(res.trace.back().objective),
               w.text());
}

void cmd_select(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    require_file(artifact(o, "theta0.json"), "pretrain");
    pl::ParamVector theta0 = pl::load_checkpoint(artifact(o, "theta0.json"));
    pl::TargetDescriptionSet targets =
        pl::make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);
    pl::SelectionProblem prob;
    prob.theta0 = &theta0;
    prob.dataset = &d;
    prob.pool = s.pool;
    prob.targets = &targets;
    const std::size_t k = static_cast<std::size_t>(cfg.selection.poison_count);
    pl::SelectionResult res;
    switch (cfg.selection.mode) {
        case pl::SelectionMode::Greedy: res = pl::gma_select(prob, k); break;
        case pl::SelectionMode::Rank: res = pl::rank_select(prob, k); break;
        case pl::SelectionMode::Random: res = pl::random_select(prob, k, cfg.seed); break;
    }
    pl::write_text_file(artifact(o, "selection.json"),
                        pl::selection_json(res, cfg.selection.mode));
    pl::JsonWriter w;
    w.obj_open().kv("mode", pl::selection_name(cfg.selection.mode));
    w.kv("chosen", res.chosen.size()).kv("final_objective", res.final_objective).obj_close();
    print_line(o, std::string("selection: ") + pl::selection_name(cfg.selection.mode) + ", " +
                      std::to_string(res.chosen.size()) + " rows, objective " +
                      pl::format_double(res.final_objective),
               w.text());
}

void cmd_poison_train(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    require_file(artifact(o, "theta0.json"), "pretrain");
    require_file(artifact(o, "trigger.json"), "optimize-trigger");
    require_file(artifact(o, "selection.json"), "select");
    pl::ParamVector theta0 = pl::load_checkpoint(artifact(o, "theta0.json"));
    pl::TriggerPattern trigger = pl::load_trigger(artifact(o, "trigger.json"));
    std::vector<std::size_t> chosen = pl::load_selection_chosen(artifact(o, "selection.json"));
    pl::TargetDescriptionSet targets =
        pl::make_target_set(d, cfg.data.target_class, cfg.data.target_fragments, cfg.seed);
    pl::PoisonPlan plan = pl::build_poison_plan(d, chosen, targets, trigger, cfg.seed);
    pl::save_plan(plan, artifact(o, "plan.json"));
    pl::Stage2Result res = pl::stage2_poison_train(theta0, d, s.split.train, plan, trigger,
                                                   cfg.stage2, cfg.loss_weights(), cfg.seed);
    pl::save_checkpoint(res.params, artifact(o, "theta_star.json"));
    pl::write_text_file(artifact(o, "stage2.json"), pl::stage2_json(res));
    pl::write_text_file(artifact(o, "fisher.json"), pl::fisher_json(res));
    pl::write_text_file(artifact(o, "snapshots.json"), pl::snapshots_json(res));
    pl::JsonWriter w;
    w.obj_open().kv("epochs", res.trace.size());
    w.kv("final_objective", res.trace.empty() ? 0.0 : res.trace.back().objective).obj_close();
    print_line(o, "poison-train: " + std::to_string(res.trace.size()) + " epochs, objective " +
                      pl::format_double(res.trace.empty() ? 0.0 : res.trace.back().objective),
               w.text());
}

void cmd_finetune(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    require_file(artifact(o, "theta_star.json"), "poison-train");
    pl::ParamVector theta_star = pl::load_checkpoint(artifact(o, "theta_star.json"));
    pl::FinetuneResult res = pl::clean_finetune(theta_star, d, s.ft_set, cfg.finetune.opt,
                                                cfg.model.temperature, cfg.seed);
    pl::save_checkpoint(res.params, artifact(o, "theta_ft.json"));
    pl::write_text_file(artifact(o, "finetune.json"), pl::epoch_losses_json(res.epoch_loss));
    const double last = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
    pl::JsonWriter w;
    w.obj_open().kv("epochs", res.epoch_loss.size()).kv("final_loss", last).obj_close();
    print_line(o, "finetune: " + std::to_string(res.epoch_loss.size()) + " epochs, final loss " +
                      pl::format_double(last),
               w.text());
}

std::string checkpoint_for_stage(const std::string& stage) {
    if (stage == "clean") return "theta0.json";
    if (stage == "poisoned") return "theta_star.json";
    if (stage == "post_ft") return "theta_ft.json";
    throw std::runtime_error("unknown stage '" + stage + "' (clean | poisoned | post_ft)");
}

std::string producer_for_stage(const std::string& stage) {
    if (stage == "clean") return "pretrain";
    if (stage == "poisoned") return "poison-train";
    return "finetune";
}

void cmd_evaluate(const CommonOpts& o, const std::string& stage) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    const std::string ck = checkpoint_for_stage(stage);
    require_file(artifact(o, ck), producer_for_stage(stage));
    require_file(artifact(o, "trigger.json"), "optimize-trigger");
    pl::ParamVector p = pl::load_checkpoint(artifact(o, ck));
    pl::TriggerPattern trigger = pl::load_trigger(artifact(o, "trigger.json"));
    pl::EvalResult res = pl::evaluate(p, d, s.split.eval, &trigger, cfg.data.target_class,
                                      headline_binarize(cfg), cfg.seed);
    pl::write_text_file(artifact(o, "eval_" + stage + ".json"), pl::eval_json(res));
    print_line(o, "evaluate[" + stage + "]: CA " + pl::format_double(res.ca) + ", ASR " +
                      pl::format_double(res.asr),
               pl::eval_json(res));
}

void cmd_export_embeddings(const CommonOpts& o, const std::string& stage) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    const std::string ck = checkpoint_for_stage(stage);
    require_file(artifact(o, ck), producer_for_stage(stage));
    require_file(artifact(o, "trigger.json"), "optimize-trigger");
    pl::ParamVector p = pl::load_checkpoint(artifact(o, ck));
    pl::TriggerPattern trigger = pl::load_trigger(artifact(o, "trigger.json"));
    const std::string path = artifact(o, "embeddings_" + stage + ".csv");
    pl::export_embeddings(p, d, s.split.eval, trigger, cfg.data.target_class, path, cfg.seed);
    pl::JsonWriter w;
    w.obj_open().kv("path", path).kv("rows", s.split.eval.size()).obj_close();
    print_line(o, "embeddings written to " + path, w.text());
}

void cmd_verify_theory(const CommonOpts& o) {
    pl::RunConfig cfg = resolve_config(o);
    pl::Dataset d = require_dataset(cfg, o);
    DerivedSets s = derive_sets(cfg, d);
    require_file(artifact(o, "theta0.json"), "pretrain");
    require_file(artifact(o, "theta_star.json"), "poison-train");
    require_file(artifact(o, "trigger.json"), "optimize-trigger");
    require_file(artifact(o, "plan.json"), "poison-train");
    require_file(artifact(o, "snapshots.json"), "poison-train");

    // Assemble the slice of a finished run the harness needs.
    pl::ExperimentResult run;
    run.config = cfg;
    run.run_id = "r" + std::to_string(cfg.seed);
    run.split = s.split;
    run.opt_set = s.opt_set;
    run.ft_set = s.ft_set;
    run.selection_pool = s.pool;
    run.theta0 = pl::load_checkpoint(artifact(o, "theta0.json"));
    run.theta_star = pl::load_checkpoint(artifact(o, "theta_star.json"));
    run.stage1.trigger = pl::load_trigger(artifact(o, "trigger.json"));
    run.plan = pl::load_plan(artifact(o, "plan.json"));
    run.stage2.snapshots = pl::load_snapshots(artifact(o, "snapshots.json"));

    pl::TheoryRunReport rep = pl::run_theory_checks(run);
    pl::write_text_file(artifact(o, "theory_report.json"), pl::theory_json(rep));
    pl::write_text_file(artifact(o, "contraction_trace.csv"), pl::contraction_csv(rep.contraction));
    pl::write_text_file(artifact(o, "curvature_trace.csv"), pl::curvature_csv(rep.curvature));

    std::size_t violations = 0;
    for (const auto& b : rep.bounds)
        if (b.slack < 0.0) ++violations;
    pl::JsonWriter w;
    w.obj_open().kv("contraction_rate", rep.contraction.rate_estimate);
    w.kv("alignment_first_hit", static_cast<std::int64_t>(rep.alignment.first_hit_step));
    w.kv("surrogate_identity", rep.surrogate.identity_holds);
    w.kv("surrogate_metric", rep.surrogate.metric_holds);
    w.kv("codir_gated_p_pos", rep.codir.gated.p_pos);
    w.kv("bound_violations", violations);
    w.kv("curvature_max_ratio", rep.curvature.max_ratio).obj_close();
    print_line(o, "theory: contraction rate " + pl::format_double(rep.contraction.rate_estimate) +
                      ", bound violations " + std::to_string(violations) + "/" +
                      std::to_string(rep.bounds.size()),
               w.text());
}

void cmd_run_all(const CommonOpts& o, int seeds) {
    if (seeds < 1) throw std::runtime_error("--seeds must be at least 1");
    pl::RunConfig cfg = resolve_config(o);
    std::vector<pl::MetricsRow> all_rows;
    pl::JsonWriter w;
    w.obj_open().key("runs").arr_open();
    for (int i = 0; i < seeds; ++i) {
        pl::RunConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(i);
        const std::string dir =
            seeds == 1 ? o.out : o.out + "/seed_" + std::to_string(run_cfg.seed);
        pl::ExperimentResult res = pl::run_experiment(run_cfg, dir);
        all_rows.insert(all_rows.end(), res.metrics.begin(), res.metrics.end());
        w.obj_open().kv("run_id", res.run_id).kv("seed", run_cfg.seed);
        w.kv("ca_clean", res.eval_clean.ca).kv("ca_poisoned", res.eval_poisoned.ca);
        w.kv("ca_post_ft", res.eval_post_ft.ca).kv("asr_poisoned", res.eval_poisoned.asr);
        w.kv("asr_post_ft", res.eval_post_ft.asr).obj_close();
        if (!o.json_out)
            std::cout << res.run_id << ": CA " << pl::format_double(res.eval_clean.ca) << " -> "
                      << pl::format_double(res.eval_poisoned.ca) << " -> "
                      << pl::format_double(res.eval_post_ft.ca) << ", ASR "
                      << pl::format_double(res.eval_poisoned.asr) << " -> "
                      << pl::format_double(res.eval_post_ft.asr) << "\n";
    }
    w.arr_close().obj_close();
    if (seeds > 1) pl::write_text_file(o.out + "/metrics.csv", pl::metrics_csv(all_rows));
    if (o.json_out) std::cout << w.text() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic multimodal poisoning laboratory"};
    app.require_subcommand(1);

    CommonOpts gen_o, pre_o, trig_o, sel_o, poison_o, ft_o, eval_o, exp_o, theory_o, all_o;
    std::string eval_stage = "poisoned";
    std::string export_stage = "poisoned";
    int seeds = 1;

    add_common(app.add_subcommand("gen-data", "generate the synthetic corpus"), gen_o);
    add_common(app.add_subcommand("pretrain", "clean contrastive pretraining"), pre_o);
    add_common(app.add_subcommand("optimize-trigger", "optimize the patch trigger"), trig_o);
    add_common(app.add_subcommand("select", "pick the poisoned subset"), sel_o);
    add_common(app.add_subcommand("poison-train", "train on the poisoned mixture"), poison_o);
    add_common(app.add_subcommand("finetune", "clean fine-tuning"), ft_o);
    auto* eval_cmd = app.add_subcommand("evaluate", "zero-shot accuracy and attack success");
    add_common(eval_cmd, eval_o);
    eval_cmd->add_option("--stage", eval_stage, "clean | poisoned | post_ft")
        ->capture_default_str();
    auto* exp_cmd = app.add_subcommand("export-embeddings", "dump eval-split embeddings to CSV");
    add_common(exp_cmd, exp_o);
    exp_cmd->add_option("--stage", export_stage, "clean | poisoned | post_ft")
        ->capture_default_str();
    add_common(app.add_subcommand("verify-theory", "run the numerical verification harness"),
               theory_o);
    auto* all_cmd = app.add_subcommand("run-all", "full pipeline, one directory per seed");
    add_common(all_cmd, all_o);
    all_cmd->add_option("--seeds", seeds, "consecutive seeds starting at the config seed")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
        if (app.got_subcommand("gen-data")) cmd_gen_data(gen_o);
        else if (app.got_subcommand("pretrain")) cmd_pretrain(pre_o);
        else if (app.got_subcommand("optimize-trigger")) cmd_optimize_trigger(trig_o);
        else if (app.got_subcommand("select")) cmd_select(sel_o);
        else if (app.got_subcommand("poison-train")) cmd_poison_train(poison_o);
        else if (app.got_subcommand("finetune")) cmd_finetune(ft_o);
        else if (app.got_subcommand("evaluate")) cmd_evaluate(eval_o, eval_stage);
        else if (app.got_subcommand("export-embeddings")) cmd_export_embeddings(exp_o, export_stage);
        else if (app.got_subcommand("verify-theory")) cmd_verify_theory(theory_o);
        else if (app.got_subcommand("run-all")) cmd_run_all(all_o, seeds);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        pl::JsonWriter w;
        w.obj_open().kv("error", e.what()).obj_close();
        std::cerr << w.text() << "\n";
        return 1;
    }
    return 0;
}
