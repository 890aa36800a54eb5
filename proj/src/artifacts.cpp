#include "poisonlab/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "poisonlab/jsonio.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

void eval_object(JsonWriter& w, const EvalResult& e) {
    w.obj_open();
    w.kv("ca", e.ca);
    w.kv("asr", e.asr);
    w.kv("asr_continuous", e.asr_continuous);
    w.kv("asr_binarized", e.asr_binarized);
    w.kv("asr_control", e.asr_control);
    w.kv("n_eval", e.n_eval);
    w.kv("n_asr", e.n_asr);
    w.key("per_class_accuracy").arr_doubles(e.per_class_accuracy);
    w.obj_close();
}

void codir_stats_object(JsonWriter& w, const CodirStats& s) {
    w.obj_open();
    w.kv("count", s.count);
    w.kv("mean", s.mean);
    w.kv("q25", s.q25);
    w.kv("median", s.median);
    w.kv("q75", s.q75);
    w.kv("p_pos", s.p_pos);
    w.obj_close();
}

}  // namespace

std::string eval_json(const EvalResult& e) {
    JsonWriter w;
    eval_object(w, e);
    return w.text();
}

std::string stage1_trace_json(const Stage1Result& s) {
    JsonWriter w;
    w.obj_open();
    w.key("epochs").arr_open();
    for (const auto& e : s.trace) {
        w.obj_open();
        w.kv("objective", e.objective);
        w.kv("t2t", e.t2t);
        w.kv("mpe", e.mpe);
        w.kv("i2t", e.i2t);
        w.kv("radius", e.radius);
        w.kv("centroid_dist", e.centroid_dist);
        w.obj_close();
    }
    w.arr_close();
    w.key("target_centroid").arr_doubles(s.target_centroid);
    w.obj_close();
    return w.text();
}

std::string selection_json(const SelectionResult& s, SelectionMode mode) {
    JsonWriter w;
    w.obj_open();
    w.kv("mode", selection_name(mode));
    w.key("chosen").arr_sizes(s.chosen);
    w.key("objective_per_step").arr_doubles(s.objective_per_step);
    w.kv("final_objective", s.final_objective);
    w.obj_close();
    return w.text();
}

std::string stage2_json(const Stage2Result& s) {
    JsonWriter w;
    w.obj_open();
    w.key("epochs").arr_open();
    for (const auto& e : s.trace) {
        w.obj_open();
        w.kv("objective", e.objective);
        w.kv("clip", e.clip);
        w.kv("align", e.align);
        w.kv("ewc", e.ewc);
        w.obj_close();
    }
    w.arr_close();
    w.kv("snapshots", s.snapshots.size());
    w.obj_close();
    return w.text();
}

std::string fisher_json(const Stage2Result& s) {
    JsonWriter w;
    w.obj_open();
    w.key("fisher").arr_doubles(s.fisher);
    w.obj_close();
    return w.text();
}

std::string snapshots_json(const Stage2Result& s) {
    JsonWriter w;
    w.obj_open();
    w.kv("count", s.snapshots.size());
    w.kv("dim", s.snapshots.empty() ? std::size_t{0} : s.snapshots.front().size());
    w.key("snapshots").arr_open();
    for (const auto& snap : s.snapshots) w.arr_doubles(snap);
    w.arr_close();
    w.obj_close();
    return w.text();
}

std::string epoch_losses_json(const std::vector<double>& losses) {
    JsonWriter w;
    w.obj_open();
    w.key("epoch_loss").arr_doubles(losses);
    w.obj_close();
    return w.text();
}

std::string indices_json(const ExperimentResult& run) {
    JsonWriter w;
    w.obj_open();
    w.key("train").arr_sizes(run.split.train);
    w.key("eval").arr_sizes(run.split.eval);
    w.key("opt_set").arr_sizes(run.opt_set);
    w.key("ft_set").arr_sizes(run.ft_set);
    w.key("selection_pool").arr_sizes(run.selection_pool);
    w.obj_close();
    return w.text();
}

std::string report_json(const ExperimentResult& run) {
    const auto& s1 = run.stage1.trace;
    JsonWriter w;
    w.obj_open();
    w.kv("run_id", run.run_id);
    w.kv("seed", run.config.seed);
    w.key("dataset").obj_open();
    w.kv("total", run.split.train.size() + run.split.eval.size());
    w.kv("train", run.split.train.size());
    w.kv("eval", run.split.eval.size());
    w.kv("opt_set", run.opt_set.size());
    w.kv("ft_set", run.ft_set.size());
    w.kv("selection_pool", run.selection_pool.size());
    w.kv("poison_count", run.plan.indices.size());
    w.obj_close();
    w.key("stage1").obj_open();
    w.kv("initial_objective", s1.front().objective);
    w.kv("final_objective", s1.back().objective);
    w.kv("final_radius", s1.back().radius);
    w.kv("final_centroid_dist", s1.back().centroid_dist);
    w.obj_close();
    w.key("selection").obj_open();
    w.kv("mode", selection_name(run.config.selection.mode));
    w.kv("final_objective", run.selection.final_objective);
    w.obj_close();
    w.key("stage2").obj_open();
    w.kv("controllable", run.config.stage2.controllable);
    if (!run.stage2.trace.empty()) {
        w.kv("final_objective", run.stage2.trace.back().objective);
        w.kv("final_align", run.stage2.trace.back().align);
        w.kv("final_ewc", run.stage2.trace.back().ewc);
    }
    w.obj_close();
    w.key("eval").obj_open();
    w.key("clean");
    eval_object(w, run.eval_clean);
    w.key("poisoned");
    eval_object(w, run.eval_poisoned);
    w.key("post_ft");
    eval_object(w, run.eval_post_ft);
    w.obj_close();
    w.kv("theory_checks", run.theory.has_value());
    w.obj_close();
    return w.text();
}

std::string theory_json(const TheoryRunReport& t) {
    JsonWriter w;
    w.obj_open();

    w.key("contraction").obj_open();
    w.kv("factor", t.contraction.contraction_factor);
    w.kv("rate_estimate", t.contraction.rate_estimate);
    w.kv("steps", t.contraction.step_ratio.size());
    w.kv("initial_radius", t.contraction.radius.front());
    w.kv("final_radius", t.contraction.radius.back());
    double drift = 0.0;
    for (const auto& c : t.contraction.centroid)
        drift = std::max(drift, std::sqrt(sq_dist(c, t.contraction.centroid.front())));
    w.kv("centroid_drift", drift);
    w.obj_close();

    w.key("alignment").obj_open();
    w.kv("initial_dist", t.alignment.centroid_dist.front());
    w.kv("final_dist", t.alignment.centroid_dist.back());
    w.kv("first_hit_step", static_cast<std::int64_t>(t.alignment.first_hit_step));
    w.kv("stayed_inside", t.alignment.stayed_inside);
    w.obj_close();

    w.key("gram").obj_open();
    w.kv("d", t.gram.d);
    w.kv("sigma_min", t.gram.sigma_min);
    w.kv("sigma_max", t.gram.sigma_max);
    w.kv("kappa", t.gram.kappa);
    w.key("eigenvalues").arr_doubles(t.gram.eigenvalues);
    w.obj_close();

    w.key("surrogate").obj_open();
    w.kv("m", t.surrogate.m);
    w.kv("delta_norm", t.surrogate.delta_norm);
    w.kv("sigma_min", t.surrogate.sigma_min);
    w.kv("sigma_max", t.surrogate.sigma_max);
    w.kv("kappa", t.surrogate.kappa);
    w.kv("identity_lhs", t.surrogate.identity_lhs);
    w.kv("identity_rhs", t.surrogate.identity_rhs);
    w.kv("identity_holds", t.surrogate.identity_holds);
    w.kv("metric_lhs", t.surrogate.metric_lhs);
    w.kv("metric_rhs", t.surrogate.metric_rhs);
    w.kv("metric_holds", t.surrogate.metric_holds);
    w.kv("margin_condition", t.surrogate.margin_condition);
    w.obj_close();

    w.key("codirectionality").obj_open();
    w.key("gated");
    codir_stats_object(w, t.codir.gated);
    w.key("ungated");
    codir_stats_object(w, t.codir.ungated);
    w.kv("skipped_zero_grad", t.codir.skipped_zero_grad);
    w.key("cosines").arr_doubles(t.codir.cosines);
    w.key("gate_dist").arr_doubles(t.codir.gate_dist);
    w.obj_close();

    w.key("forgetting_bounds").arr_open();
    for (const auto& b : t.bounds) {
        w.obj_open();
        w.kv("eta", b.eta);
        w.kv("delta_actual", b.delta_actual);
        w.kv("inner", b.inner);
        w.kv("g_ft_norm", b.g_ft_norm);
        w.kv("kappa_bd", b.kappa_bd);
        w.kv("bound", b.bound);
        w.kv("slack", b.slack);
        w.key("path_lambdas").arr_doubles(b.path_lambdas);
        w.obj_close();
    }
    w.arr_close();
    std::size_t violations = 0;
    double min_slack = t.bounds.empty() ? 0.0 : t.bounds.front().slack;
    for (const auto& b : t.bounds) {
        if (b.slack < 0.0) ++violations;
        min_slack = std::min(min_slack, b.slack);
    }
    w.key("forgetting_summary").obj_open();
    w.kv("batches", t.bounds.size());
    w.kv("violations", violations);
    w.kv("min_slack", min_slack);
    w.obj_close();

    w.key("curvature").obj_open();
    w.key("samples").arr_open();
    for (const auto& s : t.curvature.samples) {
        w.obj_open();
        w.kv("index", s.index);
        w.kv("loss", s.loss);
        w.kv("lambda_max", s.lambda_max);
        w.kv("residual", s.residual);
        w.kv("ratio", s.ratio);
        w.obj_close();
    }
    w.arr_close();
    w.kv("max_ratio", t.curvature.max_ratio);
    w.kv("superlinear_flag", t.curvature.superlinear_flag);
    w.obj_close();

    w.obj_close();
    return w.text();
}

std::string contraction_csv(const ContractionTrace& t) {
    std::ostringstream out;
    out << "t,radius,step_ratio\n";
    for (std::size_t i = 0; i < t.radius.size(); ++i) {
        out << i << ',' << format_double(t.radius[i]) << ',';
        out << format_double(i < t.step_ratio.size() ? t.step_ratio[i] : 0.0) << "\n";
    }
    return out.str();
}

std::string curvature_csv(const CurvatureReport& r) {
    std::ostringstream out;
    out << "snapshot,loss,lambda_max,ratio\n";
    for (const auto& s : r.samples)
        out << s.index << ',' << format_double(s.loss) << ',' << format_double(s.lambda_max) << ','
            << format_double(s.ratio) << "\n";
    return out.str();
}

std::vector<std::size_t> load_selection_chosen(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    if (!j.contains("chosen") || !j["chosen"].is_array())
        throw std::runtime_error(path + ": missing 'chosen' array");
    std::vector<std::size_t> out;
    for (const auto& v : j["chosen"]) out.push_back(v.get<std::size_t>());
    return out;
}

std::vector<std::vector<double>> load_snapshots(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    if (!j.contains("snapshots") || !j["snapshots"].is_array())
        throw std::runtime_error(path + ": missing 'snapshots' array");
    const std::size_t dim = j.value("dim", std::size_t{0});
    std::vector<std::vector<double>> out;
    for (const auto& row : j["snapshots"]) {
        std::vector<double> snap = row.get<std::vector<double>>();
        if (snap.size() != dim) throw std::runtime_error(path + ": snapshot length mismatch");
        out.push_back(std::move(snap));
    }
    if (out.size() != j.value("count", out.size()))
        throw std::runtime_error(path + ": snapshot count mismatch");
    return out;
}

std::vector<double> load_fisher(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    if (!j.contains("fisher") || !j["fisher"].is_array())
        throw std::runtime_error(path + ": missing 'fisher' array");
    return j["fisher"].get<std::vector<double>>();
}

}  // namespace poisonlab
