#include "poisonlab/poisoning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "poisonlab/jsonio.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

void validate_trigger(const TriggerPattern& t) {
    if (t.height < 1 || t.width < 1) throw std::invalid_argument("trigger: empty patch");
    if (t.values.size() != static_cast<std::size_t>(t.height) * t.width)
        throw std::invalid_argument("trigger: value count disagrees with shape");
    for (double v : t.values)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("trigger: value outside [0, 1]");
}

// Fused-caption text embeddings for the whole pool under the canonical
// scoring policy, plus the frozen target centroid. Rows are unit (encoder
// output), the centroid in general is not.
struct ScoredPool {
    std::size_t d = 0;
    std::vector<double> embs;      // [pool x d]
    std::vector<double> centroid;  // t_bar_star
};

ScoredPool score_pool(const SelectionProblem& prob) {
    if (!prob.theta0 || !prob.dataset || !prob.targets)
        throw std::invalid_argument("selection: incomplete problem");
    if (prob.targets->fragments.empty()) throw std::invalid_argument("selection: no fragments");
    const Dataset& d = *prob.dataset;
    const std::size_t n_max = static_cast<std::size_t>(d.config.caption_len_max);

    std::vector<std::vector<std::int32_t>> fused;
    fused.reserve(prob.pool.size());
    for (std::size_t pos = 0; pos < prob.pool.size(); ++pos) {
        const auto& cap = d.captions[prob.pool[pos]];
        const auto& frag = prob.targets->fragments[pos % prob.targets->fragments.size()];
        fused.push_back(fuse_caption(cap, frag, cap.size() / 2, n_max));
    }
    std::vector<CaptionView> views;
    views.reserve(fused.size());
    for (const auto& c : fused) views.emplace_back(c);

    std::vector<CaptionView> frag_views;
    for (const auto& f : prob.targets->fragments) frag_views.emplace_back(f);

    ScoredPool sp;
    sp.d = static_cast<std::size_t>(prob.theta0->spec.embed_dim);
    sp.embs = encode_texts(*prob.theta0, views);
    std::vector<double> frag_embs = encode_texts(*prob.theta0, frag_views);
    sp.centroid = row_mean(frag_embs, frag_views.size(), sp.d);
    return sp;
}

double mean_distance(const std::vector<double>& sum, std::size_t count,
                     const std::vector<double>& target) {
    double s = 0.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
        double diff = sum[j] / static_cast<double>(count) - target[j];
        s += diff * diff;
    }
    return std::sqrt(s);
}

void check_k(const SelectionProblem& prob, std::size_t k) {
    if (k == 0) throw std::invalid_argument("selection: k must be positive");
    if (k > prob.pool.size()) throw std::invalid_argument("selection: k exceeds pool size");
}

}  // namespace

TriggerPattern random_trigger(int height, int width, std::uint64_t seed) {
    if (height < 1 || width < 1) throw std::invalid_argument("trigger: empty patch");
    TriggerPattern t;
    t.height = height;
    t.width = width;
    t.values.resize(static_cast<std::size_t>(height) * width);
    Rng rng = Rng::for_stage(seed, "trigger-init");
    for (double& v : t.values) v = rng.uniform();
    return t;
}

std::vector<double> inject_image(ImageView image, int grid_h, int grid_w,
                                 const TriggerPattern& trigger, Placement at, bool deploy) {
    validate_trigger(trigger);
    if (image.size() != static_cast<std::size_t>(grid_h) * grid_w)
        throw std::invalid_argument("inject: image size disagrees with grid");
    if (at.row < 0 || at.col < 0 || at.row + trigger.height > grid_h ||
        at.col + trigger.width > grid_w)
        throw std::invalid_argument("inject: placement leaves the grid");

    std::vector<double> out(image.begin(), image.end());
    const bool binarize = deploy && trigger.binarize_on_deploy;
    for (int r = 0; r < trigger.height; ++r)
        for (int c = 0; c < trigger.width; ++c) {
            double v = trigger.values[static_cast<std::size_t>(r) * trigger.width + c];
            if (binarize) v = v >= trigger.threshold ? 1.0 : 0.0;
            out[static_cast<std::size_t>(at.row + r) * grid_w + (at.col + c)] = v;
        }
    return out;
}

Placement random_placement(int grid_h, int grid_w, const TriggerPattern& trigger, Rng& rng) {
    if (trigger.height > grid_h || trigger.width > grid_w)
        throw std::invalid_argument("placement: trigger larger than grid");
    Placement p;
    p.row = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_h - trigger.height + 1)));
    p.col = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_w - trigger.width + 1)));
    return p;
}

std::vector<std::int32_t> fuse_caption(CaptionView caption, CaptionView fragment, std::size_t k,
                                       std::size_t n_max) {
    if (k > caption.size()) throw std::invalid_argument("fuse: insertion point beyond caption");
    if (fragment.empty()) throw std::invalid_argument("fuse: empty fragment");
    std::vector<std::int32_t> out;
    out.reserve(caption.size() + fragment.size());
    out.insert(out.end(), caption.begin(), caption.begin() + static_cast<std::ptrdiff_t>(k));
    out.insert(out.end(), fragment.begin(), fragment.end());
    out.insert(out.end(), caption.begin() + static_cast<std::ptrdiff_t>(k), caption.end());
    if (out.size() > n_max) out.resize(n_max);
    return out;
}

SelectionResult gma_select(const SelectionProblem& prob, std::size_t k) {
    check_k(prob, k);
    ScoredPool sp = score_pool(prob);
    const std::size_t n = prob.pool.size(), d = sp.d;

    SelectionResult res;
    std::vector<bool> taken(n, false);
    std::vector<double> run_sum(d, 0.0);
    for (std::size_t step = 0; step < k; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_pos = n;
        std::vector<double> cand(d);
        for (std::size_t pos = 0; pos < n; ++pos) {
            if (taken[pos]) continue;
            for (std::size_t j = 0; j < d; ++j) cand[j] = run_sum[j] + sp.embs[pos * d + j];
            double obj = mean_distance(cand, step + 1, sp.centroid);
            // Exact ties resolve toward the lowest dataset index.
            if (obj < best ||
                (obj == best && best_pos < n && prob.pool[pos] < prob.pool[best_pos])) {
                best = obj;
                best_pos = pos;
            }
        }
        taken[best_pos] = true;
        for (std::size_t j = 0; j < d; ++j) run_sum[j] += sp.embs[best_pos * d + j];
        res.chosen.push_back(prob.pool[best_pos]);
        res.objective_per_step.push_back(best);
    }
    res.final_objective = res.objective_per_step.back();
    return res;
}

SelectionResult rank_select(const SelectionProblem& prob, std::size_t k) {
    check_k(prob, k);
    ScoredPool sp = score_pool(prob);
    const std::size_t n = prob.pool.size(), d = sp.d;

    std::vector<std::pair<double, std::size_t>> scored(n);  // (distance, pool position)
    for (std::size_t pos = 0; pos < n; ++pos) {
        double s = sq_dist({sp.embs.data() + pos * d, d}, sp.centroid);
        scored[pos] = {std::sqrt(s), pos};
    }
    std::sort(scored.begin(), scored.end(),
              [&](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first < b.first;
                  return prob.pool[a.second] < prob.pool[b.second];
              });

    // The rank criterion is the mean of the chosen per-sample distances, so
    // that is what the result reports (prefix means per step).
    SelectionResult res;
    double dist_sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        res.chosen.push_back(prob.pool[scored[i].second]);
        dist_sum += scored[i].first;
        res.objective_per_step.push_back(dist_sum / static_cast<double>(i + 1));
    }
    res.final_objective = res.objective_per_step.back();
    return res;
}

SelectionResult random_select(const SelectionProblem& prob, std::size_t k, std::uint64_t seed) {
    check_k(prob, k);
    ScoredPool sp = score_pool(prob);
    const std::size_t d = sp.d;
    Rng rng = Rng::for_stage(seed, "random-select");
    std::vector<std::size_t> picks = rng.sample_without_replacement(prob.pool.size(), k);

    SelectionResult res;
    std::vector<double> sum(d, 0.0);
    for (std::size_t pos : picks) {
        res.chosen.push_back(prob.pool[pos]);
        for (std::size_t j = 0; j < d; ++j) sum[j] += sp.embs[pos * d + j];
    }
    res.final_objective = mean_distance(sum, k, sp.centroid);
    return res;
}

PoisonPlan build_poison_plan(const Dataset& d, const std::vector<std::size_t>& chosen,
                             const TargetDescriptionSet& targets, const TriggerPattern& trigger,
                             std::uint64_t seed) {
    validate_trigger(trigger);
    if (targets.fragments.empty()) throw std::invalid_argument("plan: no fragments");
    {
        std::vector<std::size_t> sorted = chosen;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw std::invalid_argument("plan: duplicate sample index");
        if (!sorted.empty() && sorted.back() >= d.size())
            throw std::invalid_argument("plan: sample index out of range");
    }

    PoisonPlan plan;
    plan.seed = seed;
    Rng rng = Rng::for_stage(seed, "poison-plan");
    const std::size_t n_max = static_cast<std::size_t>(d.config.caption_len_max);
    for (std::size_t idx : chosen) {
        const auto& cap = d.captions[idx];
        Placement at = random_placement(d.config.grid_h, d.config.grid_w, trigger, rng);
        auto frag_idx = static_cast<std::int32_t>(rng.below(targets.fragments.size()));
        // Insertion point uniform over {0..n}, both ends inclusive.
        auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cap.size())));
        plan.indices.push_back(idx);
        plan.placements.push_back(at);
        plan.fragment_indices.push_back(frag_idx);
        plan.insert_positions.push_back(static_cast<std::int32_t>(k));
        plan.fused_captions.push_back(
            fuse_caption(cap, targets.fragments[static_cast<std::size_t>(frag_idx)], k, n_max));
    }
    return plan;
}

void save_trigger(const TriggerPattern& t, const std::string& path) {
    validate_trigger(t);
    JsonWriter w;
    w.obj_open();
    w.kv("height", t.height)
        .kv("width", t.width)
        .key("values")
        .arr_doubles(t.values)
        .kv("binarize_on_deploy", t.binarize_on_deploy)
        .kv("threshold", t.threshold);
    w.obj_close();
    write_text_file(path, w.text());
}

TriggerPattern load_trigger(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    TriggerPattern t;
    t.height = j.at("height").get<int>();
    t.width = j.at("width").get<int>();
    t.values = j.at("values").get<std::vector<double>>();
    t.binarize_on_deploy = j.at("binarize_on_deploy").get<bool>();
    t.threshold = j.at("threshold").get<double>();
    validate_trigger(t);
    return t;
}

void save_plan(const PoisonPlan& plan, const std::string& path) {
    JsonWriter w;
    w.obj_open();
    w.key("indices").arr_sizes(plan.indices);
    w.key("placements").arr_open();
    for (const Placement& p : plan.placements)
        w.obj_open().kv("row", p.row).kv("col", p.col).obj_close();
    w.arr_close();
    w.key("fragment_indices").arr_ints(plan.fragment_indices);
    w.key("insert_positions").arr_ints(plan.insert_positions);
    w.key("fused_captions").arr_open();
    for (const auto& cap : plan.fused_captions) w.arr_ints(cap);
    w.arr_close();
    w.kv("seed", static_cast<std::uint64_t>(plan.seed));
    w.obj_close();
    write_text_file(path, w.text());
}

PoisonPlan load_plan(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    PoisonPlan plan;
    plan.indices = j.at("indices").get<std::vector<std::size_t>>();
    for (const auto& jp : j.at("placements"))
        plan.placements.push_back({jp.at("row").get<int>(), jp.at("col").get<int>()});
    plan.fragment_indices = j.at("fragment_indices").get<std::vector<std::int32_t>>();
    plan.insert_positions = j.at("insert_positions").get<std::vector<std::int32_t>>();
    plan.fused_captions = j.at("fused_captions").get<std::vector<std::vector<std::int32_t>>>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    const std::size_t n = plan.indices.size();
    if (plan.placements.size() != n || plan.fragment_indices.size() != n ||
        plan.insert_positions.size() != n || plan.fused_captions.size() != n)
        throw std::runtime_error("plan: ragged arrays");
    return plan;
}

}  // namespace poisonlab
