#pragma once

// Poison construction: patch triggers, image injection, caption fusion, and
// the three subset-selection policies (greedy centroid matching, per-sample
// rank, uniform random).
//
// Index discipline: every pool, selection result and plan stores indices into
// the full Dataset arrays. Selection functions receive the candidate pool as
// such a list and return a subset of it.

#include <cstdint>
#include <string>
#include <vector>

#include "poisonlab/encoders.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/synth.hpp"

namespace poisonlab {

struct TriggerPattern {
    int height = 4;
    int width = 4;
    std::vector<double> values;  // row-major, each in [0, 1]
    bool binarize_on_deploy = false;
    double threshold = 0.5;
};

struct Placement {
    int row = 0;
    int col = 0;
};

TriggerPattern random_trigger(int height, int width, std::uint64_t seed);
void save_trigger(const TriggerPattern& t, const std::string& path);
TriggerPattern load_trigger(const std::string& path);

// Patch replacement at the placement window. deploy=true applies the 0.5
// binarization when the pattern asks for it; optimization always uses the
// continuous values. Throws if the window leaves the grid.
std::vector<double> inject_image(ImageView image, int grid_h, int grid_w,
                                 const TriggerPattern& trigger, Placement at, bool deploy);

Placement random_placement(int grid_h, int grid_w, const TriggerPattern& trigger, Rng& rng);

// Insert the fragment after the first k caption tokens, then cut the tail so
// the result keeps at most n_max tokens. k may equal 0 or caption.size().
std::vector<std::int32_t> fuse_caption(CaptionView caption, CaptionView fragment, std::size_t k,
                                       std::size_t n_max);

// Selection policies score candidates by their fused-caption text embedding
// under the frozen clean model. Scoring fusion is canonical and deterministic:
// fragment index = candidate position mod |fragments|, k = floor(n/2). The
// target text centroid is the mean fragment embedding under the same model.
//
// Each policy reports the criterion it actually optimizes. Greedy and random
// report || mean chosen embedding - centroid ||; rank reports the mean of the
// chosen per-sample distances. Greedy's value never exceeds rank's: at every
// step greedy may still add one of rank's top-k candidates, which caps its
// objective at the running mean of rank's distances.
struct SelectionResult {
    std::vector<std::size_t> chosen;         // dataset indices, in pick order
    std::vector<double> objective_per_step;  // criterion value after each pick
    double final_objective = 0.0;
};

struct SelectionProblem {
    const ParamVector* theta0 = nullptr;
    const Dataset* dataset = nullptr;
    std::vector<std::size_t> pool;  // candidate dataset indices
    const TargetDescriptionSet* targets = nullptr;
};

SelectionResult gma_select(const SelectionProblem& prob, std::size_t k);
SelectionResult rank_select(const SelectionProblem& prob, std::size_t k);
SelectionResult random_select(const SelectionProblem& prob, std::size_t k, std::uint64_t seed);

// Per-sample poisoning recipe: where the trigger lands, which fragment is
// spliced in and at which insertion point. Placements, fragments and k are
// drawn fresh from the plan seed.
struct PoisonPlan {
    std::vector<std::size_t> indices;  // dataset indices of replaced pairs
    std::vector<Placement> placements;
    std::vector<std::int32_t> fragment_indices;
    std::vector<std::int32_t> insert_positions;
    std::vector<std::vector<std::int32_t>> fused_captions;
    std::uint64_t seed = 0;
};

PoisonPlan build_poison_plan(const Dataset& d, const std::vector<std::size_t>& chosen,
                             const TargetDescriptionSet& targets, const TriggerPattern& trigger,
                             std::uint64_t seed);

void save_plan(const PoisonPlan& plan, const std::string& path);
PoisonPlan load_plan(const std::string& path);

}  // namespace poisonlab
