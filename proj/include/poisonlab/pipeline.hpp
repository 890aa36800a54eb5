#pragma once

// Stage orchestration: clean pretraining, trigger optimization, poison
// selection, poisoned training, clean fine-tuning, zero-shot evaluation, and
// the full experiment driver with its artifact files.
//
// Reproducibility contract: every stage draws from a named stream derived
// from the one global seed, stages consume their streams independently of
// each other, and rerunning the same config writes byte-identical artifacts.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "poisonlab/config.hpp"
#include "poisonlab/losses.hpp"
#include "poisonlab/poisoning.hpp"
#include "poisonlab/synth.hpp"
#include "poisonlab/theory.hpp"

namespace poisonlab {

// First-order step on a flat parameter vector; adaptive-moment keeps the
// usual two moment buffers with bias correction.
class Optimizer {
  public:
    Optimizer(OptimizerKind kind, double lr, std::size_t dim);
    void step(std::span<double> params, std::span<const double> grad);

  private:
    OptimizerKind kind_;
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<double> m_, v_;
};

struct PretrainResult {
    ParamVector params;
    std::vector<double> epoch_loss;  // mean contrastive loss per epoch
};
// Initializes parameters from the seed and minimizes the contrastive loss on
// the train rows. Zero epochs returns the fresh initialization. Aborts on a
// non-finite loss or gradient.
PretrainResult pretrain_clean(const EncoderSpec& spec, const Dataset& d,
                              const std::vector<std::size_t>& train, const OptimizerConfig& opt,
                              double temperature, std::uint64_t seed);

struct Stage1Epoch {
    double objective = 0.0, t2t = 0.0, mpe = 0.0, i2t = 0.0;
    double radius = 0.0;         // max embedding distance to the triggered centroid
    double centroid_dist = 0.0;  // || triggered centroid - frozen target centroid ||
};
struct Stage1Result {
    TriggerPattern trigger;
    std::vector<Stage1Epoch> trace;         // entry 0 is the initial patch, then one per epoch
    std::vector<double> target_centroid;    // frozen clean target-class image centroid
    std::vector<double> fragment_embs;      // frozen fragment text embeddings [m x d]
};
// Optimizes the patch against the frozen clean model. Placements and
// fragment assignments are redrawn every epoch during optimization; the
// trace is measured on one fixed evaluation assignment so epochs compare
// like for like.
Stage1Result stage1_optimize_trigger(const ParamVector& theta0, const Dataset& d,
                                     const std::vector<std::size_t>& opt_set,
                                     const TargetDescriptionSet& targets, const Stage1Config& cfg,
                                     std::uint64_t seed);

struct Stage2Epoch {
    double objective = 0.0, clip = 0.0, align = 0.0, ewc = 0.0;
};
struct Stage2Result {
    ParamVector params;
    std::vector<double> fisher;
    std::vector<std::vector<double>> snapshots;  // parameter trajectory for curvature probes
    std::vector<Stage2Epoch> trace;              // per-epoch means over batches
};
// Poisoned training on the train rows with the plan's substitutions applied.
// controllable=false drops the alignment and anchor terms (plain contrastive
// training on the poisoned mixture). Fisher is estimated on clean rows
// before any update and stays frozen.
Stage2Result stage2_poison_train(const ParamVector& theta0, const Dataset& d,
                                 const std::vector<std::size_t>& train, const PoisonPlan& plan,
                                 const TriggerPattern& trigger, const Stage2Config& cfg,
                                 const LossWeights& w, std::uint64_t seed);

struct FinetuneResult {
    ParamVector params;
    std::vector<double> epoch_loss;
    std::vector<std::vector<double>> snapshots;
};
FinetuneResult clean_finetune(const ParamVector& start, const Dataset& d,
                              const std::vector<std::size_t>& ft_set, const OptimizerConfig& opt,
                              double temperature, std::uint64_t seed);

struct EvalResult {
    double ca = 0.0;              // zero-shot clean accuracy on the eval rows
    double asr = 0.0;             // headline attack success rate (deploy mode)
    double asr_continuous = 0.0;  // trigger applied with continuous values
    double asr_binarized = 0.0;   // trigger thresholded at 0.5
    double asr_control = 0.0;     // identity patch: base misclassification into the target
    std::vector<double> per_class_accuracy;
    std::size_t n_eval = 0;
    std::size_t n_asr = 0;  // non-target eval rows (the ASR denominator)
};
// Zero-shot classification against bare class-name prompts (argmax cosine,
// exact ties to the lowest class index). ASR injects the trigger into
// non-target eval images at fresh seeded placements; the target class is
// excluded from the denominator. headline_binarize picks which mode the
// `asr` field reports.
EvalResult evaluate(const ParamVector& p, const Dataset& d, const std::vector<std::size_t>& eval_idx,
                    const TriggerPattern* trigger, int target_class, bool headline_binarize,
                    std::uint64_t seed);

// Embedding dump for inspection: clean target-class rows, triggered
// non-target rows, and clean non-target rows from the eval split.
void export_embeddings(const ParamVector& p, const Dataset& d,
                       const std::vector<std::size_t>& eval_idx, const TriggerPattern& trigger,
                       int target_class, const std::string& csv_path, std::uint64_t seed);

struct MetricsRow {
    std::string run_id;
    std::string stage;
    double ca = 0.0, asr = 0.0;
    double loss_total = 0.0, loss_align = 0.0, loss_ewc = 0.0;
    std::uint64_t seed = 0;
};
std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TheoryRunReport {
    ContractionTrace contraction;
    AlignmentTrace alignment;
    GramResult gram;
    SurrogateReport surrogate;
    CodirReport codir;
    std::vector<BoundReport> bounds;
    CurvatureReport curvature;
};

struct ExperimentResult {
    RunConfig config;
    std::string run_id;
    SplitIndices split;
    std::vector<std::size_t> opt_set, ft_set, selection_pool;
    ParamVector theta0, theta_star, theta_ft;
    Stage1Result stage1;
    SelectionResult selection;
    PoisonPlan plan;
    Stage2Result stage2;
    FinetuneResult finetune;
    EvalResult eval_clean, eval_poisoned, eval_post_ft;
    std::vector<MetricsRow> metrics;
    std::optional<TheoryRunReport> theory;
};

// Full pipeline under one config. out_dir empty runs in memory only;
// otherwise every stage artifact, the metrics table and the report are
// written beneath it.
ExperimentResult run_experiment(const RunConfig& cfg, const std::string& out_dir);

// Theory harness over a finished run: embedding-space contraction and
// alignment, the surrogate inequalities at theta*, gradient
// co-directionality, the per-batch forgetting bound, and the curvature
// monitor along the poisoned-training trajectory. Refuses adaptive-moment
// stage-2/fine-tune optimizers unless the config explicitly allows them.
TheoryRunReport run_theory_checks(const ExperimentResult& run);

void write_experiment_artifacts(const ExperimentResult& run, const std::string& out_dir);

}  // namespace poisonlab
