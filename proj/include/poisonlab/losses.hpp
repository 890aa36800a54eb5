#pragma once

// Training objectives, each returning its value together with the exact
// analytic gradient. Embedding-space losses differentiate with respect to
// the embedding rows; model-level losses chain through the encoder VJPs and
// differentiate with respect to the flat parameter vector; the trigger
// objective differentiates with respect to the patch alone.

#include <cstdint>
#include <span>
#include <vector>

#include "poisonlab/encoders.hpp"
#include "poisonlab/poisoning.hpp"

namespace poisonlab {

struct LossWeights {
    double temperature = 0.07;
    double lambda_aux = 0.0;  // auxiliary-term weight; identically zero, kept in the formula
    double lambda_t2t = 0.1;
    double lambda_mpe = 1.0;
    double eps_mpe = 0.01;
    double lambda_total = 1.0;
    double lambda_align = 0.008;
    double lambda_ewc = 0.1;
};

// Symmetric InfoNCE over matched rows of two unit-row embedding matrices.
// Both softmax directions are log-sum-exp stabilized. Gradients are with
// respect to the embedding rows.
struct InfoNceResult {
    double value = 0.0;
    std::vector<double> grad_images;  // [B x d]
    std::vector<double> grad_texts;   // [B x d]
};
InfoNceResult info_nce(std::span<const double> image_embs, std::span<const double> text_embs,
                       std::size_t batch, std::size_t dim, double temperature);

struct LossAndGrad {
    double value = 0.0;
    std::vector<double> grad;
};

// Contrastive loss plus the (identically zero) auxiliary term, differentiated
// through both towers. grad spans the full parameter layout.
LossAndGrad total_loss(const ParamVector& p, const std::vector<ImageView>& images,
                       const std::vector<CaptionView>& captions, const LossWeights& w);

// cos(a, b) for arbitrary nonzero vectors, plus its exact gradient (the
// radial terms are kept; normalization upstream does not remove them at
// this level). Gradients accumulate into ga / gb scaled by `scale`.
double cosine(std::span<const double> a, std::span<const double> b);
void cosine_grad_acc(std::span<const double> a, std::span<const double> b, double scale,
                     std::span<double> ga, std::span<double> gb);

// Embedding-space losses. grad is with respect to the n stacked rows.
LossAndGrad t2t_loss(std::span<const double> embs, std::size_t n, std::size_t d);
LossAndGrad mpe_loss(std::span<const double> embs, std::size_t n, std::size_t d,
                     std::span<const double> target_centroid, double eps);
LossAndGrad i2t_loss(std::span<const double> embs, std::size_t n, std::size_t d,
                     std::span<const double> targets /* [n x d] */);

// Trigger-level objective lambda_t2t * L_t2t + lambda_mpe * L_mpe + L_i2t on
// trigger-injected images. Parameters stay frozen at theta0; the gradient
// flows only through the patch values via the image-tower input VJP.
struct TriggerBatchItem {
    ImageView image;
    Placement placement;
    std::size_t target_index = 0;  // row into target_text_embs
};
struct TriggerObjectiveResult {
    double value = 0.0, t2t = 0.0, mpe = 0.0, i2t = 0.0;
    std::vector<double> grad_trigger;  // [h x w]
    std::vector<double> centroid;      // mean injected embedding
    double radius = 0.0;               // max distance of an embedding to the centroid
};
TriggerObjectiveResult trigger_objective(const ParamVector& theta0, const TriggerPattern& trigger,
                                         const std::vector<TriggerBatchItem>& items, int grid_h,
                                         int grid_w,
                                         std::span<const double> target_text_embs /* [m x d] */,
                                         std::span<const double> target_image_centroid /* [d] */,
                                         const LossWeights& w);

// Mean cross-modal misalignment 1 - cos over poisoned pairs, through both
// towers.
struct AlignPair {
    ImageView image;
    CaptionView caption;
};
LossAndGrad align_loss(const ParamVector& p, const std::vector<AlignPair>& pairs);

// Diagonal quadratic anchor sum_n F_n (theta_n - theta0_n)^2.
LossAndGrad ewc_loss(const ParamVector& p, const ParamVector& theta0,
                     std::span<const double> fisher);

// Fisher diagonal: mean over batches of the elementwise-squared contrastive
// gradient. Frozen before poisoned training.
struct FisherBatch {
    std::vector<ImageView> images;
    std::vector<CaptionView> captions;
};
std::vector<double> estimate_fisher_diag(const ParamVector& p,
                                         const std::vector<FisherBatch>& batches,
                                         const LossWeights& w);

// Stage-II objective lambda_total * L_total + lambda_align * L_align +
// lambda_ewc * L_ewc, with per-component values reported.
struct ModelObjectiveResult {
    double value = 0.0, clip = 0.0, align = 0.0, ewc = 0.0;
    std::vector<double> grad;
};
ModelObjectiveResult model_objective(const ParamVector& p, const std::vector<ImageView>& images,
                                     const std::vector<CaptionView>& captions,
                                     const std::vector<AlignPair>& poisoned_pairs,
                                     const ParamVector& theta0, std::span<const double> fisher,
                                     const LossWeights& w);

}  // namespace poisonlab
