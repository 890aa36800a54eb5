#pragma once

// Numerical verification harness for the training-dynamics claims: exact
// embedding-space contraction, centroid alignment under the joint hinge
// objective, clean/backdoor gradient co-directionality, the inner-product
// surrogate inequalities, Hessian-vector probes with power iteration, the
// one-step forgetting bound, and a curvature/loss ratio monitor.
//
// Everything here is deterministic given its seeds, and the model-level
// probes assume plain gradient-descent dynamics; adaptive-moment stages are
// outside the bound's assumptions and callers must not feed them in.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "poisonlab/encoders.hpp"
#include "poisonlab/losses.hpp"

namespace poisonlab {

// ---- embedding-space dynamics ----

// Simultaneous GD on the trigger-compactness term. The coupled update
//   v_i <- v_i - 2*gamma*lambda*(v_i - mean)
// leaves the centroid fixed, so it is simulated in centered coordinates:
// the centroid is stored once and deviations are scaled by (1 - 2*gamma*
// lambda) each step. This realizes the exact same map while keeping the
// stored centroid bit-identical across steps.
struct ContractionTrace {
    std::vector<double> radius;                 // r_t = max_i ||v_i - centroid||, length steps+1
    std::vector<double> step_ratio;             // r_{t+1} / r_t (0 when r_t == 0)
    std::vector<std::vector<double>> centroid;  // recorded each step
    double contraction_factor = 0.0;            // |1 - 2*gamma*lambda|
    double rate_estimate = 0.0;                 // geometric mean of the observed ratios
};
ContractionTrace embedding_gd_contraction(std::span<const double> embs, std::size_t n,
                                          std::size_t d, double gamma, double lambda_t2t,
                                          int steps);

// Joint GD on compactness + hinge pull toward the target centroid. Deviations
// contract as above; the centroid moves by -2*gamma*lambda_mpe*(c - target)
// while ||c - target||^2 > eps and freezes once inside the margin.
struct AlignmentTrace {
    std::vector<double> centroid_dist;  // ||c_t - target||, length steps+1
    std::vector<double> radius;
    int first_hit_step = -1;  // first t with dist <= sqrt(eps); -1 if never
    bool stayed_inside = false;  // dist <= sqrt(eps) for every step after the first hit
};
AlignmentTrace centroid_alignment_run(std::span<const double> embs, std::size_t n, std::size_t d,
                                      std::span<const double> target, double eps_mpe, double gamma,
                                      double lambda_t2t, double lambda_mpe, int steps);

// ---- gradient co-directionality ----

struct EncodedBatch {
    std::vector<ImageView> images;
    std::vector<CaptionView> captions;
};

struct CodirStats {
    std::size_t count = 0;
    double mean = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0;
    double p_pos = 0.0;  // fraction of cosines > 0
};

struct CodirReport {
    CodirStats gated;    // batches whose triggered centroid is within eps_align of the target
    CodirStats ungated;  // every usable batch
    std::vector<double> cosines;       // per usable pair, in input order
    std::vector<bool> gate_mask;       // aligned with cosines
    std::vector<double> gate_dist;     // centroid-to-target distance per pair
    std::size_t skipped_zero_grad = 0;
};

// Cosine between the clean-batch and triggered-batch contrastive gradients at
// fixed parameters. target_centroid is the clean target-class image centroid
// under the same parameters; a pair passes the gate when the triggered image
// centroid lies within eps_align of it.
CodirReport grad_codirectionality(const ParamVector& p,
                                  const std::vector<std::pair<EncodedBatch, EncodedBatch>>& pairs,
                                  double eps_align, std::span<const double> target_centroid,
                                  const LossWeights& w);

// Quantiles with linear interpolation on the sorted sample.
CodirStats summarize_cosines(const std::vector<double>& values);

// ---- surrogate inner-product bounds ----

// Symmetric dense eigenvalues by cyclic Jacobi rotations, ascending order.
// Product-side solver: tests cross-check it against an external library.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n);

struct SurrogateReport {
    double m = 0.0;           // ||u||
    double delta_norm = 0.0;  // ||Delta||
    double sigma_min = 0.0, sigma_max = 0.0, kappa = 0.0;
    double identity_lhs = 0.0, identity_rhs = 0.0;  // <u, u+Delta> >= m(m - ||Delta||)
    double metric_lhs = 0.0, metric_rhs = 0.0;  // u^T G (u+Delta) >= m(smin*m - smax*||Delta||)
    bool identity_holds = false, metric_holds = false;
    bool margin_condition = false;  // m > kappa * eps
};
// G is row-major [d x d], must be symmetric PSD (eigenvalue >= -1e-10) with
// sigma_min > 0 for the condition number; eps feeds the margin diagnostic.
SurrogateReport surrogate_bound_check(std::span<const double> u, std::span<const double> delta,
                                      std::span<const double> G, std::size_t d, double eps);

struct GramResult {
    std::size_t d = 0;
    std::vector<double> G;      // J J^T, row-major [d x d]
    std::vector<double> eigenvalues;  // ascending
    double sigma_min = 0.0, sigma_max = 0.0, kappa = 0.0;
};
// Gram matrix of the mean-image-embedding Jacobian over the image-tower block.
GramResult compute_gram(const ParamVector& p, const std::vector<ImageView>& images);

// ---- Hessian probes ----

using LossGradFn = std::function<LossAndGrad(std::span<const double>)>;

// Hessian-vector product by central differences of the analytic gradient.
// step <= 0 selects cbrt(machine eps) * (1 + ||theta||) / ||v||. A zero
// direction returns the zero vector.
std::vector<double> hvp(const LossGradFn& fn, std::span<const double> theta,
                        std::span<const double> v, double step = 0.0);

struct PowerResult {
    double lambda = 0.0;
    double residual = 0.0;  // ||H x - lambda x|| / max(|lambda|, 1e-300)
    int iterations = 0;
    bool converged = false;
};
// Power iteration with Rayleigh-quotient convergence on a matrix-free
// symmetric operator. Plain iteration follows the magnitude-dominant
// eigenvalue; when that limit comes out negative a second pass runs on the
// spectrum-shifted operator so the result estimates the top signed
// eigenvalue either way. The estimate is a Rayleigh quotient, hence never
// above the true top eigenvalue (up to the operator's own noise).
PowerResult power_lambda_max(const std::function<std::vector<double>(std::span<const double>)>& apply,
                             std::size_t dim, std::uint64_t seed, int max_iters, double tol);

// Top Hessian eigenvalue of fn at theta through hvp + power iteration.
PowerResult hessian_lambda_max(const LossGradFn& fn, std::span<const double> theta,
                               std::uint64_t seed, int max_iters, double tol);

// ---- one-step forgetting bound ----

struct BoundReport {
    double eta = 0.0;
    double delta_actual = 0.0;  // L_bd(theta - eta g_ft) - L_bd(theta)
    double inner = 0.0;         // <g_bd, g_ft>
    double g_ft_norm = 0.0;
    double kappa_bd = 0.0;      // safety * max path curvature
    double bound = 0.0;         // -eta*inner + 0.5*kappa_bd*eta^2*||g_ft||^2
    double slack = 0.0;         // bound - delta_actual; negative means violated
    std::vector<double> path_lambdas;
};
// Curvature is sampled at path_samples points on the segment
// [theta, theta - eta g_ft] (inclusive) and inflated by `safety`.
BoundReport forgetting_bound_check(const LossGradFn& backdoor_loss, const LossGradFn& clean_loss,
                                   std::span<const double> theta, double eta, int path_samples,
                                   double safety, std::uint64_t seed, int power_iters,
                                   double power_tol);

// ---- curvature monitor ----

struct CurvatureSample {
    std::size_t index = 0;
    double loss = 0.0;        // alignment loss at the snapshot
    double lambda_max = 0.0;  // top Hessian eigenvalue of that loss
    double residual = 0.0;
    double ratio = 0.0;       // lambda_max / loss (0 when loss < 1e-12)
};
struct CurvatureReport {
    std::vector<CurvatureSample> samples;
    double max_ratio = 0.0;
    // Tripwire, not a theorem: set when the ratio at the end exceeds ten
    // times the first finite ratio.
    bool superlinear_flag = false;
};
CurvatureReport curvature_monitor(const LossGradFn& align_fn,
                                  const std::vector<std::vector<double>>& trajectory,
                                  std::uint64_t seed, int power_iters, double power_tol);

}  // namespace poisonlab
