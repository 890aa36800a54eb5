#pragma once

// Experiment configuration: an INI-style text format with one section per
// pipeline stage. Parsing is strict: unknown sections or keys, duplicate
// keys and malformed values are fatal, each reported with its line number.
// The seed is the single global key and may appear before any section.
//
// emit_config writes the canonical form (every key explicit, fixed order);
// parse(emit(parse(x))) reproduces the same structure.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "poisonlab/losses.hpp"
#include "poisonlab/synth.hpp"

namespace poisonlab {

struct ConfigError : std::runtime_error {
    int line;
    ConfigError(int line_, const std::string& what_)
        : std::runtime_error("config line " + std::to_string(line_) + ": " + what_), line(line_) {}
};

enum class OptimizerKind { GradientDescent, AdaptiveMoment };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::GradientDescent;
    double lr = 0.1;
    int epochs = 10;
    int batch_size = 64;

    bool operator==(const OptimizerConfig&) const = default;
};

struct DataConfig {
    int num_classes = 5;
    int vocab_size = 64;
    int grid_h = 16;
    int grid_w = 16;
    int samples_per_class = 625;
    double pixel_noise_sigma = 0.05;
    int caption_len_min = 3;
    int caption_len_max = 6;
    double train_fraction = 0.8;
    int opt_size = 250;   // trigger-optimization subset carved from train
    int ft_size = 500;    // clean fine-tuning subset carved from train
    int target_class = 0;
    int target_fragments = 5;

    bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
    int hidden_dim = 64;
    int text_embed_dim = 16;
    int embed_dim = 16;
    double temperature = 0.07;
    OptimizerConfig pretrain{OptimizerKind::AdaptiveMoment, 1e-3, 30, 128};

    bool operator==(const ModelConfig&) const = default;
};

struct Stage1Config {
    OptimizerConfig opt{OptimizerKind::AdaptiveMoment, 1e-3, 50, 64};
    double lambda_t2t = 0.1;
    double lambda_mpe = 1.0;
    double eps_mpe = 0.01;
    int trigger_h = 4;
    int trigger_w = 4;
    // Lower bound of the uniform patch initialization; 0 keeps the raw draw.
    double trigger_init_min = 0.0;
    bool binarize_on_deploy = true;

    bool operator==(const Stage1Config&) const = default;
};

enum class SelectionMode { Greedy, Rank, Random };

struct SelectionConfig {
    SelectionMode mode = SelectionMode::Greedy;
    int poison_count = 75;

    bool operator==(const SelectionConfig&) const = default;
};

struct Stage2Config {
    OptimizerConfig opt{OptimizerKind::GradientDescent, 0.05, 60, 16};
    bool controllable = true;  // enables the alignment + anchor terms
    double lambda_total = 1.0;
    double lambda_align = 0.008;
    double lambda_ewc = 0.1;
    int fisher_batches = 8;
    int fisher_batch_size = 64;
    int snapshot_every = 10;  // epochs between trajectory snapshots

    bool operator==(const Stage2Config&) const = default;
};

struct FinetuneConfig {
    OptimizerConfig opt{OptimizerKind::GradientDescent, 0.02, 10, 64};

    bool operator==(const FinetuneConfig&) const = default;
};

struct EvalConfig {
    bool deploy_binarize = false;

    bool operator==(const EvalConfig&) const = default;
};

struct TheoryConfig {
    bool enabled = false;  // an empty [theory] section leaves the harness off
    double contraction_gamma = 0.125;
    double contraction_lambda = 1.0;
    int contraction_steps = 100;
    int alignment_steps = 10000;
    int codir_batches = 40;
    int codir_batch_size = 32;
    int power_iters = 200;
    double power_tol = 1e-6;
    int path_samples = 5;
    double bound_eta = 1e-3;
    int bound_batches = 20;
    int bound_batch_size = 32;
    double safety = 1.05;
    bool allow_adaptive = false;  // the bound assumes plain GD stages

    bool operator==(const TheoryConfig&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 42;
    DataConfig data;
    ModelConfig model;
    Stage1Config stage1;
    SelectionConfig selection;
    Stage2Config stage2;
    FinetuneConfig finetune;
    EvalConfig eval;
    TheoryConfig theory;

    bool operator==(const RunConfig&) const = default;

    SynthConfig synth_config() const;
    EncoderSpec encoder_spec() const;
    LossWeights loss_weights() const;
};

RunConfig parse_config(const std::string& text);
std::string emit_config(const RunConfig& c);
RunConfig load_config(const std::string& path);

const char* optimizer_name(OptimizerKind k);
const char* selection_name(SelectionMode m);

}  // namespace poisonlab
