#pragma once

// Synthetic image-caption corpus. Each class owns a smooth grayscale
// prototype (sum of three random 2-D cosines rescaled into [0.2, 0.8]);
// samples are prototype + clipped Gaussian pixel noise. Captions are token
// bags: one class-name token plus filler tokens from the class vocabulary
// pool, order shuffled. Pools are pairwise disjoint apart from a shared
// filler block at the top of the vocabulary.
//
// The generator is a pure function of its config: pools, prototypes, images
// and captions are all derived from config.seed through named streams, so a
// persisted dataset stores only (config, images, captions, labels) and the
// loader regenerates the rest.

#include <cstdint>
#include <string>
#include <vector>

namespace poisonlab {

struct SynthConfig {
    int num_classes = 5;
    int vocab_size = 64;
    int grid_h = 16;
    int grid_w = 16;
    int samples_per_class = 625;
    double pixel_noise_sigma = 0.05;
    int caption_len_min = 3;
    int caption_len_max = 12;  // hard cap; caption fusion truncates to this
    std::uint64_t seed = 42;

    bool operator==(const SynthConfig&) const = default;
};

struct Dataset {
    SynthConfig config;
    std::vector<std::int32_t> class_name_tokens;         // [C], token c names class c
    std::vector<std::vector<std::int32_t>> class_pools;  // [C], filler tokens (disjoint + shared)
    std::vector<std::vector<double>> prototypes;         // [C][H*W], values in [0.2, 0.8]
    std::vector<std::vector<double>> images;             // [N][H*W], values in [0, 1]
    std::vector<std::vector<std::int32_t>> captions;     // [N], lengths in [len_min, len_max]
    std::vector<std::int32_t> labels;                    // [N]

    std::size_t size() const { return images.size(); }
};

// Target-class caption fragments used for poisoning: fragment 0 is the bare
// class-name token; the rest add one to three pool fillers, all distinct.
struct TargetDescriptionSet {
    std::int32_t target_class = 0;
    std::vector<std::vector<std::int32_t>> fragments;
};

Dataset generate_dataset(const SynthConfig& config);

// Seeded shuffle split into train / eval index lists over the full dataset.
struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> eval;
};
SplitIndices split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed);

// Disjoint subsets of `pool`, one per requested size, drawn by seeded shuffle.
// Throws if the sizes overrun the pool.
std::vector<std::vector<std::size_t>> carve_subsets(const std::vector<std::size_t>& pool,
                                                    const std::vector<std::size_t>& sizes,
                                                    std::uint64_t seed);

TargetDescriptionSet make_target_set(const Dataset& d, int target_class, int count,
                                     std::uint64_t seed);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// Nearest-prototype classification rate on the given indices (raw pixels,
// squared distance). Separability sanity gauge for the generator.
double nearest_prototype_accuracy(const Dataset& d, const std::vector<std::size_t>& indices);

}  // namespace poisonlab
