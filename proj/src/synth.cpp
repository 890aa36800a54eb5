#include "poisonlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "poisonlab/jsonio.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

void validate(const SynthConfig& c) {
    if (c.num_classes < 2) throw std::invalid_argument("synth: need at least 2 classes");
    if (c.vocab_size < 2 * c.num_classes)
        throw std::invalid_argument("synth: vocab_size must be at least 2 * num_classes");
    if (c.grid_h < 1 || c.grid_w < 1) throw std::invalid_argument("synth: empty grid");
    if (c.samples_per_class < 1) throw std::invalid_argument("synth: samples_per_class < 1");
    if (c.pixel_noise_sigma < 0.0) throw std::invalid_argument("synth: negative noise sigma");
    if (c.caption_len_min < 1 || c.caption_len_max < c.caption_len_min)
        throw std::invalid_argument("synth: bad caption length range");
}

// Vocabulary layout: [0, C) class-name tokens, [C, V-S) per-class filler
// blocks of equal size, [V-S, V) shared fillers. Leftover tokens between the
// blocks and the shared region stay unused.
void build_pools(const SynthConfig& c, std::vector<std::int32_t>& names,
                 std::vector<std::vector<std::int32_t>>& pools) {
    const int C = c.num_classes;
    const int V = c.vocab_size;
    const int shared = std::max(2, V / 8);
    const int per_class = (V - C - shared) / C;

    names.resize(C);
    pools.assign(C, {});
    for (int k = 0; k < C; ++k) names[k] = k;
    for (int k = 0; k < C; ++k) {
        for (int j = 0; j < per_class; ++j) pools[k].push_back(C + k * per_class + j);
        for (int j = V - shared; j < V; ++j) pools[k].push_back(j);
    }
}

std::vector<double> make_prototype(const SynthConfig& c, Rng& rng) {
    const int H = c.grid_h, W = c.grid_w;
    std::vector<double> p(static_cast<std::size_t>(H) * W, 0.0);
    for (int k = 0; k < 3; ++k) {
        double amp = rng.uniform(0.5, 1.0);
        double fr = rng.uniform(0.5, 2.0);
        double fc = rng.uniform(0.5, 2.0);
        double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (int r = 0; r < H; ++r)
            for (int w = 0; w < W; ++w)
                p[static_cast<std::size_t>(r) * W + w] +=
                    amp * std::cos(2.0 * std::numbers::pi * (fr * r / H + fc * w / W) + phase);
    }
    double lo = p[0], hi = p[0];
    for (double v : p) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) {
        std::fill(p.begin(), p.end(), 0.5);
        return p;
    }
    for (double& v : p) v = 0.2 + 0.6 * (v - lo) / (hi - lo);
    return p;
}

std::vector<std::int32_t> make_caption(const SynthConfig& c, std::int32_t name,
                                       const std::vector<std::int32_t>& pool, Rng& rng) {
    int n = static_cast<int>(rng.uniform_int(c.caption_len_min, c.caption_len_max));
    std::vector<std::int32_t> cap;
    cap.reserve(n);
    cap.push_back(name);
    for (int j = 1; j < n; ++j) cap.push_back(pool[rng.below(pool.size())]);
    rng.shuffle(cap);
    return cap;
}

}  // namespace

Dataset generate_dataset(const SynthConfig& config) {
    validate(config);
    Dataset d;
    d.config = config;
    build_pools(config, d.class_name_tokens, d.class_pools);

    Rng proto_rng = Rng::for_stage(config.seed, "synth/prototypes");
    for (int k = 0; k < config.num_classes; ++k)
        d.prototypes.push_back(make_prototype(config, proto_rng));

    Rng pix_rng = Rng::for_stage(config.seed, "synth/pixels");
    Rng cap_rng = Rng::for_stage(config.seed, "synth/captions");
    const std::size_t pixels = static_cast<std::size_t>(config.grid_h) * config.grid_w;
    for (int k = 0; k < config.num_classes; ++k) {
        for (int s = 0; s < config.samples_per_class; ++s) {
            std::vector<double> img(pixels);
            for (std::size_t i = 0; i < pixels; ++i)
                img[i] = std::clamp(d.prototypes[k][i] + config.pixel_noise_sigma * pix_rng.normal(),
                                    0.0, 1.0);
            d.images.push_back(std::move(img));
            d.captions.push_back(
                make_caption(config, d.class_name_tokens[k], d.class_pools[k], cap_rng));
            d.labels.push_back(static_cast<std::int32_t>(k));
        }
    }
    return d;
}

SplitIndices split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed) {
    if (train_fraction < 0.0 || train_fraction > 1.0)
        throw std::invalid_argument("split: train_fraction outside [0, 1]");
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = Rng::for_stage(seed, "split");
    rng.shuffle(idx);
    const std::size_t n_train =
        static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(idx.size())));
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.eval.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    return s;
}

std::vector<std::vector<std::size_t>> carve_subsets(const std::vector<std::size_t>& pool,
                                                    const std::vector<std::size_t>& sizes,
                                                    std::uint64_t seed) {
    std::size_t need = 0;
    for (std::size_t s : sizes) need += s;
    if (need > pool.size()) throw std::invalid_argument("carve: subset sizes exceed pool");
    std::vector<std::size_t> idx = pool;
    Rng rng = Rng::for_stage(seed, "carve");
    rng.shuffle(idx);
    std::vector<std::vector<std::size_t>> out;
    std::size_t at = 0;
    for (std::size_t s : sizes) {
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                         idx.begin() + static_cast<std::ptrdiff_t>(at + s));
        at += s;
    }
    return out;
}

TargetDescriptionSet make_target_set(const Dataset& d, int target_class, int count,
                                     std::uint64_t seed) {
    if (target_class < 0 || target_class >= d.config.num_classes)
        throw std::invalid_argument("target set: class out of range");
    if (count < 1) throw std::invalid_argument("target set: count < 1");
    TargetDescriptionSet t;
    t.target_class = static_cast<std::int32_t>(target_class);
    const std::int32_t name = d.class_name_tokens[static_cast<std::size_t>(target_class)];
    const auto& pool = d.class_pools[static_cast<std::size_t>(target_class)];
    Rng rng = Rng::for_stage(seed, "target-set");

    t.fragments.push_back({name});
    int attempts = 0;
    while (static_cast<int>(t.fragments.size()) < count) {
        if (++attempts > 1000 * count)
            throw std::runtime_error("target set: cannot draw enough distinct fragments");
        int extra = static_cast<int>(rng.uniform_int(1, 3));
        std::vector<std::int32_t> frag{name};
        for (int j = 0; j < extra; ++j) frag.push_back(pool[rng.below(pool.size())]);
        rng.shuffle(frag);
        if (std::find(t.fragments.begin(), t.fragments.end(), frag) == t.fragments.end())
            t.fragments.push_back(std::move(frag));
    }
    return t;
}

void save_dataset(const Dataset& d, const std::string& path) {
    JsonWriter w;
    w.obj_open();
    w.key("config").obj_open();
    w.kv("num_classes", d.config.num_classes)
        .kv("vocab_size", d.config.vocab_size)
        .kv("grid_h", d.config.grid_h)
        .kv("grid_w", d.config.grid_w)
        .kv("samples_per_class", d.config.samples_per_class)
        .kv("pixel_noise_sigma", d.config.pixel_noise_sigma)
        .kv("caption_len_min", d.config.caption_len_min)
        .kv("caption_len_max", d.config.caption_len_max)
        .kv("seed", static_cast<std::uint64_t>(d.config.seed));
    w.obj_close();
    w.key("images").arr_open();
    for (const auto& img : d.images) w.arr_doubles(img);
    w.arr_close();
    w.key("captions").arr_open();
    for (const auto& cap : d.captions) w.arr_ints(cap);
    w.arr_close();
    w.key("labels").arr_ints(d.labels);
    w.obj_close();
    write_text_file(path, w.text());
}

Dataset load_dataset(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    SynthConfig c;
    const auto& jc = j.at("config");
    c.num_classes = jc.at("num_classes").get<int>();
    c.vocab_size = jc.at("vocab_size").get<int>();
    c.grid_h = jc.at("grid_h").get<int>();
    c.grid_w = jc.at("grid_w").get<int>();
    c.samples_per_class = jc.at("samples_per_class").get<int>();
    c.pixel_noise_sigma = jc.at("pixel_noise_sigma").get<double>();
    c.caption_len_min = jc.at("caption_len_min").get<int>();
    c.caption_len_max = jc.at("caption_len_max").get<int>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    validate(c);

    Dataset d;
    d.config = c;
    build_pools(c, d.class_name_tokens, d.class_pools);
    Rng proto_rng = Rng::for_stage(c.seed, "synth/prototypes");
    for (int k = 0; k < c.num_classes; ++k) d.prototypes.push_back(make_prototype(c, proto_rng));

    const std::size_t pixels = static_cast<std::size_t>(c.grid_h) * c.grid_w;
    const std::size_t n = static_cast<std::size_t>(c.num_classes) * c.samples_per_class;
    d.images = j.at("images").get<std::vector<std::vector<double>>>();
    d.captions = j.at("captions").get<std::vector<std::vector<std::int32_t>>>();
    d.labels = j.at("labels").get<std::vector<std::int32_t>>();
    if (d.images.size() != n || d.captions.size() != n || d.labels.size() != n)
        throw std::runtime_error("dataset: sample count disagrees with config");
    for (const auto& img : d.images)
        if (img.size() != pixels) throw std::runtime_error("dataset: image size disagrees with grid");
    return d;
}

double nearest_prototype_accuracy(const Dataset& d, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("nearest prototype: empty index list");
    std::size_t hits = 0;
    for (std::size_t i : indices) {
        int best = 0;
        double best_dist = sq_dist(d.images[i], d.prototypes[0]);
        for (int k = 1; k < d.config.num_classes; ++k) {
            double dist = sq_dist(d.images[i], d.prototypes[static_cast<std::size_t>(k)]);
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        if (best == d.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(indices.size());
}

}  // namespace poisonlab
