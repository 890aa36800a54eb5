#include "poisonlab/config.hpp"

#include <cctype>
#include <cerrno>
#include <climits>
#include <cstdlib>
#include <set>
#include <sstream>

#include "poisonlab/jsonio.hpp"

namespace poisonlab {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

long long parse_ll(const std::string& v, int line) {
    char* end = nullptr;
    errno = 0;
    long long x = std::strtoll(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty())
        throw ConfigError(line, "expected an integer, got '" + v + "'");
    return x;
}

int parse_int(const std::string& v, int line) {
    long long x = parse_ll(v, line);
    if (x < INT_MIN || x > INT_MAX) throw ConfigError(line, "integer out of range: '" + v + "'");
    return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& v, int line) {
    char* end = nullptr;
    errno = 0;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty() || v[0] == '-')
        throw ConfigError(line, "expected an unsigned integer, got '" + v + "'");
    return x;
}

double parse_dbl(const std::string& v, int line) {
    char* end = nullptr;
    errno = 0;
    double x = std::strtod(v.c_str(), &end);
    if (errno != 0 || end != v.c_str() + v.size() || v.empty())
        throw ConfigError(line, "expected a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(line, "expected true/false, got '" + v + "'");
}

OptimizerKind parse_opt(const std::string& v, int line) {
    if (v == "gd") return OptimizerKind::GradientDescent;
    if (v == "adam") return OptimizerKind::AdaptiveMoment;
    throw ConfigError(line, "unknown optimizer '" + v + "' (expected gd or adam)");
}

SelectionMode parse_mode(const std::string& v, int line) {
    if (v == "greedy") return SelectionMode::Greedy;
    if (v == "rank") return SelectionMode::Rank;
    if (v == "random") return SelectionMode::Random;
    throw ConfigError(line, "unknown selection mode '" + v + "' (expected greedy, rank or random)");
}

}  // namespace

const char* optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::GradientDescent ? "gd" : "adam";
}

const char* selection_name(SelectionMode m) {
    switch (m) {
        case SelectionMode::Greedy: return "greedy";
        case SelectionMode::Rank: return "rank";
        default: return "random";
    }
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string raw;
    std::string section;  // empty = global scope
    std::set<std::string> seen;
    int line = 0;

    auto apply = [&](const std::string& key, const std::string& val, int ln) {
        const std::string qualified = section + "/" + key;
        if (!seen.insert(qualified).second) throw ConfigError(ln, "duplicate key '" + key + "'");

        if (section.empty()) {
            if (key == "seed") { c.seed = parse_u64(val, ln); return; }
            throw ConfigError(ln, "unknown global key '" + key + "' (only 'seed' may appear before a section)");
        }
        if (section == "data") {
            auto& d = c.data;
            if (key == "num_classes") d.num_classes = parse_int(val, ln);
            else if (key == "vocab_size") d.vocab_size = parse_int(val, ln);
            else if (key == "grid_h") d.grid_h = parse_int(val, ln);
            else if (key == "grid_w") d.grid_w = parse_int(val, ln);
            else if (key == "samples_per_class") d.samples_per_class = parse_int(val, ln);
            else if (key == "pixel_noise_sigma") d.pixel_noise_sigma = parse_dbl(val, ln);
            else if (key == "caption_len_min") d.caption_len_min = parse_int(val, ln);
            else if (key == "caption_len_max") d.caption_len_max = parse_int(val, ln);
            else if (key == "train_fraction") d.train_fraction = parse_dbl(val, ln);
            else if (key == "opt_size") d.opt_size = parse_int(val, ln);
            else if (key == "ft_size") d.ft_size = parse_int(val, ln);
            else if (key == "target_class") d.target_class = parse_int(val, ln);
            else if (key == "target_fragments") d.target_fragments = parse_int(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [data]");
            return;
        }
        if (section == "model") {
            auto& m = c.model;
            if (key == "hidden_dim") m.hidden_dim = parse_int(val, ln);
            else if (key == "text_embed_dim") m.text_embed_dim = parse_int(val, ln);
            else if (key == "embed_dim") m.embed_dim = parse_int(val, ln);
            else if (key == "temperature") m.temperature = parse_dbl(val, ln);
            else if (key == "pretrain_optimizer") m.pretrain.kind = parse_opt(val, ln);
            else if (key == "pretrain_lr") m.pretrain.lr = parse_dbl(val, ln);
            else if (key == "pretrain_epochs") m.pretrain.epochs = parse_int(val, ln);
            else if (key == "pretrain_batch_size") m.pretrain.batch_size = parse_int(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [model]");
            return;
        }
        if (section == "stage1") {
            auto& s = c.stage1;
            if (key == "optimizer") s.opt.kind = parse_opt(val, ln);
            else if (key == "lr") s.opt.lr = parse_dbl(val, ln);
            else if (key == "epochs") s.opt.epochs = parse_int(val, ln);
            else if (key == "batch_size") s.opt.batch_size = parse_int(val, ln);
            else if (key == "lambda_t2t") s.lambda_t2t = parse_dbl(val, ln);
            else if (key == "lambda_mpe") s.lambda_mpe = parse_dbl(val, ln);
            else if (key == "eps_mpe") s.eps_mpe = parse_dbl(val, ln);
            else if (key == "trigger_h") s.trigger_h = parse_int(val, ln);
            else if (key == "trigger_w") s.trigger_w = parse_int(val, ln);
            else if (key == "trigger_init_min") s.trigger_init_min = parse_dbl(val, ln);
            else if (key == "binarize_on_deploy") s.binarize_on_deploy = parse_bool(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [stage1]");
            return;
        }
        if (section == "selection") {
            auto& s = c.selection;
            if (key == "mode") s.mode = parse_mode(val, ln);
            else if (key == "poison_count") s.poison_count = parse_int(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [selection]");
            return;
        }
        if (section == "stage2") {
            auto& s = c.stage2;
            if (key == "optimizer") s.opt.kind = parse_opt(val, ln);
            else if (key == "lr") s.opt.lr = parse_dbl(val, ln);
            else if (key == "epochs") s.opt.epochs = parse_int(val, ln);
            else if (key == "batch_size") s.opt.batch_size = parse_int(val, ln);
            else if (key == "controllable") s.controllable = parse_bool(val, ln);
            else if (key == "lambda_total") s.lambda_total = parse_dbl(val, ln);
            else if (key == "lambda_align") s.lambda_align = parse_dbl(val, ln);
            else if (key == "lambda_ewc") s.lambda_ewc = parse_dbl(val, ln);
            else if (key == "fisher_batches") s.fisher_batches = parse_int(val, ln);
            else if (key == "fisher_batch_size") s.fisher_batch_size = parse_int(val, ln);
            else if (key == "snapshot_every") s.snapshot_every = parse_int(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [stage2]");
            return;
        }
        if (section == "finetune") {
            auto& f = c.finetune;
            if (key == "optimizer") f.opt.kind = parse_opt(val, ln);
            else if (key == "lr") f.opt.lr = parse_dbl(val, ln);
            else if (key == "epochs") f.opt.epochs = parse_int(val, ln);
            else if (key == "batch_size") f.opt.batch_size = parse_int(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [finetune]");
            return;
        }
        if (section == "eval") {
            if (key == "deploy_binarize") c.eval.deploy_binarize = parse_bool(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [eval]");
            return;
        }
        if (section == "theory") {
            auto& t = c.theory;
            if (key == "enabled") t.enabled = parse_bool(val, ln);
            else if (key == "contraction_gamma") t.contraction_gamma = parse_dbl(val, ln);
            else if (key == "contraction_lambda") t.contraction_lambda = parse_dbl(val, ln);
            else if (key == "contraction_steps") t.contraction_steps = parse_int(val, ln);
            else if (key == "alignment_steps") t.alignment_steps = parse_int(val, ln);
            else if (key == "codir_batches") t.codir_batches = parse_int(val, ln);
            else if (key == "codir_batch_size") t.codir_batch_size = parse_int(val, ln);
            else if (key == "power_iters") t.power_iters = parse_int(val, ln);
            else if (key == "power_tol") t.power_tol = parse_dbl(val, ln);
            else if (key == "path_samples") t.path_samples = parse_int(val, ln);
            else if (key == "bound_eta") t.bound_eta = parse_dbl(val, ln);
            else if (key == "bound_batches") t.bound_batches = parse_int(val, ln);
            else if (key == "bound_batch_size") t.bound_batch_size = parse_int(val, ln);
            else if (key == "safety") t.safety = parse_dbl(val, ln);
            else if (key == "allow_adaptive") t.allow_adaptive = parse_bool(val, ln);
            else throw ConfigError(ln, "unknown key '" + key + "' in [theory]");
            return;
        }
        throw ConfigError(ln, "internal: unhandled section");  // unreachable; sections validated below
    };

    while (std::getline(in, raw)) {
        ++line;
        const std::size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(line, "unterminated section header");
            section = trim(s.substr(1, s.size() - 2));
            static const std::set<std::string> known = {"data",   "model",    "stage1", "selection",
                                                        "stage2", "finetune", "eval",   "theory"};
            if (!known.contains(section)) throw ConfigError(line, "unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(line, "expected key = value");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError(line, "empty key");
        apply(key, val, line);
    }
    return c;
}

std::string emit_config(const RunConfig& c) {
    std::ostringstream o;
    auto d = [&](double v) { return format_double(v); };
    auto b = [&](bool v) { return v ? "true" : "false"; };

    o << "seed = " << c.seed << "\n\n";
    o << "[data]\n";
    o << "num_classes = " << c.data.num_classes << "\n";
    o << "vocab_size = " << c.data.vocab_size << "\n";
    o << "grid_h = " << c.data.grid_h << "\n";
    o << "grid_w = " << c.data.grid_w << "\n";
    o << "samples_per_class = " << c.data.samples_per_class << "\n";
    o << "pixel_noise_sigma = " << d(c.data.pixel_noise_sigma) << "\n";
    o << "caption_len_min = " << c.data.caption_len_min << "\n";
    o << "caption_len_max = " << c.data.caption_len_max << "\n";
    o << "train_fraction = " << d(c.data.train_fraction) << "\n";
    o << "opt_size = " << c.data.opt_size << "\n";
    o << "ft_size = " << c.data.ft_size << "\n";
    o << "target_class = " << c.data.target_class << "\n";
    o << "target_fragments = " << c.data.target_fragments << "\n\n";

    o << "[model]\n";
    o << "hidden_dim = " << c.model.hidden_dim << "\n";
    o << "text_embed_dim = " << c.model.text_embed_dim << "\n";
    o << "embed_dim = " << c.model.embed_dim << "\n";
    o << "temperature = " << d(c.model.temperature) << "\n";
    o << "pretrain_optimizer = " << optimizer_name(c.model.pretrain.kind) << "\n";
    o << "pretrain_lr = " << d(c.model.pretrain.lr) << "\n";
    o << "pretrain_epochs = " << c.model.pretrain.epochs << "\n";
    o << "pretrain_batch_size = " << c.model.pretrain.batch_size << "\n\n";

    o << "[stage1]\n";
    o << "optimizer = " << optimizer_name(c.stage1.opt.kind) << "\n";
    o << "lr = " << d(c.stage1.opt.lr) << "\n";
    o << "epochs = " << c.stage1.opt.epochs << "\n";
    o << "batch_size = " << c.stage1.opt.batch_size << "\n";
    o << "lambda_t2t = " << d(c.stage1.lambda_t2t) << "\n";
    o << "lambda_mpe = " << d(c.stage1.lambda_mpe) << "\n";
    o << "eps_mpe = " << d(c.stage1.eps_mpe) << "\n";
    o << "trigger_h = " << c.stage1.trigger_h << "\n";
    o << "trigger_w = " << c.stage1.trigger_w << "\n";
    o << "trigger_init_min = " << d(c.stage1.trigger_init_min) << "\n";
    o << "binarize_on_deploy = " << b(c.stage1.binarize_on_deploy) << "\n\n";

    o << "[selection]\n";
    o << "mode = " << selection_name(c.selection.mode) << "\n";
    o << "poison_count = " << c.selection.poison_count << "\n\n";

    o << "[stage2]\n";
    o << "optimizer = " << optimizer_name(c.stage2.opt.kind) << "\n";
    o << "lr = " << d(c.stage2.opt.lr) << "\n";
    o << "epochs = " << c.stage2.opt.epochs << "\n";
    o << "batch_size = " << c.stage2.opt.batch_size << "\n";
    o << "controllable = " << b(c.stage2.controllable) << "\n";
    o << "lambda_total = " << d(c.stage2.lambda_total) << "\n";
    o << "lambda_align = " << d(c.stage2.lambda_align) << "\n";
    o << "lambda_ewc = " << d(c.stage2.lambda_ewc) << "\n";
    o << "fisher_batches = " << c.stage2.fisher_batches << "\n";
    o << "fisher_batch_size = " << c.stage2.fisher_batch_size << "\n";
    o << "snapshot_every = " << c.stage2.snapshot_every << "\n\n";

    o << "[finetune]\n";
    o << "optimizer = " << optimizer_name(c.finetune.opt.kind) << "\n";
    o << "lr = " << d(c.finetune.opt.lr) << "\n";
    o << "epochs = " << c.finetune.opt.epochs << "\n";
    o << "batch_size = " << c.finetune.opt.batch_size << "\n\n";

    o << "[eval]\n";
    o << "deploy_binarize = " << b(c.eval.deploy_binarize) << "\n\n";

    o << "[theory]\n";
    o << "enabled = " << b(c.theory.enabled) << "\n";
    o << "contraction_gamma = " << d(c.theory.contraction_gamma) << "\n";
    o << "contraction_lambda = " << d(c.theory.contraction_lambda) << "\n";
    o << "contraction_steps = " << c.theory.contraction_steps << "\n";
    o << "alignment_steps = " << c.theory.alignment_steps << "\n";
    o << "codir_batches = " << c.theory.codir_batches << "\n";
    o << "codir_batch_size = " << c.theory.codir_batch_size << "\n";
    o << "power_iters = " << c.theory.power_iters << "\n";
    o << "power_tol = " << d(c.theory.power_tol) << "\n";
    o << "path_samples = " << c.theory.path_samples << "\n";
    o << "bound_eta = " << d(c.theory.bound_eta) << "\n";
    o << "bound_batches = " << c.theory.bound_batches << "\n";
    o << "bound_batch_size = " << c.theory.bound_batch_size << "\n";
    o << "safety = " << d(c.theory.safety) << "\n";
    o << "allow_adaptive = " << b(c.theory.allow_adaptive) << "\n";
    return o.str();
}

RunConfig load_config(const std::string& path) { return parse_config(read_text_file(path)); }

SynthConfig RunConfig::synth_config() const {
    SynthConfig s;
    s.num_classes = data.num_classes;
    s.vocab_size = data.vocab_size;
    s.grid_h = data.grid_h;
    s.grid_w = data.grid_w;
    s.samples_per_class = data.samples_per_class;
    s.pixel_noise_sigma = data.pixel_noise_sigma;
    s.caption_len_min = data.caption_len_min;
    s.caption_len_max = data.caption_len_max;
    s.seed = seed;
    return s;
}

EncoderSpec RunConfig::encoder_spec() const {
    EncoderSpec e;
    e.image_h = data.grid_h;
    e.image_w = data.grid_w;
    e.hidden_dim = model.hidden_dim;
    e.text_embed_dim = model.text_embed_dim;
    e.embed_dim = model.embed_dim;
    e.vocab_size = data.vocab_size;
    return e;
}

LossWeights RunConfig::loss_weights() const {
    LossWeights w;
    w.temperature = model.temperature;
    w.lambda_t2t = stage1.lambda_t2t;
    w.lambda_mpe = stage1.lambda_mpe;
    w.eps_mpe = stage1.eps_mpe;
    w.lambda_total = stage2.lambda_total;
    w.lambda_align = stage2.lambda_align;
    w.lambda_ewc = stage2.lambda_ewc;
    return w;
}

}  // namespace poisonlab
