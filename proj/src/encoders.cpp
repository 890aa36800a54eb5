#include "poisonlab/encoders.hpp"

#include <cmath>
#include <stdexcept>

#include "poisonlab/jsonio.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/vecops.hpp"

namespace poisonlab {

namespace {

constexpr double kNormFloor = 1e-300;  // below this the embedding collapses to the zero row

void validate(const EncoderSpec& s) {
    if (s.image_h < 1 || s.image_w < 1 || s.hidden_dim < 1 || s.text_embed_dim < 1 ||
        s.embed_dim < 1 || s.vocab_size < 1)
        throw std::invalid_argument("encoder spec: all dimensions must be positive");
}

// Scratch for one image-tower forward pass, kept for the backward transform.
struct ImageCache {
    std::vector<double> a1;   // W1 x + b1
    std::vector<double> h;    // tanh(a1)
    std::vector<double> y;    // W2 h + b2
    std::vector<double> e;    // y / r
    double r = 0.0;
};

struct TextCache {
    std::vector<double> m;  // mean-pooled token embedding
    std::vector<double> y;
    std::vector<double> e;
    double r = 0.0;
};

void normalize_into(const std::vector<double>& y, std::vector<double>& e, double& r) {
    r = norm2(y);
    e.assign(y.size(), 0.0);
    if (r > kNormFloor)
        for (std::size_t i = 0; i < y.size(); ++i) e[i] = y[i] / r;
}

ImageCache image_forward(const ParamVector& p, ImageView x) {
    const auto& s = p.spec;
    const ParamLayout L = p.layout();
    const std::size_t in = static_cast<std::size_t>(s.image_h) * s.image_w;
    if (x.size() != in) throw std::invalid_argument("encode: image size mismatch");
    const std::size_t dh = static_cast<std::size_t>(s.hidden_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);

    ImageCache c;
    c.a1.resize(dh);
    matvec({p.values.data() + L.w1, dh * in}, dh, in, x, c.a1);
    for (std::size_t i = 0; i < dh; ++i) c.a1[i] += p.values[L.b1 + i];
    c.h.resize(dh);
    for (std::size_t i = 0; i < dh; ++i) c.h[i] = std::tanh(c.a1[i]);
    c.y.resize(d);
    matvec({p.values.data() + L.w2, d * dh}, d, dh, c.h, c.y);
    for (std::size_t i = 0; i < d; ++i) c.y[i] += p.values[L.b2 + i];
    normalize_into(c.y, c.e, c.r);
    return c;
}

TextCache text_forward(const ParamVector& p, CaptionView cap) {
    const auto& s = p.spec;
    const ParamLayout L = p.layout();
    if (cap.empty()) throw std::invalid_argument("encode: empty caption");
    const std::size_t de = static_cast<std::size_t>(s.text_embed_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);

    TextCache c;
    c.m.assign(de, 0.0);
    for (std::int32_t tok : cap) {
        if (tok < 0 || tok >= s.vocab_size) throw std::invalid_argument("encode: token out of vocab");
        const double* row = p.values.data() + L.emb + static_cast<std::size_t>(tok) * de;
        for (std::size_t i = 0; i < de; ++i) c.m[i] += row[i];
    }
    for (std::size_t i = 0; i < de; ++i) c.m[i] /= static_cast<double>(cap.size());
    c.y.resize(d);
    matvec({p.values.data() + L.wt, d * de}, d, de, c.m, c.y);
    for (std::size_t i = 0; i < d; ++i) c.y[i] += p.values[L.bt + i];
    normalize_into(c.y, c.e, c.r);
    return c;
}

// Cotangent through e = y / ||y||:  u_y = (u - (u . e) e) / r.
void normalize_backward(const std::vector<double>& e, double r, std::span<const double> u,
                        std::vector<double>& uy) {
    uy.assign(e.size(), 0.0);
    if (r <= kNormFloor) return;  // forward emitted the zero row; locally constant
    double ue = dot(u, e);
    for (std::size_t i = 0; i < e.size(); ++i) uy[i] = (u[i] - ue * e[i]) / r;
}

}  // namespace

ParamLayout layout_of(const EncoderSpec& s) {
    validate(s);
    const std::size_t in = static_cast<std::size_t>(s.image_h) * s.image_w;
    const std::size_t dh = static_cast<std::size_t>(s.hidden_dim);
    const std::size_t de = static_cast<std::size_t>(s.text_embed_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);
    const std::size_t V = static_cast<std::size_t>(s.vocab_size);

    ParamLayout L;
    L.w1 = 0;
    L.b1 = L.w1 + dh * in;
    L.w2 = L.b1 + dh;
    L.b2 = L.w2 + d * dh;
    L.emb = L.b2 + d;
    L.wt = L.emb + V * de;
    L.bt = L.wt + d * de;
    L.image_count = L.emb;
    L.total = L.bt + d;
    return L;
}

ParamVector init_params(const EncoderSpec& spec, std::uint64_t seed) {
    const ParamLayout L = layout_of(spec);
    ParamVector p;
    p.spec = spec;
    p.values.assign(L.total, 0.0);
    Rng rng = Rng::for_stage(seed, "init-params");

    const std::size_t in = static_cast<std::size_t>(spec.image_h) * spec.image_w;
    auto fill = [&](std::size_t off, std::size_t count, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) p.values[off + i] = rng.uniform(-bound, bound);
    };
    fill(L.w1, static_cast<std::size_t>(spec.hidden_dim) * in, in);
    fill(L.w2, static_cast<std::size_t>(spec.embed_dim) * spec.hidden_dim,
         static_cast<std::size_t>(spec.hidden_dim));
    fill(L.emb, static_cast<std::size_t>(spec.vocab_size) * spec.text_embed_dim,
         static_cast<std::size_t>(spec.text_embed_dim));
    fill(L.wt, static_cast<std::size_t>(spec.embed_dim) * spec.text_embed_dim,
         static_cast<std::size_t>(spec.text_embed_dim));
    return p;
}

std::vector<double> encode_images(const ParamVector& p, const std::vector<ImageView>& images) {
    const std::size_t d = static_cast<std::size_t>(p.spec.embed_dim);
    std::vector<double> out(images.size() * d);
    for (std::size_t i = 0; i < images.size(); ++i) {
        ImageCache c = image_forward(p, images[i]);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = c.e[j];
    }
    return out;
}

std::vector<double> encode_texts(const ParamVector& p, const std::vector<CaptionView>& captions) {
    const std::size_t d = static_cast<std::size_t>(p.spec.embed_dim);
    std::vector<double> out(captions.size() * d);
    for (std::size_t i = 0; i < captions.size(); ++i) {
        TextCache c = text_forward(p, captions[i]);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = c.e[j];
    }
    return out;
}

ImageVjpResult image_vjp(const ParamVector& p, const std::vector<ImageView>& images,
                         std::span<const double> upstream) {
    const auto& s = p.spec;
    const ParamLayout L = p.layout();
    const std::size_t in = static_cast<std::size_t>(s.image_h) * s.image_w;
    const std::size_t dh = static_cast<std::size_t>(s.hidden_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);
    if (upstream.size() != images.size() * d)
        throw std::invalid_argument("image_vjp: upstream size mismatch");

    ImageVjpResult r;
    r.grad_params.assign(L.total, 0.0);
    r.grad_inputs.assign(images.size() * in, 0.0);

    std::vector<double> uy, uh(dh), ua(dh), ux(in);
    for (std::size_t i = 0; i < images.size(); ++i) {
        ImageCache c = image_forward(p, images[i]);
        normalize_backward(c.e, c.r, upstream.subspan(i * d, d), uy);

        axpy(1.0, uy, {r.grad_params.data() + L.b2, d});
        outer_acc({r.grad_params.data() + L.w2, d * dh}, d, dh, 1.0, uy, c.h);
        matvec_t({p.values.data() + L.w2, d * dh}, d, dh, uy, uh);
        for (std::size_t j = 0; j < dh; ++j) ua[j] = uh[j] * (1.0 - c.h[j] * c.h[j]);
        axpy(1.0, ua, {r.grad_params.data() + L.b1, dh});
        outer_acc({r.grad_params.data() + L.w1, dh * in}, dh, in, 1.0, ua, images[i]);
        matvec_t({p.values.data() + L.w1, dh * in}, dh, in, ua, ux);
        for (std::size_t j = 0; j < in; ++j) r.grad_inputs[i * in + j] = ux[j];
    }
    return r;
}

TextVjpResult text_vjp(const ParamVector& p, const std::vector<CaptionView>& captions,
                       std::span<const double> upstream) {
    const auto& s = p.spec;
    const ParamLayout L = p.layout();
    const std::size_t de = static_cast<std::size_t>(s.text_embed_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);
    if (upstream.size() != captions.size() * d)
        throw std::invalid_argument("text_vjp: upstream size mismatch");

    TextVjpResult r;
    r.grad_params.assign(L.total, 0.0);

    std::vector<double> uy, um(de);
    for (std::size_t i = 0; i < captions.size(); ++i) {
        TextCache c = text_forward(p, captions[i]);
        normalize_backward(c.e, c.r, upstream.subspan(i * d, d), uy);

        axpy(1.0, uy, {r.grad_params.data() + L.bt, d});
        outer_acc({r.grad_params.data() + L.wt, d * de}, d, de, 1.0, uy, c.m);
        matvec_t({p.values.data() + L.wt, d * de}, d, de, uy, um);
        const double inv_n = 1.0 / static_cast<double>(captions[i].size());
        for (std::int32_t tok : captions[i]) {
            double* row = r.grad_params.data() + L.emb + static_cast<std::size_t>(tok) * de;
            for (std::size_t j = 0; j < de; ++j) row[j] += inv_n * um[j];
        }
    }
    return r;
}

MeanEmbeddingJacobian mean_embedding_jacobian(const ParamVector& p,
                                              const std::vector<ImageView>& images) {
    const auto& s = p.spec;
    const ParamLayout L = p.layout();
    const std::size_t in = static_cast<std::size_t>(s.image_h) * s.image_w;
    const std::size_t dh = static_cast<std::size_t>(s.hidden_dim);
    const std::size_t d = static_cast<std::size_t>(s.embed_dim);
    if (images.empty()) throw std::invalid_argument("jacobian: empty batch");

    MeanEmbeddingJacobian J;
    J.rows = d;
    J.cols = L.image_count;
    J.values.assign(d * L.image_count, 0.0);

    const double inv_b = 1.0 / static_cast<double>(images.size());
    // Per sample: de/dy = (I - e e^T)/r, then layer Jacobians chained as
    // dense blocks. M = de/dy * W2 * diag(1 - h^2) carries the chain down to
    // the first affine layer.
    std::vector<double> N(d * d), M(d * dh);
    for (const ImageView& x : images) {
        ImageCache c = image_forward(p, x);
        if (c.r <= kNormFloor) continue;  // zero row: Jacobian block is zero
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                N[a * d + b] = ((a == b ? 1.0 : 0.0) - c.e[a] * c.e[b]) / c.r;
        const double* w2 = p.values.data() + L.w2;
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t b = 0; b < d; ++b) acc += N[a * d + b] * w2[b * dh + j];
                M[a * dh + j] = acc * (1.0 - c.h[j] * c.h[j]);
            }
        for (std::size_t a = 0; a < d; ++a) {
            double* row = J.values.data() + a * L.image_count;
            for (std::size_t jh = 0; jh < dh; ++jh) {
                const double m = inv_b * M[a * dh + jh];
                double* w1_block = row + L.w1 + jh * in;
                for (std::size_t q = 0; q < in; ++q) w1_block[q] += m * x[q];
                row[L.b1 + jh] += m;
            }
            for (std::size_t b = 0; b < d; ++b) {
                const double nb = inv_b * N[a * d + b];
                double* w2_block = row + L.w2 + b * dh;
                for (std::size_t jh = 0; jh < dh; ++jh) w2_block[jh] += nb * c.h[jh];
                row[L.b2 + b] += nb;
            }
        }
    }
    return J;
}

void save_checkpoint(const ParamVector& p, const std::string& path) {
    const ParamLayout L = p.layout();
    if (p.values.size() != L.total)
        throw std::runtime_error("checkpoint: value count disagrees with layout");
    JsonWriter w;
    w.obj_open();
    w.key("layout").obj_open();
    w.kv("image_h", p.spec.image_h)
        .kv("image_w", p.spec.image_w)
        .kv("hidden_dim", p.spec.hidden_dim)
        .kv("text_embed_dim", p.spec.text_embed_dim)
        .kv("embed_dim", p.spec.embed_dim)
        .kv("vocab_size", p.spec.vocab_size)
        .kv("total", L.total);
    w.key("segments").arr_open();
    auto seg = [&](std::string_view name, std::size_t off, std::size_t size) {
        w.obj_open().kv("name", name).kv("offset", off).kv("size", size).obj_close();
    };
    const std::size_t in = static_cast<std::size_t>(p.spec.image_h) * p.spec.image_w;
    seg("w1", L.w1, static_cast<std::size_t>(p.spec.hidden_dim) * in);
    seg("b1", L.b1, static_cast<std::size_t>(p.spec.hidden_dim));
    seg("w2", L.w2, static_cast<std::size_t>(p.spec.embed_dim) * p.spec.hidden_dim);
    seg("b2", L.b2, static_cast<std::size_t>(p.spec.embed_dim));
    seg("emb", L.emb, static_cast<std::size_t>(p.spec.vocab_size) * p.spec.text_embed_dim);
    seg("wt", L.wt, static_cast<std::size_t>(p.spec.embed_dim) * p.spec.text_embed_dim);
    seg("bt", L.bt, static_cast<std::size_t>(p.spec.embed_dim));
    w.arr_close();
    w.obj_close();
    w.key("values").arr_doubles(p.values);
    w.obj_close();
    write_text_file(path, w.text());
}

ParamVector load_checkpoint(const std::string& path) {
    nlohmann::json j = parse_json_file(path);
    const auto& jl = j.at("layout");
    ParamVector p;
    p.spec.image_h = jl.at("image_h").get<int>();
    p.spec.image_w = jl.at("image_w").get<int>();
    p.spec.hidden_dim = jl.at("hidden_dim").get<int>();
    p.spec.text_embed_dim = jl.at("text_embed_dim").get<int>();
    p.spec.embed_dim = jl.at("embed_dim").get<int>();
    p.spec.vocab_size = jl.at("vocab_size").get<int>();
    const ParamLayout L = p.layout();
    if (jl.at("total").get<std::size_t>() != L.total)
        throw std::runtime_error("checkpoint: declared total disagrees with dimensions");
    p.values = j.at("values").get<std::vector<double>>();
    if (p.values.size() != L.total)
        throw std::runtime_error("checkpoint: value count disagrees with layout");
    return p;
}

}  // namespace poisonlab
