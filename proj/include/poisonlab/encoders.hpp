#pragma once

// Dual-tower encoder pair sharing one flat parameter vector.
//
//   image tower: flatten(H*W) -> dense(hidden) -> tanh -> dense(d) -> l2-normalize
//   text tower:  embedding(V x d_e) -> mean-pool -> dense(d) -> l2-normalize
//
// Gradients are analytic reverse-mode transforms written out by hand; there
// is no tape. The flat layout lets optimizer steps, EWC penalties and Hessian
// probes treat the model as a single vector.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace poisonlab {

using ImageView = std::span<const double>;
using CaptionView = std::span<const std::int32_t>;

struct EncoderSpec {
    int image_h = 16;
    int image_w = 16;
    int hidden_dim = 32;
    int text_embed_dim = 16;
    int embed_dim = 16;
    int vocab_size = 64;

    bool operator==(const EncoderSpec&) const = default;
};

// Segment offsets into the flat parameter vector. Image-tower segments come
// first so the image block is one contiguous range for Jacobians.
struct ParamLayout {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;  // image tower
    std::size_t emb = 0, wt = 0, bt = 0;         // text tower
    std::size_t image_count = 0;                  // length of the image-tower block
    std::size_t total = 0;
};

ParamLayout layout_of(const EncoderSpec& spec);

struct ParamVector {
    EncoderSpec spec;
    std::vector<double> values;

    ParamLayout layout() const { return layout_of(spec); }
};

// Weight matrices uniform in +-1/sqrt(fan_in); biases zero. The embedding
// table counts as a weight matrix with fan_in = text_embed_dim.
ParamVector init_params(const EncoderSpec& spec, std::uint64_t seed);

// Unit-row embeddings, row-major [B x d]. A zero pre-normalization vector
// (degenerate parameters) encodes to the zero row rather than NaN.
std::vector<double> encode_images(const ParamVector& p, const std::vector<ImageView>& images);
std::vector<double> encode_texts(const ParamVector& p, const std::vector<CaptionView>& captions);

// Reverse-mode products against an upstream cotangent on the embeddings
// (row-major [B x d]). grad_params spans the full layout with the untouched
// tower left at zero, so gradients from both towers add elementwise.
struct ImageVjpResult {
    std::vector<double> grad_params;
    std::vector<double> grad_inputs;  // [B x H*W]
};
ImageVjpResult image_vjp(const ParamVector& p, const std::vector<ImageView>& images,
                         std::span<const double> upstream);

struct TextVjpResult {
    std::vector<double> grad_params;
};
TextVjpResult text_vjp(const ParamVector& p, const std::vector<CaptionView>& captions,
                       std::span<const double> upstream);

// Jacobian of the batch-mean image embedding with respect to the image-tower
// block, dense row-major [d x image_count]. Assembled per sample from the
// layer Jacobians; this is an independent route from image_vjp and is cross-
// checked against it in the tests.
struct MeanEmbeddingJacobian {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;
};
MeanEmbeddingJacobian mean_embedding_jacobian(const ParamVector& p,
                                              const std::vector<ImageView>& images);

// Checkpoint files carry the layout descriptor next to the values; loading
// a file whose layout disagrees with its value count is an error, never a
// reinterpretation.
void save_checkpoint(const ParamVector& p, const std::string& path);
ParamVector load_checkpoint(const std::string& path);

}  // namespace poisonlab
