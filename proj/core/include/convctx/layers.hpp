#pragma once

#include <string>
#include <vector>

#include "convctx/tensor.hpp"

namespace convctx {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct AttentionConfig {
    int d_input = 0;  // width of the incoming representation
    int d_k = 0;      // key/query width per head
    int d_v = 0;      // value width per head
    int h = 1;        // number of heads
    int d_out = 0;    // width after the output projection

    void validate() const;
};

// One convolutional block; kernels/channels hold one entry per layer.
// pool <= 1 means no pooling (decoder blocks must not pool).
struct ConvBlockConfig {
    std::vector<int> kernels;
    std::vector<int> channels;
    int pool = 0;

    int num_layers() const { return static_cast<int>(kernels.size()); }
    void validate(bool is_decoder) const;

    bool operator==(const ConvBlockConfig&) const = default;
};

// Context size of a stack of causal convolutions: 1 + sum(kernel - 1).
int receptive_field(const std::vector<int>& kernels);

// ---------------------------------------------------------------------------
// Stateless operations
// ---------------------------------------------------------------------------

// Attention(Q, K, V) = softmax(Q K^T / sqrt(d_k) + mask sentinel) V.
// Blocked positions receive weight exactly zero; a fully blocked query row
// is a contract violation.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask);

// Same, but also exposes the post-softmax weight matrix [T_q, T_k].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask, Tensor* weights_out);

// Fixed sin/cos table, shape [T, D]; D must be even.
Tensor sinusoidal_embedding(int T, int D);

// ---------------------------------------------------------------------------
// Layers with parameters
// ---------------------------------------------------------------------------

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(int d);
    Tensor forward(const Tensor& x) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

struct Embedding {
    Tensor table;  // [vocab, dim]

    Embedding() = default;
    Embedding(int vocab, int dim, Rng& rng);
    Tensor forward(const std::vector<int>& ids) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

// h parallel projection triples, h scaled dot-product attentions, head
// outputs concatenated and projected to d_out.
struct MultiHeadAttention {
    AttentionConfig cfg;
    std::vector<Tensor> wq, bq, wk, bk, wv, bv;  // per head
    Linear out;

    MultiHeadAttention() = default;
    MultiHeadAttention(const AttentionConfig& cfg, Rng& rng);
    Tensor forward(const Tensor& x_q, const Tensor& x_kv, const Mask& mask) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

struct FeedForward {
    Linear lin1;
    Linear lin2;

    FeedForward() = default;
    FeedForward(int d, int hidden, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

// Self-attention -> dropout -> residual -> layer norm -> feed-forward ->
// dropout -> residual -> layer norm. Pass rng == nullptr for inference
// (dropout disabled).
struct TransformerBlock {
    MultiHeadAttention self_attn;
    LayerNorm norm1;
    FeedForward ffn;
    LayerNorm norm2;

    TransformerBlock() = default;
    TransformerBlock(int d_model, int heads, int ffn_width, Rng& rng);
    Tensor forward(const Tensor& x, const Mask& self_mask, double dropout_rate,
                   Rng* rng) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

// num_layers x (2-D conv, channel-wise layer norm, ReLU), then 2-D max pool
// over time and frequency.
struct EncoderConvBlock {
    ConvBlockConfig cfg;
    std::vector<Tensor> w, b;  // per layer
    std::vector<LayerNorm> norms;

    EncoderConvBlock() = default;
    EncoderConvBlock(int in_channels, const ConvBlockConfig& cfg, Rng& rng);
    // x: [C_in, T, F] -> [C_out, ceil(T/pool), ceil(F/pool)].
    Tensor forward(const Tensor& x) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

// num_layers causal 1-D convolutions, each followed by layer norm and ReLU.
// Output length equals input length; step t never reads beyond step t.
struct DecoderConvBlock {
    ConvBlockConfig cfg;
    std::vector<Tensor> w, b;
    std::vector<LayerNorm> norms;

    DecoderConvBlock() = default;
    DecoderConvBlock(int in_dim, const ConvBlockConfig& cfg, Rng& rng);
    // e: [T, D_in] -> [T, channels.back()].
    Tensor forward(const Tensor& e) const;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

}  // namespace convctx
