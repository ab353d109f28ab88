#include "convctx/layers.hpp"

#include <cmath>

namespace convctx {

namespace {

double fan_in_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

void AttentionConfig::validate() const {
    if (h < 1) throw ConfigError("attention: h must be >= 1, got " + std::to_string(h));
    if (d_k < 1 || d_v < 1) {
        throw ConfigError("attention: d_k and d_v must be >= 1, got " + std::to_string(d_k) +
                          "/" + std::to_string(d_v));
    }
    if (d_input < 1 || d_out < 1) {
        throw ConfigError("attention: d_input/d_out must be >= 1");
    }
}

void ConvBlockConfig::validate(bool is_decoder) const {
    if (kernels.empty()) throw ConfigError("conv block: needs at least one layer");
    if (kernels.size() != channels.size()) {
        throw ConfigError("conv block: " + std::to_string(kernels.size()) + " kernels vs " +
                          std::to_string(channels.size()) + " channel counts");
    }
    for (int k : kernels) {
        if (k < 1) throw ConfigError("conv block: kernel width must be >= 1");
        if (!is_decoder && k % 2 == 0) {
            throw ConfigError("conv block: encoder kernels must be odd for same-padding, got " +
                              std::to_string(k));
        }
    }
    for (int c : channels) {
        if (c < 1) throw ConfigError("conv block: channel count must be >= 1");
    }
    if (is_decoder && pool > 1) {
        throw ConfigError("conv block: decoder blocks must not pool (pool=" +
                          std::to_string(pool) + ")");
    }
}

int receptive_field(const std::vector<int>& kernels) {
    int rf = 1;
    for (int k : kernels) {
        if (k < 1) throw ConfigError("receptive_field: kernel width must be >= 1");
        rf += k - 1;
    }
    return rf;
}

// ---------------------------------------------------------------------------
// Stateless ops
// ---------------------------------------------------------------------------

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask, Tensor* weights_out) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) {
        throw DimensionError("attention: Q/K/V must be rank 2");
    }
    if (q.extent(1) != k.extent(1)) {
        throw DimensionError("attention: query width " + shape_str(q.shape()) +
                             " vs key width " + shape_str(k.shape()));
    }
    if (k.extent(0) != v.extent(0)) {
        throw DimensionError("attention: key count " + shape_str(k.shape()) +
                             " vs value count " + shape_str(v.shape()));
    }
    if (mask.rows != q.extent(0) || mask.cols != k.extent(0)) {
        throw DimensionError("attention: mask " + std::to_string(mask.rows) + "x" +
                             std::to_string(mask.cols) + " vs " +
                             std::to_string(q.extent(0)) + " queries, " +
                             std::to_string(k.extent(0)) + " keys");
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
    Tensor logits = mask_fill(scale(matmul(q, transpose(k)), inv_sqrt_dk), mask);
    Tensor weights = softmax(logits, -1);
    if (weights_out) *weights_out = weights;
    return matmul(weights, v);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask) {
    return scaled_dot_attention(q, k, v, mask, nullptr);
}

Tensor sinusoidal_embedding(int T, int D) {
    if (D % 2 != 0) {
        throw ConfigError("sinusoidal embedding: width must be even, got " + std::to_string(D));
    }
    if (T < 0) throw DimensionError("sinusoidal embedding: negative length");
    std::vector<double> v(static_cast<std::size_t>(T) * D);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < D / 2; ++i) {
            const double rate = std::pow(10000.0, -2.0 * i / D);
            v[static_cast<std::size_t>(t) * D + 2 * i] = std::sin(t * rate);
            v[static_cast<std::size_t>(t) * D + 2 * i + 1] = std::cos(t * rate);
        }
    }
    return Tensor::from({T, D}, std::move(v));
}

// ---------------------------------------------------------------------------
// Linear / LayerNorm / Embedding
// ---------------------------------------------------------------------------

Linear::Linear(int in, int out, Rng& rng) {
    const double s = fan_in_bound(in);
    w = Tensor::uniform({in, out}, rng, -s, s, true);
    b = Tensor::uniform({out}, rng, -s, s, true);
}

Tensor Linear::forward(const Tensor& x) const { return add_rowwise(matmul(x, w), b); }

void Linear::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", w});
    out.push_back({prefix + ".bias", b});
}

LayerNorm::LayerNorm(int d) {
    gain = Tensor::full({d}, 1.0, true);
    bias = Tensor::zeros({d}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

void LayerNorm::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
}

Embedding::Embedding(int vocab, int dim, Rng& rng) {
    const double s = fan_in_bound(dim);
    table = Tensor::uniform({vocab, dim}, rng, -s, s, true);
}

Tensor Embedding::forward(const std::vector<int>& ids) const {
    for (int id : ids) {
        if (id < 0 || id >= table.extent(0)) {
            throw InputError("embedding: token id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(table.extent(0)) + ")");
        }
    }
    return take_rows(table, ids);
}

void Embedding::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", table});
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(const AttentionConfig& cfg_, Rng& rng) : cfg(cfg_) {
    cfg.validate();
    const double s = fan_in_bound(cfg.d_input);
    for (int i = 0; i < cfg.h; ++i) {
        wq.push_back(Tensor::uniform({cfg.d_input, cfg.d_k}, rng, -s, s, true));
        bq.push_back(Tensor::uniform({cfg.d_k}, rng, -s, s, true));
        wk.push_back(Tensor::uniform({cfg.d_input, cfg.d_k}, rng, -s, s, true));
        bk.push_back(Tensor::uniform({cfg.d_k}, rng, -s, s, true));
        wv.push_back(Tensor::uniform({cfg.d_input, cfg.d_v}, rng, -s, s, true));
        bv.push_back(Tensor::uniform({cfg.d_v}, rng, -s, s, true));
    }
    out = Linear(cfg.h * cfg.d_v, cfg.d_out, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x_q, const Tensor& x_kv,
                                   const Mask& mask) const {
    if (x_q.ndim() != 2 || x_q.extent(1) != cfg.d_input) {
        throw DimensionError("multi-head attention: query input " + shape_str(x_q.shape()) +
                             " vs d_input " + std::to_string(cfg.d_input));
    }
    if (x_kv.ndim() != 2 || x_kv.extent(1) != cfg.d_input) {
        throw DimensionError("multi-head attention: key/value input " + shape_str(x_kv.shape()) +
                             " vs d_input " + std::to_string(cfg.d_input));
    }
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(cfg.h));
    for (int i = 0; i < cfg.h; ++i) {
        const std::size_t ui = static_cast<std::size_t>(i);
        Tensor q = add_rowwise(matmul(x_q, wq[ui]), bq[ui]);
        Tensor k = add_rowwise(matmul(x_kv, wk[ui]), bk[ui]);
        Tensor v = add_rowwise(matmul(x_kv, wv[ui]), bv[ui]);
        heads.push_back(scaled_dot_attention(q, k, v, mask));
    }
    return out.forward(concat(heads, 1));
}

void MultiHeadAttention::collect_params(const std::string& prefix,
                                        std::vector<NamedParam>& out_params) {
    for (int i = 0; i < cfg.h; ++i) {
        const std::string hp = prefix + ".head" + std::to_string(i);
        const std::size_t ui = static_cast<std::size_t>(i);
        out_params.push_back({hp + ".wq", wq[ui]});
        out_params.push_back({hp + ".bq", bq[ui]});
        out_params.push_back({hp + ".wk", wk[ui]});
        out_params.push_back({hp + ".bk", bk[ui]});
        out_params.push_back({hp + ".wv", wv[ui]});
        out_params.push_back({hp + ".bv", bv[ui]});
    }
    out.collect_params(prefix + ".out", out_params);
}

// ---------------------------------------------------------------------------
// Feed-forward and transformer block
// ---------------------------------------------------------------------------

FeedForward::FeedForward(int d, int hidden, Rng& rng)
    : lin1(d, hidden, rng), lin2(hidden, d, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
    return lin2.forward(relu(lin1.forward(x)));
}

void FeedForward::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    lin1.collect_params(prefix + ".lin1", out);
    lin2.collect_params(prefix + ".lin2", out);
}

TransformerBlock::TransformerBlock(int d_model, int heads, int ffn_width, Rng& rng) {
    if (d_model % heads != 0) {
        throw ConfigError("transformer block: d_model " + std::to_string(d_model) +
                          " not divisible by heads " + std::to_string(heads));
    }
    AttentionConfig acfg;
    acfg.d_input = d_model;
    acfg.d_k = d_model / heads;
    acfg.d_v = d_model / heads;
    acfg.h = heads;
    acfg.d_out = d_model;
    self_attn = MultiHeadAttention(acfg, rng);
    norm1 = LayerNorm(d_model);
    ffn = FeedForward(d_model, ffn_width, rng);
    norm2 = LayerNorm(d_model);
}

Tensor TransformerBlock::forward(const Tensor& x, const Mask& self_mask,
                                 double dropout_rate, Rng* rng) const {
    Tensor a = self_attn.forward(x, x, self_mask);
    if (rng && dropout_rate > 0.0) a = dropout(a, dropout_rate, *rng);
    Tensor h = norm1.forward(add(x, a));
    Tensor f = ffn.forward(h);
    if (rng && dropout_rate > 0.0) f = dropout(f, dropout_rate, *rng);
    return norm2.forward(add(h, f));
}

void TransformerBlock::collect_params(const std::string& prefix,
                                      std::vector<NamedParam>& out) {
    self_attn.collect_params(prefix + ".self_attn", out);
    norm1.collect_params(prefix + ".norm1", out);
    ffn.collect_params(prefix + ".ffn", out);
    norm2.collect_params(prefix + ".norm2", out);
}

// ---------------------------------------------------------------------------
// Convolutional blocks
// ---------------------------------------------------------------------------

EncoderConvBlock::EncoderConvBlock(int in_channels, const ConvBlockConfig& cfg_, Rng& rng)
    : cfg(cfg_) {
    cfg.validate(false);
    int ci = in_channels;
    for (int l = 0; l < cfg.num_layers(); ++l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        const int co = cfg.channels[ul];
        const int k = cfg.kernels[ul];
        const double s = fan_in_bound(ci * k * k);
        w.push_back(Tensor::uniform({co, ci, k, k}, rng, -s, s, true));
        b.push_back(Tensor::uniform({co}, rng, -s, s, true));
        norms.emplace_back(co);
        ci = co;
    }
}

Tensor EncoderConvBlock::forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t l = 0; l < w.size(); ++l) {
        h = conv2d_same(h, w[l], b[l]);
        h = layer_norm_channels(h, norms[l].gain, norms[l].bias, norms[l].eps);
        h = relu(h);
    }
    if (cfg.pool > 1) h = maxpool2d(h, cfg.pool);
    return h;
}

void EncoderConvBlock::collect_params(const std::string& prefix,
                                      std::vector<NamedParam>& out) {
    for (std::size_t l = 0; l < w.size(); ++l) {
        const std::string lp = prefix + ".conv" + std::to_string(l);
        out.push_back({lp + ".weight", w[l]});
        out.push_back({lp + ".bias", b[l]});
        norms[l].collect_params(prefix + ".norm" + std::to_string(l), out);
    }
}

DecoderConvBlock::DecoderConvBlock(int in_dim, const ConvBlockConfig& cfg_, Rng& rng)
    : cfg(cfg_) {
    cfg.validate(true);
    int di = in_dim;
    for (int l = 0; l < cfg.num_layers(); ++l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        const int dout = cfg.channels[ul];
        const int k = cfg.kernels[ul];
        const double s = fan_in_bound(di * k);
        w.push_back(Tensor::uniform({dout, di, k}, rng, -s, s, true));
        b.push_back(Tensor::uniform({dout}, rng, -s, s, true));
        norms.emplace_back(dout);
        di = dout;
    }
}

Tensor DecoderConvBlock::forward(const Tensor& e) const {
    Tensor h = e;
    for (std::size_t l = 0; l < w.size(); ++l) {
        h = relu(norms[l].forward(conv1d_causal(h, w[l], b[l])));
    }
    return h;
}

void DecoderConvBlock::collect_params(const std::string& prefix,
                                      std::vector<NamedParam>& out) {
    for (std::size_t l = 0; l < w.size(); ++l) {
        const std::string lp = prefix + ".conv" + std::to_string(l);
        out.push_back({lp + ".weight", w[l]});
        out.push_back({lp + ".bias", b[l]});
        norms[l].collect_params(prefix + ".norm" + std::to_string(l), out);
    }
}

}  // namespace convctx
