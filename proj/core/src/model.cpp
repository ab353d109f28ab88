#include "convctx/model.hpp"

#include <algorithm>
#include <cmath>

namespace convctx {

std::string to_string(PositionalMode m) {
    switch (m) {
        case PositionalMode::conv: return "conv";
        case PositionalMode::sinusoidal: return "sinusoidal";
        case PositionalMode::both: return "both";
    }
    return "conv";
}

std::string to_string(EncAttentionMode m) {
    return m == EncAttentionMode::per_block ? "per_block" : "single";
}

PositionalMode positional_mode_from_string(const std::string& s) {
    if (s == "conv") return PositionalMode::conv;
    if (s == "sinusoidal") return PositionalMode::sinusoidal;
    if (s == "both") return PositionalMode::both;
    throw ConfigError("unknown positional mode '" + s + "'");
}

EncAttentionMode enc_attention_mode_from_string(const std::string& s) {
    if (s == "per_block") return EncAttentionMode::per_block;
    if (s == "single") return EncAttentionMode::single;
    throw ConfigError("unknown encoder attention mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
    if (encoder_conv_blocks.empty()) {
        throw ConfigError("model: at least one encoder conv block is required");
    }
    for (const ConvBlockConfig& b : encoder_conv_blocks) b.validate(false);
    if (d_model < 1) throw ConfigError("model: d_model must be >= 1");
    if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("model: d_model " + std::to_string(d_model) +
                          " must be divisible by heads " + std::to_string(heads));
    }
    if (ffn_width < 1) throw ConfigError("model: ffn_width must be >= 1");
    if (enc_layers < 0 || dec_layers < 0) throw ConfigError("model: negative depth");
    if (vocab_size <= kNumReservedIds) {
        throw ConfigError("model: vocab_size must exceed the " +
                          std::to_string(kNumReservedIds) + " reserved ids");
    }
    if (emb_dim < 1) throw ConfigError("model: emb_dim must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout outside [0, 1)");
    if (uses_decoder_conv()) {
        decoder_conv.validate(true);
        if (decoder_conv.channels.back() != d_model) {
            throw ConfigError("model: final decoder conv channel count " +
                              std::to_string(decoder_conv.channels.back()) +
                              " must equal d_model " + std::to_string(d_model));
        }
    }
    if (uses_sinusoidal() && d_model % 2 != 0) {
        throw ConfigError("model: sinusoidal positions require even d_model");
    }
    // Frequency must survive the pooling pyramid.
    if (freq_out() < 1) {
        throw ConfigError("model: input_dim " + std::to_string(input_dim) +
                          " collapses to zero frequency bins after pooling");
    }
}

int ModelConfig::time_stride() const {
    int s = 1;
    for (const ConvBlockConfig& b : encoder_conv_blocks) {
        if (b.pool > 1) s *= b.pool;
    }
    return s;
}

int ModelConfig::encoded_length(int t) const {
    for (const ConvBlockConfig& b : encoder_conv_blocks) {
        if (b.pool > 1) t = (t + b.pool - 1) / b.pool;
    }
    return t;
}

int ModelConfig::freq_out() const {
    int f = input_dim;
    for (const ConvBlockConfig& b : encoder_conv_blocks) {
        if (b.pool > 1) f = (f + b.pool - 1) / b.pool;
    }
    return f;
}

int ModelConfig::flatten_dim() const {
    return encoder_conv_blocks.back().channels.back() * freq_out();
}

ModelConfig preset(const std::string& name) {
    if (name == "canonical" || name == "best") {
        ModelConfig cfg;
        cfg.input_dim = 80;
        cfg.encoder_conv_blocks = {
            ConvBlockConfig{{3, 3}, {64, 64}, 2},
            ConvBlockConfig{{3, 3}, {128, 128}, 2},
        };
        cfg.enc_layers = 10;
        cfg.dec_layers = 10;
        cfg.d_model = 1024;
        cfg.heads = 16;
        cfg.ffn_width = 2048;
        cfg.vocab_size = 5000 + kNumReservedIds;
        cfg.emb_dim = 512;
        cfg.decoder_conv = ConvBlockConfig{{3, 3, 3}, {1024, 1024, 1024}, 0};
        cfg.dropout = 0.15;
        if (name == "best") {
            cfg.ffn_width = 4096;
            cfg.enc_layers = 16;
            cfg.dec_layers = 6;
        }
        return cfg;
    }
    if (name == "toy") {
        ModelConfig cfg;
        cfg.input_dim = 20;
        cfg.encoder_conv_blocks = {
            ConvBlockConfig{{3}, {8}, 2},
            ConvBlockConfig{{3}, {16}, 2},
        };
        cfg.enc_layers = 2;
        cfg.dec_layers = 2;
        cfg.d_model = 32;
        cfg.heads = 4;
        cfg.ffn_width = 64;
        cfg.vocab_size = 16;
        cfg.emb_dim = 24;
        cfg.decoder_conv = ConvBlockConfig{{3, 3}, {32, 32}, 0};
        cfg.dropout = 0.0;  // desk-scale data is too small to regularize
        return cfg;
    }
    throw ConfigError("unknown preset '" + name + "' (expected canonical, best, or toy)");
}

// ---------------------------------------------------------------------------
// Parameter ledger
// ---------------------------------------------------------------------------

namespace {

struct Ledger {
    std::vector<ParamInfo> out;
    std::string component;

    void add(const std::string& name, std::vector<int> shape) {
        out.push_back({name, std::move(shape), component});
    }
    void linear(const std::string& prefix, int in, int d_out) {
        add(prefix + ".weight", {in, d_out});
        add(prefix + ".bias", {d_out});
    }
    void norm(const std::string& prefix, int d) {
        add(prefix + ".gain", {d});
        add(prefix + ".bias", {d});
    }
    void attention(const std::string& prefix, int d_input, int d_k, int d_v, int h,
                   int d_out) {
        for (int i = 0; i < h; ++i) {
            const std::string hp = prefix + ".head" + std::to_string(i);
            add(hp + ".wq", {d_input, d_k});
            add(hp + ".bq", {d_k});
            add(hp + ".wk", {d_input, d_k});
            add(hp + ".bk", {d_k});
            add(hp + ".wv", {d_input, d_v});
            add(hp + ".bv", {d_v});
        }
        linear(prefix + ".out", h * d_v, d_out);
    }
    void transformer_block(const std::string& prefix, int d, int heads, int ffn) {
        attention(prefix + ".self_attn", d, d / heads, d / heads, heads, d);
        norm(prefix + ".norm1", d);
        linear(prefix + ".ffn.lin1", d, ffn);
        linear(prefix + ".ffn.lin2", ffn, d);
        norm(prefix + ".norm2", d);
    }
};

}  // namespace

std::vector<ParamInfo> describe_params(const ModelConfig& cfg) {
    cfg.validate();
    Ledger ledger;
    const int dk = cfg.d_model / cfg.heads;

    ledger.component = "encoder.conv";
    int ci = 1;
    for (std::size_t bi = 0; bi < cfg.encoder_conv_blocks.size(); ++bi) {
        const ConvBlockConfig& b = cfg.encoder_conv_blocks[bi];
        const std::string bp = "encoder.block" + std::to_string(bi);
        for (int l = 0; l < b.num_layers(); ++l) {
            const int co = b.channels[static_cast<std::size_t>(l)];
            const int k = b.kernels[static_cast<std::size_t>(l)];
            ledger.add(bp + ".conv" + std::to_string(l) + ".weight", {co, ci, k, k});
            ledger.add(bp + ".conv" + std::to_string(l) + ".bias", {co});
            ledger.norm(bp + ".norm" + std::to_string(l), co);
            ci = co;
        }
    }

    ledger.component = "encoder.proj";
    ledger.linear("encoder.proj", cfg.flatten_dim(), cfg.d_model);

    ledger.component = "encoder.transformer";
    for (int i = 0; i < cfg.enc_layers; ++i) {
        ledger.transformer_block("encoder.layer" + std::to_string(i), cfg.d_model,
                                 cfg.heads, cfg.ffn_width);
    }

    ledger.component = "decoder.embedding";
    ledger.add("decoder.embedding.weight", {cfg.vocab_size, cfg.emb_dim});

    ledger.component = "decoder.positional";
    if (cfg.uses_decoder_conv()) {
        int di = cfg.emb_dim;
        for (int l = 0; l < cfg.decoder_conv.num_layers(); ++l) {
            const int dout = cfg.decoder_conv.channels[static_cast<std::size_t>(l)];
            const int k = cfg.decoder_conv.kernels[static_cast<std::size_t>(l)];
            ledger.add("decoder.conv.conv" + std::to_string(l) + ".weight", {dout, di, k});
            ledger.add("decoder.conv.conv" + std::to_string(l) + ".bias", {dout});
            ledger.norm("decoder.conv.norm" + std::to_string(l), dout);
            di = dout;
        }
    } else {
        ledger.linear("decoder.bridge", cfg.emb_dim, cfg.d_model);
    }

    ledger.component = "decoder.transformer";
    if (cfg.enc_attention_mode == EncAttentionMode::single) {
        ledger.attention("decoder.cross_attn", cfg.d_model, dk, dk, cfg.heads, cfg.d_model);
    }
    for (int i = 0; i < cfg.dec_layers; ++i) {
        const std::string lp = "decoder.layer" + std::to_string(i);
        ledger.attention(lp + ".self_attn", cfg.d_model, dk, dk, cfg.heads, cfg.d_model);
        ledger.norm(lp + ".norm1", cfg.d_model);
        if (cfg.enc_attention_mode == EncAttentionMode::per_block) {
            ledger.attention(lp + ".cross_attn", cfg.d_model, dk, dk, cfg.heads, cfg.d_model);
        }
        ledger.norm(lp + ".norm2", cfg.d_model);
        ledger.linear(lp + ".ffn.lin1", cfg.d_model, cfg.ffn_width);
        ledger.linear(lp + ".ffn.lin2", cfg.ffn_width, cfg.d_model);
        ledger.norm(lp + ".norm3", cfg.d_model);
    }

    ledger.component = "output";
    ledger.linear("output", cfg.d_model, cfg.vocab_size);

    return std::move(ledger.out);
}

ParamCount count_params(const ModelConfig& cfg) {
    ParamCount pc;
    for (const ParamInfo& p : describe_params(cfg)) {
        const std::int64_t n = shape_numel(p.shape);
        pc.total += n;
        auto it = std::find_if(pc.by_component.begin(), pc.by_component.end(),
                               [&](const auto& e) { return e.first == p.component; });
        if (it == pc.by_component.end()) {
            pc.by_component.emplace_back(p.component, n);
        } else {
            it->second += n;
        }
    }
    return pc;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

Batch make_batch(std::span<const Utterance> utts) {
    if (utts.empty()) throw InputError("make_batch: empty utterance list");
    int max_t = 0, max_u = 0, feat_dim = 0;
    for (const Utterance& u : utts) {
        if (u.features.ndim() != 2 || u.features.extent(0) < 1) {
            throw InputError("make_batch: utterance '" + u.id + "' has no frames");
        }
        if (feat_dim == 0) feat_dim = u.features.extent(1);
        if (u.features.extent(1) != feat_dim) {
            throw InputError("make_batch: feature width mismatch in utterance '" + u.id + "'");
        }
        max_t = std::max(max_t, u.features.extent(0));
        max_u = std::max(max_u, static_cast<int>(u.tokens.size()) + 2);
    }
    Batch batch;
    const int B = static_cast<int>(utts.size());
    Tensor feats = Tensor::zeros({B, max_t, feat_dim});
    auto fv = feats.values();
    for (int b = 0; b < B; ++b) {
        const Utterance& u = utts[static_cast<std::size_t>(b)];
        const int t = u.features.extent(0);
        std::copy_n(u.features.values().data(), static_cast<std::int64_t>(t) * feat_dim,
                    fv.data() + static_cast<std::int64_t>(b) * max_t * feat_dim);
        std::vector<int> tgt(static_cast<std::size_t>(max_u), kPadId);
        tgt[0] = kBosId;
        std::copy(u.tokens.begin(), u.tokens.end(), tgt.begin() + 1);
        tgt[u.tokens.size() + 1] = kEosId;
        batch.targets.push_back(std::move(tgt));
        batch.target_lengths.push_back(static_cast<int>(u.tokens.size()) + 2);
        batch.feature_lengths.push_back(t);
        batch.ids.push_back(u.id);
    }
    batch.features = feats;
    return batch;
}

std::vector<Batch> make_batches(const Dataset& data, std::span<const int> order,
                                int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<Batch> batches;
    std::vector<Utterance> group;
    for (std::size_t i = 0; i < order.size(); ++i) {
        group.push_back(data[static_cast<std::size_t>(order[i])]);
        if (static_cast<int>(group.size()) == batch_size || i + 1 == order.size()) {
            batches.push_back(make_batch(group));
            group.clear();
        }
    }
    return batches;
}

Tensor sequence_nll(const Tensor& logits, const std::vector<std::vector<int>>& gold,
                    const std::vector<int>& gold_lengths) {
    if (logits.ndim() != 3) {
        throw DimensionError("sequence_nll: expected [B, U, V], got " +
                             shape_str(logits.shape()));
    }
    const int B = logits.extent(0), U = logits.extent(1), V = logits.extent(2);
    if (static_cast<int>(gold.size()) != B || static_cast<int>(gold_lengths.size()) != B) {
        throw DimensionError("sequence_nll: batch size mismatch");
    }
    std::vector<int> rows;
    std::vector<int> targets;
    for (int b = 0; b < B; ++b) {
        const int len = std::min(gold_lengths[static_cast<std::size_t>(b)], U);
        for (int u = 0; u < len; ++u) {
            rows.push_back(b * U + u);
            targets.push_back(gold[static_cast<std::size_t>(b)][static_cast<std::size_t>(u)]);
        }
    }
    if (rows.empty()) throw ContractError("sequence_nll: every position is padding");
    Tensor flat = reshape(logits, {B * U, V});
    Tensor picked = take_rows(flat, rows);
    return nll_from_logprobs(log_softmax_lastdim(picked), targets);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int dk = cfg_.d_model / cfg_.heads;
    AttentionConfig across;
    across.d_input = cfg_.d_model;
    across.d_k = dk;
    across.d_v = dk;
    across.h = cfg_.heads;
    across.d_out = cfg_.d_model;

    int ci = 1;
    for (const ConvBlockConfig& b : cfg_.encoder_conv_blocks) {
        enc_conv_.emplace_back(ci, b, rng);
        ci = b.channels.back();
    }
    enc_proj_ = Linear(cfg_.flatten_dim(), cfg_.d_model, rng);
    for (int i = 0; i < cfg_.enc_layers; ++i) {
        enc_blocks_.emplace_back(cfg_.d_model, cfg_.heads, cfg_.ffn_width, rng);
    }
    embedding_ = Embedding(cfg_.vocab_size, cfg_.emb_dim, rng);
    if (cfg_.uses_decoder_conv()) {
        dec_conv_ = DecoderConvBlock(cfg_.emb_dim, cfg_.decoder_conv, rng);
    } else {
        dec_bridge_ = Linear(cfg_.emb_dim, cfg_.d_model, rng);
    }
    if (cfg_.enc_attention_mode == EncAttentionMode::single) {
        cross_shared_ = MultiHeadAttention(across, rng);
    }
    for (int i = 0; i < cfg_.dec_layers; ++i) {
        DecoderLayer layer;
        layer.self_attn = MultiHeadAttention(across, rng);
        layer.norm1 = LayerNorm(cfg_.d_model);
        if (cfg_.enc_attention_mode == EncAttentionMode::per_block) {
            layer.cross_attn = MultiHeadAttention(across, rng);
        }
        layer.norm2 = LayerNorm(cfg_.d_model);
        layer.ffn = FeedForward(cfg_.d_model, cfg_.ffn_width, rng);
        layer.norm3 = LayerNorm(cfg_.d_model);
        dec_layers_.push_back(std::move(layer));
    }
    output_ = Linear(cfg_.d_model, cfg_.vocab_size, rng);

    // Registration order mirrors describe_params().
    for (std::size_t bi = 0; bi < enc_conv_.size(); ++bi) {
        enc_conv_[bi].collect_params("encoder.block" + std::to_string(bi), params_);
    }
    enc_proj_.collect_params("encoder.proj", params_);
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
        enc_blocks_[i].collect_params("encoder.layer" + std::to_string(i), params_);
    }
    embedding_.collect_params("decoder.embedding", params_);
    if (cfg_.uses_decoder_conv()) {
        dec_conv_.collect_params("decoder.conv", params_);
    } else {
        dec_bridge_.collect_params("decoder.bridge", params_);
    }
    if (cfg_.enc_attention_mode == EncAttentionMode::single) {
        cross_shared_.collect_params("decoder.cross_attn", params_);
    }
    for (std::size_t i = 0; i < dec_layers_.size(); ++i) {
        const std::string lp = "decoder.layer" + std::to_string(i);
        DecoderLayer& layer = dec_layers_[i];
        layer.self_attn.collect_params(lp + ".self_attn", params_);
        layer.norm1.collect_params(lp + ".norm1", params_);
        if (cfg_.enc_attention_mode == EncAttentionMode::per_block) {
            layer.cross_attn.collect_params(lp + ".cross_attn", params_);
        }
        layer.norm2.collect_params(lp + ".norm2", params_);
        layer.ffn.collect_params(lp + ".ffn", params_);
        layer.norm3.collect_params(lp + ".norm3", params_);
    }
    output_.collect_params("output", params_);
}

void Model::zero_grads() {
    for (NamedParam& p : params_) p.tensor.zero_grad();
}

Tensor Model::encoder_frontend(const Tensor& feats) const {
    if (feats.ndim() != 2) {
        throw InputError("encode: expected [T, F] features, got " + shape_str(feats.shape()));
    }
    if (feats.extent(0) < 1) throw InputError("encode: empty utterance");
    if (feats.extent(1) != cfg_.input_dim) {
        throw InputError("encode: feature width " + std::to_string(feats.extent(1)) +
                         " does not match configured input_dim " +
                         std::to_string(cfg_.input_dim));
    }
    Tensor h = reshape(feats, {1, feats.extent(0), feats.extent(1)});
    for (const EncoderConvBlock& block : enc_conv_) h = block.forward(h);
    h = enc_proj_.forward(flatten_channels(h));
    if (cfg_.uses_sinusoidal()) {
        h = add(h, sinusoidal_embedding(h.extent(0), cfg_.d_model));
    }
    return h;
}

Tensor Model::encode_utterance(const Tensor& feats, double dropout_rate, Rng* rng) const {
    Tensor h = encoder_frontend(feats);
    const Mask full = Mask::all(h.extent(0), h.extent(0));
    for (const TransformerBlock& block : enc_blocks_) {
        h = block.forward(h, full, dropout_rate, rng);
    }
    return h;
}

Tensor Model::decoder_positional(const std::vector<int>& prefix) const {
    Tensor e = embedding_.forward(prefix);
    Tensor h;
    if (cfg_.uses_decoder_conv()) {
        h = dec_conv_.forward(e);
    } else {
        h = dec_bridge_.forward(e);
    }
    if (cfg_.uses_sinusoidal()) {
        h = add(h, sinusoidal_embedding(h.extent(0), cfg_.d_model));
    }
    return h;
}

Tensor Model::decoder_logits(const Tensor& memory, const std::vector<int>& prefix,
                             double dropout_rate, Rng* rng) const {
    if (prefix.empty() || prefix[0] != kBosId) {
        throw ContractError("decoder: prefix must start with BOS");
    }
    for (int id : prefix) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw InputError("decoder: token id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(cfg_.vocab_size) + ")");
        }
    }
    if (memory.ndim() != 2 || memory.extent(1) != cfg_.d_model) {
        throw DimensionError("decoder: memory " + shape_str(memory.shape()) +
                             " vs d_model " + std::to_string(cfg_.d_model));
    }
    const int U = static_cast<int>(prefix.size());
    Tensor h = decoder_positional(prefix);
    const Mask causal = Mask::causal(U);
    const Mask cross_mask = Mask::all(U, memory.extent(0));
    for (const DecoderLayer& layer : dec_layers_) {
        Tensor a = layer.self_attn.forward(h, h, causal);
        if (rng && dropout_rate > 0.0) a = dropout(a, dropout_rate, *rng);
        h = layer.norm1.forward(add(h, a));

        const MultiHeadAttention& cross =
            cfg_.enc_attention_mode == EncAttentionMode::per_block ? layer.cross_attn
                                                                   : cross_shared_;
        Tensor c = cross.forward(h, memory, cross_mask);
        if (rng && dropout_rate > 0.0) c = dropout(c, dropout_rate, *rng);
        h = layer.norm2.forward(add(h, c));

        Tensor f = layer.ffn.forward(h);
        if (rng && dropout_rate > 0.0) f = dropout(f, dropout_rate, *rng);
        h = layer.norm3.forward(add(h, f));
    }
    return output_.forward(h);
}

Tensor Model::utterance_features(const Batch& batch, int b) const {
    const int T = batch.features.extent(1);
    const int F = batch.features.extent(2);
    const int t = batch.feature_lengths[static_cast<std::size_t>(b)];
    std::vector<double> v(static_cast<std::size_t>(t) * F);
    std::copy_n(batch.features.values().data() + static_cast<std::int64_t>(b) * T * F,
                static_cast<std::int64_t>(t) * F, v.data());
    return Tensor::from({t, F}, std::move(v));
}

EncodedBatch Model::encode(const Batch& batch, double dropout_rate, Rng* rng) const {
    EncodedBatch enc;
    std::vector<Tensor> memories;
    int max_len = 0;
    for (int b = 0; b < batch.size(); ++b) {
        Tensor m = encode_utterance(utterance_features(batch, b), dropout_rate, rng);
        enc.lengths.push_back(m.extent(0));
        max_len = std::max(max_len, m.extent(0));
        memories.push_back(std::move(m));
    }
    // Pad into one [B, T', d_model] block; padded rows are zero and carry no
    // gradient (each memory row was produced from the trimmed sequence).
    Tensor out = Tensor::zeros({batch.size(), max_len, cfg_.d_model});
    auto ov = out.values();
    for (int b = 0; b < batch.size(); ++b) {
        const Tensor& m = memories[static_cast<std::size_t>(b)];
        std::copy_n(m.values().data(), m.size(),
                    ov.data() + static_cast<std::int64_t>(b) * max_len * cfg_.d_model);
    }
    enc.memory = out;
    enc.per_utterance = std::move(memories);
    return enc;
}

Tensor Model::decode_step_logits(const EncodedBatch& enc,
                                 const std::vector<std::vector<int>>& prefixes,
                                 double dropout_rate, Rng* rng) const {
    const int B = static_cast<int>(prefixes.size());
    if (B != static_cast<int>(enc.per_utterance.size())) {
        throw DimensionError("decode_step_logits: " + std::to_string(B) +
                             " prefixes for " + std::to_string(enc.per_utterance.size()) +
                             " encoded sequences");
    }
    int max_u = 0;
    for (const auto& p : prefixes) max_u = std::max(max_u, static_cast<int>(p.size()));
    Tensor out = Tensor::zeros({B, max_u, cfg_.vocab_size});
    auto ov = out.values();
    for (int b = 0; b < B; ++b) {
        Tensor logits = decoder_logits(enc.per_utterance[static_cast<std::size_t>(b)],
                                       prefixes[static_cast<std::size_t>(b)], dropout_rate,
                                       rng);
        std::copy_n(logits.values().data(), logits.size(),
                    ov.data() + static_cast<std::int64_t>(b) * max_u * cfg_.vocab_size);
    }
    return out;
}

Tensor Model::loss(const Batch& batch, double dropout_rate, Rng* rng) const {
    std::vector<Tensor> rows;
    std::vector<int> gold;
    for (int b = 0; b < batch.size(); ++b) {
        const std::vector<int>& tgt = batch.targets[static_cast<std::size_t>(b)];
        const int len = batch.target_lengths[static_cast<std::size_t>(b)];
        if (len < 2 || tgt[0] != kBosId || tgt[static_cast<std::size_t>(len - 1)] != kEosId) {
            throw ContractError("loss: target for '" + batch.ids[static_cast<std::size_t>(b)] +
                                "' must be BOS ... EOS");
        }
        Tensor memory = encode_utterance(utterance_features(batch, b), dropout_rate, rng);
        std::vector<int> prefix(tgt.begin(), tgt.begin() + (len - 1));
        rows.push_back(decoder_logits(memory, prefix, dropout_rate, rng));
        for (int u = 1; u < len; ++u) gold.push_back(tgt[static_cast<std::size_t>(u)]);
    }
    Tensor all = rows.size() == 1 ? rows[0] : concat(rows, 0);
    return nll_from_logprobs(log_softmax_lastdim(all), gold);
}

}  // namespace convctx
