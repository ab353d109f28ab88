#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convctx/data.hpp"
#include "convctx/layers.hpp"

namespace convctx {

enum class PositionalMode { conv, sinusoidal, both };
enum class EncAttentionMode { per_block, single };

std::string to_string(PositionalMode m);
std::string to_string(EncAttentionMode m);
PositionalMode positional_mode_from_string(const std::string& s);
EncAttentionMode enc_attention_mode_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

struct ModelConfig {
    int input_dim = 80;  // feature width entering the encoder
    std::vector<ConvBlockConfig> encoder_conv_blocks;
    ConvBlockConfig decoder_conv;
    int enc_layers = 0;
    int dec_layers = 0;
    int d_model = 0;
    int heads = 1;
    int ffn_width = 0;
    int vocab_size = 0;
    int emb_dim = 0;
    double dropout = 0.0;
    PositionalMode positional_mode = PositionalMode::conv;
    EncAttentionMode enc_attention_mode = EncAttentionMode::per_block;

    void validate() const;

    bool uses_decoder_conv() const {
        return positional_mode == PositionalMode::conv ||
               positional_mode == PositionalMode::both;
    }
    bool uses_sinusoidal() const { return positional_mode != PositionalMode::conv; }

    // Product of the encoder pooling extents (frames per output frame).
    int time_stride() const;
    // Frame count surviving the conv front-end for an input of t frames.
    int encoded_length(int t) const;
    // Frequency extent after pooling, and the flattened width feeding the
    // encoder projection (channels x surviving frequency).
    int freq_out() const;
    int flatten_dim() const;

    bool operator==(const ModelConfig&) const = default;
};

// canonical, best, toy.
ModelConfig preset(const std::string& name);

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    std::string component;
};

// The authoritative parameter ledger: name, shape, and component of every
// parameter in registration order, derived from the config alone (no
// allocation). Model construction follows this ledger exactly.
std::vector<ParamInfo> describe_params(const ModelConfig& cfg);

struct ParamCount {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> by_component;
};

ParamCount count_params(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Batch
// ---------------------------------------------------------------------------

struct Batch {
    Tensor features;                        // [B, T, F], zero padded
    std::vector<int> feature_lengths;       // valid frames per sequence
    std::vector<std::vector<int>> targets;  // BOS ... EOS, padded with pad id
    std::vector<int> target_lengths;        // valid tokens incl. BOS and EOS
    std::vector<std::string> ids;

    int size() const { return static_cast<int>(feature_lengths.size()); }
};

Batch make_batch(std::span<const Utterance> utts);
std::vector<Batch> make_batches(const Dataset& data, std::span<const int> order,
                                int batch_size);

// Mean token-level negative log-likelihood. logits: [B, U, V]; position
// (b, u) contributes -log softmax(logits[b,u])[gold[b][u]] iff
// u < gold_lengths[b]. All positions padded is a contract violation.
Tensor sequence_nll(const Tensor& logits, const std::vector<std::vector<int>>& gold,
                    const std::vector<int>& gold_lengths);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct EncodedBatch {
    Tensor memory;             // [B, T', d_model], zero padded
    std::vector<int> lengths;  // valid memory frames per sequence
    // The unpadded encodings the padded block was assembled from; these carry
    // the autograd history and feed the decoder.
    std::vector<Tensor> per_utterance;
};

// Full encoder-decoder: conv front-ends, transformer stacks, per-block (or
// shared) encoder attention, and the output projection.
class Model {
public:
    Model(const ModelConfig& cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    // Conv front-end + flatten + projection (+ sinusoidal table when the
    // positional mode calls for one): [T, F] -> [T', d_model].
    Tensor encoder_frontend(const Tensor& feats) const;

    // Front-end plus the full-context transformer stack: [T, F] -> [T', d_model].
    Tensor encode_utterance(const Tensor& feats, double dropout_rate = 0.0,
                            Rng* rng = nullptr) const;

    // Teacher-forced decoder logits for one prefix (BOS first): [U, vocab].
    Tensor decoder_logits(const Tensor& memory, const std::vector<int>& prefix,
                          double dropout_rate = 0.0, Rng* rng = nullptr) const;

    // Batched surfaces. Each sequence is processed at its true length, so
    // padding can never leak into valid positions.
    EncodedBatch encode(const Batch& batch, double dropout_rate = 0.0,
                        Rng* rng = nullptr) const;
    Tensor decode_step_logits(const EncodedBatch& enc,
                              const std::vector<std::vector<int>>& prefixes,
                              double dropout_rate = 0.0, Rng* rng = nullptr) const;

    // Teacher-forced mean NLL for a batch.
    Tensor loss(const Batch& batch, double dropout_rate = 0.0, Rng* rng = nullptr) const;

    std::vector<NamedParam>& params() { return params_; }
    const std::vector<NamedParam>& params() const { return params_; }
    void zero_grads();

private:
    struct DecoderLayer {
        MultiHeadAttention self_attn;
        LayerNorm norm1;
        MultiHeadAttention cross_attn;  // empty in single mode
        LayerNorm norm2;
        FeedForward ffn;
        LayerNorm norm3;
    };

    Tensor decoder_positional(const std::vector<int>& prefix) const;
    Tensor utterance_features(const Batch& batch, int b) const;

    ModelConfig cfg_;
    std::vector<EncoderConvBlock> enc_conv_;
    Linear enc_proj_;
    std::vector<TransformerBlock> enc_blocks_;
    Embedding embedding_;
    DecoderConvBlock dec_conv_;  // modes conv and both
    Linear dec_bridge_;          // mode sinusoidal
    MultiHeadAttention cross_shared_;  // mode single
    std::vector<DecoderLayer> dec_layers_;
    Linear output_;
    std::vector<NamedParam> params_;
};

}  // namespace convctx
