#pragma once

#include "flag/nn/layers.hpp"

#include <optional>

namespace flag::lra {

using ad::Array;
using ad::Parameter;
using ad::Tape;
using ad::Var;

struct EncoderConfig {
    std::size_t tokens = 22;
    std::size_t token_dim = 9;
    std::size_t embed = 64;
    std::size_t layers = 3;
    std::size_t heads = 4;
    std::size_t feedforward = 128;

    void validate() const;
};

/// Sinusoidal positional encodings, shape [tokens, embed].
Array sinusoidal_encoding(std::size_t tokens, std::size_t embed);

/// Layer normalization over the last axis with learned gain and bias.
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, std::size_t dim);
    Var operator()(Tape& tape, const Var& x, bool trainable) const;
    void collect(std::vector<Parameter*>& out);

private:
    Parameter gain_, bias_;
};

struct EncoderLayer {
    LayerNorm norm1, norm2;
    nn::Linear query, key, value, output;
    nn::Linear ff1, ff2;
};

/// Per-call switches for the encoder.
struct EncodeOptions {
    bool trainable = false;
    /// Joints no token may attend to (diagnostic hard mask), length = tokens.
    std::optional<std::vector<bool>> key_mask;
    /// Receives one [B, tokens, tokens] attention matrix per (layer, head).
    std::vector<Array>* attention = nullptr;
    /// Replaces the sinusoidal table, shape [tokens, embed].
    const Array* positional = nullptr;
};

/// Pre-norm transformer encoder over joint tokens. Each token is embedded by
/// Linear + LeakyReLU; masked tokens are replaced by a learned mask embedding;
/// positional encodings are added before the first layer.
class Encoder {
public:
    Encoder() = default;
    Encoder(const std::string& name, EncoderConfig config);

    void init(std::mt19937_64& rng);

    /// tokens: [B, T, token_dim]; mask: [B, T] with 1 marking masked tokens.
    /// Returns features [B, T, embed]. Throws UsageError when a sample has
    /// every token masked.
    Var operator()(Tape& tape, const Var& tokens, const Array& mask, const EncodeOptions& options) const;

    const EncoderConfig& config() const { return config_; }
    nn::Linear& embedding() { return embed_; }
    Parameter& mask_token() { return mask_token_; }
    EncoderLayer& layer(std::size_t i) { return layers_.at(i); }
    void collect(std::vector<Parameter*>& out);

private:
    Var attention(Tape& tape, const EncoderLayer& layer, const Var& x, const EncodeOptions& options) const;

    EncoderConfig config_;
    nn::Linear embed_;
    Parameter mask_token_;
    Array positional_;
    std::vector<EncoderLayer> layers_;
    LayerNorm final_norm_;
};

}  // namespace flag::lra
