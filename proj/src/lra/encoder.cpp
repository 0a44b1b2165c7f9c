#include "flag/lra/encoder.hpp"

#include "flag/error.hpp"

#include <cmath>

namespace flag::lra {

void EncoderConfig::validate() const {
    if (tokens == 0 || token_dim == 0) throw UsageError("encoder: empty token layout");
    if (embed == 0 || heads == 0 || embed % heads != 0) throw UsageError("encoder: embed must be divisible by heads");
    if (feedforward == 0) throw UsageError("encoder: feed-forward width must be positive");
}

Array sinusoidal_encoding(std::size_t tokens, std::size_t embed) {
    Array pe({tokens, embed}, 0.0);
    for (std::size_t p = 0; p < tokens; ++p) {
        for (std::size_t i = 0; i < embed; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(embed));
            pe.at(p, i) = std::sin(static_cast<double>(p) * freq);
            if (i + 1 < embed) pe.at(p, i + 1) = std::cos(static_cast<double>(p) * freq);
        }
    }
    return pe;
}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim)
    : gain_(nn::make_vector(name + ".gain", dim, 1.0)), bias_(nn::make_vector(name + ".bias", dim, 0.0)) {}

Var LayerNorm::operator()(Tape& tape, const Var& x, bool trainable) const {
    return ad::add(ad::mul(ad::layer_norm(x), tape.parameter(gain_, trainable)), tape.parameter(bias_, trainable));
}

void LayerNorm::collect(std::vector<Parameter*>& out) {
    out.push_back(&gain_);
    out.push_back(&bias_);
}

Encoder::Encoder(const std::string& name, EncoderConfig config)
    : config_(config),
      embed_(name + ".embed", config.token_dim, config.embed),
      mask_token_(nn::make_vector(name + ".mask_token", config.embed)),
      positional_(sinusoidal_encoding(config.tokens, config.embed)),
      final_norm_(name + ".final_norm", config.embed) {
    config_.validate();
    const std::size_t e = config_.embed;
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = name + ".layer" + std::to_string(l);
        layers_.push_back({LayerNorm(p + ".norm1", e), LayerNorm(p + ".norm2", e), nn::Linear(p + ".query", e, e),
                           nn::Linear(p + ".key", e, e), nn::Linear(p + ".value", e, e),
                           nn::Linear(p + ".output", e, e), nn::Linear(p + ".ff1", e, config_.feedforward),
                           nn::Linear(p + ".ff2", config_.feedforward, e)});
    }
}

void Encoder::init(std::mt19937_64& rng) {
    embed_.init_uniform(rng);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (double& v : mask_token_.value.data()) v = u(rng);
    for (auto& l : layers_) {
        for (auto* lin : {&l.query, &l.key, &l.value, &l.output, &l.ff1, &l.ff2}) lin->init_uniform(rng);
    }
}

Var Encoder::attention(Tape& tape, const EncoderLayer& layer, const Var& x, const EncodeOptions& options) const {
    const std::size_t heads = config_.heads;
    const std::size_t dh = config_.embed / heads;
    const Var q = layer.query(tape, x, options.trainable);
    const Var k = layer.key(tape, x, options.trainable);
    const Var v = layer.value(tape, x, options.trainable);
    Var bias;
    if (options.key_mask) {
        if (options.key_mask->size() != config_.tokens) throw ShapeError("encoder: key mask length mismatch");
        Array b({config_.tokens}, 0.0);
        for (std::size_t j = 0; j < config_.tokens; ++j)
            if ((*options.key_mask)[j]) b[j] = -1e9;
        bias = tape.constant(std::move(b));
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        const Var qh = ad::slice(q, -1, h * dh, dh);
        const Var kh = ad::slice(k, -1, h * dh, dh);
        const Var vh = ad::slice(v, -1, h * dh, dh);
        Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        if (bias.valid()) scores = ad::add(scores, bias);
        const Var weights = ad::softmax(scores, -1);
        if (options.attention) options.attention->push_back(weights.value());
        outs.push_back(ad::matmul(weights, vh));
    }
    const Var merged = heads == 1 ? outs.front() : ad::concat(outs, -1);
    return layer.output(tape, merged, options.trainable);
}

Var Encoder::operator()(Tape& tape, const Var& tokens, const Array& mask, const EncodeOptions& options) const {
    const auto& s = tokens.shape();
    if (s.size() != 3 || s[1] != config_.tokens || s[2] != config_.token_dim) {
        throw ShapeError("encoder: tokens must have shape [B, " + std::to_string(config_.tokens) + ", " +
                         std::to_string(config_.token_dim) + "], got " + ad::shape_string(s));
    }
    const std::size_t batch = s[0], n = config_.tokens, e = config_.embed;
    if (mask.shape() != ad::Shape{batch, n}) throw ShapeError("encoder: mask must have shape [B, tokens]");

    Array keep({batch, n, e}, 1.0);
    Array drop({batch, n, e}, 0.0);
    bool any_masked = false;
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t masked = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const double m = mask.at(b, j);
            if (m != 0.0 && m != 1.0) throw DataError("encoder: mask entries must be 0 or 1");
            if (m == 1.0) {
                ++masked;
                any_masked = true;
                for (std::size_t i = 0; i < e; ++i) {
                    keep[(b * n + j) * e + i] = 0.0;
                    drop[(b * n + j) * e + i] = 1.0;
                }
            }
        }
        if (masked == n) throw UsageError("encoder: every token of a sample is masked");
    }

    Var h = ad::leaky_relu(embed_(tape, tokens, options.trainable), 0.01);
    if (any_masked) {
        h = ad::add(ad::mul(h, tape.constant(std::move(keep))),
                    ad::mul(tape.constant(std::move(drop)), tape.parameter(mask_token_, options.trainable)));
    }
    if (options.positional && options.positional->shape() != positional_.shape()) {
        throw ShapeError("encoder: positional table must have shape [tokens, embed]");
    }
    h = ad::add(h, tape.constant(options.positional ? *options.positional : positional_));
    for (const auto& layer : layers_) {
        h = ad::add(h, attention(tape, layer, layer.norm1(tape, h, options.trainable), options));
        const Var f = layer.ff2(tape, ad::relu(layer.ff1(tape, layer.norm2(tape, h, options.trainable), options.trainable)),
                                options.trainable);
        h = ad::add(h, f);
    }
    return final_norm_(tape, h, options.trainable);
}

void Encoder::collect(std::vector<Parameter*>& out) {
    embed_.collect(out);
    out.push_back(&mask_token_);
    for (auto& l : layers_) {
        l.norm1.collect(out);
        for (auto* lin : {&l.query, &l.key, &l.value, &l.output}) lin->collect(out);
        l.norm2.collect(out);
        l.ff1.collect(out);
        l.ff2.collect(out);
    }
    final_norm_.collect(out);
}

}  // namespace flag::lra
