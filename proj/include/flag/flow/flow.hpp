#pragma once

#include "flag/nn/layers.hpp"

#include <cstdint>
#include <vector>

namespace flag::flow {

using ad::Array;
using ad::Parameter;
using ad::Tape;
using ad::Var;

struct FlowConfig {
    std::size_t pose_dim = 66;
    std::size_t cond_dim = 29;
    std::size_t blocks = 8;
    std::size_t hidden = 256;
    /// 1-based block indices that receive intermediate supervision.
    std::vector<std::size_t> taps = default_taps(8);

    /// Even indices 2, 4, ..., blocks - 2.
    static std::vector<std::size_t> default_taps(std::size_t blocks);
    /// w_s = s / blocks.
    double tap_weight(std::size_t tap) const { return static_cast<double>(tap) / static_cast<double>(blocks); }
    void validate() const;
};

struct CouplingResult {
    Var out;
    Var logdet;  // [B]
};

/// Conditional affine coupling:
///   y_keep = x_keep
///   y_rest = x_rest * exp(s(x_keep, c)) + t(x_keep, c)
/// The kept coordinates form one contiguous half of the vector.
class CouplingBlock {
public:
    CouplingBlock(const std::string& name, std::size_t dim, std::size_t cond_dim, std::size_t hidden, bool keep_first);

    /// Log-det of the forward map, sum of s over transformed coordinates.
    CouplingResult forward(Tape& tape, const Var& x, const Var& cond, bool trainable) const;
    /// Algebraic inverse; logdet is that of the inverse map (-sum s).
    CouplingResult inverse(Tape& tape, const Var& y, const Var& cond, bool trainable) const;

    void init(std::mt19937_64& rng);

    nn::Mlp& scale_net() { return scale_; }
    nn::Mlp& translate_net() { return translate_; }
    std::size_t keep_start() const { return keep_start_; }
    std::size_t keep_length() const { return keep_len_; }
    std::size_t rest_start() const { return rest_start_; }
    std::size_t rest_length() const { return rest_len_; }

    void collect(std::vector<Parameter*>& out);

private:
    struct Split {
        Var keep, rest;
    };
    Split split(const Var& x) const;
    Var merge(const Var& keep, const Var& rest) const;
    std::pair<Var, Var> scale_translate(Tape& tape, const Var& keep, const Var& cond, bool trainable) const;

    std::size_t keep_start_, keep_len_, rest_start_, rest_len_;
    nn::Mlp scale_;
    nn::Mlp translate_;
};

struct FlowLogProb {
    Var logp;               // [B]
    std::vector<Var> taps;  // one [B] per configured tap, in config order
};

/// Conditional RealNVP-style flow between a standard normal base space and
/// poses. Generation runs blocks 1..K in order; the inverse runs K..1.
///
/// Fixed affine normalizations wrap the coupling stack: conditions are
/// standardized before entering s/t, and poses are mapped through
/// x = pose_mean + pose_std * u. Both default to the identity.
class FlowModel {
public:
    FlowModel(FlowConfig config, std::uint64_t seed);

    const FlowConfig& config() const { return config_; }
    std::size_t block_count() const { return blocks_.size(); }
    CouplingBlock& block(std::size_t i) { return blocks_.at(i); }
    const CouplingBlock& block(std::size_t i) const { return blocks_.at(i); }

    /// Base -> pose.
    Var forward(Tape& tape, const Var& z, const Var& cond, bool trainable = false) const;
    /// Pose -> base (oracle latent z*). When `logdet` is given it receives the
    /// inverse log-det including the pose normalization term.
    Var inverse(Tape& tape, const Var& x, const Var& cond, bool trainable = false, Var* logdet = nullptr) const;
    /// Exact log-density; with `with_taps`, also each tap's sub-network density
    /// (blocks 1..s fed the pose as if block s were last).
    FlowLogProb log_prob(Tape& tape, const Var& x, const Var& cond, bool with_taps, bool trainable = false) const;
    /// mean_b -(log p + sum_s w_s log p_s); plain NLL when `with_taps` is false
    /// or no taps are configured. Throws UsageError on an empty batch.
    Var nll_loss(Tape& tape, const Var& x, const Var& cond, bool with_taps, bool trainable) const;

    Array forward(const Array& z, const Array& cond) const;
    Array inverse(const Array& x, const Array& cond) const;
    Array log_prob(const Array& x, const Array& cond) const;

    void set_normalization(const Array& cond_mean, const Array& cond_std, const Array& pose_mean,
                           const Array& pose_std);

    std::vector<Parameter*> parameters();
    std::vector<Parameter*> buffers();

private:
    Var normalized_condition(Tape& tape, const Var& cond) const;
    /// Inverse through blocks [0, upto) starting from normalized pose u.
    Var inverse_prefix(Tape& tape, const Var& u, const Var& cn, std::size_t upto, bool trainable, Var& logdet) const;
    Var base_log_density(const Var& z) const;

    FlowConfig config_;
    std::vector<CouplingBlock> blocks_;
    Parameter cond_mean_, cond_std_, pose_mean_, pose_std_;
};

/// log N(z; 0, I) summed over the last axis.
double standard_normal_log_density(std::span<const double> z);

}  // namespace flag::flow
