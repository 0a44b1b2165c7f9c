#pragma once

#include "flag/kinematics/skeleton.hpp"
#include "flag/lra/encoder.hpp"

#include <array>
#include <random>

namespace flag::lra {

struct LraConfig {
    EncoderConfig encoder;
    std::size_t pose_dim = 66;
    std::size_t cond_dim = kin::kConditionDim;
    std::size_t groups = 16;      // G
    std::size_t categories = 32;  // M
    std::size_t latent_hidden = 256;
    std::size_t head_hidden = 256;
    /// Joint indices of head, left hand, right hand.
    std::array<std::size_t, 3> tracked{15, 20, 21};

    void validate() const;
};

struct LatentRegion {
    Var mu;     // [B, D]
    Var sigma;  // [B, D], strictly positive
};

enum class CodeMode {
    relaxed,   // Gumbel-Softmax sample at temperature tau
    hard,      // straight-through one-hot of the perturbed argmax
};

struct LraForward {
    Var features;  // [B, J, E]
    Var joints;    // masked-joint predictions for every joint, [B, J, 9]
    Var logits;    // [B, G, M]
    Var code;      // [B, G, M]
    Var pose;      // ToPoseSpace output, [B, D]
    LatentRegion region;
};

/// Transformer latent-region approximator.
///
/// Conditions are standardized with stored statistics before they reach the
/// latent, pose-space and region networks.
class LraModel {
public:
    LraModel(LraConfig config, std::uint64_t seed);

    const LraConfig& config() const { return config_; }

    Var encode(Tape& tape, const Var& tokens, const Array& mask, const EncodeOptions& options) const;
    Var predict_joints(Tape& tape, const Var& features, bool trainable) const;
    /// Concatenated features of head, left hand, right hand: [B, 3E].
    Var pool(const Var& features) const;
    Var to_latent(Tape& tape, const Var& pooled, const Var& cond, bool trainable) const;
    Var to_pose_space(Tape& tape, const Var& code, const Var& cond, bool trainable) const;
    LatentRegion latent_region(Tape& tape, const Var& logits, const Var& cond, bool trainable) const;

    /// Full pass. `rng` supplies the Gumbel noise for the code.
    LraForward forward(Tape& tape, const Var& tokens, const Array& mask, const Var& cond, CodeMode mode, double tau,
                       std::mt19937_64& rng, bool trainable) const;

    /// Inference from the HMD condition alone: all non-tracked joints masked,
    /// plus any hands flagged in `hidden_hands` ([B, 2], 1 = hidden).
    /// Returns (mu, sigma) as [B, D] arrays.
    std::pair<Array, Array> infer(const Array& cond, const Array* hidden_hands = nullptr) const;

    void set_normalization(const Array& cond_mean, const Array& cond_std);

    Encoder& encoder() { return encoder_; }
    nn::Linear& joint_head() { return joint_head_; }
    nn::Mlp& latent_net() { return latent_net_; }
    nn::Mlp& pose_net() { return pose_net_; }
    nn::Mlp& mu_net() { return mu_net_; }
    nn::Mlp& sigma_net() { return sigma_net_; }

    std::vector<Parameter*> parameters();
    std::vector<Parameter*> buffers();

private:
    Var normalized_condition(Tape& tape, const Var& cond) const;

    LraConfig config_;
    Encoder encoder_;
    nn::Linear joint_head_;
    nn::Mlp latent_net_, pose_net_, mu_net_, sigma_net_;
    Parameter cond_mean_, cond_std_;
};

/// Per-joint 9-vectors (6-D global rotation, global position): [J * 9].
std::vector<double> joint_tokens(const kin::Skeleton& skel, const kin::Pose& pose, const kin::ShapeParams& shape);

/// Tokens known at inference: HMD entries at tracked joints, zeros elsewhere.
/// cond: [B, >= 27]; returns [B, J, 9].
Array tokens_from_condition(const Array& cond, std::size_t joints, const std::array<std::size_t, 3>& tracked);

/// Mask [B, J] hiding every non-tracked joint, and optionally hands.
Array inference_mask(std::size_t batch, std::size_t joints, const std::array<std::size_t, 3>& tracked,
                     const Array* hidden_hands = nullptr);

/// Gumbel-Softmax over the last axis. Throws DomainError for tau <= 0.
/// With `hard`, the forward value is the one-hot argmax and gradients follow
/// the relaxed sample.
Var gumbel_softmax(Tape& tape, const Var& logits, double tau, std::mt19937_64& rng, bool hard);
Array gumbel_softmax_sample(const Array& logits, double tau, std::uint64_t seed);

/// Sum over masked joints of squared 9-vector errors, averaged over the batch.
/// mask: [B, J] with 1 marking masked joints.
Var mjp_loss(Tape& tape, const Var& predicted, const Var& target, const Array& mask);
/// Batch mean of the squared reconstruction error.
Var rec_loss(const Var& reconstructed, const Var& target);

struct LraWeights {
    double nll = 1.0;
    double rec = 0.5;
    double reg = 0.25;
};

/// Batch mean of
///   -a_nll log N(z*; mu, diag(sigma^2)) + a_rec ||mu - z*||^2 - a_reg sum(1 + ln sigma - sigma).
Var lra_loss(const LatentRegion& region, const Var& z_star, const LraWeights& weights = {});

/// log N(z; mu, diag(sigma^2)) per row.
Array gaussian_log_density(const Array& z, const Array& mu, const Array& sigma);

/// Joints to mask at `epoch` of `total_epochs`: the run is split into five
/// equal phases that mask nothing, legs, + spine, + arms, + pelvis.
std::vector<std::size_t> mask_schedule(const kin::Skeleton& skel, std::size_t epoch, std::size_t total_epochs);

/// n i.i.d. draws from N(mu, diag(sigma^2)); sigma floored at 1e-8.
Array sample_region(std::span<const double> mu, std::span<const double> sigma, std::size_t n, std::uint64_t seed);

}  // namespace flag::lra
