#include "flag/lra/lra.hpp"

#include "flag/error.hpp"

#include <cmath>
#include <numbers>

namespace flag::lra {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

std::size_t row_argmax(const double* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

}  // namespace

void LraConfig::validate() const {
    encoder.validate();
    if (encoder.token_dim != kin::kHmdJointDim) throw UsageError("lra: joint tokens must be 9-dimensional");
    if (pose_dim == 0 || cond_dim < kin::kHmdDim) throw UsageError("lra: invalid pose or condition size");
    if (groups == 0 || categories < 2) throw UsageError("lra: latent needs G >= 1 and M >= 2");
    if (latent_hidden == 0 || head_hidden == 0) throw UsageError("lra: hidden widths must be positive");
    for (auto t : tracked) {
        if (t >= encoder.tokens) throw UsageError("lra: tracked joint index out of range");
    }
}

LraModel::LraModel(LraConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      cond_mean_(nn::make_vector("lra.cond_mean", config_.cond_dim, 0.0)),
      cond_std_(nn::make_vector("lra.cond_std", config_.cond_dim, 1.0)) {
    config_.validate();
    const std::size_t e = config_.encoder.embed, c = config_.cond_dim, gm = config_.groups * config_.categories;
    using nn::Act;
    encoder_ = Encoder("lra.encoder", config_.encoder);
    joint_head_ = nn::Linear("lra.joint_head", e, config_.encoder.token_dim);
    latent_net_ = nn::Mlp("lra.to_latent", {3 * e + c, config_.latent_hidden, gm}, {Act::leaky_relu, Act::none});
    pose_net_ = nn::Mlp("lra.to_pose", {gm + c, config_.latent_hidden, config_.pose_dim}, {Act::leaky_relu, Act::none});
    mu_net_ = nn::Mlp("lra.mu", {gm + c, config_.head_hidden, config_.pose_dim}, {Act::leaky_relu, Act::none});
    sigma_net_ = nn::Mlp("lra.sigma", {gm + c, config_.head_hidden, config_.pose_dim}, {Act::leaky_relu, Act::none});

    std::mt19937_64 rng(seed);
    encoder_.init(rng);
    joint_head_.init_uniform(rng);
    latent_net_.init_uniform(rng);
    pose_net_.init_uniform(rng);
    mu_net_.init_uniform(rng);
    sigma_net_.init_uniform(rng);
}

Var LraModel::normalized_condition(Tape& tape, const Var& cond) const {
    if (cond.shape().size() != 2 || cond.dim(1) != config_.cond_dim) {
        throw ShapeError("lra: condition must have shape [B, " + std::to_string(config_.cond_dim) + "]");
    }
    return ad::div(ad::sub(cond, tape.parameter(cond_mean_, false)), tape.parameter(cond_std_, false));
}

Var LraModel::encode(Tape& tape, const Var& tokens, const Array& mask, const EncodeOptions& options) const {
    for (std::size_t b = 0; b < mask.dim(0); ++b) {
        if (mask.at(b, config_.tracked[0]) != 0.0) throw UsageError("lra: the head token is never masked");
    }
    return encoder_(tape, tokens, mask, options);
}

Var LraModel::predict_joints(Tape& tape, const Var& features, bool trainable) const {
    return joint_head_(tape, features, trainable);
}

Var LraModel::pool(const Var& features) const {
    const std::size_t e = config_.encoder.embed;
    const Var picked = ad::gather(features, 1, {config_.tracked.begin(), config_.tracked.end()});
    return ad::reshape(picked, {features.dim(0), 3 * e});
}

Var LraModel::to_latent(Tape& tape, const Var& pooled, const Var& cond, bool trainable) const {
    const Var in = ad::concat({pooled, normalized_condition(tape, cond)}, -1);
    return ad::reshape(latent_net_(tape, in, trainable), {pooled.dim(0), config_.groups, config_.categories});
}

Var LraModel::to_pose_space(Tape& tape, const Var& code, const Var& cond, bool trainable) const {
    const std::size_t gm = config_.groups * config_.categories;
    if (code.shape().size() != 3 || code.dim(1) != config_.groups || code.dim(2) != config_.categories) {
        throw ShapeError("lra: code must have shape [B, G, M]");
    }
    const Var in = ad::concat({ad::reshape(code, {code.dim(0), gm}), normalized_condition(tape, cond)}, -1);
    return pose_net_(tape, in, trainable);
}

LatentRegion LraModel::latent_region(Tape& tape, const Var& logits, const Var& cond, bool trainable) const {
    const std::size_t gm = config_.groups * config_.categories;
    const Var probs = ad::reshape(ad::softmax(logits, -1), {logits.dim(0), gm});
    const Var in = ad::concat({probs, normalized_condition(tape, cond)}, -1);
    return {mu_net_(tape, in, trainable), ad::clamp_min(ad::softplus(sigma_net_(tape, in, trainable)), 1e-8)};
}

LraForward LraModel::forward(Tape& tape, const Var& tokens, const Array& mask, const Var& cond, CodeMode mode,
                             double tau, std::mt19937_64& rng, bool trainable) const {
    LraForward out;
    EncodeOptions opts;
    opts.trainable = trainable;
    out.features = encode(tape, tokens, mask, opts);
    out.joints = predict_joints(tape, out.features, trainable);
    out.logits = to_latent(tape, pool(out.features), cond, trainable);
    out.code = gumbel_softmax(tape, out.logits, tau, rng, mode == CodeMode::hard);
    out.pose = to_pose_space(tape, out.code, cond, trainable);
    out.region = latent_region(tape, out.logits, cond, trainable);
    return out;
}

std::pair<Array, Array> LraModel::infer(const Array& cond, const Array* hidden_hands) const {
    const std::size_t batch = cond.dim(0);
    Tape tape;
    const Var c = tape.constant(cond);
    const Var tokens = tape.constant(tokens_from_condition(cond, config_.encoder.tokens, config_.tracked));
    const Array mask = inference_mask(batch, config_.encoder.tokens, config_.tracked, hidden_hands);
    const Var features = encode(tape, tokens, mask, {});
    const auto region = latent_region(tape, to_latent(tape, pool(features), c, false), c, false);
    return {region.mu.value(), region.sigma.value()};
}

void LraModel::set_normalization(const Array& cond_mean, const Array& cond_std) {
    if (cond_mean.size() != config_.cond_dim || cond_std.size() != config_.cond_dim) {
        throw ShapeError("lra: normalization statistics have the wrong length");
    }
    for (std::size_t i = 0; i < config_.cond_dim; ++i) {
        if (!std::isfinite(cond_mean[i]) || !std::isfinite(cond_std[i]) || cond_std[i] <= 0.0) {
            throw DomainError("lra: normalization statistics must be finite with positive scale");
        }
    }
    cond_mean_.value = Array({config_.cond_dim}, cond_mean.vec());
    cond_std_.value = Array({config_.cond_dim}, cond_std.vec());
}

std::vector<Parameter*> LraModel::parameters() {
    std::vector<Parameter*> out;
    encoder_.collect(out);
    joint_head_.collect(out);
    latent_net_.collect(out);
    pose_net_.collect(out);
    mu_net_.collect(out);
    sigma_net_.collect(out);
    return out;
}

std::vector<Parameter*> LraModel::buffers() { return {&cond_mean_, &cond_std_}; }

std::vector<double> joint_tokens(const kin::Skeleton& skel, const kin::Pose& pose, const kin::ShapeParams& shape) {
    const auto st = kin::forward_kinematics(skel, pose, shape);
    std::vector<double> out(skel.joint_count() * kin::kHmdJointDim);
    for (std::size_t j = 0; j < skel.joint_count(); ++j) {
        const auto r6 = kin::rot6d_encode(st.rotation[j]);
        double* dst = out.data() + j * kin::kHmdJointDim;
        for (int i = 0; i < 6; ++i) dst[i] = r6[i];
        for (int i = 0; i < 3; ++i) dst[6 + i] = st.position[j][i];
    }
    return out;
}

Array tokens_from_condition(const Array& cond, std::size_t joints, const std::array<std::size_t, 3>& tracked) {
    if (cond.rank() != 2 || cond.dim(1) < kin::kHmdDim) throw ShapeError("tokens_from_condition: bad condition shape");
    const std::size_t batch = cond.dim(0), d = kin::kHmdJointDim;
    Array out({batch, joints, d}, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < d; ++i) out[(b * joints + tracked[k]) * d + i] = cond.at(b, k * d + i);
    return out;
}

Array inference_mask(std::size_t batch, std::size_t joints, const std::array<std::size_t, 3>& tracked,
                     const Array* hidden_hands) {
    if (hidden_hands && hidden_hands->shape() != ad::Shape{batch, 2}) {
        throw ShapeError("inference_mask: hidden hand flags must have shape [B, 2]");
    }
    Array mask({batch, joints}, 1.0);
    for (std::size_t b = 0; b < batch; ++b) {
        mask.at(b, tracked[0]) = 0.0;
        for (std::size_t h = 0; h < 2; ++h) mask.at(b, tracked[1 + h]) = hidden_hands ? hidden_hands->at(b, h) : 0.0;
    }
    return mask;
}

Var gumbel_softmax(Tape& tape, const Var& logits, double tau, std::mt19937_64& rng, bool hard) {
    if (!(tau > 0.0)) throw DomainError("gumbel_softmax: temperature must be positive");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Array noise(logits.shape(), 0.0);
    for (double& g : noise.data()) {
        double v = u(rng);
        while (v <= 0.0) v = u(rng);
        g = -std::log(-std::log(v));
    }
    const Var soft = ad::softmax(ad::scale(ad::add(logits, tape.constant(std::move(noise))), 1.0 / tau), -1);
    if (!hard) return soft;

    const std::size_t m = logits.dim(-1);
    Array onehot(soft.shape(), 0.0);
    const double* s = soft.value().ptr();
    for (std::size_t r = 0, rows = soft.value().size() / m; r < rows; ++r) onehot[r * m + row_argmax(s + r * m, m)] = 1.0;
    const std::size_t soft_id = soft.id();
    return tape.record(
        std::move(onehot), {soft},
        [soft_id](Tape& t, const Array& g, const Array&) { accumulate(t.grad_buffer(soft_id), g); }, "straight_through");
}

Array gumbel_softmax_sample(const Array& logits, double tau, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tape tape;
    return gumbel_softmax(tape, tape.constant(logits), tau, rng, false).value();
}

Var mjp_loss(Tape& tape, const Var& predicted, const Var& target, const Array& mask) {
    const auto& s = predicted.shape();
    if (s != target.shape() || s.size() != 3 || mask.shape() != ad::Shape{s[0], s[1]}) {
        throw ShapeError("mjp_loss: predictions, targets and mask disagree");
    }
    Array weights(s, 0.0);
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t j = 0; j < s[1]; ++j)
            if (mask.at(b, j) != 0.0)
                for (std::size_t i = 0; i < s[2]; ++i) weights[(b * s[1] + j) * s[2] + i] = 1.0;
    const Var err = ad::sum_all(ad::mul(ad::square(ad::sub(predicted, target)), tape.constant(std::move(weights))));
    return ad::scale(err, 1.0 / static_cast<double>(s[0]));
}

Var rec_loss(const Var& reconstructed, const Var& target) {
    if (reconstructed.shape() != target.shape()) throw ShapeError("rec_loss: shape mismatch");
    return ad::scale(ad::sum_all(ad::square(ad::sub(reconstructed, target))), 1.0 / static_cast<double>(target.dim(0)));
}

Var lra_loss(const LatentRegion& region, const Var& z_star, const LraWeights& w) {
    const auto& mu = region.mu;
    const auto& sigma = region.sigma;
    if (mu.shape() != z_star.shape() || sigma.shape() != z_star.shape() || z_star.shape().size() != 2) {
        throw ShapeError("lra_loss: region and oracle shapes disagree");
    }
    const double batch = static_cast<double>(z_star.dim(0));
    const double d = static_cast<double>(z_star.dim(1));
    const Var diff = ad::sub(z_star, mu);
    const Var log_sigma = ad::log(sigma);
    // -log N(z*; mu, sigma) summed over the batch
    const Var nll = ad::add_scalar(ad::add(ad::scale(ad::sum_all(ad::square(ad::div(diff, sigma))), 0.5), ad::sum_all(log_sigma)),
                                   0.5 * d * batch * kLog2Pi);
    const Var rec = ad::sum_all(ad::square(diff));
    const Var reg = ad::add_scalar(ad::sub(ad::sum_all(log_sigma), ad::sum_all(sigma)), d * batch);
    const Var total = ad::sub(ad::add(ad::scale(nll, w.nll), ad::scale(rec, w.rec)), ad::scale(reg, w.reg));
    return ad::scale(total, 1.0 / batch);
}

Array gaussian_log_density(const Array& z, const Array& mu, const Array& sigma) {
    if (z.shape() != mu.shape() || z.shape() != sigma.shape() || z.rank() != 2) {
        throw ShapeError("gaussian_log_density: shape mismatch");
    }
    const std::size_t batch = z.dim(0), d = z.dim(1);
    Array out({batch}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        double acc = -0.5 * static_cast<double>(d) * kLog2Pi;
        for (std::size_t i = 0; i < d; ++i) {
            const double s = sigma.at(b, i);
            if (!(s > 0.0)) throw DomainError("gaussian_log_density: sigma must be positive");
            const double r = (z.at(b, i) - mu.at(b, i)) / s;
            acc -= 0.5 * r * r + std::log(s);
        }
        out[b] = acc;
    }
    return out;
}

std::vector<std::size_t> mask_schedule(const kin::Skeleton& skel, std::size_t epoch, std::size_t total_epochs) {
    if (total_epochs == 0 || epoch >= total_epochs) throw UsageError("mask_schedule: epoch out of range");
    const auto& groups = skel.curriculum();
    const std::size_t phases = groups.size() + 1;
    const std::size_t phase = std::min(phases - 1, phases * epoch / total_epochs);
    std::vector<std::size_t> joints;
    for (std::size_t g = 0; g < phase; ++g) joints.insert(joints.end(), groups[g].joints.begin(), groups[g].joints.end());
    return joints;
}

Array sample_region(std::span<const double> mu, std::span<const double> sigma, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw UsageError("sample_region: n must be at least 1");
    if (mu.size() != sigma.size()) throw ShapeError("sample_region: mu and sigma lengths differ");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    const std::size_t d = mu.size();
    Array out({n, d}, 0.0);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < d; ++i) out[k * d + i] = mu[i] + std::max(sigma[i], 1e-8) * g(rng);
    return out;
}

}  // namespace flag::lra
