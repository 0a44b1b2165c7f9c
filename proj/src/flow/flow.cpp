#include "flag/flow/flow.hpp"

#include "flag/error.hpp"

#include <cmath>
#include <numbers>

namespace flag::flow {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void require_batch(const Var& x, std::size_t dim, const char* what) {
    if (x.shape().size() != 2 || x.dim(1) != dim) {
        throw ShapeError(std::string("flow: ") + what + " must have shape [B, " + std::to_string(dim) + "], got " +
                         ad::shape_string(x.shape()));
    }
}

}  // namespace

std::vector<std::size_t> FlowConfig::default_taps(std::size_t blocks) {
    std::vector<std::size_t> taps;
    for (std::size_t s = 2; s + 2 <= blocks; s += 2) taps.push_back(s);
    return taps;
}

void FlowConfig::validate() const {
    if (pose_dim < 2) throw UsageError("flow: pose_dim must be at least 2");
    if (cond_dim == 0) throw UsageError("flow: cond_dim must be positive");
    if (blocks == 0) throw UsageError("flow: at least one block required");
    if (hidden == 0) throw UsageError("flow: hidden width must be positive");
    for (auto s : taps) {
        if (s == 0 || s > blocks) throw UsageError("flow: tap index " + std::to_string(s) + " outside 1.." +
                                                   std::to_string(blocks));
    }
}

CouplingBlock::CouplingBlock(const std::string& name, std::size_t dim, std::size_t cond_dim, std::size_t hidden,
                             bool keep_first) {
    const std::size_t first = dim / 2;
    const std::size_t second = dim - first;
    if (keep_first) {
        keep_start_ = 0, keep_len_ = first, rest_start_ = first, rest_len_ = second;
    } else {
        keep_start_ = first, keep_len_ = second, rest_start_ = 0, rest_len_ = first;
    }
    const std::size_t in = keep_len_ + cond_dim;
    scale_ = nn::Mlp(name + ".s", {in, hidden, hidden, rest_len_}, {nn::Act::tanh, nn::Act::tanh, nn::Act::tanh});
    translate_ = nn::Mlp(name + ".t", {in, hidden, hidden, rest_len_}, {nn::Act::relu, nn::Act::relu, nn::Act::none});
}

void CouplingBlock::init(std::mt19937_64& rng) {
    scale_.init_uniform(rng);
    translate_.init_uniform(rng);
    scale_.zero_last();
    translate_.zero_last();
}

CouplingBlock::Split CouplingBlock::split(const Var& x) const {
    return {ad::slice(x, -1, keep_start_, keep_len_), ad::slice(x, -1, rest_start_, rest_len_)};
}

Var CouplingBlock::merge(const Var& keep, const Var& rest) const {
    return keep_start_ == 0 ? ad::concat({keep, rest}, -1) : ad::concat({rest, keep}, -1);
}

std::pair<Var, Var> CouplingBlock::scale_translate(Tape& tape, const Var& keep, const Var& cond,
                                                   bool trainable) const {
    const Var in = ad::concat({keep, cond}, -1);
    return {scale_(tape, in, trainable), translate_(tape, in, trainable)};
}

CouplingResult CouplingBlock::forward(Tape& tape, const Var& x, const Var& cond, bool trainable) const {
    const auto [keep, rest] = split(x);
    const auto [s, t] = scale_translate(tape, keep, cond, trainable);
    const Var y_rest = ad::add(ad::mul(rest, ad::exp(s)), t);
    return {merge(keep, y_rest), ad::sum(s, -1)};
}

CouplingResult CouplingBlock::inverse(Tape& tape, const Var& y, const Var& cond, bool trainable) const {
    const auto [keep, rest] = split(y);
    const auto [s, t] = scale_translate(tape, keep, cond, trainable);
    const Var x_rest = ad::mul(ad::sub(rest, t), ad::exp(ad::neg(s)));
    return {merge(keep, x_rest), ad::neg(ad::sum(s, -1))};
}

void CouplingBlock::collect(std::vector<Parameter*>& out) {
    scale_.collect(out);
    translate_.collect(out);
}

FlowModel::FlowModel(FlowConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      cond_mean_(nn::make_vector("flow.cond_mean", config_.cond_dim, 0.0)),
      cond_std_(nn::make_vector("flow.cond_std", config_.cond_dim, 1.0)),
      pose_mean_(nn::make_vector("flow.pose_mean", config_.pose_dim, 0.0)),
      pose_std_(nn::make_vector("flow.pose_std", config_.pose_dim, 1.0)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    blocks_.reserve(config_.blocks);
    for (std::size_t k = 0; k < config_.blocks; ++k) {
        blocks_.emplace_back("flow.block" + std::to_string(k), config_.pose_dim, config_.cond_dim, config_.hidden,
                             k % 2 == 0);
        blocks_.back().init(rng);
    }
}

Var FlowModel::normalized_condition(Tape& tape, const Var& cond) const {
    require_batch(cond, config_.cond_dim, "condition");
    return ad::div(ad::sub(cond, tape.parameter(cond_mean_, false)), tape.parameter(cond_std_, false));
}

Var FlowModel::base_log_density(const Var& z) const {
    const double d = static_cast<double>(z.dim(-1));
    return ad::add_scalar(ad::scale(ad::sum(ad::square(z), -1), -0.5), -0.5 * d * kLog2Pi);
}

Var FlowModel::forward(Tape& tape, const Var& z, const Var& cond, bool trainable) const {
    require_batch(z, config_.pose_dim, "latent");
    const Var cn = normalized_condition(tape, cond);
    Var h = z;
    for (const auto& b : blocks_) h = b.forward(tape, h, cn, trainable).out;
    return ad::add(ad::mul(h, tape.parameter(pose_std_, false)), tape.parameter(pose_mean_, false));
}

Var FlowModel::inverse_prefix(Tape& tape, const Var& u, const Var& cn, std::size_t upto, bool trainable,
                              Var& logdet) const {
    Var h = u;
    Var total;
    for (std::size_t k = upto; k-- > 0;) {
        auto r = blocks_[k].inverse(tape, h, cn, trainable);
        h = r.out;
        total = total.valid() ? ad::add(total, r.logdet) : r.logdet;
    }
    logdet = total;
    return h;
}

Var FlowModel::inverse(Tape& tape, const Var& x, const Var& cond, bool trainable, Var* logdet) const {
    require_batch(x, config_.pose_dim, "pose");
    const Var cn = normalized_condition(tape, cond);
    const Var u = ad::div(ad::sub(x, tape.parameter(pose_mean_, false)), tape.parameter(pose_std_, false));
    Var ld;
    const Var z = inverse_prefix(tape, u, cn, blocks_.size(), trainable, ld);
    if (logdet) {
        double norm = 0.0;
        for (double s : pose_std_.value.data()) norm -= std::log(s);
        *logdet = ad::add_scalar(ld, norm);
    }
    return z;
}

FlowLogProb FlowModel::log_prob(Tape& tape, const Var& x, const Var& cond, bool with_taps, bool trainable) const {
    require_batch(x, config_.pose_dim, "pose");
    if (x.dim(0) != cond.dim(0)) throw ShapeError("flow: pose and condition batch sizes differ");
    const Var cn = normalized_condition(tape, cond);
    const Var u = ad::div(ad::sub(x, tape.parameter(pose_mean_, false)), tape.parameter(pose_std_, false));
    double norm = 0.0;
    for (double s : pose_std_.value.data()) norm -= std::log(s);

    FlowLogProb out;
    Var ld;
    const Var z = inverse_prefix(tape, u, cn, blocks_.size(), trainable, ld);
    out.logp = ad::add_scalar(ad::add(base_log_density(z), ld), norm);
    if (with_taps) {
        for (auto s : config_.taps) {
            Var lds;
            const Var zs = inverse_prefix(tape, u, cn, s, trainable, lds);
            out.taps.push_back(ad::add_scalar(ad::add(base_log_density(zs), lds), norm));
        }
    }
    return out;
}

Var FlowModel::nll_loss(Tape& tape, const Var& x, const Var& cond, bool with_taps, bool trainable) const {
    if (x.shape().empty() || x.dim(0) == 0) throw UsageError("nll_loss: empty batch");
    const FlowLogProb lp = log_prob(tape, x, cond, with_taps, trainable);
    Var total = lp.logp;
    for (std::size_t i = 0; i < lp.taps.size(); ++i) {
        total = ad::add(total, ad::scale(lp.taps[i], config_.tap_weight(config_.taps[i])));
    }
    return ad::neg(ad::mean_all(total));
}

Array FlowModel::forward(const Array& z, const Array& cond) const {
    Tape tape;
    return forward(tape, tape.constant(z), tape.constant(cond)).value();
}

Array FlowModel::inverse(const Array& x, const Array& cond) const {
    Tape tape;
    return inverse(tape, tape.constant(x), tape.constant(cond)).value();
}

Array FlowModel::log_prob(const Array& x, const Array& cond) const {
    Tape tape;
    return log_prob(tape, tape.constant(x), tape.constant(cond), false).logp.value();
}

void FlowModel::set_normalization(const Array& cond_mean, const Array& cond_std, const Array& pose_mean,
                                  const Array& pose_std) {
    auto check = [](const Array& a, std::size_t n, bool positive, const char* what) {
        if (a.size() != n) throw ShapeError(std::string("flow: ") + what + " has wrong length");
        for (double v : a.data()) {
            if (!std::isfinite(v) || (positive && v <= 0.0)) {
                throw DomainError(std::string("flow: ") + what + " must be finite" + (positive ? " and positive" : ""));
            }
        }
    };
    check(cond_mean, config_.cond_dim, false, "condition mean");
    check(cond_std, config_.cond_dim, true, "condition scale");
    check(pose_mean, config_.pose_dim, false, "pose mean");
    check(pose_std, config_.pose_dim, true, "pose scale");
    cond_mean_.value = Array({config_.cond_dim}, cond_mean.vec());
    cond_std_.value = Array({config_.cond_dim}, cond_std.vec());
    pose_mean_.value = Array({config_.pose_dim}, pose_mean.vec());
    pose_std_.value = Array({config_.pose_dim}, pose_std.vec());
}

std::vector<Parameter*> FlowModel::parameters() {
    std::vector<Parameter*> out;
    for (auto& b : blocks_) b.collect(out);
    return out;
}

std::vector<Parameter*> FlowModel::buffers() { return {&cond_mean_, &cond_std_, &pose_mean_, &pose_std_}; }

double standard_normal_log_density(std::span<const double> z) {
    double sq = 0.0;
    for (double v : z) sq += v * v;
    return -0.5 * sq - 0.5 * static_cast<double>(z.size()) * kLog2Pi;
}

}  // namespace flag::flow
