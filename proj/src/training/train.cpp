#include "flag/training/train.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace flag::train {

using ad::Array;
using ad::Tape;
using ad::Var;

namespace {

enum Stream : std::uint64_t { split_stream = 100, flow_stream, lra_stream, finetune_stream, mlp_stream, gumbel_stream };

AdamOptions adam_options(const TrainConfig& cfg) {
    AdamOptions o;
    o.lr = cfg.learning_rate;
    o.clip_norm = cfg.clip_norm;
    return o;
}

std::vector<std::size_t> shuffled(std::span<const std::size_t> idx, std::uint64_t seed) {
    std::vector<std::size_t> out(idx.begin(), idx.end());
    std::mt19937_64 rng(seed);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

template <class Fn>
void for_batches(std::span<const std::size_t> order, std::size_t batch, Fn&& fn) {
    for (std::size_t start = 0; start < order.size(); start += batch) {
        fn(order.subspan(start, std::min(batch, order.size() - start)));
    }
}

void require_finite_loss(double v, const char* stage, std::size_t epoch) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string(stage) + ": loss diverged at epoch " + std::to_string(epoch) +
                           "; lower learning_rate or enable clip_norm");
    }
}

const kin::Skeleton& checked_skeleton(const data::Dataset& d) {
    const auto& skel = kin::Skeleton::standard();
    if (!d.skeleton_hash.empty() && d.skeleton_hash != skel.hash_hex()) {
        throw DataError("training: dataset skeleton hash does not match the built-in skeleton");
    }
    if (d.records.empty()) throw UsageError("training: dataset is empty");
    return skel;
}

std::uint64_t derive_seed_for_validation(std::uint64_t seed, std::size_t epoch) {
    return data::derive_seed(seed, 200, epoch);
}

struct Stage2Data {
    Array poses, conds, tokens, z_star;
    std::vector<std::size_t> fit, val;
};

Stage2Data prepare_stage2(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                          bool with_tokens) {
    const auto& skel = checked_skeleton(train);
    if (flow.config().pose_dim != 3 * skel.joint_count()) throw DataError("training: flow does not match skeleton");
    Stage2Data p;
    p.poses = data::pose_matrix(train.records);
    p.conds = data::condition_matrix(train.records);
    if (with_tokens) p.tokens = data::token_tensor(skel, train.records);
    p.z_star = oracle_latents(flow, p.poses, p.conds);
    std::tie(p.fit, p.val) = split_indices(train.size(), cfg.validation_fraction, cfg.seed);
    return p;
}

Array stage_mask(std::size_t batch, std::size_t joints, std::span<const std::size_t> masked) {
    Array m({batch, joints}, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (auto j : masked) m.at(b, j) = 1.0;
    return m;
}

struct Stage2Loss {
    Var total, mjp, rec, lra;
};

Stage2Loss stage2_loss(Tape& tape, const TrainConfig& cfg, const lra::LraModel& model, const Stage2Data& d,
                       std::span<const std::size_t> rows, const Array& mask, std::mt19937_64& rng, bool trainable) {
    const Var tokens = tape.constant(take_rows(d.tokens, rows));
    const Var cond = tape.constant(take_rows(d.conds, rows));
    const auto out = model.forward(tape, tokens, mask, cond, lra::CodeMode::relaxed, cfg.gumbel_tau, rng, trainable);
    Stage2Loss l;
    l.mjp = lra::mjp_loss(tape, out.joints, tokens, mask);
    l.rec = lra::rec_loss(out.pose, tape.constant(take_rows(d.poses, rows)));
    l.lra = lra::lra_loss(out.region, tape.constant(take_rows(d.z_star, rows)),
                          {cfg.alpha_nll, cfg.alpha_rec, cfg.alpha_reg});
    l.total = ad::add(ad::add(ad::scale(l.mjp, cfg.lambda_mjp), ad::scale(l.rec, cfg.lambda_rec)),
                      ad::scale(l.lra, cfg.lambda_lra));
    return l;
}

// One pass of stage-2 optimization; `mask_for` builds the mask of each batch.
template <class MaskFn>
EpochLog stage2_epoch(const TrainConfig& cfg, lra::LraModel& model, Adam& adam, const Stage2Data& d,
                      std::size_t epoch, std::uint64_t order_seed, std::mt19937_64& rng, MaskFn&& mask_for,
                      const char* stage) {
    EpochLog log;
    log.epoch = epoch;
    double total = 0.0;
    std::size_t seen = 0;
    const auto order = shuffled(d.fit, order_seed);
    for_batches(order, cfg.batch_size, [&](std::span<const std::size_t> rows) {
        const Array mask = mask_for(rows.size());
        adam.zero_grad();
        Tape tape;
        const auto l = stage2_loss(tape, cfg, model, d, rows, mask, rng, true);
        const double v = l.total.value()[0];
        require_finite_loss(v, stage, epoch);
        tape.backward(l.total);
        adam.step();
        const double w = static_cast<double>(rows.size());
        total += v * w;
        log.mjp += l.mjp.value()[0] * w;
        log.rec += l.rec.value()[0] * w;
        log.lra += l.lra.value()[0] * w;
        seen += rows.size();
    });
    const double n = static_cast<double>(seen);
    log.train_loss = total / n;
    log.mjp /= n;
    log.rec /= n;
    log.lra /= n;
    if (!d.val.empty()) {
        std::mt19937_64 vrng(derive_seed_for_validation(cfg.seed, epoch));
        double vt = 0.0;
        for_batches(d.val, cfg.batch_size, [&](std::span<const std::size_t> rows) {
            Tape tape;
            vt += stage2_loss(tape, cfg, model, d, rows, mask_for(rows.size()), vrng, false).total.value()[0] *
                  static_cast<double>(rows.size());
        });
        log.validation = vt / static_cast<double>(d.val.size());
    }
    return log;
}

}  // namespace

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double validation_fraction,
                                                                             std::uint64_t seed) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(data::derive_seed(seed, split_stream, 0));
    std::shuffle(all.begin(), all.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(n)));
    if (n_val >= n) n_val = n > 0 ? n - 1 : 0;
    std::vector<std::size_t> val(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
    all.resize(n - n_val);
    std::sort(all.begin(), all.end());
    std::sort(val.begin(), val.end());
    return {all, val};
}

Array take_rows(const Array& m, std::span<const std::size_t> idx) {
    if (m.rank() < 2) throw ShapeError("take_rows: expected at least two axes");
    const std::size_t row = m.size() / m.dim(0);
    std::vector<double> v(idx.size() * row);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.dim(0)) throw ShapeError("take_rows: index out of range");
        std::copy(m.ptr() + idx[i] * row, m.ptr() + (idx[i] + 1) * row, v.begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    ad::Shape s = m.shape();
    s[0] = idx.size();
    return Array(std::move(s), std::move(v));
}

flow::FlowModel initial_flow(const TrainConfig& cfg, const data::Dataset& train) {
    cfg.validate();
    checked_skeleton(train);
    flow::FlowModel model(cfg.flow, data::derive_seed(cfg.seed, flow_stream, 0));
    const auto [fit, val] = split_indices(train.size(), cfg.validation_fraction, cfg.seed);
    const auto [cm, cs] = data::column_stats(take_rows(data::condition_matrix(train.records), fit));
    const auto [pm, ps] = data::column_stats(take_rows(data::pose_matrix(train.records), fit));
    model.set_normalization(cm, cs, pm, ps);
    return model;
}

FlowRun train_flow(const TrainConfig& cfg, const data::Dataset& train, const Logger& logger) {
    FlowRun run{initial_flow(cfg, train), {}};
    auto& model = run.model;
    const Array poses = data::pose_matrix(train.records);
    const Array conds = data::condition_matrix(train.records);
    const auto [fit, val] = split_indices(train.size(), cfg.validation_fraction, cfg.seed);
    Adam adam(model.parameters(), adam_options(cfg));
    const bool taps = !cfg.flow.taps.empty();
    for (std::size_t e = 0; e < cfg.epochs.flow; ++e) {
        EpochLog log;
        log.epoch = e;
        double total = 0.0;
        const auto order = shuffled(fit, data::derive_seed(cfg.seed, flow_stream, e + 1));
        for_batches(order, cfg.batch_size, [&](std::span<const std::size_t> rows) {
            adam.zero_grad();
            Tape tape;
            const Var loss = ad::scale(
                model.nll_loss(tape, tape.constant(take_rows(poses, rows)), tape.constant(take_rows(conds, rows)),
                               taps, true),
                cfg.lambda_nll);
            const double v = loss.value()[0];
            require_finite_loss(v, "train-flow", e);
            tape.backward(loss);
            adam.step();
            total += v * static_cast<double>(rows.size());
        });
        log.train_loss = total / static_cast<double>(fit.size());
        if (!val.empty()) {
            double vt = 0.0;
            for_batches(val, 1024, [&](std::span<const std::size_t> rows) {
                const Array lp = model.log_prob(take_rows(poses, rows), take_rows(conds, rows));
                for (double x : lp.data()) vt -= x;
            });
            log.validation = vt / static_cast<double>(val.size());
            require_finite_loss(log.validation, "train-flow", e);
        }
        run.log.push_back(log);
        if (logger) logger("flow", log);
    }
    return run;
}

Array oracle_latents(const flow::FlowModel& flow, const Array& poses, const Array& conds, std::size_t chunk) {
    const std::size_t n = poses.dim(0), d = poses.dim(1);
    std::vector<double> out;
    out.reserve(n * d);
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < n; start += chunk) {
        rows.resize(std::min(chunk, n - start));
        std::iota(rows.begin(), rows.end(), start);
        const Array z = flow.inverse(take_rows(poses, rows), take_rows(conds, rows));
        out.insert(out.end(), z.data().begin(), z.data().end());
    }
    return Array({n, d}, std::move(out));
}

LraRun train_lra(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                 const Logger& logger) {
    cfg.validate();
    const Stage2Data d = prepare_stage2(cfg, train, flow, true);
    const auto& skel = kin::Skeleton::standard();
    LraRun run{lra::LraModel(cfg.lra, data::derive_seed(cfg.seed, lra_stream, 0)), {}};
    {
        const auto [cm, cs] = data::column_stats(take_rows(d.conds, d.fit));
        run.model.set_normalization(cm, cs);
    }
    Adam adam(run.model.parameters(), adam_options(cfg));
    std::mt19937_64 rng(data::derive_seed(cfg.seed, gumbel_stream, 0));
    const std::size_t epochs = cfg.epochs.lra;
    for (std::size_t e = 0; e < epochs; ++e) {
        const auto masked = lra::mask_schedule(skel, e, epochs);
        auto mask_for = [&](std::size_t b) {
            return cfg.curriculum ? stage_mask(b, skel.joint_count(), masked)
                                  : lra::inference_mask(b, skel.joint_count(), skel.tracked());
        };
        const EpochLog log = stage2_epoch(cfg, run.model, adam, d, e, data::derive_seed(cfg.seed, lra_stream, e + 1),
                                          rng, mask_for, "train-lra");
        run.log.push_back(log);
        if (logger) logger("lra", log);
    }
    return run;
}

FinetuneStats finetune_hand_dropout(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                                    lra::LraModel& model, const Logger& logger) {
    cfg.validate();
    const Stage2Data d = prepare_stage2(cfg, train, flow, true);
    const auto& skel = kin::Skeleton::standard();
    Adam adam(model.parameters(), adam_options(cfg));
    std::mt19937_64 rng(data::derive_seed(cfg.seed, gumbel_stream, 1));
    std::mt19937_64 drop_rng(data::derive_seed(cfg.seed, finetune_stream, 0));
    std::bernoulli_distribution drop(cfg.hand_dropout);
    FinetuneStats stats;
    auto mask_for = [&](std::size_t b) {
        Array hidden({b, 2}, 0.0);
        for (double& h : hidden.data()) {
            h = drop(drop_rng) ? 1.0 : 0.0;
            stats.hands_dropped += h > 0.0 ? 1 : 0;
        }
        stats.hand_slots += 2 * b;
        return lra::inference_mask(b, skel.joint_count(), skel.tracked(), &hidden);
    };
    for (std::size_t e = 0; e < cfg.epochs.finetune; ++e) {
        const EpochLog log = stage2_epoch(cfg, model, adam, d, e, data::derive_seed(cfg.seed, finetune_stream, e + 1),
                                          rng, mask_for, "finetune");
        stats.log.push_back(log);
        if (logger) logger("finetune", log);
    }
    return stats;
}

MlpBaseline::MlpBaseline(std::size_t cond_dim, std::size_t hidden, std::size_t latent_dim, std::uint64_t seed)
    : net_("mlp", {cond_dim, hidden, latent_dim}, {nn::Act::relu, nn::Act::none}),
      cond_mean_(nn::make_vector("mlp.cond_mean", cond_dim, 0.0)),
      cond_std_(nn::make_vector("mlp.cond_std", cond_dim, 1.0)) {
    std::mt19937_64 rng(seed);
    net_.init_uniform(rng);
}

Var MlpBaseline::operator()(Tape& tape, const Var& cond, bool trainable) const {
    const Var cn = ad::div(ad::sub(cond, tape.parameter(cond_mean_, false)), tape.parameter(cond_std_, false));
    return net_(tape, cn, trainable);
}

Array MlpBaseline::predict(const Array& cond) const {
    Tape tape;
    return (*this)(tape, tape.constant(cond), false).value();
}

void MlpBaseline::set_normalization(const Array& mean, const Array& sd) {
    if (mean.size() != cond_mean_.value.size() || sd.size() != cond_std_.value.size()) {
        throw ShapeError("mlp baseline: normalization statistics have the wrong length");
    }
    for (double s : sd.data())
        if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("mlp baseline: scale must be finite and positive");
    cond_mean_.value = Array(cond_mean_.value.shape(), mean.vec());
    cond_std_.value = Array(cond_std_.value.shape(), sd.vec());
}

std::vector<ad::Parameter*> MlpBaseline::parameters() {
    std::vector<ad::Parameter*> out;
    net_.collect(out);
    return out;
}

std::vector<ad::Parameter*> MlpBaseline::buffers() { return {&cond_mean_, &cond_std_}; }

MlpRun train_mlp_baseline(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                          const Logger& logger) {
    cfg.validate();
    const Stage2Data d = prepare_stage2(cfg, train, flow, false);
    MlpRun run{MlpBaseline(cfg.flow.cond_dim, cfg.mlp_hidden, cfg.flow.pose_dim,
                           data::derive_seed(cfg.seed, mlp_stream, 0)),
               {}};
    {
        const auto [cm, cs] = data::column_stats(take_rows(d.conds, d.fit));
        run.model.set_normalization(cm, cs);
    }
    Adam adam(run.model.parameters(), adam_options(cfg));
    auto loss_of = [&](Tape& tape, std::span<const std::size_t> rows, bool trainable) {
        const Var pred = run.model(tape, tape.constant(take_rows(d.conds, rows)), trainable);
        return lra::rec_loss(pred, tape.constant(take_rows(d.z_star, rows)));
    };
    for (std::size_t e = 0; e < cfg.epochs.mlp; ++e) {
        EpochLog log;
        log.epoch = e;
        double total = 0.0;
        const auto order = shuffled(d.fit, data::derive_seed(cfg.seed, mlp_stream, e + 1));
        for_batches(order, cfg.batch_size, [&](std::span<const std::size_t> rows) {
            adam.zero_grad();
            Tape tape;
            const Var loss = loss_of(tape, rows, true);
            require_finite_loss(loss.value()[0], "train-mlp", e);
            tape.backward(loss);
            adam.step();
            total += loss.value()[0] * static_cast<double>(rows.size());
        });
        log.train_loss = total / static_cast<double>(d.fit.size());
        if (!d.val.empty()) {
            double vt = 0.0;
            for_batches(d.val, 1024, [&](std::span<const std::size_t> rows) {
                Tape tape;
                vt += loss_of(tape, rows, false).value()[0] * static_cast<double>(rows.size());
            });
            log.validation = vt / static_cast<double>(d.val.size());
        }
        run.log.push_back(log);
        if (logger) logger("mlp", log);
    }
    return run;
}

}  // namespace flag::train
