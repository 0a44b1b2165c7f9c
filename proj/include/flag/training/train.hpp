#pragma once

#include "flag/training/adam.hpp"
#include "flag/training/config.hpp"

#include <functional>

namespace flag::train {

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation = 0.0;  // plain NLL for the flow, total loss otherwise
    double mjp = 0.0, rec = 0.0, lra = 0.0;
};

using Logger = std::function<void(const std::string& stage, const EpochLog&)>;

/// Deterministic train/validation split of `n` indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double validation_fraction,
                                                                             std::uint64_t seed);

/// Rows `idx` of a matrix or 3-tensor.
ad::Array take_rows(const ad::Array& m, std::span<const std::size_t> idx);

struct FlowRun {
    flow::FlowModel model;
    std::vector<EpochLog> log;
};

/// The untrained flow that train_flow starts from, with its normalization set.
flow::FlowModel initial_flow(const TrainConfig& cfg, const data::Dataset& train);

/// Stage 1: likelihood training with intermediate supervision on the
/// configured taps. Normalization statistics come from the training split.
/// Throws NumericError when the loss diverges.
FlowRun train_flow(const TrainConfig& cfg, const data::Dataset& train, const Logger& logger = {});

/// Oracle latents z* = f^-1(x, c) for all records, [N, D].
ad::Array oracle_latents(const flow::FlowModel& flow, const ad::Array& poses, const ad::Array& conds,
                         std::size_t chunk = 512);

struct LraRun {
    lra::LraModel model;
    std::vector<EpochLog> log;
};

/// Stage 2 with the flow frozen and a curriculum mask per epoch.
LraRun train_lra(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                 const Logger& logger = {});

struct FinetuneStats {
    std::size_t hand_slots = 0;
    std::size_t hands_dropped = 0;
    std::vector<EpochLog> log;
};

/// Continues stage 2 with every non-tracked joint masked and each hand token
/// independently hidden with probability cfg.hand_dropout.
FinetuneStats finetune_hand_dropout(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                                    lra::LraModel& model, const Logger& logger = {});

/// Two-layer perceptron from the standardized condition to a latent code.
class MlpBaseline {
public:
    MlpBaseline(std::size_t cond_dim, std::size_t hidden, std::size_t latent_dim, std::uint64_t seed);

    ad::Var operator()(ad::Tape& tape, const ad::Var& cond, bool trainable) const;
    ad::Array predict(const ad::Array& cond) const;
    void set_normalization(const ad::Array& mean, const ad::Array& sd);

    nn::Mlp& net() { return net_; }
    std::vector<ad::Parameter*> parameters();
    std::vector<ad::Parameter*> buffers();

private:
    nn::Mlp net_;
    ad::Parameter cond_mean_, cond_std_;
};

struct MlpRun {
    MlpBaseline model;
    std::vector<EpochLog> log;
};

MlpRun train_mlp_baseline(const TrainConfig& cfg, const data::Dataset& train, const flow::FlowModel& flow,
                          const Logger& logger = {});

}  // namespace flag::train
