#pragma once

#include "flag/datagen/datagen.hpp"
#include "flag/flow/flow.hpp"
#include "flag/lra/lra.hpp"

#include <filesystem>
#include <string>

namespace flag::train {

struct EpochCounts {
    std::size_t flow = 20;
    std::size_t lra = 20;
    std::size_t mlp = 20;
    std::size_t finetune = 10;
};

struct RefineSettings {
    std::size_t max_iter = 50;
    std::size_t history = 10;
    double lambda_data = 1.0;
    double lambda_prior = 0.01;
    double lambda_r = 0.1;
};

struct DataSettings {
    std::size_t train = 20000;
    std::size_t test = 2000;
    data::MotionPrior prior;
};

/// Everything a run depends on. Serialized as nested JSON whose keys mirror
/// these field names; unknown keys are rejected.
struct TrainConfig {
    std::uint64_t seed = 0;
    double learning_rate = 1e-4;
    std::size_t batch_size = 256;
    double clip_norm = 10.0;  // <= 0 disables clipping
    double validation_fraction = 0.05;

    double lambda_nll = 1.0;
    double lambda_mjp = 1.0;
    double lambda_rec = 1.0;
    double lambda_lra = 1.0;
    double alpha_nll = 1.0;
    double alpha_rec = 0.5;
    double alpha_reg = 0.25;

    double hand_dropout = 0.2;
    double gumbel_tau = 1.0;
    bool curriculum = true;
    std::size_t mlp_hidden = 256;

    EpochCounts epochs;
    flow::FlowConfig flow;
    lra::LraConfig lra;
    RefineSettings refine;
    DataSettings data;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(std::string_view text);
    static TrainConfig load(const std::filesystem::path& path);
    /// 16 hex digits identifying the canonical serialization.
    std::string hash() const;
};

/// FNV-1a 64 of a byte string, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace flag::train
