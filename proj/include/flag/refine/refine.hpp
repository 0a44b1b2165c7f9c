#pragma once

#include "flag/flow/flow.hpp"
#include "flag/kinematics/skeleton.hpp"
#include "flag/refine/lbfgs.hpp"

#include <string>

namespace flag::refine {

/// Sum over tracked joints of squared position residuals (m^2) plus squared
/// Frobenius distances between global rotations, the observed ones decoded
/// from their 6-D encoding.
double data_cost(std::span<const double> theta, const kin::HmdSignal& observed, const kin::Skeleton& skel,
                 const kin::ShapeParams& shape);
/// Same value; also writes d cost / d theta into `grad` (length 3J).
double data_cost(std::span<const double> theta, const kin::HmdSignal& observed, const kin::Skeleton& skel,
                 const kin::ShapeParams& shape, std::span<double> grad);

enum class Space { latent, pose };
const char* space_name(Space s);

struct RefineWeights {
    double lambda_data = 1.0;
    double lambda_prior = 0.01;
    double lambda_r = 0.1;
    double r_smoothing = 0.1;  // width of the quadratic core of the distance term

    void validate() const;
};

struct Observation {
    kin::HmdSignal hmd;
    kin::ShapeParams shape;
};

struct RefineResult {
    kin::Pose pose;
    std::vector<double> z;  // final latent code (latent space only)
    LbfgsResult opt;
    /// Pose after iteration i for i in {0} and the configured checkpoints.
    /// Runs that stop early repeat their final pose.
    std::vector<std::size_t> checkpoints;
    std::vector<kin::Pose> snapshots;
};

/// Minimizes lambda_data * C(f(z, c)) - lambda_prior * log N(z; 0, I)
///         + lambda_r * (sqrt(|z - z0|^2 + s^2) - s)
/// over z, starting at z0.
RefineResult refine_latent(const flow::FlowModel& flow, const kin::Skeleton& skel, const Observation& obs,
                           std::span<const double> z0, const LbfgsConfig& cfg, const RefineWeights& w);

/// Minimizes lambda_data * C(x) - lambda_prior * log p(x | c) over the pose x.
RefineResult refine_pose(const flow::FlowModel& flow, const kin::Skeleton& skel, const Observation& obs,
                         std::span<const double> x0, const LbfgsConfig& cfg, const RefineWeights& w);

}  // namespace flag::refine
