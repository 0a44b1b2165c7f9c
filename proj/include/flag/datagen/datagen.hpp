#pragma once

#include "flag/diffmath/array.hpp"
#include "flag/kinematics/skeleton.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace flag::data {

using ad::Array;

enum class Archetype { stand, walk, sit, reach, crouch };
inline constexpr std::size_t kArchetypeCount = 5;
const char* archetype_name(Archetype a);

/// Procedural motion prior: archetype templates with continuous phase/extent
/// parameters, a random root yaw, and per-joint Gaussian noise.
struct MotionPrior {
    double joint_noise = 0.4;  // radians, per axis-angle coordinate
    double yaw_range = 0.5;    // root yaw ~ U[-yaw_range, yaw_range]
    double beta_low = 0.9;
    double beta_high = 1.1;

    void validate() const;
};

struct Record {
    kin::Pose pose;
    kin::ShapeParams shape;
    kin::HmdSignal hmd;
};

/// Per-coordinate min/max of training poses.
struct Ranges {
    std::vector<double> min, max;
    bool empty() const { return min.empty(); }
};

struct Dataset {
    std::vector<Record> records;
    Ranges ranges;
    std::string skeleton_hash;

    std::size_t size() const { return records.size(); }
};

/// Deterministic 64-bit seed for item `index` of `stream`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

/// The archetype pose with continuous parameter `u` in [0, 1] and no noise.
std::vector<double> archetype_pose(const kin::Skeleton& skel, Archetype a, double u);

Record generate_record(const kin::Skeleton& skel, const MotionPrior& prior, std::uint64_t seed,
                       Archetype* archetype = nullptr);

/// Train and test sets from disjoint seed streams. Both carry the training
/// ranges (empty when n_train is 0).
std::pair<Dataset, Dataset> generate_dataset(const kin::Skeleton& skel, const MotionPrior& prior, std::size_t n_train,
                                             std::size_t n_test, std::uint64_t seed);

Ranges compute_ranges(const std::vector<Record>& records);

/// Adds N(0, noise_scale^2) to the axis-angle coordinates of `joints` and
/// re-canonicalizes. Throws UsageError for an empty subset, DomainError for
/// a non-positive scale.
kin::Pose ood_manipulate(const kin::Pose& pose, std::span<const std::size_t> joints, double noise_scale,
                         std::uint64_t seed);

/// `count` distinct non-tracked joints chosen by `seed`.
std::vector<std::size_t> random_untracked_joints(const kin::Skeleton& skel, std::size_t count, std::uint64_t seed);

/// Uniform draw inside the stored ranges per coordinate. Throws DataError
/// when no ranges are available.
kin::Pose ood_noise(const Ranges& ranges, std::uint64_t seed);

Record make_record(const kin::Skeleton& skel, const kin::Pose& pose, const kin::ShapeParams& shape);

void save_dataset(const std::filesystem::path& path, const Dataset& data, const kin::Skeleton& skel);
/// Re-derives every HMD signal and verifies the header against `skel`.
Dataset load_dataset(const std::filesystem::path& path, const kin::Skeleton& skel);

/// Stacked model inputs.
Array pose_matrix(const std::vector<Record>& records);       // [N, 3J]
Array condition_matrix(const std::vector<Record>& records);  // [N, 29]
Array token_tensor(const kin::Skeleton& skel, const std::vector<Record>& records);  // [N, J, 9]

/// Column means and standard deviations (floored at `floor`).
std::pair<Array, Array> column_stats(const Array& m, double floor = 1e-6);

}  // namespace flag::data
