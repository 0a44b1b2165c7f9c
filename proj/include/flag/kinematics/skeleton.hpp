#pragma once

#include "flag/kinematics/rotation.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flag::kin {

inline constexpr std::size_t kTrackedCount = 3;  // head, left hand, right hand
inline constexpr std::size_t kShapeDim = 2;      // global height scale, limb scale
inline constexpr std::size_t kHmdJointDim = 9;   // rot6d + position
inline constexpr std::size_t kHmdDim = kTrackedCount * kHmdJointDim;
inline constexpr std::size_t kConditionDim = kHmdDim + kShapeDim;

struct CurriculumGroup {
    std::string name;
    std::vector<std::size_t> joints;
};

/// Fixed-topology kinematic tree, topologically sorted (parent[i] < i).
class Skeleton {
public:
    /// Parses the JSON skeleton asset format. Throws DataError when invalid.
    static Skeleton from_json(std::string_view text);
    static Skeleton load(const std::filesystem::path& path);
    /// The bundled 22-joint skeleton (assets/skeleton22.json).
    static const Skeleton& standard();

    std::string to_json() const;

    std::size_t joint_count() const noexcept { return parent_.size(); }
    std::size_t pose_dim() const noexcept { return 3 * parent_.size(); }
    int parent(std::size_t j) const { return parent_.at(j); }
    const Vec3<double>& rest_offset(std::size_t j) const { return offset_.at(j); }
    bool is_limb(std::size_t j) const { return limb_.at(j); }
    const std::string& name(std::size_t j) const { return names_.at(j); }

    const std::vector<std::size_t>& upper_body() const noexcept { return upper_body_; }
    std::vector<std::size_t> all_joints() const;
    /// (head, left hand, right hand)
    const std::array<std::size_t, kTrackedCount>& tracked() const noexcept { return tracked_; }
    bool is_tracked(std::size_t j) const;
    /// Masking order for curriculum training.
    const std::vector<CurriculumGroup>& curriculum() const noexcept { return curriculum_; }

    /// FNV-1a over the canonical JSON serialization.
    std::uint64_t hash() const;
    std::string hash_hex() const;

private:
    void validate() const;

    std::vector<std::string> names_;
    std::vector<int> parent_;
    std::vector<Vec3<double>> offset_;
    std::vector<bool> limb_;
    std::vector<std::size_t> upper_body_;
    std::array<std::size_t, kTrackedCount> tracked_{};
    std::vector<CurriculumGroup> curriculum_;
};

/// Per-joint axis-angle rotations (radians), joint-major. Each joint's
/// rotation is canonicalized to magnitude <= pi on construction.
class Pose {
public:
    Pose() = default;
    explicit Pose(std::vector<double> theta);
    static Pose zero(std::size_t joint_count);

    std::size_t joint_count() const noexcept { return theta_.size() / 3; }
    std::span<const double> flat() const noexcept { return theta_; }
    Vec3<double> joint(std::size_t j) const { return {theta_[3 * j], theta_[3 * j + 1], theta_[3 * j + 2]}; }

    friend bool operator==(const Pose&, const Pose&) = default;

private:
    std::vector<double> theta_;
};

/// Bone-length scale factors, each in [0.8, 1.2].
struct ShapeParams {
    std::array<double, kShapeDim> beta{1.0, 1.0};

    ShapeParams() = default;
    ShapeParams(double height, double limb);
};

/// Global rot6d + position for each tracked joint.
struct HmdSignal {
    std::array<std::array<double, kHmdJointDim>, kTrackedCount> joints{};

    std::array<double, kHmdDim> flat() const;
    static HmdSignal from_flat(std::span<const double> values);
    Rot6d rot6d(std::size_t k) const;
    Vec3<double> position(std::size_t k) const;
};

struct JointState {
    std::vector<Mat3<double>> rotation;  // global
    std::vector<Vec3<double>> position;  // meters, root at origin
};

/// Rest offset of joint `j` after bone scaling.
Vec3<double> scaled_offset(const Skeleton& skel, std::size_t j, const ShapeParams& shape);

/// Forward kinematics over any scalar type (double or Dual). `theta` is the
/// joint-major axis-angle vector of length 3J.
template <class T>
void forward_kinematics_t(const Skeleton& skel, std::span<const T> theta, const ShapeParams& shape,
                          std::vector<Mat3<T>>& rotation, std::vector<Vec3<T>>& position) {
    const std::size_t n = skel.joint_count();
    if (theta.size() != 3 * n) throw ShapeError("forward_kinematics: pose has wrong dimension");
    rotation.resize(n);
    position.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const Mat3<T> local = axis_angle_to_matrix(Vec3<T>{theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]});
        const int p = skel.parent(j);
        if (p < 0) {
            rotation[j] = local;
            position[j] = Vec3<T>{T(0.0), T(0.0), T(0.0)};
            continue;
        }
        const auto pi = static_cast<std::size_t>(p);
        rotation[j] = matmul3(rotation[pi], local);
        const Vec3<double> off = scaled_offset(skel, j, shape);
        const Vec3<T> step = apply3(rotation[pi], Vec3<T>{T(off[0]), T(off[1]), T(off[2])});
        for (int k = 0; k < 3; ++k) position[j][k] = position[pi][k] + step[k];
    }
}

JointState forward_kinematics(const Skeleton& skel, const Pose& pose, const ShapeParams& shape);
JointState forward_kinematics(const Skeleton& skel, std::span<const double> theta, const ShapeParams& shape);

HmdSignal hmd_from_state(const Skeleton& skel, const JointState& state);
HmdSignal hmd_from_pose(const Skeleton& skel, const Pose& pose, const ShapeParams& shape);

/// Condition vector [x_H (27), beta (2)].
std::array<double, kConditionDim> condition_vector(const HmdSignal& hmd, const ShapeParams& shape);

/// Mean Euclidean joint distance over `subset`, in centimeters.
double mpjpe(const Pose& pred, const Pose& gt, const Skeleton& skel, const ShapeParams& shape,
             std::span<const std::size_t> subset);
double mpjpe(const JointState& pred, const JointState& gt, std::span<const std::size_t> subset);

/// Per-joint position error in centimeters.
std::vector<double> joint_errors_cm(const JointState& pred, const JointState& gt);

}  // namespace flag::kin
