#include "flag/kinematics/skeleton.hpp"

#include "flag/generated/skeleton_asset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace flag::kin {

using nlohmann::json;

namespace {

std::size_t checked_index(const json& v, std::size_t n, const char* what) {
    if (!v.is_number_integer()) throw DataError(std::string("skeleton: ") + what + " must be an integer");
    const auto i = v.get<long long>();
    if (i < 0 || static_cast<std::size_t>(i) >= n) throw DataError(std::string("skeleton: ") + what + " out of range");
    return static_cast<std::size_t>(i);
}

}  // namespace

Skeleton Skeleton::from_json(std::string_view text) {
    Skeleton s;
    try {
        const json doc = json::parse(text);
        if (doc.at("format") != "flag-skeleton") throw DataError("skeleton: unexpected format tag");
        if (doc.at("version") != 1) throw DataError("skeleton: unsupported version");
        for (const auto& j : doc.at("joints")) {
            s.names_.push_back(j.at("name").get<std::string>());
            s.parent_.push_back(j.at("parent").get<int>());
            const auto off = j.at("offset").get<std::vector<double>>();
            if (off.size() != 3) throw DataError("skeleton: offset must have 3 components");
            s.offset_.push_back({off[0], off[1], off[2]});
            s.limb_.push_back(j.at("limb").get<bool>());
        }
        const std::size_t n = s.parent_.size();
        for (const auto& u : doc.at("upper_body")) s.upper_body_.push_back(checked_index(u, n, "upper_body index"));
        const auto& tr = doc.at("tracked");
        s.tracked_ = {checked_index(tr.at("head"), n, "head"), checked_index(tr.at("left_hand"), n, "left_hand"),
                      checked_index(tr.at("right_hand"), n, "right_hand")};
        for (const auto& g : doc.at("curriculum")) {
            CurriculumGroup group{g.at("name").get<std::string>(), {}};
            for (const auto& j : g.at("joints")) group.joints.push_back(checked_index(j, n, "curriculum joint"));
            s.curriculum_.push_back(std::move(group));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("skeleton: malformed definition: ") + e.what());
    }
    s.validate();
    return s;
}

Skeleton Skeleton::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open skeleton file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

const Skeleton& Skeleton::standard() {
    static const Skeleton skel = from_json(generated::kSkeletonAsset);
    return skel;
}

void Skeleton::validate() const {
    const std::size_t n = parent_.size();
    if (n == 0) throw DataError("skeleton: no joints");
    std::size_t roots = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (parent_[i] < 0) {
            ++roots;
            if (parent_[i] != -1) throw DataError("skeleton: root parent must be -1");
        } else if (static_cast<std::size_t>(parent_[i]) >= i) {
            throw DataError("skeleton: joints are not topologically sorted");
        }
    }
    if (roots != 1 || parent_[0] != -1) throw DataError("skeleton: exactly one root (joint 0) required");
    for (auto t : tracked_) {
        if (std::find(upper_body_.begin(), upper_body_.end(), t) == upper_body_.end()) {
            throw DataError("skeleton: tracked joints must belong to the upper body");
        }
    }
    std::vector<int> seen(n, 0);
    for (const auto& g : curriculum_)
        for (auto j : g.joints) {
            if (is_tracked(j)) throw DataError("skeleton: curriculum group '" + g.name + "' masks a tracked joint");
            ++seen[j];
        }
    for (std::size_t j = 0; j < n; ++j) {
        if (!is_tracked(j) && seen[j] != 1) {
            throw DataError("skeleton: joint '" + names_[j] + "' must appear in exactly one curriculum group");
        }
    }
}

std::string Skeleton::to_json() const {
    json doc;
    doc["format"] = "flag-skeleton";
    doc["version"] = 1;
    doc["units"] = "meters";
    json joints = json::array();
    for (std::size_t i = 0; i < parent_.size(); ++i) {
        joints.push_back({{"name", names_[i]},
                          {"parent", parent_[i]},
                          {"offset", {offset_[i][0], offset_[i][1], offset_[i][2]}},
                          {"limb", static_cast<bool>(limb_[i])}});
    }
    doc["joints"] = std::move(joints);
    doc["upper_body"] = upper_body_;
    doc["tracked"] = {{"head", tracked_[0]}, {"left_hand", tracked_[1]}, {"right_hand", tracked_[2]}};
    json groups = json::array();
    for (const auto& g : curriculum_) groups.push_back({{"name", g.name}, {"joints", g.joints}});
    doc["curriculum"] = std::move(groups);
    return doc.dump();
}

std::vector<std::size_t> Skeleton::all_joints() const {
    std::vector<std::size_t> all(parent_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
}

bool Skeleton::is_tracked(std::size_t j) const { return std::find(tracked_.begin(), tracked_.end(), j) != tracked_.end(); }

std::uint64_t Skeleton::hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : to_json()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string Skeleton::hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
}

Pose::Pose(std::vector<double> theta) : theta_(std::move(theta)) {
    if (theta_.size() % 3 != 0) throw ShapeError("pose length must be a multiple of 3");
    for (double v : theta_) {
        if (!std::isfinite(v)) throw NumericError("pose contains non-finite values");
    }
    for (std::size_t j = 0; j < theta_.size() / 3; ++j) {
        const Vec3<double> c = canonicalize_axis_angle(joint(j));
        for (int k = 0; k < 3; ++k) theta_[3 * j + k] = c[k];
    }
}

Pose Pose::zero(std::size_t joint_count) { return Pose(std::vector<double>(3 * joint_count, 0.0)); }

ShapeParams::ShapeParams(double height, double limb) : beta{height, limb} {
    for (double b : beta) {
        if (!(b >= 0.8 && b <= 1.2)) throw DomainError("shape parameter outside [0.8, 1.2]");
    }
}

std::array<double, kHmdDim> HmdSignal::flat() const {
    std::array<double, kHmdDim> out{};
    for (std::size_t k = 0; k < kTrackedCount; ++k)
        for (std::size_t i = 0; i < kHmdJointDim; ++i) out[k * kHmdJointDim + i] = joints[k][i];
    return out;
}

HmdSignal HmdSignal::from_flat(std::span<const double> values) {
    if (values.size() < kHmdDim) throw ShapeError("HMD signal needs 27 values");
    HmdSignal h;
    for (std::size_t k = 0; k < kTrackedCount; ++k)
        for (std::size_t i = 0; i < kHmdJointDim; ++i) h.joints[k][i] = values[k * kHmdJointDim + i];
    return h;
}

Rot6d HmdSignal::rot6d(std::size_t k) const {
    Rot6d r{};
    std::copy(joints.at(k).begin(), joints.at(k).begin() + 6, r.begin());
    return r;
}

Vec3<double> HmdSignal::position(std::size_t k) const { return {joints.at(k)[6], joints.at(k)[7], joints.at(k)[8]}; }

Vec3<double> scaled_offset(const Skeleton& skel, std::size_t j, const ShapeParams& shape) {
    const double s = shape.beta[0] * (skel.is_limb(j) ? shape.beta[1] : 1.0);
    const auto& o = skel.rest_offset(j);
    return {o[0] * s, o[1] * s, o[2] * s};
}

JointState forward_kinematics(const Skeleton& skel, std::span<const double> theta, const ShapeParams& shape) {
    JointState st;
    forward_kinematics_t<double>(skel, theta, shape, st.rotation, st.position);
    return st;
}

JointState forward_kinematics(const Skeleton& skel, const Pose& pose, const ShapeParams& shape) {
    return forward_kinematics(skel, pose.flat(), shape);
}

HmdSignal hmd_from_state(const Skeleton& skel, const JointState& state) {
    HmdSignal h;
    for (std::size_t k = 0; k < kTrackedCount; ++k) {
        const std::size_t j = skel.tracked()[k];
        const auto r6 = rot6d_encode(state.rotation[j]);
        std::copy(r6.begin(), r6.end(), h.joints[k].begin());
        for (int i = 0; i < 3; ++i) h.joints[k][6 + i] = state.position[j][i];
    }
    return h;
}

HmdSignal hmd_from_pose(const Skeleton& skel, const Pose& pose, const ShapeParams& shape) {
    return hmd_from_state(skel, forward_kinematics(skel, pose, shape));
}

std::array<double, kConditionDim> condition_vector(const HmdSignal& hmd, const ShapeParams& shape) {
    std::array<double, kConditionDim> c{};
    const auto f = hmd.flat();
    std::copy(f.begin(), f.end(), c.begin());
    c[kHmdDim] = shape.beta[0];
    c[kHmdDim + 1] = shape.beta[1];
    return c;
}

double mpjpe(const JointState& pred, const JointState& gt, std::span<const std::size_t> subset) {
    if (subset.empty()) throw UsageError("mpjpe: empty joint subset");
    double total = 0.0;
    for (auto j : subset) {
        const auto& a = pred.position.at(j);
        const auto& b = gt.position.at(j);
        const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
        total += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return 100.0 * total / static_cast<double>(subset.size());
}

double mpjpe(const Pose& pred, const Pose& gt, const Skeleton& skel, const ShapeParams& shape,
             std::span<const std::size_t> subset) {
    if (pred.joint_count() != skel.joint_count() || gt.joint_count() != skel.joint_count()) {
        throw ShapeError("mpjpe: pose does not match skeleton");
    }
    return mpjpe(forward_kinematics(skel, pred, shape), forward_kinematics(skel, gt, shape), subset);
}

std::vector<double> joint_errors_cm(const JointState& pred, const JointState& gt) {
    std::vector<double> out(pred.position.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        const auto& a = pred.position[j];
        const auto& b = gt.position.at(j);
        const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
        out[j] = 100.0 * std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return out;
}

}  // namespace flag::kin
