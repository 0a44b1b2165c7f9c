#include "flag/datagen/datagen.hpp"

#include "flag/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <numbers>
#include <random>

namespace flag::data {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

enum Joint : std::size_t {
    pelvis, l_hip, r_hip, spine1, l_knee, r_knee, spine2, l_ankle, r_ankle, spine3, l_foot, r_foot,
    neck, l_collar, r_collar, head, l_shoulder, r_shoulder, l_elbow, r_elbow, l_wrist, r_wrist
};

struct PoseBuilder {
    std::vector<double> theta;
    explicit PoseBuilder(std::size_t joints) : theta(3 * joints, 0.0) {}
    void set(std::size_t j, double x, double y, double z) {
        if (3 * j + 2 >= theta.size()) return;
        theta[3 * j] = x;
        theta[3 * j + 1] = y;
        theta[3 * j + 2] = z;
    }
    void arms_down(double elbow) {
        set(l_shoulder, 0.0, 0.0, -1.25);
        set(r_shoulder, 0.0, 0.0, 1.25);
        set(l_elbow, 0.0, -elbow, 0.0);
        set(r_elbow, 0.0, elbow, 0.0);
    }
};

void stand(PoseBuilder& p, double u) {
    p.arms_down(0.2 + 0.3 * u);
    p.set(l_hip, 0.0, 0.0, 0.1 * (u - 0.5));
    p.set(r_hip, 0.0, 0.0, 0.1 * (u - 0.5));
    p.set(head, 0.15 * (u - 0.5), 0.0, 0.0);
}

void walk(PoseBuilder& p, double u) {
    const double phi = 2.0 * kPi * u;
    const double s = std::sin(phi), c = std::cos(phi);
    p.set(l_hip, -0.5 * s, 0.0, 0.0);
    p.set(r_hip, 0.5 * s, 0.0, 0.0);
    p.set(l_knee, 0.25 + 0.35 * (1.0 + c), 0.0, 0.0);
    p.set(r_knee, 0.25 + 0.35 * (1.0 - c), 0.0, 0.0);
    p.set(l_ankle, -0.15 * s, 0.0, 0.0);
    p.set(r_ankle, 0.15 * s, 0.0, 0.0);
    p.set(spine2, 0.0, 0.15 * s, 0.0);
    p.set(l_shoulder, 0.45 * s, 0.0, -1.25);
    p.set(r_shoulder, -0.45 * s, 0.0, 1.25);
    p.set(l_elbow, 0.0, -0.4, 0.0);
    p.set(r_elbow, 0.0, 0.4, 0.0);
}

void sit(PoseBuilder& p, double u) {
    p.set(l_hip, -1.45, 0.0, 0.05);
    p.set(r_hip, -1.45, 0.0, -0.05);
    p.set(l_knee, 1.5, 0.0, 0.0);
    p.set(r_knee, 1.5, 0.0, 0.0);
    p.set(l_ankle, -0.1, 0.0, 0.0);
    p.set(r_ankle, -0.1, 0.0, 0.0);
    p.set(spine1, -0.1 + 0.25 * u, 0.0, 0.0);
    p.set(l_shoulder, -0.6, 0.0, -1.1);
    p.set(r_shoulder, -0.6, 0.0, 1.1);
    p.set(l_elbow, 0.0, -1.0, 0.0);
    p.set(r_elbow, 0.0, 1.0, 0.0);
    p.set(head, 0.25 * u, 0.0, 0.0);
}

void reach(PoseBuilder& p, double u) {
    const bool left = u < 0.5;
    const double h = left ? 2.0 * u : 2.0 * u - 1.0;
    p.arms_down(0.3);
    p.set(spine1, 0.3 * h, 0.0, 0.0);
    p.set(spine2, 0.2 * h, left ? -0.2 : 0.2, 0.0);
    if (left) {
        p.set(l_shoulder, 0.0, -1.3, 0.9 * h - 0.3);
        p.set(l_elbow, 0.0, -0.1, 0.0);
        p.set(r_hip, 0.4, 0.0, 0.0);
        p.set(r_knee, 0.25, 0.0, 0.0);
    } else {
        p.set(r_shoulder, 0.0, 1.3, 0.3 - 0.9 * h);
        p.set(r_elbow, 0.0, 0.1, 0.0);
        p.set(l_hip, 0.4, 0.0, 0.0);
        p.set(l_knee, 0.25, 0.0, 0.0);
    }
}

void crouch(PoseBuilder& p, double u) {
    p.set(l_hip, -1.2 - 0.4 * u, 0.0, 0.1);
    p.set(r_hip, -1.2 - 0.4 * u, 0.0, -0.1);
    p.set(l_knee, 1.8 + 0.4 * u, 0.0, 0.0);
    p.set(r_knee, 1.8 + 0.4 * u, 0.0, 0.0);
    p.set(l_ankle, -0.4, 0.0, 0.0);
    p.set(r_ankle, -0.4, 0.0, 0.0);
    p.set(spine1, 0.5, 0.0, 0.0);
    p.set(spine2, 0.2, 0.0, 0.0);
    p.set(l_shoulder, 0.0, -1.3, -0.3);
    p.set(r_shoulder, 0.0, 1.3, 0.3);
    p.set(l_elbow, 0.0, -0.5, 0.0);
    p.set(r_elbow, 0.0, 0.5, 0.0);
    p.set(head, -0.3, 0.0, 0.0);
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::vector<double> as_vector(const json& v, std::size_t n, const char* what) {
    if (!v.is_array() || v.size() != n) throw DataError(std::string("dataset: ") + what + " must have " +
                                                        std::to_string(n) + " entries");
    std::vector<double> out;
    out.reserve(n);
    for (const auto& x : v) {
        if (!x.is_number()) throw DataError(std::string("dataset: ") + what + " entries must be numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

}  // namespace

const char* archetype_name(Archetype a) {
    switch (a) {
    case Archetype::stand: return "stand";
    case Archetype::walk: return "walk";
    case Archetype::sit: return "sit";
    case Archetype::reach: return "reach";
    case Archetype::crouch: return "crouch";
    }
    return "unknown";
}

void MotionPrior::validate() const {
    if (!(joint_noise >= 0.0) || !(yaw_range >= 0.0)) throw UsageError("motion prior: scales must be non-negative");
    if (!(beta_low >= 0.8 && beta_high <= 1.2 && beta_low <= beta_high)) {
        throw UsageError("motion prior: shape range must lie inside [0.8, 1.2]");
    }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return splitmix(splitmix(seed ^ (stream * 0xd1b54a32d192ed03ull)) ^ index);
}

std::vector<double> archetype_pose(const kin::Skeleton& skel, Archetype a, double u) {
    PoseBuilder p(skel.joint_count());
    switch (a) {
    case Archetype::stand: stand(p, u); break;
    case Archetype::walk: walk(p, u); break;
    case Archetype::sit: sit(p, u); break;
    case Archetype::reach: reach(p, u); break;
    case Archetype::crouch: crouch(p, u); break;
    }
    return p.theta;
}

Record make_record(const kin::Skeleton& skel, const kin::Pose& pose, const kin::ShapeParams& shape) {
    if (pose.joint_count() != skel.joint_count()) throw ShapeError("record: pose does not match skeleton");
    return {pose, shape, kin::hmd_from_pose(skel, pose, shape)};
}

Record generate_record(const kin::Skeleton& skel, const MotionPrior& prior, std::uint64_t seed, Archetype* archetype) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(kArchetypeCount) - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> yaw(-prior.yaw_range, prior.yaw_range);
    std::uniform_real_distribution<double> beta(prior.beta_low, prior.beta_high);
    std::normal_distribution<double> noise(0.0, 1.0);

    const auto a = static_cast<Archetype>(pick(rng));
    if (archetype) *archetype = a;
    std::vector<double> theta = archetype_pose(skel, a, unit(rng));
    theta[1] += yaw(rng);
    for (double& v : theta) v += prior.joint_noise * noise(rng);
    const double b0 = beta(rng);
    const double b1 = beta(rng);
    return make_record(skel, kin::Pose(std::move(theta)), kin::ShapeParams(b0, b1));
}

Ranges compute_ranges(const std::vector<Record>& records) {
    Ranges r;
    if (records.empty()) return r;
    const std::size_t n = records.front().pose.flat().size();
    r.min.assign(n, std::numeric_limits<double>::infinity());
    r.max.assign(n, -std::numeric_limits<double>::infinity());
    for (const auto& rec : records) {
        const auto f = rec.pose.flat();
        for (std::size_t i = 0; i < n; ++i) {
            r.min[i] = std::min(r.min[i], f[i]);
            r.max[i] = std::max(r.max[i], f[i]);
        }
    }
    return r;
}

std::pair<Dataset, Dataset> generate_dataset(const kin::Skeleton& skel, const MotionPrior& prior, std::size_t n_train,
                                             std::size_t n_test, std::uint64_t seed) {
    prior.validate();
    Dataset train, test;
    train.skeleton_hash = test.skeleton_hash = skel.hash_hex();
    train.records.reserve(n_train);
    test.records.reserve(n_test);
    for (std::size_t i = 0; i < n_train; ++i) train.records.push_back(generate_record(skel, prior, derive_seed(seed, 1, i)));
    for (std::size_t i = 0; i < n_test; ++i) test.records.push_back(generate_record(skel, prior, derive_seed(seed, 2, i)));
    train.ranges = compute_ranges(train.records);
    test.ranges = train.ranges;
    return {std::move(train), std::move(test)};
}

kin::Pose ood_manipulate(const kin::Pose& pose, std::span<const std::size_t> joints, double noise_scale,
                         std::uint64_t seed) {
    if (joints.empty()) throw UsageError("ood_manipulate: empty joint subset");
    if (!(noise_scale > 0.0)) throw DomainError("ood_manipulate: noise scale must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, noise_scale);
    std::vector<double> theta(pose.flat().begin(), pose.flat().end());
    for (auto j : joints) {
        if (3 * j + 2 >= theta.size()) throw UsageError("ood_manipulate: joint index out of range");
        for (int k = 0; k < 3; ++k) theta[3 * j + k] += g(rng);
    }
    return kin::Pose(std::move(theta));
}

std::vector<std::size_t> random_untracked_joints(const kin::Skeleton& skel, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < skel.joint_count(); ++j)
        if (!skel.is_tracked(j)) pool.push_back(j);
    if (count > pool.size()) throw UsageError("random_untracked_joints: not enough untracked joints");
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

kin::Pose ood_noise(const Ranges& ranges, std::uint64_t seed) {
    if (ranges.empty()) throw DataError("ood_noise: no training ranges available");
    if (ranges.min.size() != ranges.max.size() || ranges.min.size() % 3 != 0) throw DataError("ood_noise: bad ranges");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> theta(ranges.min.size());
    for (std::size_t j = 0; j < theta.size() / 3; ++j) {
        // Redraw joints whose rotation magnitude exceeds pi so that
        // canonicalization leaves every coordinate inside its range.
        for (int attempt = 0;; ++attempt) {
            double sq = 0.0;
            for (int k = 0; k < 3; ++k) {
                const std::size_t i = 3 * j + k;
                theta[i] = ranges.min[i] + (ranges.max[i] - ranges.min[i]) * unit(rng);
                sq += theta[i] * theta[i];
            }
            if (sq <= kPi * kPi) break;
            if (attempt > 1000) throw DataError("ood_noise: ranges admit no rotation of magnitude <= pi");
        }
    }
    return kin::Pose(std::move(theta));
}

void save_dataset(const std::filesystem::path& path, const Dataset& data, const kin::Skeleton& skel) {
    if (!data.skeleton_hash.empty() && data.skeleton_hash != skel.hash_hex()) {
        throw DataError("save_dataset: dataset was built for a different skeleton");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write dataset " + path.string());
    json header{{"format", "flag-dataset"},
                {"version", 1},
                {"J", skel.joint_count()},
                {"B", kin::kShapeDim},
                {"skeleton_hash", skel.hash_hex()},
                {"count", data.records.size()}};
    if (data.ranges.empty()) {
        header["ranges"] = nullptr;
    } else {
        header["ranges"] = {{"min", data.ranges.min}, {"max", data.ranges.max}};
    }
    out << header.dump() << '\n';
    for (const auto& r : data.records) {
        const auto f = r.pose.flat();
        json line{{"pose", std::vector<double>(f.begin(), f.end())}, {"beta", {r.shape.beta[0], r.shape.beta[1]}}};
        out << line.dump() << '\n';
    }
    if (!out) throw DataError("failed while writing dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, const kin::Skeleton& skel) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("dataset " + path.string() + " is empty");
    Dataset d;
    std::size_t count = 0;
    const std::size_t pose_dim = 3 * skel.joint_count();
    try {
        const json header = json::parse(line);
        if (header.at("format") != "flag-dataset") throw DataError("dataset: unexpected format tag");
        if (header.at("version") != 1) throw DataError("dataset: unsupported version");
        if (header.at("J").get<std::size_t>() != skel.joint_count()) throw DataError("dataset: joint count mismatch");
        if (header.at("B").get<std::size_t>() != kin::kShapeDim) throw DataError("dataset: shape dimension mismatch");
        d.skeleton_hash = header.at("skeleton_hash").get<std::string>();
        if (d.skeleton_hash != skel.hash_hex()) throw DataError("dataset: skeleton hash mismatch");
        count = header.at("count").get<std::size_t>();
        const auto& r = header.at("ranges");
        if (!r.is_null()) {
            d.ranges.min = as_vector(r.at("min"), pose_dim, "ranges.min");
            d.ranges.max = as_vector(r.at("max"), pose_dim, "ranges.max");
        }
        d.records.reserve(count);
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const json rec = json::parse(line);
            const auto beta = as_vector(rec.at("beta"), kin::kShapeDim, "beta");
            d.records.push_back(make_record(skel, kin::Pose(as_vector(rec.at("pose"), pose_dim, "pose")),
                                            kin::ShapeParams(beta[0], beta[1])));
        }
    } catch (const json::exception& e) {
        throw DataError("dataset " + path.string() + ": malformed JSON: " + e.what());
    } catch (const DomainError& e) {
        throw DataError("dataset " + path.string() + ": " + e.what());
    }
    if (d.records.size() != count) throw DataError("dataset: header count does not match the number of records");
    return d;
}

Array pose_matrix(const std::vector<Record>& records) {
    if (records.empty()) throw UsageError("pose_matrix: no records");
    const std::size_t d = records.front().pose.flat().size();
    std::vector<double> v;
    v.reserve(records.size() * d);
    for (const auto& r : records) v.insert(v.end(), r.pose.flat().begin(), r.pose.flat().end());
    return Array({records.size(), d}, std::move(v));
}

Array condition_matrix(const std::vector<Record>& records) {
    if (records.empty()) throw UsageError("condition_matrix: no records");
    std::vector<double> v;
    v.reserve(records.size() * kin::kConditionDim);
    for (const auto& r : records) {
        const auto c = kin::condition_vector(r.hmd, r.shape);
        v.insert(v.end(), c.begin(), c.end());
    }
    return Array({records.size(), kin::kConditionDim}, std::move(v));
}

Array token_tensor(const kin::Skeleton& skel, const std::vector<Record>& records) {
    if (records.empty()) throw UsageError("token_tensor: no records");
    const std::size_t j = skel.joint_count();
    std::vector<double> v;
    v.reserve(records.size() * j * kin::kHmdJointDim);
    for (const auto& r : records) {
        const auto st = kin::forward_kinematics(skel, r.pose, r.shape);
        for (std::size_t k = 0; k < j; ++k) {
            const auto r6 = kin::rot6d_encode(st.rotation[k]);
            v.insert(v.end(), r6.begin(), r6.end());
            v.insert(v.end(), st.position[k].begin(), st.position[k].end());
        }
    }
    return Array({records.size(), j, kin::kHmdJointDim}, std::move(v));
}

std::pair<Array, Array> column_stats(const Array& m, double floor) {
    if (m.rank() != 2) throw ShapeError("column_stats: expected a matrix");
    const std::size_t n = m.dim(0), d = m.dim(1);
    Array mean({d}, 0.0), sd({d}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) mean[k] += m.at(i, k);
    for (std::size_t k = 0; k < d; ++k) mean[k] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double c = m.at(i, k) - mean[k];
            sd[k] += c * c;
        }
    for (std::size_t k = 0; k < d; ++k) sd[k] = std::max(floor, std::sqrt(sd[k] / static_cast<double>(n)));
    return {mean, sd};
}

}  // namespace flag::data
