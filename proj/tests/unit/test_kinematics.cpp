#include <doctest.h>

#include "flag/kinematics/dual.hpp"
#include "flag/kinematics/skeleton.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace flag::kin;

namespace {

Vec3<double> random_axis_angle(std::mt19937_64& rng, double max_angle) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, max_angle);
    Vec3<double> axis{n(rng), n(rng), n(rng)};
    const double len = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    const double angle = u(rng);
    return {axis[0] / len * angle, axis[1] / len * angle, axis[2] / len * angle};
}

double frobenius(const Mat3<double>& a, const Mat3<double>& b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
    return std::sqrt(s);
}

Pose random_pose(std::mt19937_64& rng, std::size_t joints, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> theta(3 * joints);
    for (auto& v : theta) v = n(rng);
    return Pose(std::move(theta));
}

const char* kChain = R"({
  "format": "flag-skeleton", "version": 1,
  "joints": [
    {"name": "a", "parent": -1, "offset": [0, 0, 0], "limb": false},
    {"name": "b", "parent": 0, "offset": [1, 0, 0], "limb": false},
    {"name": "c", "parent": 1, "offset": [1, 0, 0], "limb": true}
  ],
  "upper_body": [0, 1, 2],
  "tracked": {"head": 0, "left_hand": 1, "right_hand": 2},
  "curriculum": []
})";

}  // namespace

TEST_CASE("axis-angle to matrix") {
    const auto id = axis_angle_to_matrix(Vec3<double>{0, 0, 0});
    CHECK(frobenius(id, identity3<double>()) == 0.0);

    const auto rz = axis_angle_to_matrix(Vec3<double>{0, 0, std::numbers::pi / 2});
    const auto v = apply3(rz, Vec3<double>{1, 0, 0});
    CHECK(std::abs(v[0]) < 1e-12);
    CHECK(std::abs(v[1] - 1.0) < 1e-12);
    CHECK(std::abs(v[2]) < 1e-12);

    std::mt19937_64 rng(1);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto aa = random_axis_angle(rng, std::numbers::pi);
        const auto r = axis_angle_to_matrix(aa);
        CHECK(is_rotation(r));
        const auto back = matrix_to_axis_angle(r);
        const double m0 = std::sqrt(aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]);
        const double m1 = std::sqrt(back[0] * back[0] + back[1] * back[1] + back[2] * back[2]);
        worst = std::max(worst, std::abs(m0 - m1));
        CHECK(frobenius(axis_angle_to_matrix(back), r) < 1e-9);
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("dual-number rotation derivative matches finite differences") {
    const Vec3<double> aa{0.3, -0.7, 0.2};
    for (int k = 0; k < 3; ++k) {
        Vec3<Dual> d{Dual(aa[0]), Dual(aa[1]), Dual(aa[2])};
        d[k].d = 1.0;
        const auto rd = axis_angle_to_matrix(d);
        Vec3<double> up = aa, down = aa;
        up[k] += 1e-6;
        down[k] -= 1e-6;
        const auto ru = axis_angle_to_matrix(up), rl = axis_angle_to_matrix(down);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(std::abs(rd[i][j].d - (ru[i][j] - rl[i][j]) / 2e-6) < 1e-8);
    }
    // At the origin dR/da_k is the generator of rotations about axis k.
    Vec3<Dual> zero{Dual(0.0, 0.0), Dual(0.0, 0.0), Dual(0.0, 1.0)};
    const auto r = axis_angle_to_matrix(zero);
    CHECK(r[1][0].d == 1.0);
    CHECK(r[0][1].d == -1.0);
}

TEST_CASE("canonicalization keeps the rotation and bounds the magnitude") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 500; ++i) {
        const auto aa = random_axis_angle(rng, 12.0);
        const auto c = canonicalize_axis_angle(aa);
        CHECK(std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) <= std::numbers::pi + 1e-12);
        CHECK(frobenius(axis_angle_to_matrix(aa), axis_angle_to_matrix(c)) < 1e-9);
    }
}

TEST_CASE("rot6d encoding") {
    const auto e = rot6d_encode(identity3<double>());
    CHECK(e == std::array<double, 6>{1, 0, 0, 0, 1, 0});

    std::mt19937_64 rng(3);
    const auto r = axis_angle_to_matrix(random_axis_angle(rng, 3.0));
    auto scaled = rot6d_encode(r);
    for (auto& v : scaled) v *= 2.5;
    CHECK(frobenius(rot6d_decode(scaled), r) < 1e-12);

    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto rr = axis_angle_to_matrix(random_axis_angle(rng, std::numbers::pi));
        worst = std::max(worst, frobenius(rot6d_decode(rot6d_encode(rr)), rr));
    }
    CHECK(worst < 1e-9);

    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        Rot6d generic{};
        for (auto& v : generic) v = n(rng);
        CHECK(is_rotation(rot6d_decode(generic)));
    }

    CHECK_THROWS_AS(rot6d_decode({0, 0, 0, 0, 1, 0}), flag::DomainError);
    CHECK_THROWS_AS(rot6d_decode({1, 2, 3, 2, 4, 6}), flag::DomainError);
}

TEST_CASE("standard skeleton") {
    const Skeleton& s = Skeleton::standard();
    CHECK(s.joint_count() == 22);
    CHECK(s.upper_body().size() == 13);
    for (std::size_t j = 0; j < s.joint_count(); ++j) CHECK(s.parent(j) < static_cast<int>(j));
    CHECK(s.name(s.tracked()[0]) == "head");
    CHECK(Skeleton::load(FLAG_ASSET_DIR "/skeleton22.json").hash() == s.hash());
    CHECK(Skeleton::from_json(s.to_json()).hash() == s.hash());
    CHECK(s.hash_hex().size() == 16);

    CHECK_THROWS_AS(Skeleton::from_json("{}"), flag::DataError);
    std::string bad = kChain;
    bad.replace(bad.find("\"parent\": 0, \"offset\": [1"), 11, "\"parent\": 2");
    CHECK_THROWS_AS(Skeleton::from_json(bad), flag::DataError);
}

TEST_CASE("forward kinematics") {
    const Skeleton& s = Skeleton::standard();
    SUBCASE("zero pose yields cumulative rest offsets") {
        const auto st = forward_kinematics(s, Pose::zero(22), ShapeParams(1.0, 1.0));
        for (std::size_t j = 0; j < 22; ++j) {
            Vec3<double> expected{0, 0, 0};
            for (int k = static_cast<int>(j); k > 0; k = s.parent(static_cast<std::size_t>(k))) {
                for (int i = 0; i < 3; ++i) expected[i] += s.rest_offset(static_cast<std::size_t>(k))[i];
            }
            for (int i = 0; i < 3; ++i) CHECK(st.position[j][i] == doctest::Approx(expected[i]).epsilon(1e-14));
            CHECK(is_rotation(st.rotation[j]));
        }
        CHECK(st.position[0] == Vec3<double>{0, 0, 0});
    }
    SUBCASE("uniform height scale scales every position") {
        const auto a = forward_kinematics(s, Pose::zero(22), ShapeParams(1.0, 1.0));
        const auto b = forward_kinematics(s, Pose::zero(22), ShapeParams(1.1, 1.0));
        for (std::size_t j = 0; j < 22; ++j)
            for (int i = 0; i < 3; ++i) CHECK(std::abs(b.position[j][i] - 1.1 * a.position[j][i]) < 1e-15);
    }
    SUBCASE("three-joint chain by hand") {
        const Skeleton chain = Skeleton::from_json(kChain);
        const double h = std::numbers::pi / 2;
        auto st = forward_kinematics(chain, Pose({0, 0, h, 0, 0, 0, 0, 0, 0}), ShapeParams(1.0, 1.0));
        CHECK(std::abs(st.position[1][0]) < 1e-12);
        CHECK(std::abs(st.position[1][1] - 1.0) < 1e-12);
        CHECK(std::abs(st.position[2][0]) < 1e-12);
        CHECK(std::abs(st.position[2][1] - 2.0) < 1e-12);
        st = forward_kinematics(chain, Pose({0, 0, h, 0, 0, h, 0, 0, 0}), ShapeParams(1.0, 1.0));
        CHECK(std::abs(st.position[2][0] + 1.0) < 1e-12);
        CHECK(std::abs(st.position[2][1] - 1.0) < 1e-12);
        CHECK(std::abs(st.position[2][2]) < 1e-12);
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(forward_kinematics(s, Pose::zero(21), ShapeParams()), flag::ShapeError);
    }
    SUBCASE("rotations stay orthonormal for random poses") {
        std::mt19937_64 rng(4);
        for (int i = 0; i < 50; ++i) {
            const auto st = forward_kinematics(s, random_pose(rng, 22, 1.0), ShapeParams(0.9, 1.1));
            for (const auto& r : st.rotation) CHECK(is_rotation(r));
            CHECK(st.position[0] == Vec3<double>{0, 0, 0});
        }
    }
}

TEST_CASE("HMD signal extraction") {
    const Skeleton& s = Skeleton::standard();
    const auto zero = hmd_from_pose(s, Pose::zero(22), ShapeParams());
    const auto rest = forward_kinematics(s, Pose::zero(22), ShapeParams());
    CHECK(zero.rot6d(0) == Rot6d{1, 0, 0, 0, 1, 0});
    for (std::size_t k = 0; k < 3; ++k) CHECK(zero.position(k) == rest.position[s.tracked()[k]]);

    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
        const Pose p = random_pose(rng, 22, 0.6);
        const ShapeParams shape(0.95, 1.05);
        const auto st = forward_kinematics(s, p, shape);
        const auto h = hmd_from_pose(s, p, shape);
        for (std::size_t k = 0; k < 3; ++k) {
            const auto& r = st.rotation[s.tracked()[k]];
            const Rot6d manual{r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]};
            CHECK(h.rot6d(k) == manual);
            CHECK(h.position(k) == st.position[s.tracked()[k]]);
            CHECK(frobenius(rot6d_decode(h.rot6d(k)), r) < 1e-9);
        }
        const auto scaled = hmd_from_pose(s, p, ShapeParams(1.15, 0.85));
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(scaled.rot6d(k) == h.rot6d(k));
            CHECK(scaled.position(k) != h.position(k));
        }
    }
    const auto c = condition_vector(zero, ShapeParams(0.9, 1.1));
    CHECK(c.size() == 29);
    CHECK(c[27] == 0.9);
    CHECK(c[28] == 1.1);
}

TEST_CASE("MPJPE") {
    const Skeleton& s = Skeleton::standard();
    const auto all = s.all_joints();
    std::mt19937_64 rng(6);
    const Pose a = random_pose(rng, 22, 0.5);
    CHECK(mpjpe(a, a, s, ShapeParams(), all) == 0.0);

    auto gt = forward_kinematics(s, a, ShapeParams());
    auto pred = gt;
    pred.position[10][1] += 0.05;
    CHECK(mpjpe(pred, gt, all) == doctest::Approx(5.0 / 22.0).epsilon(1e-12));

    for (int i = 0; i < 20; ++i) {
        const Pose p = random_pose(rng, 22, 0.5), q = random_pose(rng, 22, 0.5);
        const ShapeParams shape(1.05, 0.95);
        const auto sp = forward_kinematics(s, p, shape), sq = forward_kinematics(s, q, shape);
        for (const auto* subset : {&all, &s.upper_body()}) {
            double brute = 0.0;
            for (auto j : *subset) {
                double d2 = 0.0;
                for (int k = 0; k < 3; ++k) d2 += std::pow(sp.position[j][k] - sq.position[j][k], 2);
                brute += std::sqrt(d2);
            }
            brute = 100.0 * brute / static_cast<double>(subset->size());
            CHECK(std::abs(mpjpe(p, q, s, shape, *subset) - brute) < 1e-10);
        }
    }
    CHECK_THROWS_AS(mpjpe(a, a, s, ShapeParams(), std::vector<std::size_t>{}), flag::UsageError);
    CHECK_THROWS_AS(ShapeParams(1.3, 1.0), flag::DomainError);
}
