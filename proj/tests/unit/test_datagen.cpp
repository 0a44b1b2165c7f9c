#include <doctest.h>

#include "flag/datagen/datagen.hpp"
#include "flag/error.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

using namespace flag;
using namespace flag::data;

namespace {

const kin::Skeleton& skel() { return kin::Skeleton::standard(); }

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "flag_test_datagen";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double magnitude(const kin::Pose& p, std::size_t j) {
    const auto v = p.joint(j);
    return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

}  // namespace

TEST_CASE("same seed gives bit-identical dataset files") {
    const MotionPrior prior;
    auto [a_train, a_test] = generate_dataset(skel(), prior, 64, 16, 7);
    auto [b_train, b_test] = generate_dataset(skel(), prior, 64, 16, 7);
    save_dataset(scratch("a_train.jsonl"), a_train, skel());
    save_dataset(scratch("b_train.jsonl"), b_train, skel());
    save_dataset(scratch("a_test.jsonl"), a_test, skel());
    save_dataset(scratch("b_test.jsonl"), b_test, skel());
    CHECK(slurp(scratch("a_train.jsonl")) == slurp(scratch("b_train.jsonl")));
    CHECK(slurp(scratch("a_test.jsonl")) == slurp(scratch("b_test.jsonl")));

    auto [c_train, c_test] = generate_dataset(skel(), prior, 64, 16, 8);
    CHECK_FALSE(c_train.records[0].pose == a_train.records[0].pose);

    // train and test come from disjoint seed streams
    for (const auto& t : a_test.records)
        for (const auto& r : a_train.records) CHECK_FALSE(t.pose == r.pose);
    CHECK(a_test.ranges.min == a_train.ranges.min);
    CHECK(a_test.ranges.max == a_train.ranges.max);
}

TEST_CASE("empty training set still writes a valid file") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 0, 4, 1);
    CHECK(train.size() == 0);
    CHECK(train.ranges.empty());
    CHECK(test.size() == 4);
    save_dataset(scratch("empty.jsonl"), train, skel());
    const auto back = load_dataset(scratch("empty.jsonl"), skel());
    CHECK(back.size() == 0);
    CHECK(back.ranges.empty());
    CHECK_THROWS_AS(ood_noise(back.ranges, 1), DataError);
}

TEST_CASE("generated rotation magnitudes never exceed pi and archetypes are varied") {
    MotionPrior prior;
    prior.joint_noise = 0.6;
    std::set<Archetype> seen;
    double largest = 0.0;
    for (std::uint64_t i = 0; i < 4000; ++i) {
        Archetype a;
        const auto r = generate_record(skel(), prior, derive_seed(3, 1, i), &a);
        seen.insert(a);
        for (std::size_t j = 0; j < skel().joint_count(); ++j) largest = std::max(largest, magnitude(r.pose, j));
    }
    CHECK(largest <= std::numbers::pi + 1e-12);
    CHECK(largest > 2.0);
    CHECK(seen.size() >= 4);
}

TEST_CASE("upper and lower body are correlated") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 3000, 1, 5);
    const Array x = pose_matrix(train.records);
    const auto [mean, sd] = column_stats(x);
    const std::size_t n = x.dim(0);
    const std::vector<std::size_t> lower = {1, 2, 4, 5};   // hips and knees
    const std::vector<std::size_t> upper = {3, 6, 9, 16, 17, 18, 19};
    double strongest = 0.0;
    for (auto lj : lower)
        for (auto uj : upper)
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 3; ++b) {
                    const std::size_t p = 3 * lj + a, q = 3 * uj + b;
                    double cov = 0.0;
                    for (std::size_t i = 0; i < n; ++i) cov += (x.at(i, p) - mean[p]) * (x.at(i, q) - mean[q]);
                    strongest = std::max(strongest, std::abs(cov / static_cast<double>(n) / (sd[p] * sd[q])));
                }
    CHECK(strongest > 0.3);
}

TEST_CASE("dataset file round trip re-derives the HMD signal") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 20, 5, 11);
    const auto path = scratch("roundtrip.jsonl");
    save_dataset(path, train, skel());
    const auto back = load_dataset(path, skel());
    REQUIRE(back.size() == train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.records[i].pose == train.records[i].pose);
        CHECK(back.records[i].shape.beta == train.records[i].shape.beta);
        CHECK(back.records[i].hmd.flat() == kin::hmd_from_pose(skel(), back.records[i].pose, back.records[i].shape).flat());
        CHECK(back.records[i].hmd.flat() == train.records[i].hmd.flat());
    }
    CHECK(back.ranges.min == train.ranges.min);
    CHECK(back.skeleton_hash == skel().hash_hex());

    save_dataset(scratch("roundtrip2.jsonl"), back, skel());
    CHECK(slurp(path) == slurp(scratch("roundtrip2.jsonl")));
}

TEST_CASE("corrupted dataset files are rejected") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 3, 1, 2);
    const auto path = scratch("corrupt.jsonl");
    save_dataset(path, train, skel());
    const std::string text = slurp(path);
    auto write = [&](const std::string& s) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << s;
    };
    SUBCASE("truncated") {
        write(text.substr(0, text.rfind('\n', text.size() - 2) + 1));
        CHECK_THROWS_AS(load_dataset(path, skel()), DataError);
    }
    SUBCASE("wrong skeleton hash") {
        std::string s = text;
        const auto at = s.find(skel().hash_hex());
        s[at] = s[at] == '0' ? '1' : '0';
        write(s);
        CHECK_THROWS_AS(load_dataset(path, skel()), DataError);
    }
    SUBCASE("garbage") {
        write("not json\n");
        CHECK_THROWS_AS(load_dataset(path, skel()), DataError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset(scratch("does_not_exist.jsonl"), skel()), DataError); }
}

TEST_CASE("ood_manipulate perturbs only the chosen joints") {
    const auto rec = generate_record(skel(), MotionPrior{}, 99);
    const std::vector<std::size_t> subset = {2, 7, 13};
    const auto out = ood_manipulate(rec.pose, subset, 0.1, 4);
    for (std::size_t j = 0; j < skel().joint_count(); ++j) {
        const bool chosen = std::find(subset.begin(), subset.end(), j) != subset.end();
        if (chosen) {
            CHECK_FALSE(out.joint(j) == rec.pose.joint(j));
        } else {
            CHECK(out.joint(j) == rec.pose.joint(j));
        }
    }
    const auto tiny = ood_manipulate(rec.pose, subset, 1e-12, 4);
    for (std::size_t i = 0; i < tiny.flat().size(); ++i) CHECK(tiny.flat()[i] == doctest::Approx(rec.pose.flat()[i]).epsilon(1e-9));

    CHECK_THROWS_AS(ood_manipulate(rec.pose, std::vector<std::size_t>{}, 0.1, 1), UsageError);
    CHECK_THROWS_AS(ood_manipulate(rec.pose, subset, 0.0, 1), DomainError);
    CHECK_THROWS_AS(ood_manipulate(rec.pose, std::vector<std::size_t>{22}, 0.1, 1), UsageError);
}

TEST_CASE("ood_manipulate mean deviation follows the folded normal") {
    const kin::Pose base = kin::Pose::zero(skel().joint_count());
    const std::vector<std::size_t> subset = {4, 5};
    const double sigma = 0.1;
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t s = 0; s < 5000; ++s) {
        const auto out = ood_manipulate(base, subset, sigma, s);
        for (auto j : subset)
            for (int k = 0; k < 3; ++k) {
                total += std::abs(out.flat()[3 * j + k]);
                ++count;
            }
    }
    const double expected = sigma * std::sqrt(2.0 / std::numbers::pi);
    CHECK(total / static_cast<double>(count) == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("random untracked joints") {
    const auto a = random_untracked_joints(skel(), 4, 1);
    CHECK(a.size() == 4);
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 4);
    for (auto j : a) CHECK_FALSE(skel().is_tracked(j));
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(random_untracked_joints(skel(), 4, 1) == a);
    CHECK(random_untracked_joints(skel(), 19, 3).size() == 19);
    CHECK_THROWS_AS(random_untracked_joints(skel(), 20, 3), UsageError);
}

TEST_CASE("ood_noise stays inside the training ranges and covers them") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 2000, 1, 13);
    const Ranges& r = train.ranges;
    const std::size_t d = r.min.size();
    std::vector<double> lo(d, 1e9), hi(d, -1e9);
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto p = ood_noise(r, s);
        for (std::size_t i = 0; i < d; ++i) {
            const double v = p.flat()[i];
            CHECK_MESSAGE((v >= r.min[i] && v <= r.max[i]), "coordinate " << i);
            lo[i] = std::min(lo[i], v);
            hi[i] = std::max(hi[i], v);
        }
    }
    for (std::size_t i = 0; i < d; ++i) CHECK_MESSAGE(hi[i] - lo[i] >= 0.95 * (r.max[i] - r.min[i]), "coordinate " << i);
    CHECK_FALSE(ood_noise(r, 1) == ood_noise(r, 2));
}

TEST_CASE("model input matrices") {
    auto [train, test] = generate_dataset(skel(), MotionPrior{}, 6, 1, 17);
    const Array x = pose_matrix(train.records);
    const Array c = condition_matrix(train.records);
    const Array t = token_tensor(skel(), train.records);
    CHECK(x.shape() == ad::Shape{6, 66});
    CHECK(c.shape() == ad::Shape{6, 29});
    CHECK(t.shape() == ad::Shape{6, 22, 9});
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& rec = train.records[i];
        const auto hmd = rec.hmd.flat();
        for (std::size_t k = 0; k < 27; ++k) CHECK(c.at(i, k) == hmd[k]);
        CHECK(c.at(i, 27) == rec.shape.beta[0]);
        CHECK(c.at(i, 28) == rec.shape.beta[1]);
        // tokens at tracked joints carry the HMD signal
        for (std::size_t h = 0; h < 3; ++h)
            for (std::size_t k = 0; k < 9; ++k)
                CHECK(t[(i * 22 + skel().tracked()[h]) * 9 + k] == doctest::Approx(hmd[9 * h + k]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(pose_matrix({}), UsageError);

    const Array constant({3, 2}, 1.5);
    const auto [m, s] = column_stats(constant, 1e-3);
    CHECK(m[0] == 1.5);
    CHECK(s[1] == 1e-3);
}

TEST_CASE("prior validation and seed derivation") {
    MotionPrior p;
    p.joint_noise = -0.1;
    CHECK_THROWS_AS(p.validate(), UsageError);
    std::set<std::uint64_t> seeds;
    for (std::uint64_t stream = 0; stream < 4; ++stream)
        for (std::uint64_t i = 0; i < 100; ++i) seeds.insert(derive_seed(1, stream, i));
    CHECK(seeds.size() == 400);
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}
