#include <doctest.h>

#include "flag/error.hpp"
#include "flag/training/train.hpp"

#include <cmath>
#include <limits>
#include <set>

using namespace flag;
using namespace flag::train;
using ad::Array;
using ad::Parameter;

namespace {

Parameter scalar_param(double v) { return Parameter{"x", Array({1}, v), Array({1}, 0.0)}; }

TrainConfig small_config() {
    TrainConfig c;
    c.seed = 5;
    c.learning_rate = 2e-3;
    c.batch_size = 32;
    c.flow.blocks = 4;
    c.flow.hidden = 16;
    c.flow.taps = flow::FlowConfig::default_taps(4);
    c.lra.encoder.embed = 8;
    c.lra.encoder.heads = 2;
    c.lra.encoder.layers = 1;
    c.lra.encoder.feedforward = 16;
    c.lra.groups = 4;
    c.lra.categories = 4;
    c.lra.latent_hidden = 16;
    c.lra.head_hidden = 16;
    c.mlp_hidden = 16;
    c.epochs = {2, 2, 5, 1};
    return c;
}

const data::Dataset& small_data() {
    static const data::Dataset d = data::generate_dataset(kin::Skeleton::standard(), data::MotionPrior{}, 240, 1, 3).first;
    return d;
}

std::vector<double> flatten(const std::vector<Parameter*>& ps) {
    std::vector<double> out;
    for (auto* p : ps) out.insert(out.end(), p->value.vec().begin(), p->value.vec().end());
    return out;
}

double mean_nll(const flow::FlowModel& m, const data::Dataset& d) {
    const Array lp = m.log_prob(data::pose_matrix(d.records), data::condition_matrix(d.records));
    double s = 0.0;
    for (double v : lp.data()) s -= v;
    return s / static_cast<double>(lp.size());
}

}  // namespace

TEST_CASE("adam leaves parameters alone under a zero gradient") {
    Parameter p = scalar_param(3.0);
    Adam adam({&p}, {.lr = 0.1});
    adam.zero_grad();
    adam.step();
    CHECK(p.value[0] == 3.0);
}

TEST_CASE("adam first step moves by the learning rate") {
    Parameter p = scalar_param(0.0);
    Adam adam({&p}, {.lr = 0.1});
    p.grad[0] = 1.0;
    adam.step();
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    CHECK(p.value[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(adam.steps() == 1);
}

TEST_CASE("adam minimizes a parabola") {
    Parameter p = scalar_param(5.0);
    Adam adam({&p}, {.lr = 0.05});
    for (int i = 0; i < 2000; ++i) {
        adam.zero_grad();
        p.grad[0] = 2.0 * p.value[0];
        adam.step();
    }
    CHECK(std::abs(p.value[0]) < 1e-3);
}

TEST_CASE("adam rejects non-finite gradients and clips by global norm") {
    Parameter p = scalar_param(1.0);
    Parameter q = scalar_param(1.0);
    Adam adam({&p, &q}, {.lr = 0.1, .clip_norm = 1.0});
    p.grad[0] = 30.0;
    q.grad[0] = 40.0;
    CHECK(adam.step() == doctest::Approx(50.0));
    CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-6));

    p.grad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(adam.step(), NumericError);
}

TEST_CASE("config serialization round trip") {
    TrainConfig c = small_config();
    c.hand_dropout = 0.3;
    c.curriculum = false;
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(back.flow.taps == c.flow.taps);
    CHECK(back.hand_dropout == 0.3);
    CHECK(c.hash().size() == 16);
    c.seed += 1;
    CHECK(back.hash() != c.hash());

    const TrainConfig d = TrainConfig::from_json("{}");
    CHECK(d.lambda_mjp == 1.0);
    CHECK(d.alpha_rec == 0.5);
    CHECK(d.alpha_reg == 0.25);
    CHECK(d.learning_rate == 1e-4);
    CHECK(d.batch_size == 256);
    CHECK(d.flow.taps == std::vector<std::size_t>{2, 4, 6});
}

TEST_CASE("config rejects unknown keys and bad values") {
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"learnig_rate": 0.1})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"flow": {"blocks": 8, "width": 3}})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"epochs": {"flow": "ten"}})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"hand_dropout": 1.5})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"lambda_rec": -1})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"flow": {"blocks": 4, "taps": [5]}})"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json("[1, 2"), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"data": 3})"), UsageError);
}

TEST_CASE("validation split") {
    const auto [fit, val] = split_indices(1000, 0.05, 9);
    CHECK(val.size() == 50);
    CHECK(fit.size() == 950);
    std::set<std::size_t> all(fit.begin(), fit.end());
    all.insert(val.begin(), val.end());
    CHECK(all.size() == 1000);
    CHECK(split_indices(1000, 0.05, 9).second == val);
    CHECK(split_indices(1000, 0.05, 10).second != val);
    CHECK(split_indices(3, 0.0, 1).second.empty());

    const Array m({3, 2}, {1, 2, 3, 4, 5, 6});
    const std::vector<std::size_t> idx{2, 0};
    CHECK(take_rows(m, idx) == Array({2, 2}, {5, 6, 1, 2}));
}

TEST_CASE("flow training lowers the NLL and is deterministic") {
    TrainConfig c = small_config();
    const flow::FlowModel init(c.flow, data::derive_seed(c.seed, 101, 0));
    std::vector<EpochLog> seen;
    auto run = train_flow(c, small_data(), [&](const std::string& stage, const EpochLog& l) {
        CHECK(stage == "flow");
        seen.push_back(l);
    });
    CHECK(seen.size() == 2);
    CHECK(run.log.size() == 2);
    CHECK(std::isfinite(run.log[1].validation));

    // Compare against the untrained model under the same normalization.
    flow::FlowModel untrained = init;
    auto ub = untrained.buffers();
    auto rb = run.model.buffers();
    for (std::size_t i = 0; i < ub.size(); ++i) ub[i]->value = rb[i]->value;
    CHECK(mean_nll(run.model, small_data()) < mean_nll(untrained, small_data()));

    auto again = train_flow(c, small_data());
    CHECK(flatten(again.model.parameters()) == flatten(run.model.parameters()));

    TrainConfig no_taps = c;
    no_taps.flow.taps.clear();
    auto plain = train_flow(no_taps, small_data());
    CHECK(flatten(plain.model.parameters()) != flatten(run.model.parameters()));
}

TEST_CASE("flow training rejects a foreign skeleton") {
    data::Dataset d = small_data();
    d.skeleton_hash = "0000000000000000";
    CHECK_THROWS_AS(train_flow(small_config(), d), DataError);
    data::Dataset empty;
    CHECK_THROWS_AS(train_flow(small_config(), empty), UsageError);
}

TEST_CASE("stage two keeps the flow frozen and decomposes its loss") {
    TrainConfig c = small_config();
    c.lambda_mjp = 0.7;
    c.lambda_rec = 1.3;
    c.lambda_lra = 0.4;
    c.epochs.lra = 3;
    auto fr = train_flow(c, small_data());
    const auto before = flatten(fr.model.parameters());
    const auto before_buf = flatten(fr.model.buffers());

    auto lr = train_lra(c, small_data(), fr.model);
    CHECK(flatten(fr.model.parameters()) == before);
    CHECK(flatten(fr.model.buffers()) == before_buf);
    REQUIRE(lr.log.size() == 3);
    for (const auto& l : lr.log) {
        CHECK(l.train_loss ==
              doctest::Approx(c.lambda_mjp * l.mjp + c.lambda_rec * l.rec + c.lambda_lra * l.lra).epsilon(1e-10));
        CHECK(std::isfinite(l.validation));
    }
    // the first curriculum phase masks nothing
    CHECK(lr.log[0].mjp == 0.0);
    CHECK(lr.log[2].mjp > 0.0);

    auto again = train_lra(c, small_data(), fr.model);
    CHECK(flatten(again.model.parameters()) == flatten(lr.model.parameters()));
}

TEST_CASE("stage two lowers the latent region loss") {
    TrainConfig c = small_config();
    c.curriculum = false;
    c.epochs.lra = 6;
    c.learning_rate = 3e-3;
    auto fr = train_flow(c, small_data());
    auto lr = train_lra(c, small_data(), fr.model);
    CHECK(lr.log.back().lra < lr.log.front().lra);
    CHECK(lr.log.back().mjp < lr.log.front().mjp);
}

TEST_CASE("hand dropout fine-tuning") {
    TrainConfig c = small_config();
    auto fr = train_flow(c, small_data());
    auto lr = train_lra(c, small_data(), fr.model);

    SUBCASE("drop frequency matches p") {
        TrainConfig f = c;
        f.batch_size = 1;
        f.epochs.finetune = 45;
        lra::LraModel model = lr.model;
        const auto stats = finetune_hand_dropout(f, small_data(), fr.model, model);
        CHECK(stats.hand_slots >= 20000);
        const double freq = static_cast<double>(stats.hands_dropped) / static_cast<double>(stats.hand_slots);
        CHECK(freq == doctest::Approx(0.2).epsilon(0.05));
        CHECK(std::abs(freq - 0.2) < 0.01);
    }
    SUBCASE("p = 0 never hides a hand") {
        TrainConfig f = c;
        f.hand_dropout = 0.0;
        lra::LraModel model = lr.model;
        const auto stats = finetune_hand_dropout(f, small_data(), fr.model, model);
        CHECK(stats.hands_dropped == 0);
        CHECK(stats.hand_slots > 0);
    }
    SUBCASE("fine-tuned model generates with hidden hands") {
        lra::LraModel model = lr.model;
        const auto stats = finetune_hand_dropout(c, small_data(), fr.model, model);
        CHECK(stats.log.size() == 1);
        CHECK(flatten(model.parameters()) != flatten(lr.model.parameters()));
        const auto& recs = small_data().records;
        const Array cond = data::condition_matrix({recs.begin(), recs.begin() + 8});
        const Array hidden({8, 2}, 1.0);
        const auto [mu, sigma] = model.infer(cond, &hidden);
        const Array pose = fr.model.forward(mu, cond);
        CHECK(pose.all_finite());
        CHECK(sigma.all_finite());
    }
}

TEST_CASE("mlp baseline") {
    SUBCASE("zero weights give the bias") {
        MlpBaseline m(29, 8, 66, 1);
        for (auto* p : m.parameters()) p->value.fill(0.0);
        m.net().layer(1).bias().value.fill(0.25);
        const auto& recs = small_data().records;
        const Array out = m.predict(data::condition_matrix({recs.begin(), recs.begin() + 3}));
        for (double v : out.data()) CHECK(v == 0.25);
    }
    SUBCASE("training loss decreases") {
        TrainConfig c = small_config();
        auto fr = train_flow(c, small_data());
        auto run = train_mlp_baseline(c, small_data(), fr.model);
        REQUIRE(run.log.size() == 5);
        CHECK(run.log.back().train_loss < run.log.front().train_loss);
        for (std::size_t e = 1; e < run.log.size(); ++e) CHECK(run.log[e].train_loss <= run.log[e - 1].train_loss * 1.02);
    }
}
