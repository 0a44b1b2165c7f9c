#include "flag/training/config.hpp"

#include "flag/error.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace flag::train {

using nlohmann::json;

namespace {

// Reads fields from one JSON object and rejects any key nobody asked for.
class Section {
public:
    Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw UsageError("config: '" + path_ + "' must be an object");
    }

    template <class T>
    void field(const char* key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw UsageError("config: '" + name(key) + "' has the wrong type");
        }
    }

    Section child(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        static const json empty = json::object();
        return Section(it == obj_.end() ? empty : *it, name(key));
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw UsageError("config: unknown key '" + name(it.key().c_str()) + "'");
        }
    }

private:
    std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void TrainConfig::validate() const {
    for (double w : {lambda_nll, lambda_mjp, lambda_rec, lambda_lra, alpha_nll, alpha_rec, alpha_reg}) {
        if (!(w >= 0.0)) throw UsageError("config: loss weights must be non-negative");
    }
    if (!(hand_dropout >= 0.0 && hand_dropout <= 1.0)) throw UsageError("config: hand_dropout must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw UsageError("config: learning_rate must be positive");
    if (batch_size == 0) throw UsageError("config: batch_size must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw UsageError("config: validation_fraction must lie in [0, 1)");
    }
    if (!(gumbel_tau > 0.0)) throw UsageError("config: gumbel_tau must be positive");
    if (mlp_hidden == 0) throw UsageError("config: mlp_hidden must be positive");
    if (refine.history == 0) throw UsageError("config: refine.history must be positive");
    for (double w : {refine.lambda_data, refine.lambda_prior, refine.lambda_r}) {
        if (!(w >= 0.0)) throw UsageError("config: refine weights must be non-negative");
    }
    flow.validate();
    lra.validate();
    data.prior.validate();
    if (flow.pose_dim != lra.pose_dim || flow.cond_dim != lra.cond_dim) {
        throw UsageError("config: flow and lra dimensions disagree");
    }
}

std::string TrainConfig::to_json() const {
    const auto& e = lra.encoder;
    json j{{"seed", seed},
           {"learning_rate", learning_rate},
           {"batch_size", batch_size},
           {"clip_norm", clip_norm},
           {"validation_fraction", validation_fraction},
           {"lambda_nll", lambda_nll},
           {"lambda_mjp", lambda_mjp},
           {"lambda_rec", lambda_rec},
           {"lambda_lra", lambda_lra},
           {"alpha_nll", alpha_nll},
           {"alpha_rec", alpha_rec},
           {"alpha_reg", alpha_reg},
           {"hand_dropout", hand_dropout},
           {"gumbel_tau", gumbel_tau},
           {"curriculum", curriculum},
           {"mlp_hidden", mlp_hidden},
           {"epochs", {{"flow", epochs.flow}, {"lra", epochs.lra}, {"mlp", epochs.mlp}, {"finetune", epochs.finetune}}},
           {"flow", {{"blocks", flow.blocks}, {"hidden", flow.hidden}, {"taps", flow.taps}}},
           {"lra",
            {{"embed", e.embed},
             {"layers", e.layers},
             {"heads", e.heads},
             {"feedforward", e.feedforward},
             {"groups", lra.groups},
             {"categories", lra.categories},
             {"latent_hidden", lra.latent_hidden},
             {"head_hidden", lra.head_hidden}}},
           {"refine",
            {{"max_iter", refine.max_iter},
             {"history", refine.history},
             {"lambda_data", refine.lambda_data},
             {"lambda_prior", refine.lambda_prior},
             {"lambda_r", refine.lambda_r}}},
           {"data",
            {{"train", data.train},
             {"test", data.test},
             {"joint_noise", data.prior.joint_noise},
             {"yaw_range", data.prior.yaw_range},
             {"beta_low", data.prior.beta_low},
             {"beta_high", data.prior.beta_high}}}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& ex) {
        throw UsageError(std::string("config: malformed JSON: ") + ex.what());
    }
    TrainConfig c;
    Section root(doc, "");
    root.field("seed", c.seed);
    root.field("learning_rate", c.learning_rate);
    root.field("batch_size", c.batch_size);
    root.field("clip_norm", c.clip_norm);
    root.field("validation_fraction", c.validation_fraction);
    root.field("lambda_nll", c.lambda_nll);
    root.field("lambda_mjp", c.lambda_mjp);
    root.field("lambda_rec", c.lambda_rec);
    root.field("lambda_lra", c.lambda_lra);
    root.field("alpha_nll", c.alpha_nll);
    root.field("alpha_rec", c.alpha_rec);
    root.field("alpha_reg", c.alpha_reg);
    root.field("hand_dropout", c.hand_dropout);
    root.field("gumbel_tau", c.gumbel_tau);
    root.field("curriculum", c.curriculum);
    root.field("mlp_hidden", c.mlp_hidden);

    auto ep = root.child("epochs");
    ep.field("flow", c.epochs.flow);
    ep.field("lra", c.epochs.lra);
    ep.field("mlp", c.epochs.mlp);
    ep.field("finetune", c.epochs.finetune);
    ep.finish();

    auto fl = root.child("flow");
    fl.field("blocks", c.flow.blocks);
    fl.field("hidden", c.flow.hidden);
    c.flow.taps = flow::FlowConfig::default_taps(c.flow.blocks);
    fl.field("taps", c.flow.taps);
    fl.finish();

    auto lr = root.child("lra");
    lr.field("embed", c.lra.encoder.embed);
    lr.field("layers", c.lra.encoder.layers);
    lr.field("heads", c.lra.encoder.heads);
    lr.field("feedforward", c.lra.encoder.feedforward);
    lr.field("groups", c.lra.groups);
    lr.field("categories", c.lra.categories);
    lr.field("latent_hidden", c.lra.latent_hidden);
    lr.field("head_hidden", c.lra.head_hidden);
    lr.finish();

    auto rf = root.child("refine");
    rf.field("max_iter", c.refine.max_iter);
    rf.field("history", c.refine.history);
    rf.field("lambda_data", c.refine.lambda_data);
    rf.field("lambda_prior", c.refine.lambda_prior);
    rf.field("lambda_r", c.refine.lambda_r);
    rf.finish();

    auto da = root.child("data");
    da.field("train", c.data.train);
    da.field("test", c.data.test);
    da.field("joint_noise", c.data.prior.joint_noise);
    da.field("yaw_range", c.data.prior.yaw_range);
    da.field("beta_low", c.data.prior.beta_low);
    da.field("beta_high", c.data.prior.beta_high);
    da.finish();

    root.finish();
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

std::string TrainConfig::hash() const { return fnv1a_hex(to_json()); }

}  // namespace flag::train
