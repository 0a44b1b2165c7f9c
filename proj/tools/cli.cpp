#include "cli.hpp"

#include "flag/error.hpp"
#include "flag/evalcli/checkpoint.hpp"
#include "flag/evalcli/metrics.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>

namespace flag::cli {

namespace {

namespace fs = std::filesystem;
using ad::Array;
using eval::MetricsReport;

constexpr const char* kTrainFile = "train.flagds";
constexpr const char* kTestFile = "test.flagds";

struct Options {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> checkpoints;
    std::string hands = "both";
    std::string mode = "mu";
    std::size_t samples = 8;
    std::size_t count = 200;
    std::string space = "all";
    std::vector<std::string> traces;
};

// Checkpoints given with --checkpoint, sorted by kind.
struct Models {
    std::optional<eval::LoadedFlow> flow;
    std::optional<eval::LoadedLra> lra;
    std::optional<eval::LoadedMlp> mlp;
};

class Command {
public:
    Command(const Options& o, std::ostream& log) : o_(o), log_(log) {}

    const kin::Skeleton& skel() const { return kin::Skeleton::standard(); }

    // Precedence: --config, else the flow checkpoint's config, else defaults.
    train::TrainConfig config(const Models* models = nullptr) const {
        train::TrainConfig cfg;
        if (!o_.config.empty()) {
            cfg = train::TrainConfig::load(o_.config);
        } else if (models && models->flow) {
            cfg = models->flow->config;
        }
        if (o_.seed) cfg.seed = *o_.seed;
        cfg.validate();
        return cfg;
    }

    fs::path out() const {
        if (o_.out.empty()) throw UsageError("--out is required");
        return o_.out;
    }

    data::Dataset dataset(const char* file) const {
        if (o_.data.empty()) throw UsageError("--data is required");
        return data::load_dataset(fs::path(o_.data) / file, skel());
    }

    Models models(bool need_flow, bool need_lra, bool need_mlp) const {
        std::vector<std::pair<eval::ModelKind, std::string>> found;
        for (const auto& p : o_.checkpoints) found.emplace_back(eval::read_checkpoint(p).kind, p);
        auto path_of = [&](eval::ModelKind k) -> std::optional<std::string> {
            std::optional<std::string> hit;
            for (const auto& [kind, p] : found) {
                if (kind != k) continue;
                if (hit) throw UsageError(std::string("more than one ") + eval::kind_name(k) + " checkpoint given");
                hit = p;
            }
            return hit;
        };
        Models m;
        if (auto p = path_of(eval::ModelKind::flow)) m.flow.emplace(eval::load_flow(*p, skel()));
        if ((need_lra || need_mlp || need_flow) && !m.flow) throw UsageError("a flow --checkpoint is required");
        if (auto p = path_of(eval::ModelKind::lra)) m.lra.emplace(eval::load_lra(*p, skel(), m.flow->digest));
        if (auto p = path_of(eval::ModelKind::mlp)) m.mlp.emplace(eval::load_mlp(*p, skel(), m.flow->digest));
        if (need_lra && !m.lra) throw UsageError("an lra --checkpoint is required");
        if (need_mlp && !m.mlp) throw UsageError("an mlp --checkpoint is required");
        return m;
    }

    train::Logger logger() const {
        return [this](const std::string& stage, const train::EpochLog& e) {
            log_ << stage << " epoch " << e.epoch << " train " << eval::format_double(e.train_loss) << " validation "
                 << eval::format_double(e.validation) << '\n';
        };
    }

    MetricsReport report(const train::TrainConfig& cfg) const {
        MetricsReport r;
        r.seed = cfg.seed;
        r.config_hash = cfg.hash();
        return r;
    }

    void datagen() const {
        const auto cfg = config();
        const auto [train, test] =
            data::generate_dataset(skel(), cfg.data.prior, cfg.data.train, cfg.data.test, cfg.seed);
        data::save_dataset(out() / kTrainFile, train, skel());
        data::save_dataset(out() / kTestFile, test, skel());
    }

    void train_flow() const {
        const auto cfg = config();
        const fs::path path = out();
        auto run = train::train_flow(cfg, dataset(kTrainFile), logger());
        eval::save_flow(path, run.model, cfg, skel());
    }

    void train_lra() const {
        const Models m = models(true, false, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        auto run = train::train_lra(cfg, dataset(kTrainFile), m.flow->model, logger());
        eval::save_lra(path, run.model, cfg, skel(), m.flow->digest);
    }

    void train_mlp() const {
        const Models m = models(true, false, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        auto run = train::train_mlp_baseline(cfg, dataset(kTrainFile), m.flow->model, logger());
        eval::save_mlp(path, run.model, cfg, skel(), m.flow->digest);
    }

    void finetune() const {
        Models m = models(true, true, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        const auto stats =
            train::finetune_hand_dropout(cfg, dataset(kTrainFile), m.flow->model, m.lra->model, logger());
        log_ << "hands dropped " << stats.hands_dropped << " of " << stats.hand_slots << '\n';
        eval::save_lra(path, m.lra->model, cfg, skel(), m.flow->digest);
    }

    void generate() const {
        const auto rule = eval::parse_rule(o_.mode);
        if (rule == eval::LatentRule::sample) throw UsageError("generate writes one pose per record; use mu, zero or mlp");
        const Models m = models(true, rule == eval::LatentRule::mu, rule == eval::LatentRule::mlp);
        const fs::path path = out();
        const auto test = dataset(kTestFile);
        const Array cond = data::condition_matrix(test.records);
        const Array z = eval::select_latents(rule, cond, skel().pose_dim(), m.lra ? &m.lra->model : nullptr,
                                             m.mlp ? &m.mlp->model : nullptr, eval::parse_hands(o_.hands));
        const Array x = eval::decode(m.flow->model, z, cond);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + path.string());
        const std::size_t d = skel().pose_dim();
        f << "record";
        for (std::size_t k = 0; k < d; ++k) f << ",theta_" << k;
        f << '\n';
        for (std::size_t i = 0; i < test.size(); ++i) {
            f << i;
            for (std::size_t k = 0; k < d; ++k) f << ',' << eval::format_double(x[i * d + k]);
            f << '\n';
        }
    }

    void evaluate() const {
        const auto rule = eval::parse_rule(o_.mode);
        const auto hands = eval::parse_hands(o_.hands);
        const bool needs_lra = rule == eval::LatentRule::mu || rule == eval::LatentRule::sample;
        const Models m = models(true, needs_lra, rule == eval::LatentRule::mlp);
        const auto cfg = config(&m);
        const fs::path path = out();
        const auto test = dataset(kTestFile);
        const Array cond = data::condition_matrix(test.records);
        MetricsReport r = report(cfg);
        std::string subset = eval::rule_name(rule);
        if (hands != eval::Hands::both) subset += std::string(":hands=") + eval::hands_name(hands);
        if (rule == eval::LatentRule::sample) {
            const auto [mu, sigma] = eval::infer_region(m.lra->model, cond, hands);
            const auto spread = eval::sample_spread(m.flow->model, skel(), test.records, mu, sigma, o_.samples, cfg.seed);
            eval::add_errors(r, subset, spread.errors);
            for (std::size_t j = 0; j < skel().joint_count(); ++j) {
                r.add("joint_std_cm", subset + ":" + skel().name(j), spread.joint_std_cm[j], test.size());
            }
        } else {
            const Array z = eval::select_latents(rule, cond, skel().pose_dim(), m.lra ? &m.lra->model : nullptr,
                                                 m.mlp ? &m.mlp->model : nullptr, hands);
            eval::add_errors(r, subset, eval::pose_errors(skel(), eval::decode(m.flow->model, z, cond), test.records));
        }
        r.write_csv(path);
    }

    void ood() const {
        const Models m = models(true, false, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        const auto test = dataset(kTestFile);
        const auto sets = eval::make_ood_sets(skel(), test, test.ranges, cfg.seed);
        const auto res = eval::ood_eval(m.flow->model, sets);
        MetricsReport r = report(cfg);
        r.add("nll", "gt", res.nll_gt, res.count);
        r.add("nll", "manipulated", res.nll_manipulated, res.count);
        r.add("nll", "noise", res.nll_noise, res.count);
        r.add("rd", "manipulated", res.rd_manipulated, res.count);
        r.add("rd", "noise", res.rd_noise, res.count);
        r.write_csv(path);
    }

    void oracle_dist() const {
        const Models m = models(true, true, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        const auto test = dataset(kTestFile);
        const Array cond = data::condition_matrix(test.records);
        const Array z_star = train::oracle_latents(m.flow->model, data::pose_matrix(test.records), cond);
        const std::size_t n = z_star.dim(0), d = z_star.dim(1);
        const std::vector<std::pair<std::string, Array>> candidates{
            {"random", eval::random_latents(n, d, cfg.seed)},
            {"zeros", Array({n, d})},
            {"mu", eval::infer_region(m.lra->model, cond, eval::parse_hands(o_.hands)).first}};
        MetricsReport r = report(cfg);
        for (const auto& [name, z] : candidates) {
            const auto cs = eval::cosine_distance(z, z_star);
            r.add("cosine_distance", name, cs.mean_distance, cs.count);
            r.add("cosine_skipped", name, static_cast<double>(cs.skipped), cs.count);
            r.add("sinkhorn", name, eval::sinkhorn_distance(z, z_star), n);
        }
        r.write_csv(path);
    }

    void refine() const {
        if (o_.space != "all" && o_.space != "latent" && o_.space != "pose") {
            throw UsageError("--space must be one of all, latent, pose");
        }
        const Models m = models(true, true, false);
        const auto cfg = config(&m);
        const fs::path path = out();
        const auto test = dataset(kTestFile);
        if (o_.count == 0) throw UsageError("--count must be positive");
        const std::size_t n = std::min(o_.count, test.size());
        const std::vector<data::Record> records(test.records.begin(),
                                                test.records.begin() + static_cast<std::ptrdiff_t>(n));
        std::vector<eval::RefineVariant> variants;
        for (const auto& v : eval::default_variants()) {
            if (o_.space == "all" || o_.space == refine::space_name(v.space)) variants.push_back(v);
        }
        const auto rows = eval::refine_records(m.flow->model, m.lra->model, skel(), records, cfg, variants);
        eval::write_traces(path, rows);
    }

    void report_curves() const {
        if (o_.traces.empty()) throw UsageError("report needs at least one trace file");
        const fs::path path = out();
        std::vector<eval::RefineTraceRow> rows;
        for (const auto& t : o_.traces) {
            auto part = eval::read_traces(t);
            rows.insert(rows.end(), part.begin(), part.end());
        }
        const auto curve = eval::aggregate_traces(rows);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + path.string());
        f << eval::curve_to_csv(curve);
    }

private:
    const Options& o_;
    std::ostream& log_;
};

void common(CLI::App* app, Options& o) {
    app->add_option("--config", o.config, "Training/evaluation config (JSON)");
    app->add_option("--out", o.out, "Output file or directory");
    app->add_option("--seed", o.seed, "Seed overriding the config");
}

void with_data(CLI::App* app, Options& o) { app->add_option("--data", o.data, "Dataset directory"); }

void with_checkpoints(CLI::App* app, Options& o) {
    app->add_option("--checkpoint", o.checkpoints, "Model checkpoint (repeatable)");
}

void with_hands(CLI::App* app, Options& o) {
    app->add_option("--hands", o.hands, "Visible hands")->check(CLI::IsMember({"both", "left", "right", "none"}));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Sparse-observation full-body pose generation: data, training, evaluation"};
    app.name("flag");
    app.require_subcommand(1);

    auto* datagen = app.add_subcommand("datagen", "Write synthetic train/test datasets to --out");
    common(datagen, o);

    auto* train_flow = app.add_subcommand("train-flow", "Train the conditional flow");
    common(train_flow, o);
    with_data(train_flow, o);

    auto* train_lra = app.add_subcommand("train-lra", "Train the latent region approximator against a flow");
    auto* train_mlp = app.add_subcommand("train-mlp", "Train the condition-to-latent MLP baseline");
    auto* finetune = app.add_subcommand("finetune", "Hand-dropout fine-tuning of an LRA");
    for (auto* s : {train_lra, train_mlp, finetune}) {
        common(s, o);
        with_data(s, o);
        with_checkpoints(s, o);
    }

    auto* generate = app.add_subcommand("generate", "Decode one pose per test record");
    auto* evaluate = app.add_subcommand("evaluate", "MPJPE of a latent selection rule");
    for (auto* s : {generate, evaluate}) {
        common(s, o);
        with_data(s, o);
        with_checkpoints(s, o);
        with_hands(s, o);
        s->add_option("--mode", o.mode, "Latent rule")->check(CLI::IsMember({"mu", "zero", "mlp", "sample-k"}));
    }
    evaluate->add_option("--samples", o.samples, "Draws per record for sample-k")->check(CLI::Range(2, 1000000));

    auto* ood = app.add_subcommand("ood", "NLL of test, manipulated and noise poses");
    common(ood, o);
    with_data(ood, o);
    with_checkpoints(ood, o);

    auto* oracle = app.add_subcommand("oracle-dist", "Distances from candidate latents to the oracle latents");
    common(oracle, o);
    with_data(oracle, o);
    with_checkpoints(oracle, o);
    with_hands(oracle, o);

    auto* refine_cmd = app.add_subcommand("refine", "L-BFGS refinement traces on test records");
    common(refine_cmd, o);
    with_data(refine_cmd, o);
    with_checkpoints(refine_cmd, o);
    refine_cmd->add_option("--count", o.count, "Number of test records");
    refine_cmd->add_option("--space", o.space, "all, latent or pose");

    auto* report = app.add_subcommand("report", "Mean MPJPE per refinement iteration");
    common(report, o);
    report->add_option("traces", o.traces, "Trace files")->required();

    std::vector<std::string> argv_store{"flag"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        out << app.help();
        return 1;
    }

    try {
        Command c(o, err);
        if (datagen->parsed()) c.datagen();
        else if (train_flow->parsed()) c.train_flow();
        else if (train_lra->parsed()) c.train_lra();
        else if (train_mlp->parsed()) c.train_mlp();
        else if (finetune->parsed()) c.finetune();
        else if (generate->parsed()) c.generate();
        else if (evaluate->parsed()) c.evaluate();
        else if (ood->parsed()) c.ood();
        else if (oracle->parsed()) c.oracle_dist();
        else if (refine_cmd->parsed()) c.refine();
        else if (report->parsed()) c.report_curves();
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace flag::cli
