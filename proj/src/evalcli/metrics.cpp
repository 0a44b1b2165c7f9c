#include "flag/evalcli/metrics.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace flag::eval {

namespace {

enum Stream : std::uint64_t {
    random_stream = 300,
    sample_stream,
    manipulate_stream,
    manipulate_joint_stream,
    noise_stream,
};

Array rows_of(const Array& m, std::size_t begin, std::size_t end) {
    const std::size_t cols = m.size() / m.dim(0);
    return Array({end - begin, cols}, std::vector<double>(m.vec().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                                          m.vec().begin() + static_cast<std::ptrdiff_t>(end * cols)));
}

void append(std::vector<double>& dst, const Array& src) { dst.insert(dst.end(), src.vec().begin(), src.vec().end()); }

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

template <class T>
T parse_number(const std::string& s, const std::string& what) {
    T v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw DataError("trace: bad " + what + " '" + s + "'");
    return v;
}

const char* kTraceHeader = "space,init_rule,instance,iteration,mpjpe_upper,mpjpe_full";

}  // namespace

void MetricsReport::add(std::string metric, std::string subset, double value, std::size_t count) {
    if (!std::isfinite(value)) throw NumericError("metric " + metric + "/" + subset + " is not finite");
    rows.push_back({std::move(metric), std::move(subset), value, count});
}

const Row* MetricsReport::find(std::string_view metric, std::string_view subset) const {
    for (const auto& r : rows)
        if (r.metric == metric && r.subset == subset) return &r;
    return nullptr;
}

double MetricsReport::value(std::string_view metric, std::string_view subset) const {
    const Row* r = find(metric, subset);
    if (!r) throw UsageError("report has no row " + std::string(metric) + "/" + std::string(subset));
    return r->value;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string MetricsReport::to_csv() const {
    std::string out = "metric,subset,value,count,seed,config_hash\n";
    for (const auto& r : rows) {
        out += r.metric + "," + r.subset + "," + format_double(r.value) + "," + std::to_string(r.count) + "," +
               std::to_string(seed) + "," + config_hash + "\n";
    }
    return out;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << to_csv();
}

MeanSe mean_se(std::span<const double> v) {
    MeanSe s;
    s.n = v.size();
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
    }
    return s;
}

MeanSe paired_difference(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("paired_difference: length mismatch");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return mean_se(d);
}

Hands parse_hands(std::string_view s) {
    if (s == "both") return Hands::both;
    if (s == "left") return Hands::left;
    if (s == "right") return Hands::right;
    if (s == "none") return Hands::none;
    throw UsageError("--hands must be one of both, left, right, none");
}

const char* hands_name(Hands h) {
    switch (h) {
    case Hands::both: return "both";
    case Hands::left: return "left";
    case Hands::right: return "right";
    case Hands::none: return "none";
    }
    return "?";
}

std::optional<Array> hidden_hands(Hands h, std::size_t n) {
    if (h == Hands::both) return std::nullopt;
    const double left = (h == Hands::right || h == Hands::none) ? 1.0 : 0.0;
    const double right = (h == Hands::left || h == Hands::none) ? 1.0 : 0.0;
    Array out({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        out.at(i, 0) = left;
        out.at(i, 1) = right;
    }
    return out;
}

LatentRule parse_rule(std::string_view s) {
    if (s == "mu") return LatentRule::mu;
    if (s == "zero") return LatentRule::zero;
    if (s == "mlp") return LatentRule::mlp;
    if (s == "sample-k" || s == "sample") return LatentRule::sample;
    throw UsageError("mode must be one of mu, zero, mlp, sample-k");
}

const char* rule_name(LatentRule r) {
    switch (r) {
    case LatentRule::mu: return "mu";
    case LatentRule::zero: return "zero";
    case LatentRule::mlp: return "mlp";
    case LatentRule::sample: return "sample-k";
    }
    return "?";
}

PoseErrors pose_errors(const kin::Skeleton& skel, const Array& poses, const std::vector<data::Record>& records) {
    if (poses.rank() != 2 || poses.dim(0) != records.size() || poses.dim(1) != skel.pose_dim()) {
        throw ShapeError("pose_errors: poses must be [N, 3J] matching the records");
    }
    const auto all = skel.all_joints();
    const std::size_t d = skel.pose_dim();
    PoseErrors e;
    e.upper.reserve(records.size());
    e.full.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const kin::JointState pred = kin::forward_kinematics(
            skel, std::span<const double>(poses.ptr() + i * d, d), records[i].shape);
        const kin::JointState gt = kin::forward_kinematics(skel, records[i].pose, records[i].shape);
        e.upper.push_back(kin::mpjpe(pred, gt, skel.upper_body()));
        e.full.push_back(kin::mpjpe(pred, gt, all));
    }
    return e;
}

Array decode(const flow::FlowModel& flow, const Array& z, const Array& cond, std::size_t chunk) {
    const std::size_t n = z.dim(0);
    if (cond.dim(0) != n) throw ShapeError("decode: latent and condition counts differ");
    std::vector<double> out;
    out.reserve(z.size());
    for (std::size_t b = 0; b < n; b += chunk) {
        const std::size_t e = std::min(n, b + chunk);
        append(out, flow.forward(rows_of(z, b, e), rows_of(cond, b, e)));
    }
    return Array({n, z.dim(1)}, std::move(out));
}

std::pair<Array, Array> infer_region(const lra::LraModel& lra, const Array& cond, Hands hands, std::size_t chunk) {
    const std::size_t n = cond.dim(0);
    std::vector<double> mu, sigma;
    for (std::size_t b = 0; b < n; b += chunk) {
        const std::size_t e = std::min(n, b + chunk);
        const auto hidden = hidden_hands(hands, e - b);
        auto [m, s] = lra.infer(rows_of(cond, b, e), hidden ? &*hidden : nullptr);
        append(mu, m);
        append(sigma, s);
    }
    const std::size_t d = lra.config().pose_dim;
    return {Array({n, d}, std::move(mu)), Array({n, d}, std::move(sigma))};
}

Array select_latents(LatentRule rule, const Array& cond, std::size_t latent_dim, const lra::LraModel* lra,
                     const train::MlpBaseline* mlp, Hands hands) {
    switch (rule) {
    case LatentRule::mu:
        if (!lra) throw UsageError("mode mu needs an LRA checkpoint");
        return infer_region(*lra, cond, hands).first;
    case LatentRule::zero: return Array({cond.dim(0), latent_dim});
    case LatentRule::mlp:
        if (!mlp) throw UsageError("mode mlp needs an MLP checkpoint");
        return mlp->predict(cond);
    case LatentRule::sample: break;
    }
    throw UsageError("sample-k draws several codes per record");
}

Array random_latents(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(data::derive_seed(seed, random_stream, 0));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n * d);
    for (double& x : v) x = g(rng);
    return Array({n, d}, std::move(v));
}

SampleSpread sample_spread(const flow::FlowModel& flow, const kin::Skeleton& skel,
                           const std::vector<data::Record>& records, const Array& mu, const Array& sigma,
                           std::size_t k, std::uint64_t seed) {
    if (k < 2) throw UsageError("sample-k needs at least 2 samples");
    const std::size_t n = records.size();
    const std::size_t d = skel.pose_dim();
    const std::size_t joints = skel.joint_count();
    if (mu.dim(0) != n || sigma.dim(0) != n) throw ShapeError("sample_spread: region count differs from records");
    const auto all = skel.all_joints();
    SampleSpread out;
    out.joint_std_cm.assign(joints, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const Array z = lra::sample_region(std::span<const double>(mu.ptr() + i * d, d),
                                           std::span<const double>(sigma.ptr() + i * d, d), k,
                                           data::derive_seed(seed, sample_stream, i));
        const auto c = kin::condition_vector(records[i].hmd, records[i].shape);
        std::vector<double> cv;
        for (std::size_t s = 0; s < k; ++s) cv.insert(cv.end(), c.begin(), c.end());
        const Array x = flow.forward(z, Array({k, c.size()}, std::move(cv)));
        const kin::JointState gt = kin::forward_kinematics(skel, records[i].pose, records[i].shape);
        std::vector<kin::JointState> states;
        for (std::size_t s = 0; s < k; ++s) {
            states.push_back(kin::forward_kinematics(skel, std::span<const double>(x.ptr() + s * d, d),
                                                     records[i].shape));
            out.errors.upper.push_back(kin::mpjpe(states.back(), gt, skel.upper_body()));
            out.errors.full.push_back(kin::mpjpe(states.back(), gt, all));
        }
        for (std::size_t j = 0; j < joints; ++j) {
            kin::Vec3<double> m{0.0, 0.0, 0.0};
            for (const auto& st : states)
                for (int a = 0; a < 3; ++a) m[a] += st.position[j][a] / static_cast<double>(k);
            double ss = 0.0;
            for (const auto& st : states)
                for (int a = 0; a < 3; ++a) ss += (st.position[j][a] - m[a]) * (st.position[j][a] - m[a]);
            out.joint_std_cm[j] += 100.0 * std::sqrt(ss / static_cast<double>(k)) / static_cast<double>(n);
        }
    }
    return out;
}

void add_errors(MetricsReport& report, const std::string& subset, const PoseErrors& e) {
    const MeanSe u = mean_se(e.upper), f = mean_se(e.full);
    report.add("mpjpe_upper_cm", subset, u.mean, u.n);
    report.add("mpjpe_upper_cm_se", subset, u.se, u.n);
    report.add("mpjpe_full_cm", subset, f.mean, f.n);
    report.add("mpjpe_full_cm_se", subset, f.se, f.n);
}

OodSets make_ood_sets(const kin::Skeleton& skel, const data::Dataset& test, const data::Ranges& ranges,
                      std::uint64_t seed, const OodSettings& settings) {
    if (test.records.empty()) throw UsageError("ood: empty test set");
    OodSets sets;
    sets.gt = test.records;
    for (std::size_t i = 0; i < test.records.size(); ++i) {
        const auto& r = test.records[i];
        const auto joints =
            data::random_untracked_joints(skel, settings.joints, data::derive_seed(seed, manipulate_joint_stream, i));
        const kin::Pose m = data::ood_manipulate(r.pose, joints, settings.noise_scale,
                                                 data::derive_seed(seed, manipulate_stream, i));
        sets.manipulated.push_back(data::make_record(skel, m, r.shape));
        const kin::Pose z = data::ood_noise(ranges, data::derive_seed(seed, noise_stream, i));
        sets.noise.push_back(data::make_record(skel, z, r.shape));
    }
    return sets;
}

double relative_difference(double nll_ood, double nll_gt) {
    if (nll_ood == nll_gt) return 0.0;
    const double m = std::max(nll_ood, nll_gt);
    if (!(m > 0.0)) throw DomainError("relative difference is undefined when both NLLs are non-positive");
    return std::abs(nll_ood - nll_gt) / m;
}

double mean_nll(const flow::FlowModel& flow, const std::vector<data::Record>& records) {
    if (records.empty()) throw UsageError("ood: empty evaluation set");
    const Array x = data::pose_matrix(records);
    const Array c = data::condition_matrix(records);
    double sum = 0.0;
    const std::size_t chunk = 512;
    for (std::size_t b = 0; b < records.size(); b += chunk) {
        const std::size_t e = std::min(records.size(), b + chunk);
        const Array lp = flow.log_prob(rows_of(x, b, e), rows_of(c, b, e));
        for (double v : lp.vec()) sum -= v;
    }
    return sum / static_cast<double>(records.size());
}

OodResult ood_eval(const flow::FlowModel& flow, const OodSets& sets) {
    OodResult r;
    r.nll_gt = mean_nll(flow, sets.gt);
    r.nll_manipulated = mean_nll(flow, sets.manipulated);
    r.nll_noise = mean_nll(flow, sets.noise);
    r.rd_manipulated = relative_difference(r.nll_manipulated, r.nll_gt);
    r.rd_noise = relative_difference(r.nll_noise, r.nll_gt);
    r.count = sets.gt.size();
    return r;
}

CosineResult cosine_distance(const Array& a, const Array& b) {
    if (a.shape() != b.shape() || a.rank() != 2) throw ShapeError("cosine_distance: inputs must be equal [n, D]");
    const std::size_t n = a.dim(0), d = a.dim(1);
    CosineResult r;
    r.count = n;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double x = a[i * d + k], y = b[i * d + k];
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        if (aa == 0.0 || bb == 0.0) {
            ++r.skipped;
            sum += 1.0;
            continue;
        }
        const double cs = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
        sum += 1.0 - cs;
    }
    r.mean_distance = sum / static_cast<double>(n);
    return r;
}

double sinkhorn_cost(const Array& a, const Array& b, double epsilon, std::size_t iterations) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw ShapeError("sinkhorn: inputs must be [n, D]");
    if (!(epsilon > 0.0)) throw DomainError("sinkhorn: epsilon must be positive");
    if (iterations == 0) throw UsageError("sinkhorn: iterations must be positive");
    const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
    std::vector<double> cost(n * m);
    double max_cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double t = a[i * d + k] - b[j * d + k];
                s += t * t;
            }
            cost[i * m + j] = s;
            max_cost = std::max(max_cost, s);
        }
    const double log_a = -std::log(static_cast<double>(n)), log_b = -std::log(static_cast<double>(m));
    std::vector<double> f(n, 0.0), g(m, 0.0), tmp(std::max(n, m));
    auto lse = [](const double* v, std::size_t len) {
        double mx = v[0];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, v[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < len; ++i) s += std::exp(v[i] - mx);
        return mx + std::log(s);
    };

    // Epsilon scaling: the first half of the iterations anneals geometrically
    // from the largest cost down to epsilon, the rest run at epsilon.
    const std::size_t anneal = iterations / 2;
    const double start = std::max(epsilon, max_cost);
    for (std::size_t it = 0; it < iterations; ++it) {
        double eps = epsilon;
        if (it < anneal) eps = std::max(epsilon, start * std::pow(epsilon / start, static_cast<double>(it) / anneal));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) tmp[j] = (g[j] - cost[i * m + j]) / eps + log_b;
            f[i] = -eps * lse(tmp.data(), m);
        }
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) tmp[i] = (f[i] - cost[i * m + j]) / eps + log_a;
            g[j] = -eps * lse(tmp.data(), n);
        }
    }

    // Round the plan onto the exact marginals before taking <P, C>.
    std::vector<double> plan(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            plan[i * m + j] = std::exp((f[i] + g[j] - cost[i * m + j]) / epsilon + log_a + log_b);
    const double ra = 1.0 / static_cast<double>(n), rb = 1.0 / static_cast<double>(m);
    std::vector<double> err_a(n), err_b(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < m; ++j) row += plan[i * m + j];
        if (row > ra)
            for (std::size_t j = 0; j < m; ++j) plan[i * m + j] *= ra / row;
    }
    for (std::size_t j = 0; j < m; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < n; ++i) col += plan[i * m + j];
        if (col > rb)
            for (std::size_t i = 0; i < n; ++i) plan[i * m + j] *= rb / col;
    }
    double mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < m; ++j) row += plan[i * m + j];
        err_a[i] = ra - row;
        mass += err_a[i];
    }
    for (std::size_t j = 0; j < m; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < n; ++i) col += plan[i * m + j];
        err_b[j] = rb - col;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double p = plan[i * m + j];
            if (mass > 0.0) p += err_a[i] * err_b[j] / mass;
            total += p * cost[i * m + j];
        }
    return total;
}

double sinkhorn_distance(const Array& candidate, const Array& oracle, const SinkhornOptions& options) {
    if (candidate.shape() != oracle.shape() || oracle.rank() != 2) {
        throw ShapeError("sinkhorn_distance: inputs must be equal [n, D]");
    }
    if (options.batch == 0) throw UsageError("sinkhorn_distance: batch must be positive");
    const auto [mean, sd] = data::column_stats(oracle);
    const std::size_t n = oracle.dim(0), d = oracle.dim(1);
    auto standardize = [&](const Array& m) {
        std::vector<double> v(m.vec());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) v[i * d + k] = (v[i * d + k] - mean[k]) / sd[k];
        return Array({n, d}, std::move(v));
    };
    const Array a = standardize(candidate), b = standardize(oracle);
    double total = 0.0;
    for (std::size_t s = 0; s < n; s += options.batch) {
        const std::size_t e = std::min(n, s + options.batch);
        total += static_cast<double>(e - s) *
                 sinkhorn_cost(rows_of(a, s, e), rows_of(b, s, e), options.epsilon, options.iterations);
    }
    return total / static_cast<double>(n);
}

std::vector<RefineTraceRow> trace_rows(const kin::Skeleton& skel, const refine::RefineResult& result,
                                       const data::Record& truth, refine::Space space, const std::string& init_rule,
                                       std::size_t instance) {
    const auto all = skel.all_joints();
    std::vector<RefineTraceRow> rows;
    for (std::size_t i = 0; i < result.checkpoints.size(); ++i) {
        const auto& p = result.snapshots.at(i);
        rows.push_back({refine::space_name(space), init_rule, instance, result.checkpoints[i],
                        kin::mpjpe(p, truth.pose, skel, truth.shape, skel.upper_body()),
                        kin::mpjpe(p, truth.pose, skel, truth.shape, all)});
    }
    return rows;
}

std::vector<RefineVariant> default_variants() {
    return {{refine::Space::latent, LatentRule::mu},
            {refine::Space::latent, LatentRule::zero},
            {refine::Space::pose, LatentRule::mu}};
}

refine::LbfgsConfig lbfgs_config(const train::TrainConfig& cfg) {
    refine::LbfgsConfig l;
    l.history = cfg.refine.history;
    l.max_iterations = cfg.refine.max_iter;
    l.validate();
    return l;
}

refine::RefineWeights refine_weights(const train::TrainConfig& cfg) {
    refine::RefineWeights w;
    w.lambda_data = cfg.refine.lambda_data;
    w.lambda_prior = cfg.refine.lambda_prior;
    w.lambda_r = cfg.refine.lambda_r;
    w.validate();
    return w;
}

std::vector<RefineTraceRow> refine_records(const flow::FlowModel& flow, const lra::LraModel& lra,
                                           const kin::Skeleton& skel, const std::vector<data::Record>& records,
                                           const train::TrainConfig& cfg, const std::vector<RefineVariant>& variants) {
    if (records.empty()) throw UsageError("refine: no records");
    for (const auto& v : variants) {
        if (v.init != LatentRule::mu && v.init != LatentRule::zero) {
            throw UsageError("refine: initialization must be mu or zero");
        }
    }
    const std::size_t n = records.size(), d = skel.pose_dim();
    const Array cond = data::condition_matrix(records);
    const Array mu = infer_region(lra, cond, Hands::both).first;
    const Array zero({n, d});
    const Array x_mu = decode(flow, mu, cond), x_zero = decode(flow, zero, cond);
    const auto lcfg = lbfgs_config(cfg);
    const auto w = refine_weights(cfg);
    std::vector<RefineTraceRow> rows;
    for (std::size_t i = 0; i < n; ++i) {
        const refine::Observation obs{records[i].hmd, records[i].shape};
        for (const auto& v : variants) {
            const bool from_mu = v.init == LatentRule::mu;
            const Array& start = v.space == refine::Space::latent ? (from_mu ? mu : zero) : (from_mu ? x_mu : x_zero);
            const std::span<const double> x0(start.ptr() + i * d, d);
            const auto res = v.space == refine::Space::latent ? refine::refine_latent(flow, skel, obs, x0, lcfg, w)
                                                              : refine::refine_pose(flow, skel, obs, x0, lcfg, w);
            auto t = trace_rows(skel, res, records[i], v.space, rule_name(v.init), i);
            rows.insert(rows.end(), t.begin(), t.end());
        }
    }
    return rows;
}

std::string traces_to_csv(const std::vector<RefineTraceRow>& rows) {
    std::string out = std::string(kTraceHeader) + "\n";
    for (const auto& r : rows) {
        out += r.space + "," + r.init_rule + "," + std::to_string(r.instance) + "," + std::to_string(r.iteration) +
               "," + format_double(r.mpjpe_upper) + "," + format_double(r.mpjpe_full) + "\n";
    }
    return out;
}

void write_traces(const std::filesystem::path& path, const std::vector<RefineTraceRow>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << traces_to_csv(rows);
}

std::vector<RefineTraceRow> read_traces(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open trace file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kTraceHeader) throw DataError("trace " + path.string() + ": bad header");
    std::vector<RefineTraceRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 6 || f[0].empty() || f[1].empty()) {
            throw DataError("trace " + path.string() + ": malformed row '" + line + "'");
        }
        RefineTraceRow r{f[0], f[1], parse_number<std::size_t>(f[2], "instance"),
                         parse_number<std::size_t>(f[3], "iteration"), parse_number<double>(f[4], "mpjpe_upper"),
                         parse_number<double>(f[5], "mpjpe_full")};
        if (!std::isfinite(r.mpjpe_upper) || !std::isfinite(r.mpjpe_full) || r.mpjpe_upper < 0.0 ||
            r.mpjpe_full < 0.0) {
            throw DataError("trace " + path.string() + ": invalid MPJPE in '" + line + "'");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<CurvePoint> aggregate_traces(const std::vector<RefineTraceRow>& rows) {
    if (rows.empty()) throw UsageError("report: no trace rows");
    std::map<std::tuple<std::string, std::string, std::size_t>, CurvePoint> acc;
    for (const auto& r : rows) {
        auto& p = acc[{r.space, r.init_rule, r.iteration}];
        p.space = r.space;
        p.init_rule = r.init_rule;
        p.iteration = r.iteration;
        p.mpjpe_upper += r.mpjpe_upper;
        p.mpjpe_full += r.mpjpe_full;
        ++p.count;
    }
    std::vector<CurvePoint> out;
    for (auto& [key, p] : acc) {
        p.mpjpe_upper /= static_cast<double>(p.count);
        p.mpjpe_full /= static_cast<double>(p.count);
        out.push_back(p);
    }
    return out;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "space,init_rule,iteration,mpjpe_upper,mpjpe_full,count\n";
    for (const auto& p : curve) {
        out += p.space + "," + p.init_rule + "," + std::to_string(p.iteration) + "," + format_double(p.mpjpe_upper) +
               "," + format_double(p.mpjpe_full) + "," + std::to_string(p.count) + "\n";
    }
    return out;
}

}  // namespace flag::eval
