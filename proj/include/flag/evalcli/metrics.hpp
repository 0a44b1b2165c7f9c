#pragma once

#include "flag/refine/refine.hpp"
#include "flag/training/train.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace flag::eval {

using ad::Array;

struct Row {
    std::string metric;
    std::string subset;
    double value = 0.0;
    std::size_t count = 0;
};

/// Rows in insertion order; CSV columns metric,subset,value,count,seed,config_hash.
struct MetricsReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<Row> rows;

    /// Throws NumericError for a non-finite value.
    void add(std::string metric, std::string subset, double value, std::size_t count);
    const Row* find(std::string_view metric, std::string_view subset) const;
    double value(std::string_view metric, std::string_view subset) const;

    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;  // sample standard deviation / sqrt(n); 0 for n < 2
    std::size_t n = 0;
};
MeanSe mean_se(std::span<const double> v);
/// Statistics of a[i] - b[i].
MeanSe paired_difference(std::span<const double> a, std::span<const double> b);

enum class Hands { both, left, right, none };
Hands parse_hands(std::string_view s);
const char* hands_name(Hands h);
/// [n, 2] hidden flags (left, right) for the visible set `h`; nullopt for both.
std::optional<Array> hidden_hands(Hands h, std::size_t n);

enum class LatentRule { mu, zero, mlp, sample };
LatentRule parse_rule(std::string_view s);
const char* rule_name(LatentRule r);

struct PoseErrors {
    std::vector<double> upper, full;  // per record, cm
};

/// MPJPE of `poses` ([N, 3J]) against the records' ground truth.
PoseErrors pose_errors(const kin::Skeleton& skel, const Array& poses, const std::vector<data::Record>& records);

/// f(z, c) for every row, in chunks.
Array decode(const flow::FlowModel& flow, const Array& z, const Array& cond, std::size_t chunk = 512);

/// LRA region for every condition, in chunks.
std::pair<Array, Array> infer_region(const lra::LraModel& lra, const Array& cond, Hands hands,
                                     std::size_t chunk = 256);

/// Latent codes chosen by `rule` (sample is not a single code and is rejected).
Array select_latents(LatentRule rule, const Array& cond, std::size_t latent_dim, const lra::LraModel* lra,
                     const train::MlpBaseline* mlp, Hands hands);

/// [n, d] draws from N(0, I).
Array random_latents(std::size_t n, std::size_t d, std::uint64_t seed);

struct SampleSpread {
    PoseErrors errors;                  // every sample of every record
    std::vector<double> joint_std_cm;   // per joint, mean over records
};

/// K draws per record from N(mu, diag(sigma^2)). The per-joint spread is the
/// root mean squared distance of the K joint positions from their mean.
SampleSpread sample_spread(const flow::FlowModel& flow, const kin::Skeleton& skel,
                           const std::vector<data::Record>& records, const Array& mu, const Array& sigma,
                           std::size_t k, std::uint64_t seed);

/// Adds mpjpe_upper_cm / mpjpe_full_cm rows (mean and standard error) for `subset`.
void add_errors(MetricsReport& report, const std::string& subset, const PoseErrors& e);

struct OodSets {
    std::vector<data::Record> gt, manipulated, noise;
};

struct OodSettings {
    std::size_t joints = 4;
    double noise_scale = 0.1;
};

/// Manipulated and pose-like-noise counterparts of every test record. HMD
/// signals are re-derived from the altered poses.
OodSets make_ood_sets(const kin::Skeleton& skel, const data::Dataset& test, const data::Ranges& ranges,
                      std::uint64_t seed, const OodSettings& settings = {});

/// |a - b| / max(a, b); 0 when both are 0. Throws DomainError when max <= 0.
double relative_difference(double nll_ood, double nll_gt);

struct OodResult {
    double nll_gt = 0.0, nll_manipulated = 0.0, nll_noise = 0.0;
    double rd_manipulated = 0.0, rd_noise = 0.0;
    std::size_t count = 0;
};

/// Mean NLL per set; throws UsageError when a set is empty.
double mean_nll(const flow::FlowModel& flow, const std::vector<data::Record>& records);
OodResult ood_eval(const flow::FlowModel& flow, const OodSets& sets);

struct CosineResult {
    double mean_distance = 0.0;
    std::size_t count = 0;
    std::size_t skipped = 0;  // pairs with a zero-norm vector, scored as distance 1
};
/// Mean of 1 - cos(a_i, b_i) over rows.
CosineResult cosine_distance(const Array& a, const Array& b);

struct SinkhornOptions {
    double epsilon = 0.05;
    std::size_t iterations = 200;
    std::size_t batch = 256;
};

/// Entropic optimal transport between uniform point clouds `a` and `b`
/// ([n, D] each) with squared Euclidean cost, in the log domain with epsilon
/// scaling over the first half of the iterations. Returns the transport cost
/// <P, C> of the regularized plan after rounding it onto the exact marginals.
double sinkhorn_cost(const Array& a, const Array& b, double epsilon, std::size_t iterations);

/// Both sets standardized by the column statistics of `oracle`, then split
/// into aligned batches; the result is the size-weighted mean batch cost.
double sinkhorn_distance(const Array& candidate, const Array& oracle, const SinkhornOptions& options = {});

struct RefineTraceRow {
    std::string space;
    std::string init_rule;
    std::size_t instance = 0;
    std::size_t iteration = 0;
    double mpjpe_upper = 0.0;
    double mpjpe_full = 0.0;
};

/// Rows for every checkpoint snapshot of one refinement.
std::vector<RefineTraceRow> trace_rows(const kin::Skeleton& skel, const refine::RefineResult& result,
                                       const data::Record& truth, refine::Space space, const std::string& init_rule,
                                       std::size_t instance);

struct RefineVariant {
    refine::Space space;
    LatentRule init;  // mu or zero; pose space starts from the decoded code
};

/// Latent from mu, latent from zero, pose from the decoded mu.
std::vector<RefineVariant> default_variants();

/// Optimizer and weights from the config's refine section.
refine::LbfgsConfig lbfgs_config(const train::TrainConfig& cfg);
refine::RefineWeights refine_weights(const train::TrainConfig& cfg);

/// Refines every record under every variant; rows are ordered by record,
/// then variant, then iteration.
std::vector<RefineTraceRow> refine_records(const flow::FlowModel& flow, const lra::LraModel& lra,
                                           const kin::Skeleton& skel, const std::vector<data::Record>& records,
                                           const train::TrainConfig& cfg,
                                           const std::vector<RefineVariant>& variants = default_variants());

std::string traces_to_csv(const std::vector<RefineTraceRow>& rows);
void write_traces(const std::filesystem::path& path, const std::vector<RefineTraceRow>& rows);
/// Throws DataError on a malformed file.
std::vector<RefineTraceRow> read_traces(const std::filesystem::path& path);

struct CurvePoint {
    std::string space;
    std::string init_rule;
    std::size_t iteration = 0;
    double mpjpe_upper = 0.0;
    double mpjpe_full = 0.0;
    std::size_t count = 0;
};

/// Mean MPJPE per (space, init_rule, iteration), sorted by that key.
/// Throws UsageError when `rows` is empty.
std::vector<CurvePoint> aggregate_traces(const std::vector<RefineTraceRow>& rows);
std::string curve_to_csv(const std::vector<CurvePoint>& curve);

}  // namespace flag::eval
