#pragma once

#include "flag/training/train.hpp"

#include <filesystem>
#include <string>

namespace flag::eval {

enum class ModelKind { flow, lra, mlp };
const char* kind_name(ModelKind k);

inline constexpr const char* kCheckpointMagic = "FLAGCKPT1";
inline constexpr int kCheckpointVersion = 1;

struct TensorEntry {
    std::string name;
    ad::Shape shape;
    std::size_t offset = 0;  // in elements from the start of the payload
    std::size_t count = 0;
};

/// Everything in a checkpoint file.
///
/// Layout: the magic, a newline, the manifest length as a little-endian
/// uint64, the manifest as JSON, then the payload of little-endian float64
/// values described by the manifest's tensor table.
struct Checkpoint {
    ModelKind kind = ModelKind::flow;
    std::string config_json;
    std::string skeleton_hash;
    std::string flow_digest;  // digest of the flow a stage-2 model was trained against
    std::vector<TensorEntry> tensors;
    std::vector<double> payload;

    /// FNV-1a over the payload bytes.
    std::string digest() const;
    const TensorEntry& entry(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws DataError on a bad magic, a truncated or oversized payload, or an
/// inconsistent tensor table.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Snapshot of named tensors in order.
Checkpoint make_checkpoint(ModelKind kind, const train::TrainConfig& cfg, const kin::Skeleton& skel,
                           const std::vector<ad::Parameter*>& tensors, std::string flow_digest = {});
/// Copies checkpoint tensors into `tensors` by name; every name must match
/// with the same shape.
void restore_tensors(const Checkpoint& ckpt, const std::vector<ad::Parameter*>& tensors);

void save_flow(const std::filesystem::path& path, flow::FlowModel& model, const train::TrainConfig& cfg,
               const kin::Skeleton& skel);
void save_lra(const std::filesystem::path& path, lra::LraModel& model, const train::TrainConfig& cfg,
              const kin::Skeleton& skel, const std::string& flow_digest);
void save_mlp(const std::filesystem::path& path, train::MlpBaseline& model, const train::TrainConfig& cfg,
              const kin::Skeleton& skel, const std::string& flow_digest);

struct LoadedFlow {
    flow::FlowModel model;
    train::TrainConfig config;
    std::string digest;
};
struct LoadedLra {
    lra::LraModel model;
    train::TrainConfig config;
};
struct LoadedMlp {
    train::MlpBaseline model;
    train::TrainConfig config;
};

/// Loaders verify the kind and the skeleton hash; stage-2 loaders also check
/// that the model was trained against `flow_digest`.
LoadedFlow load_flow(const std::filesystem::path& path, const kin::Skeleton& skel);
LoadedLra load_lra(const std::filesystem::path& path, const kin::Skeleton& skel, const std::string& flow_digest);
LoadedMlp load_mlp(const std::filesystem::path& path, const kin::Skeleton& skel, const std::string& flow_digest);

}  // namespace flag::eval
