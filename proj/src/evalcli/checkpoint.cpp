#include "flag/evalcli/checkpoint.hpp"

#include "flag/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace flag::eval {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return r;
    }
}

std::string payload_bytes(const std::vector<double>& payload) {
    std::string out(payload.size() * 8, '\0');
    for (std::size_t i = 0; i < payload.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &payload[i], 8);
        bits = to_le(bits);
        std::memcpy(out.data() + 8 * i, &bits, 8);
    }
    return out;
}

ModelKind parse_kind(const std::string& s) {
    if (s == "flow") return ModelKind::flow;
    if (s == "lra") return ModelKind::lra;
    if (s == "mlp") return ModelKind::mlp;
    throw DataError("checkpoint: unknown model kind '" + s + "'");
}

Checkpoint load_kind(const std::filesystem::path& path, ModelKind kind, const kin::Skeleton& skel,
                     train::TrainConfig& cfg) {
    Checkpoint c = read_checkpoint(path);
    if (c.kind != kind) {
        throw DataError("checkpoint " + path.string() + " holds a " + kind_name(c.kind) + " model, expected " +
                        kind_name(kind));
    }
    if (c.skeleton_hash != skel.hash_hex()) throw DataError("checkpoint " + path.string() + ": skeleton hash mismatch");
    try {
        cfg = train::TrainConfig::from_json(c.config_json);
    } catch (const UsageError& e) {
        throw DataError("checkpoint " + path.string() + ": bad embedded config: " + e.what());
    }
    return c;
}

void check_flow_digest(const Checkpoint& c, const std::filesystem::path& path, const std::string& flow_digest) {
    if (c.flow_digest != flow_digest) {
        throw DataError("checkpoint " + path.string() + " was trained against a different flow (" + c.flow_digest +
                        " vs " + flow_digest + ")");
    }
}

}  // namespace

const char* kind_name(ModelKind k) {
    switch (k) {
    case ModelKind::flow: return "flow";
    case ModelKind::lra: return "lra";
    case ModelKind::mlp: return "mlp";
    }
    return "?";
}

std::string Checkpoint::digest() const { return train::fnv1a_hex(payload_bytes(payload)); }

const TensorEntry& Checkpoint::entry(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw DataError("checkpoint: missing tensor '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json table = json::array();
    for (const auto& t : ckpt.tensors) {
        table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}, {"count", t.count}});
    }
    const json manifest{{"version", kCheckpointVersion},
                        {"kind", kind_name(ckpt.kind)},
                        {"config", json::parse(ckpt.config_json.empty() ? "{}" : ckpt.config_json)},
                        {"skeleton_hash", ckpt.skeleton_hash},
                        {"flow_digest", ckpt.flow_digest},
                        {"payload_count", ckpt.payload.size()},
                        {"tensors", table}};
    const std::string text = manifest.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out << kCheckpointMagic << '\n';
    const std::uint64_t len = to_le(text.size());
    out.write(reinterpret_cast<const char*>(&len), 8);
    out << text;
    const std::string bytes = payload_bytes(ckpt.payload);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed while writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    const std::string where = "checkpoint " + path.string() + ": ";
    std::string magic(std::strlen(kCheckpointMagic) + 1, '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != std::string(kCheckpointMagic) + "\n") throw DataError(where + "bad magic");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    len = to_le(len);
    if (!in || len > (1u << 30)) throw DataError(where + "truncated header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError(where + "truncated manifest");

    Checkpoint c;
    std::size_t count = 0;
    try {
        const json m = json::parse(text);
        if (m.at("version").get<int>() != kCheckpointVersion) throw DataError(where + "unsupported version");
        c.kind = parse_kind(m.at("kind").get<std::string>());
        c.config_json = m.at("config").dump();
        c.skeleton_hash = m.at("skeleton_hash").get<std::string>();
        c.flow_digest = m.at("flow_digest").get<std::string>();
        count = m.at("payload_count").get<std::size_t>();
        for (const auto& t : m.at("tensors")) {
            TensorEntry e;
            e.name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<ad::Shape>();
            e.offset = t.at("offset").get<std::size_t>();
            e.count = t.at("count").get<std::size_t>();
            c.tensors.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError(where + "malformed manifest: " + e.what());
    }
    // The table must tile the payload exactly, in order.
    std::size_t next = 0;
    for (const auto& t : c.tensors) {
        if (t.offset != next) throw DataError(where + "tensor '" + t.name + "' overlaps or leaves a gap");
        if (ad::shape_size(t.shape) != t.count) throw DataError(where + "tensor '" + t.name + "' shape/count mismatch");
        next += t.count;
    }
    if (next != count) throw DataError(where + "tensor table does not cover the payload");

    std::string bytes(count * 8, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw DataError(where + "truncated payload");
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(where + "trailing bytes after payload");
    c.payload.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, bytes.data() + 8 * i, 8);
        bits = to_le(bits);
        std::memcpy(&c.payload[i], &bits, 8);
    }
    return c;
}

Checkpoint make_checkpoint(ModelKind kind, const train::TrainConfig& cfg, const kin::Skeleton& skel,
                           const std::vector<ad::Parameter*>& tensors, std::string flow_digest) {
    Checkpoint c;
    c.kind = kind;
    c.config_json = cfg.to_json();
    c.skeleton_hash = skel.hash_hex();
    c.flow_digest = std::move(flow_digest);
    for (const auto* p : tensors) {
        TensorEntry e{p->name, p->value.shape(), c.payload.size(), p->value.size()};
        c.payload.insert(c.payload.end(), p->value.vec().begin(), p->value.vec().end());
        c.tensors.push_back(std::move(e));
    }
    return c;
}

void restore_tensors(const Checkpoint& ckpt, const std::vector<ad::Parameter*>& tensors) {
    if (tensors.size() != ckpt.tensors.size()) throw DataError("checkpoint: tensor count does not match the model");
    for (auto* p : tensors) {
        const TensorEntry& e = ckpt.entry(p->name);
        if (e.shape != p->value.shape()) throw DataError("checkpoint: tensor '" + p->name + "' has the wrong shape");
        std::vector<double> v(ckpt.payload.begin() + static_cast<std::ptrdiff_t>(e.offset),
                              ckpt.payload.begin() + static_cast<std::ptrdiff_t>(e.offset + e.count));
        try {
            p->value = ad::Array(e.shape, std::move(v));
        } catch (const NumericError&) {
            throw DataError("checkpoint: tensor '" + p->name + "' holds non-finite values");
        }
    }
}

namespace {

template <class M>
std::vector<ad::Parameter*> all_tensors(M& model) {
    auto t = model.parameters();
    auto b = model.buffers();
    t.insert(t.end(), b.begin(), b.end());
    return t;
}

}  // namespace

void save_flow(const std::filesystem::path& path, flow::FlowModel& model, const train::TrainConfig& cfg,
               const kin::Skeleton& skel) {
    write_checkpoint(path, make_checkpoint(ModelKind::flow, cfg, skel, all_tensors(model)));
}

void save_lra(const std::filesystem::path& path, lra::LraModel& model, const train::TrainConfig& cfg,
              const kin::Skeleton& skel, const std::string& flow_digest) {
    write_checkpoint(path, make_checkpoint(ModelKind::lra, cfg, skel, all_tensors(model), flow_digest));
}

void save_mlp(const std::filesystem::path& path, train::MlpBaseline& model, const train::TrainConfig& cfg,
              const kin::Skeleton& skel, const std::string& flow_digest) {
    write_checkpoint(path, make_checkpoint(ModelKind::mlp, cfg, skel, all_tensors(model), flow_digest));
}

LoadedFlow load_flow(const std::filesystem::path& path, const kin::Skeleton& skel) {
    train::TrainConfig cfg;
    const Checkpoint c = load_kind(path, ModelKind::flow, skel, cfg);
    LoadedFlow out{flow::FlowModel(cfg.flow, 0), cfg, c.digest()};
    restore_tensors(c, all_tensors(out.model));
    return out;
}

LoadedLra load_lra(const std::filesystem::path& path, const kin::Skeleton& skel, const std::string& flow_digest) {
    train::TrainConfig cfg;
    const Checkpoint c = load_kind(path, ModelKind::lra, skel, cfg);
    check_flow_digest(c, path, flow_digest);
    LoadedLra out{lra::LraModel(cfg.lra, 0), cfg};
    restore_tensors(c, all_tensors(out.model));
    return out;
}

LoadedMlp load_mlp(const std::filesystem::path& path, const kin::Skeleton& skel, const std::string& flow_digest) {
    train::TrainConfig cfg;
    const Checkpoint c = load_kind(path, ModelKind::mlp, skel, cfg);
    check_flow_digest(c, path, flow_digest);
    LoadedMlp out{train::MlpBaseline(cfg.flow.cond_dim, cfg.mlp_hidden, cfg.flow.pose_dim, 0), cfg};
    restore_tensors(c, all_tensors(out.model));
    return out;
}

}  // namespace flag::eval
