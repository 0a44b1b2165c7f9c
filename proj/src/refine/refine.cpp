#include "flag/refine/refine.hpp"

#include "flag/diffmath/ops.hpp"
#include "flag/error.hpp"
#include "flag/kinematics/dual.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flag::refine {

using ad::Array;
using ad::Tape;
using ad::Var;

namespace {

struct Target {
    std::array<kin::Mat3<double>, kin::kTrackedCount> rotation;
    std::array<kin::Vec3<double>, kin::kTrackedCount> position;
};

Target decode_target(const kin::HmdSignal& obs) {
    Target t;
    for (std::size_t k = 0; k < kin::kTrackedCount; ++k) {
        t.rotation[k] = kin::rot6d_decode(obs.rot6d(k));
        t.position[k] = obs.position(k);
    }
    return t;
}

template <class T>
T cost_of(const kin::Skeleton& skel, std::span<const T> theta, const kin::ShapeParams& shape, const Target& target,
          std::vector<kin::Mat3<T>>& rot, std::vector<kin::Vec3<T>>& pos) {
    kin::forward_kinematics_t(skel, theta, shape, rot, pos);
    T c(0.0);
    for (std::size_t k = 0; k < kin::kTrackedCount; ++k) {
        const std::size_t j = skel.tracked()[k];
        for (int a = 0; a < 3; ++a) {
            const T dp = pos[j][a] - target.position[k][a];
            c = c + dp * dp;
            for (int b = 0; b < 3; ++b) {
                const T dr = rot[j][a][b] - target.rotation[k][a][b];
                c = c + dr * dr;
            }
        }
    }
    return c;
}

// Joints whose rotation moves at least one tracked joint.
std::vector<bool> tracked_ancestors(const kin::Skeleton& skel) {
    std::vector<bool> on(skel.joint_count(), false);
    for (auto t : skel.tracked())
        for (int j = static_cast<int>(t); j >= 0; j = skel.parent(static_cast<std::size_t>(j))) on[j] = true;
    return on;
}

void check_observation(const flow::FlowModel& flow, const kin::Skeleton& skel, std::size_t n) {
    if (flow.config().pose_dim != skel.pose_dim()) throw ShapeError("refine: flow does not match the skeleton");
    if (n != skel.pose_dim()) throw ShapeError("refine: initial point has the wrong dimension");
}

Array condition_of(const Observation& obs) {
    const auto c = kin::condition_vector(obs.hmd, obs.shape);
    return Array({1, c.size()}, std::vector<double>(c.begin(), c.end()));
}

// Records snapshots at iteration 0 and at each checkpoint.
class Snapshotter {
public:
    Snapshotter(const LbfgsConfig& cfg, std::function<kin::Pose(std::span<const double>)> decode)
        : decode_(std::move(decode)) {
        points_.push_back(0);
        for (auto c : cfg.eval_checkpoints)
            if (c > 0 && std::find(points_.begin(), points_.end(), c) == points_.end()) points_.push_back(c);
        std::sort(points_.begin(), points_.end());
    }

    IterateHook hook() {
        return [this](std::size_t it, std::span<const double> x) {
            last_.assign(x.begin(), x.end());
            while (snaps_.size() < points_.size() && points_[snaps_.size()] == it) snaps_.push_back(decode_(x));
        };
    }

    void finish(RefineResult& r) {
        while (snaps_.size() < points_.size()) snaps_.push_back(decode_(last_));
        r.checkpoints = points_;
        r.snapshots = std::move(snaps_);
    }

private:
    std::function<kin::Pose(std::span<const double>)> decode_;
    std::vector<std::size_t> points_;
    std::vector<kin::Pose> snaps_;
    std::vector<double> last_;
};

}  // namespace

double data_cost(std::span<const double> theta, const kin::HmdSignal& observed, const kin::Skeleton& skel,
                 const kin::ShapeParams& shape) {
    std::vector<kin::Mat3<double>> rot;
    std::vector<kin::Vec3<double>> pos;
    return cost_of<double>(skel, theta, shape, decode_target(observed), rot, pos);
}

double data_cost(std::span<const double> theta, const kin::HmdSignal& observed, const kin::Skeleton& skel,
                 const kin::ShapeParams& shape, std::span<double> grad) {
    if (grad.size() != theta.size()) throw ShapeError("data_cost: gradient buffer has the wrong length");
    const Target target = decode_target(observed);
    std::vector<kin::Mat3<double>> rot;
    std::vector<kin::Vec3<double>> pos;
    const double value = cost_of<double>(skel, theta, shape, target, rot, pos);

    const auto relevant = tracked_ancestors(skel);
    std::vector<kin::Dual> dual(theta.begin(), theta.end());
    std::vector<kin::Mat3<kin::Dual>> drot;
    std::vector<kin::Vec3<kin::Dual>> dpos;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        if (!relevant[i / 3]) {
            grad[i] = 0.0;
            continue;
        }
        dual[i].d = 1.0;
        grad[i] = cost_of<kin::Dual>(skel, dual, shape, target, drot, dpos).d;
        dual[i].d = 0.0;
    }
    return value;
}

const char* space_name(Space s) { return s == Space::latent ? "latent" : "pose"; }

void RefineWeights::validate() const {
    for (double v : {lambda_data, lambda_prior, lambda_r}) {
        if (!(v >= 0.0)) throw UsageError("refine: weights must be non-negative");
    }
    if (!(r_smoothing > 0.0)) throw UsageError("refine: r_smoothing must be positive");
}

RefineResult refine_latent(const flow::FlowModel& flow, const kin::Skeleton& skel, const Observation& obs,
                           std::span<const double> z0, const LbfgsConfig& cfg, const RefineWeights& w) {
    w.validate();
    check_observation(flow, skel, z0.size());
    const Array cond = condition_of(obs);
    const std::size_t d = z0.size();
    const std::vector<double> anchor(z0.begin(), z0.end());

    auto decode = [&](std::span<const double> z) {
        return flow.forward(Array({1, d}, std::vector<double>(z.begin(), z.end())), cond).vec();
    };
    auto objective = [&](std::span<const double> z, std::span<double> grad) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double value = 0.0;
        if (w.lambda_data > 0.0) {
            Tape tape;
            const Var zv = tape.leaf(Array({1, d}, std::vector<double>(z.begin(), z.end())), true);
            const Var x = flow.forward(tape, zv, tape.constant(cond), false);
            std::vector<double> gx(d);
            value += w.lambda_data * data_cost(x.value().vec(), obs.hmd, skel, obs.shape, gx);
            for (double& g : gx) g *= w.lambda_data;
            tape.backward(ad::sum_all(ad::mul(x, tape.constant(Array({1, d}, std::move(gx))))));
            const Array gz = tape.grad(zv);
            for (std::size_t i = 0; i < d; ++i) grad[i] += gz[i];
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            value += w.lambda_prior * 0.5 * z[i] * z[i];
            grad[i] += w.lambda_prior * z[i];
            sq += (z[i] - anchor[i]) * (z[i] - anchor[i]);
        }
        value += w.lambda_prior * 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
        if (w.lambda_r > 0.0) {
            const double s = w.r_smoothing;
            const double r = std::sqrt(sq + s * s);
            value += w.lambda_r * (r - s);
            for (std::size_t i = 0; i < d; ++i) grad[i] += w.lambda_r * (z[i] - anchor[i]) / r;
        }
        return value;
    };

    Snapshotter snap(cfg, [&](std::span<const double> z) { return kin::Pose(decode(z)); });
    RefineResult res;
    res.opt = lbfgs_minimize(objective, anchor, cfg, snap.hook());
    res.z = res.opt.x;
    res.pose = kin::Pose(decode(res.z));
    snap.finish(res);
    return res;
}

RefineResult refine_pose(const flow::FlowModel& flow, const kin::Skeleton& skel, const Observation& obs,
                         std::span<const double> x0, const LbfgsConfig& cfg, const RefineWeights& w) {
    w.validate();
    check_observation(flow, skel, x0.size());
    const Array cond = condition_of(obs);
    const std::size_t d = x0.size();

    auto objective = [&](std::span<const double> x, std::span<double> grad) {
        double value = 0.0;
        if (w.lambda_data > 0.0) {
            value += w.lambda_data * data_cost(x, obs.hmd, skel, obs.shape, grad);
            for (double& g : grad) g *= w.lambda_data;
        } else {
            std::fill(grad.begin(), grad.end(), 0.0);
        }
        if (w.lambda_prior > 0.0) {
            Tape tape;
            const Var xv = tape.leaf(Array({1, d}, std::vector<double>(x.begin(), x.end())), true);
            const Var logp = flow.log_prob(tape, xv, tape.constant(cond), false).logp;
            value -= w.lambda_prior * logp.value()[0];
            tape.backward(ad::sum_all(logp));
            const Array gx = tape.grad(xv);
            for (std::size_t i = 0; i < d; ++i) grad[i] -= w.lambda_prior * gx[i];
        }
        return value;
    };

    Snapshotter snap(cfg, [](std::span<const double> x) { return kin::Pose(std::vector<double>(x.begin(), x.end())); });
    RefineResult res;
    res.opt = lbfgs_minimize(objective, std::vector<double>(x0.begin(), x0.end()), cfg, snap.hook());
    res.pose = kin::Pose(res.opt.x);
    snap.finish(res);
    return res;
}

}  // namespace flag::refine
