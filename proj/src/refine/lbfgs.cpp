#include "flag/refine/lbfgs.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace flag::refine {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

struct Point {
    double a = 0.0, f = 0.0, dg = 0.0;
    std::vector<double> x, g;
};

struct Pair {
    std::vector<double> s, y;
    double rho;
};

class LineSearch {
public:
    LineSearch(const Objective& obj, const LbfgsConfig& cfg, const Point& origin, std::span<const double> dir,
               std::size_t& evaluations)
        : obj_(obj), cfg_(cfg), origin_(origin), dir_(dir), evaluations_(evaluations), best_(origin) {}

    // Strong-Wolfe point along the direction, or nullopt-like failure.
    bool run(double a_init, Point& out) {
        Point prev = origin_;
        double a = a_init;
        for (std::size_t i = 0; i < cfg_.max_line_search; ++i) {
            Point p = eval(a);
            if (!armijo(p) || (i > 0 && p.f >= prev.f)) return zoom(prev, p, out);
            if (curvature(p)) {
                out = std::move(p);
                return true;
            }
            if (p.dg >= 0.0) return zoom(p, prev, out);
            prev = std::move(p);
            a *= 2.0;
        }
        return false;
    }

    const Point& best() const { return best_; }

    bool armijo(const Point& p) const { return p.f <= origin_.f + cfg_.c1 * p.a * origin_.dg; }
    bool curvature(const Point& p) const { return std::abs(p.dg) <= -cfg_.c2 * origin_.dg; }

private:
    Point eval(double a) {
        Point p;
        p.a = a;
        p.x.resize(origin_.x.size());
        p.g.assign(origin_.x.size(), 0.0);
        for (std::size_t i = 0; i < p.x.size(); ++i) p.x[i] = origin_.x[i] + a * dir_[i];
        ++evaluations_;
        try {
            p.f = obj_(p.x, p.g);
        } catch (const NumericError&) {
            p.f = kInf;
        }
        if (!std::isfinite(p.f) || !std::all_of(p.g.begin(), p.g.end(), [](double v) { return std::isfinite(v); })) {
            p.f = kInf;
            p.dg = 0.0;
            return p;
        }
        p.dg = dot(p.g, dir_);
        if (p.f < best_.f) best_ = p;
        return p;
    }

    static double interpolate(const Point& lo, const Point& hi) {
        const double left = std::min(lo.a, hi.a), right = std::max(lo.a, hi.a);
        const double width = right - left;
        const double mid = 0.5 * (left + right);
        if (!std::isfinite(lo.f) || !std::isfinite(hi.f)) return mid;
        // Minimizer of the cubic matching values and slopes at both ends.
        const double d1 = lo.dg + hi.dg - 3.0 * (lo.f - hi.f) / (lo.a - hi.a);
        const double disc = d1 * d1 - lo.dg * hi.dg;
        if (disc < 0.0) return mid;
        const double d2 = std::copysign(std::sqrt(disc), hi.a - lo.a);
        const double t = hi.a - (hi.a - lo.a) * (hi.dg + d2 - d1) / (hi.dg - lo.dg + 2.0 * d2);
        if (!std::isfinite(t) || t < left + 0.1 * width || t > right - 0.1 * width) return mid;
        return t;
    }

    bool zoom(Point lo, Point hi, Point& out) {
        for (std::size_t j = 0; j < cfg_.max_line_search; ++j) {
            if (std::abs(hi.a - lo.a) <= 1e-16 * std::max(1.0, std::abs(lo.a))) return false;
            Point p = eval(interpolate(lo, hi));
            if (!armijo(p) || p.f >= lo.f) {
                hi = std::move(p);
                continue;
            }
            if (curvature(p)) {
                out = std::move(p);
                return true;
            }
            if (p.dg * (hi.a - lo.a) >= 0.0) hi = lo;
            lo = std::move(p);
        }
        return false;
    }

    const Objective& obj_;
    const LbfgsConfig& cfg_;
    const Point& origin_;
    std::span<const double> dir_;
    std::size_t& evaluations_;
    Point best_;
};

std::vector<double> two_loop(const std::deque<Pair>& hist, std::span<const double> g) {
    std::vector<double> q(g.begin(), g.end());
    std::vector<double> alpha(hist.size());
    for (std::size_t i = hist.size(); i-- > 0;) {
        alpha[i] = hist[i].rho * dot(hist[i].s, q);
        for (std::size_t k = 0; k < q.size(); ++k) q[k] -= alpha[i] * hist[i].y[k];
    }
    const Pair& last = hist.back();
    const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
    for (double& v : q) v *= gamma;
    for (std::size_t i = 0; i < hist.size(); ++i) {
        const double beta = hist[i].rho * dot(hist[i].y, q);
        for (std::size_t k = 0; k < q.size(); ++k) q[k] += hist[i].s[k] * (alpha[i] - beta);
    }
    for (double& v : q) v = -v;
    return q;
}

}  // namespace

void LbfgsConfig::validate() const {
    if (!(c1 > 0.0 && c1 < c2 && c2 < 1.0)) throw UsageError("lbfgs: need 0 < c1 < c2 < 1");
    if (history == 0) throw UsageError("lbfgs: history must be at least 1");
    if (!(initial_step > 0.0)) throw UsageError("lbfgs: initial step must be positive");
    if (max_line_search == 0) throw UsageError("lbfgs: max_line_search must be positive");
}

bool LbfgsResult::wolfe_ok() const {
    return std::all_of(steps.begin(), steps.end(), [](const WolfeStep& s) { return s.sufficient_decrease && s.curvature; });
}

LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsConfig& cfg, const IterateHook& hook) {
    cfg.validate();
    LbfgsResult res;
    Point cur;
    cur.x = std::move(x0);
    cur.g.assign(cur.x.size(), 0.0);
    cur.f = f(cur.x, cur.g);
    res.evaluations = 1;
    if (!std::isfinite(cur.f)) throw NumericError("lbfgs: objective is not finite at the starting point");
    res.trace.push_back(cur.f);
    if (hook) hook(0, cur.x);

    std::deque<Pair> hist;
    if (inf_norm(cur.g) <= cfg.gradient_tolerance) {
        res.converged = true;
    }
    for (std::size_t k = 1; k <= cfg.max_iterations && !res.converged; ++k) {
        std::vector<double> d;
        if (hist.empty()) {
            d = cur.g;
            for (double& v : d) v = -v;
        } else {
            d = two_loop(hist, cur.g);
        }
        cur.a = 0.0;
        cur.dg = dot(cur.g, d);
        if (!(cur.dg < 0.0)) {
            hist.clear();
            d = cur.g;
            for (double& v : d) v = -v;
            cur.dg = dot(cur.g, d);
        }
        double a0 = cfg.initial_step;
        if (hist.empty()) {
            double l1 = 0.0;
            for (double v : cur.g) l1 += std::abs(v);
            a0 *= std::min(1.0, 1.0 / l1);
        }

        LineSearch ls(f, cfg, cur, d, res.evaluations);
        Point next;
        const bool ok = ls.run(a0, next);
        res.iterations = k;
        if (!ok) {
            res.line_search_failed = true;
            if (ls.best().f < cur.f) cur = ls.best();
            res.trace.push_back(cur.f);
            if (hook) hook(k, cur.x);
            break;
        }
        WolfeStep w;
        w.alpha = next.a;
        w.f0 = cur.f;
        w.f1 = next.f;
        w.dg0 = cur.dg;
        w.dg1 = next.dg;
        w.sufficient_decrease = ls.armijo(next);
        w.curvature = ls.curvature(next);
        res.steps.push_back(w);

        Pair pr{std::vector<double>(cur.x.size()), std::vector<double>(cur.x.size()), 0.0};
        for (std::size_t i = 0; i < cur.x.size(); ++i) {
            pr.s[i] = next.x[i] - cur.x[i];
            pr.y[i] = next.g[i] - cur.g[i];
        }
        const double sy = dot(pr.s, pr.y);
        const double step = inf_norm(pr.s);
        if (sy > 1e-12 * std::sqrt(dot(pr.s, pr.s) * dot(pr.y, pr.y)) && sy > 0.0) {
            pr.rho = 1.0 / sy;
            hist.push_back(std::move(pr));
            if (hist.size() > cfg.history) hist.pop_front();
        }
        cur = std::move(next);
        res.trace.push_back(cur.f);
        if (hook) hook(k, cur.x);
        if (inf_norm(cur.g) <= cfg.gradient_tolerance) res.converged = true;
        if (step <= 1e-16 * std::max(1.0, inf_norm(cur.x))) break;
    }
    res.x = std::move(cur.x);
    res.f = cur.f;
    return res;
}

}  // namespace flag::refine
