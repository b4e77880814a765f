// Reverse-mode gradient engine. A Tape records a Wengert list of scalar
// operations with precomputed local partials, plus "fused" ops (the MLP
// kernels) that carry their own batched backward closures. Var carries its
// current value inline, so the same templated geometry code runs on plain
// scalars or on the tape; constants never allocate tape nodes.
//
// Gradient accumulation order is fixed (a single reverse sweep per tape,
// tapes merged in a fixed order by the caller), so gradients are bitwise
// deterministic across runs.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mgnerf/errors.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/rng.hpp"

namespace mgnerf {

template <class R> class Tape;

template <class R> struct GradBuffers;

template <class R>
struct Var {
    Tape<R>* t = nullptr;
    R v{};
    int32_t i = -1;  // node index, -1 for constants

    Var() = default;
    Var(double c) : v(R(c)) {}  // implicit: plain numbers are constants
    Var(Tape<R>* tape, R value, int32_t idx) : t(tape), v(value), i(idx) {}

    bool constant() const { return i < 0; }

    friend Var operator+(const Var& a, const Var& b) {
        Tape<R>* t = a.t ? a.t : b.t;
        R v = a.v + b.v;
        if (!t) return Var(double(v));
        return t->node(v, a.i, R(1), b.i, R(1));
    }
    friend Var operator-(const Var& a, const Var& b) {
        Tape<R>* t = a.t ? a.t : b.t;
        R v = a.v - b.v;
        if (!t) return Var(double(v));
        return t->node(v, a.i, R(1), b.i, R(-1));
    }
    friend Var operator-(const Var& a) {
        if (!a.t) return Var(double(-a.v));
        return a.t->node(-a.v, a.i, R(-1), -1, R(0));
    }
    friend Var operator*(const Var& a, const Var& b) {
        Tape<R>* t = a.t ? a.t : b.t;
        R v = a.v * b.v;
        if (!t) return Var(double(v));
        return t->node(v, a.i, b.v, b.i, a.v);
    }
    friend Var operator/(const Var& a, const Var& b) {
        Tape<R>* t = a.t ? a.t : b.t;
        R inv = R(1) / b.v;
        R v = a.v * inv;
        if (!t) return Var(double(v));
        return t->node(v, a.i, inv, b.i, -v * inv);
    }
    Var& operator+=(const Var& o) { *this = *this + o; return *this; }
    Var& operator-=(const Var& o) { *this = *this - o; return *this; }
    Var& operator*=(const Var& o) { *this = *this * o; return *this; }
};

template <class R> inline double value_of(const Var<R>& x) { return double(x.v); }

template <class R> Var<R> sqrt(const Var<R>& a) {
    using std::sqrt;
    R v = sqrt(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, R(0.5) / v, -1, R(0));
}
template <class R> Var<R> exp(const Var<R>& a) {
    using std::exp;
    R v = exp(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, v, -1, R(0));
}
template <class R> Var<R> log(const Var<R>& a) {
    using std::log;
    R v = log(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, R(1) / a.v, -1, R(0));
}
template <class R> Var<R> sin(const Var<R>& a) {
    using std::cos;
    using std::sin;
    R v = sin(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, cos(a.v), -1, R(0));
}
template <class R> Var<R> cos(const Var<R>& a) {
    using std::cos;
    using std::sin;
    R v = cos(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, -sin(a.v), -1, R(0));
}

// Plain-scalar activations, shared by the network kernels.
template <class R> R relu_value(R x) { return x > R(0) ? x : R(0); }
template <class R> R softplus_value(R x) {
    // log1p(exp(x)) with the linear tail for large x.
    return x > R(30) ? x : R(std::log1p(std::exp(double(x))));
}
template <class R> R sigmoid_value(R x) { return R(1) / (R(1) + R(std::exp(-double(x)))); }
template <class R> R softplus_inverse(R y) { return R(std::log(std::expm1(double(y)))); }

template <class R> Var<R> relu(const Var<R>& a) {
    if (!a.t) return Var<R>(double(relu_value(a.v)));
    bool on = a.v > R(0);
    return a.t->node(on ? a.v : R(0), a.i, on ? R(1) : R(0), -1, R(0));
}
template <class R> Var<R> softplus(const Var<R>& a) {
    R v = softplus_value(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, sigmoid_value(a.v), -1, R(0));
}
template <class R> Var<R> sigmoid(const Var<R>& a) {
    R v = sigmoid_value(a.v);
    if (!a.t) return Var<R>(double(v));
    return a.t->node(v, a.i, v * (R(1) - v), -1, R(0));
}

// ---------------------------------------------------------------------------
// Parameter storage and gradient buffers.

template <class R>
struct ParamStore {
    struct Array {
        std::string name;
        std::vector<R> w;        // values
        std::vector<R> m, v;     // Adam moments
    };
    std::vector<Array> arrays;
    int64_t step = 0;

    int add_array(const std::string& name, std::vector<R> init) {
        Array a;
        a.name = name;
        a.m.assign(init.size(), R(0));
        a.v.assign(init.size(), R(0));
        a.w = std::move(init);
        arrays.push_back(std::move(a));
        return int(arrays.size()) - 1;
    }

    int find(const std::string& name) const {
        for (size_t i = 0; i < arrays.size(); ++i)
            if (arrays[i].name == name) return int(i);
        return -1;
    }

    size_t total_params() const {
        size_t n = 0;
        for (const auto& a : arrays) n += a.w.size();
        return n;
    }
};

template <class R>
struct GradBuffers {
    std::vector<std::vector<R>> g;

    template <class R2>
    void init_like(const ParamStore<R2>& store) {
        g.resize(store.arrays.size());
        for (size_t i = 0; i < g.size(); ++i) g[i].assign(store.arrays[i].w.size(), R(0));
    }
    void zero() {
        for (auto& a : g)
            std::fill(a.begin(), a.end(), R(0));
    }
    void add(int array, int offset, R val) { g[size_t(array)][size_t(offset)] += val; }
    R* data(int array) { return g[size_t(array)].data(); }
    void merge(const GradBuffers& o) {
        for (size_t a = 0; a < g.size(); ++a)
            for (size_t i = 0; i < g[a].size(); ++i) g[a][i] += o.g[a][i];
    }
};

// ---------------------------------------------------------------------------
// The tape.

template <class R>
class Tape {
public:
    Var<R> node(R value, int32_t p0, R d0, int32_t p1, R d1) {
        ents_.push_back({p0, p1, d0, d1});
        return Var<R>(this, value, int32_t(ents_.size()) - 1);
    }

    // Parameter leaf: its gradient lands in (array, offset) of the sink.
    Var<R> leaf(R value, int array, int offset) {
        ents_.push_back({-1, -1, R(0), R(0)});
        leaves_.push_back({int32_t(ents_.size()) - 1, array, offset});
        return Var<R>(this, value, int32_t(ents_.size()) - 1);
    }

    Var<R> constant(double c) { return Var<R>(c); }

    // Contiguous parentless nodes holding the outputs of a fused op.
    std::vector<Var<R>> output_slots(const R* values, int n) {
        std::vector<Var<R>> out(static_cast<size_t>(n));
        for (int k = 0; k < n; ++k) {
            ents_.push_back({-1, -1, R(0), R(0)});
            out[size_t(k)] = Var<R>(this, values[k], int32_t(ents_.size()) - 1);
        }
        return out;
    }

    // Registers the backward closure of a fused op; it fires when the reverse
    // sweep reaches the op's last output node, at which point every output
    // gradient is final.
    void push_fused(std::function<void(Tape&, GradBuffers<R>&)> back) {
        fused_.push_back({int32_t(ents_.size()) - 1, std::move(back)});
    }

    R node_grad(int32_t i) const { return grad_[size_t(i)]; }
    void accumulate_grad(int32_t i, R g) { grad_[size_t(i)] += g; }

    size_t size() const { return ents_.size(); }

    void backward(const Var<R>& root, GradBuffers<R>& sink) {
        grad_.assign(ents_.size(), R(0));
        if (root.i >= 0) grad_[size_t(root.i)] = R(1);
        size_t fi = fused_.size();
        for (int32_t i = int32_t(ents_.size()) - 1; i >= 0; --i) {
            while (fi > 0 && fused_[fi - 1].trigger == i) {
                --fi;
                fused_[fi].back(*this, sink);
            }
            R g = grad_[size_t(i)];
            if (g == R(0)) continue;
            const Ent& e = ents_[size_t(i)];
            if (e.p0 >= 0) grad_[size_t(e.p0)] += e.d0 * g;
            if (e.p1 >= 0) grad_[size_t(e.p1)] += e.d1 * g;
        }
        for (const Leaf& l : leaves_) sink.add(l.array, l.offset, grad_[size_t(l.node)]);
    }

    void clear() {
        ents_.clear();
        grad_.clear();
        leaves_.clear();
        fused_.clear();
    }

private:
    struct Ent {
        int32_t p0, p1;
        R d0, d1;
    };
    struct Leaf {
        int32_t node;
        int32_t array, offset;
    };
    struct Fused {
        int32_t trigger;
        std::function<void(Tape&, GradBuffers<R>&)> back;
    };
    std::vector<Ent> ents_;
    std::vector<R> grad_;
    std::vector<Leaf> leaves_;
    std::vector<Fused> fused_;
};

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One Adam step with per-array learning rates. Arrays with zero gradient keep
// their values bit-for-bit only while their moments are zero; as usual the
// moments themselves always decay. `active` (when given) skips arrays
// entirely: the trainer uses it so a frame's pose only integrates momentum on
// the steps that actually visit that frame.
template <class R>
void adam_step(ParamStore<R>& store, const GradBuffers<R>& grads,
               const std::vector<double>& lr_per_array, const AdamConfig& cfg = {},
               const std::vector<bool>& active = {}) {
    if (grads.g.size() != store.arrays.size() || lr_per_array.size() != store.arrays.size())
        throw ArgumentError("adam_step: gradient/lr layout does not match store");
    if (!active.empty() && active.size() != store.arrays.size())
        throw ArgumentError("adam_step: active mask layout does not match store");
    store.step += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(store.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(store.step));
    for (size_t a = 0; a < store.arrays.size(); ++a) {
        if (!active.empty() && !active[a]) continue;
        auto& arr = store.arrays[a];
        if (grads.g[a].size() != arr.w.size())
            throw ArgumentError("adam_step: gradient shape mismatch for " + arr.name);
        const R b1 = R(cfg.beta1), b2 = R(cfg.beta2);
        const R lr = R(lr_per_array[a]), eps = R(cfg.eps);
        const R ic1 = R(1.0 / c1), ic2 = R(1.0 / c2);
        for (size_t i = 0; i < arr.w.size(); ++i) {
            R g = grads.g[a][i];
            arr.m[i] = b1 * arr.m[i] + (R(1) - b1) * g;
            arr.v[i] = b2 * arr.v[i] + (R(1) - b2) * g * g;
            R mhat = arr.m[i] * ic1;
            R vhat = arr.v[i] * ic2;
            using std::sqrt;
            arr.w[i] -= lr * mhat / (sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference audit.

struct FdReport {
    double max_rel_err = 0.0;
    int checked = 0;
    std::string worst_array;
    int worst_index = -1;
    double worst_ad = 0.0, worst_fd = 0.0;

    bool passed(double tol) const { return max_rel_err < tol; }
};

// Central differences against a caller-supplied analytic gradient, over a
// random subset of coordinates. `eval` must be pure in the store contents.
// Relative error uses an absolute floor of 1e-6 so coordinates with genuinely
// tiny gradients do not divide by zero.
template <class Eval>
FdReport finite_diff_check(ParamStore<double>& store, Eval&& eval,
                           const GradBuffers<double>& analytic, double h, int n_coords,
                           uint64_t seed, const std::vector<int>& arrays = {}) {
    std::vector<int> which = arrays;
    if (which.empty())
        for (size_t a = 0; a < store.arrays.size(); ++a) which.push_back(int(a));

    std::vector<std::pair<int, int>> coords;
    Rng rng(seed);
    size_t total = 0;
    for (int a : which) total += store.arrays[size_t(a)].w.size();
    for (int k = 0; k < n_coords; ++k) {
        uint64_t pick = rng.below(total);
        for (int a : which) {
            size_t n = store.arrays[size_t(a)].w.size();
            if (pick < n) { coords.push_back({a, int(pick)}); break; }
            pick -= n;
        }
    }

    FdReport rep;
    rep.checked = int(coords.size());
    for (auto [a, i] : coords) {
        double& w = store.arrays[size_t(a)].w[size_t(i)];
        const double saved = w;
        w = saved + h;
        double fp = eval();
        w = saved - h;
        double fm = eval();
        w = saved;
        double fd = (fp - fm) / (2.0 * h);
        double ad = analytic.g[size_t(a)][size_t(i)];
        double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6});
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_array = store.arrays[size_t(a)].name;
            rep.worst_index = i;
            rep.worst_ad = ad;
            rep.worst_fd = fd;
        }
    }
    return rep;
}

}  // namespace mgnerf
