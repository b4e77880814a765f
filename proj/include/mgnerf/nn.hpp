// Dense network kernels shared by the embedding network and the field
// network. Forward/backward run batched through Eigen so training spends its
// time in GEMMs; the tape wrappers below expose the same kernels as fused
// autodiff ops with batched backward closures.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <type_traits>
#include <vector>

#include "mgnerf/autodiff.hpp"
#include "mgnerf/errors.hpp"
#include "mgnerf/rng.hpp"

namespace mgnerf {

template <class R>
using EMat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic>;
template <class R>
using EVec = Eigen::Matrix<R, Eigen::Dynamic, 1>;

// Flat parameter layout of an affine layer: W row-major (out x in), then b.
inline size_t affine_param_count(int in, int out) { return size_t(out) * in + out; }

template <class R>
void affine_forward(const R* p, int in, int out, const EMat<R>& x, EMat<R>& y) {
    Eigen::Map<const Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(p, out, in);
    Eigen::Map<const EVec<R>> b(p + size_t(out) * in, out);
    y.noalias() = w * x;
    y.colwise() += b;
}

// Accumulates parameter gradients into gp (same layout as p); optionally
// propagates to the layer input.
template <class R>
void affine_backward(const R* p, int in, int out, const EMat<R>& x, const EMat<R>& dy,
                     EMat<R>* dx, R* gp) {
    Eigen::Map<const Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(p, out, in);
    Eigen::Map<Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dw(gp, out, in);
    Eigen::Map<EVec<R>> db(gp + size_t(out) * in, out);
    dw.noalias() += dy * x.transpose();
    db.noalias() += dy.rowwise().sum();
    if (dx) dx->noalias() = w.transpose() * dy;
}

// Sequential fully connected stack with ReLU between layers and a linear last
// layer.
struct MlpShape {
    std::vector<int> widths;  // [in, hidden..., out]

    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }
    int layer_count() const { return int(widths.size()) - 1; }
    size_t param_count() const {
        size_t n = 0;
        for (size_t l = 0; l + 1 < widths.size(); ++l)
            n += affine_param_count(widths[l], widths[l + 1]);
        return n;
    }
    size_t layer_offset(int layer) const {
        size_t n = 0;
        for (int l = 0; l < layer; ++l) n += affine_param_count(widths[l], widths[l + 1]);
        return n;
    }
};

template <class R>
struct MlpActs {
    std::vector<EMat<R>> x;  // input of each layer (post-ReLU of the previous)
};

template <class R>
void mlp_forward(const MlpShape& shape, const R* params, const EMat<R>& x0, EMat<R>& out,
                 std::type_identity_t<MlpActs<R>>* acts) {
    EMat<R> x = x0, y;
    if (acts) acts->x.clear();
    for (int l = 0; l < shape.layer_count(); ++l) {
        if (acts) acts->x.push_back(x);
        affine_forward(params + shape.layer_offset(l), shape.widths[l], shape.widths[l + 1], x, y);
        if (l + 1 < shape.layer_count()) x = y.cwiseMax(R(0));
    }
    out = y;
}

template <class R>
void mlp_backward(const MlpShape& shape, const R* params, const MlpActs<R>& acts,
                  const EMat<R>& dout, EMat<R>* dx0, R* gparams) {
    EMat<R> dy = dout, dx;
    for (int l = shape.layer_count() - 1; l >= 0; --l) {
        bool need_dx = l > 0 || dx0 != nullptr;
        affine_backward(params + shape.layer_offset(l), shape.widths[l], shape.widths[l + 1],
                        acts.x[size_t(l)], dy, need_dx ? &dx : nullptr,
                        gparams + shape.layer_offset(l));
        if (l > 0) {
            // ReLU mask: acts.x[l] is the post-ReLU input of layer l.
            dy = ((acts.x[size_t(l)].array() > R(0)).template cast<R>() * dx.array()).matrix();
        }
    }
    if (dx0) *dx0 = dx;
}

// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both
// weights and biases.
template <class R>
void init_affine(Rng& rng, R* p, int in, int out) {
    double a = 1.0 / std::sqrt(double(in));
    size_t n = affine_param_count(in, out);
    for (size_t i = 0; i < n; ++i) p[i] = R(rng.uniform(-a, a));
}

template <class R>
std::vector<R> init_mlp(const MlpShape& shape, uint64_t seed) {
    std::vector<R> p(shape.param_count());
    Rng rng(seed);
    for (int l = 0; l < shape.layer_count(); ++l)
        init_affine(rng, p.data() + shape.layer_offset(l), shape.widths[l], shape.widths[l + 1]);
    return p;
}

// ---------------------------------------------------------------------------
// Positional encoding kernel: each input scalar p expands to the block
// [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p)].

inline int pe_block_size(int freqs) { return 1 + 2 * freqs; }

template <class R>
void pe_forward(const EMat<R>& p, int freqs, EMat<R>& e) {
    const int rows = int(p.rows()), cols = int(p.cols());
    const int block = pe_block_size(freqs);
    e.resize(rows * block, cols);
    const double pi = 3.14159265358979323846;
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) {
            R x = p(r, c);
            R* dst = &e(r * block, c);
            dst[0] = x;
            double f = pi;
            for (int l = 0; l < freqs; ++l) {
                dst[1 + 2 * l] = R(std::sin(f * double(x)));
                dst[2 + 2 * l] = R(std::cos(f * double(x)));
                f *= 2.0;
            }
        }
}

template <class R>
void pe_backward(const EMat<R>& p, int freqs, const EMat<R>& de, EMat<R>& dp) {
    const int rows = int(p.rows()), cols = int(p.cols());
    const int block = pe_block_size(freqs);
    dp.resize(rows, cols);
    const double pi = 3.14159265358979323846;
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) {
            double x = double(p(r, c));
            const R* g = &de(r * block, c);
            double acc = double(g[0]);
            double f = pi;
            for (int l = 0; l < freqs; ++l) {
                acc += f * (std::cos(f * x) * double(g[1 + 2 * l]) -
                            std::sin(f * x) * double(g[2 + 2 * l]));
                f *= 2.0;
            }
            dp(r, c) = R(acc);
        }
}

// ---------------------------------------------------------------------------
// Fused tape op: positional-encode the first n_enc inputs of every sample,
// append the remaining raw inputs, and run the MLP. Inputs are sample-major:
// sample s occupies inputs[s*(n_enc+n_raw) ...]. Returns out_width outputs
// per sample, sample-major.
template <class R>
std::vector<Var<R>> mlp_tape_apply(Tape<R>& tape, const MlpShape& shape, int pe_freqs, int n_enc,
                                   int n_raw, int param_array, const R* params,
                                   const std::vector<Var<R>>& inputs, int batch) {
    const int per_sample = n_enc + n_raw;
    if (int(inputs.size()) != per_sample * batch)
        throw ConfigError("mlp_tape_apply: input size does not match batch layout");
    if (shape.input_width() != pe_block_size(pe_freqs) * n_enc + n_raw)
        throw ConfigError("mlp_tape_apply: network input width does not match embedding layout");

    struct State {
        EMat<R> enc_in;   // n_enc x B
        EMat<R> x0;       // mlp input
        MlpActs<R> acts;
        std::vector<int32_t> in_nodes;   // per-sample-major node ids (-1 for constants)
        std::vector<int32_t> out_nodes;
        MlpShape shape;
        int pe_freqs, n_enc, n_raw, batch, param_array;
        const R* params;
    };
    auto st = std::make_shared<State>();
    st->shape = shape;
    st->pe_freqs = pe_freqs;
    st->n_enc = n_enc;
    st->n_raw = n_raw;
    st->batch = batch;
    st->param_array = param_array;
    st->params = params;

    st->enc_in.resize(n_enc, batch);
    EMat<R> raw_in(n_raw, batch);
    st->in_nodes.resize(inputs.size());
    for (int s = 0; s < batch; ++s)
        for (int k = 0; k < per_sample; ++k) {
            const Var<R>& var = inputs[size_t(s) * per_sample + k];
            st->in_nodes[size_t(s) * per_sample + k] = var.i;
            if (k < n_enc) st->enc_in(k, s) = var.v;
            else raw_in(k - n_enc, s) = var.v;
        }

    EMat<R> enc;
    pe_forward(st->enc_in, pe_freqs, enc);
    st->x0.resize(shape.input_width(), batch);
    st->x0.topRows(enc.rows()) = enc;
    if (n_raw > 0) st->x0.bottomRows(n_raw) = raw_in;

    EMat<R> out;
    mlp_forward(shape, params, st->x0, out, &st->acts);

    const int out_w = shape.output_width();
    std::vector<Var<R>> out_vars;
    out_vars.reserve(size_t(out_w) * batch);
    st->out_nodes.resize(size_t(out_w) * batch);
    for (int s = 0; s < batch; ++s) {
        auto vars = tape.output_slots(out.col(s).data(), out_w);
        for (int k = 0; k < out_w; ++k) {
            out_vars.push_back(vars[size_t(k)]);
            st->out_nodes[size_t(s) * out_w + k] = vars[size_t(k)].i;
        }
    }

    tape.push_fused([st](Tape<R>& t, GradBuffers<R>& sink) {
        const int ow = st->shape.output_width();
        EMat<R> dout(ow, st->batch);
        for (int s = 0; s < st->batch; ++s)
            for (int k = 0; k < ow; ++k)
                dout(k, s) = t.node_grad(st->out_nodes[size_t(s) * ow + k]);
        EMat<R> dx0;
        mlp_backward(st->shape, st->params, st->acts, dout, &dx0,
                     sink.data(st->param_array));
        // Split dx0 into the encoded block and the raw tail.
        const int enc_rows = pe_block_size(st->pe_freqs) * st->n_enc;
        EMat<R> denc_in;
        if (st->n_enc > 0) {
            EMat<R> denc = dx0.topRows(enc_rows);
            pe_backward(st->enc_in, st->pe_freqs, denc, denc_in);
        }
        const int per_sample = st->n_enc + st->n_raw;
        for (int s = 0; s < st->batch; ++s)
            for (int k = 0; k < per_sample; ++k) {
                int32_t node = st->in_nodes[size_t(s) * per_sample + k];
                if (node < 0) continue;
                R g = (k < st->n_enc) ? denc_in(k, s) : dx0(enc_rows + k - st->n_enc, s);
                t.accumulate_grad(node, g);
            }
    });
    return out_vars;
}

}  // namespace mgnerf
