// The radiance-field network: an 8-layer, 256-channel MLP over the query
// embedding with a skip connection of the embedding into layer 5, a scalar
// density head and a 3-channel color head. Density goes through softplus,
// color through sigmoid, so sigma >= 0 and color stays in [0,1]^3.
#pragma once

#include <cstdint>
#include <memory>
#include <type_traits>
#include <vector>

#include "mgnerf/autodiff.hpp"
#include "mgnerf/errors.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/nn.hpp"
#include "mgnerf/rng.hpp"

namespace mgnerf {

struct FieldConfig {
    int input_dim = 128;  // width of the query embedding
    int width = 256;
    int depth = 8;
    int skip_layer = 4;   // 0-based trunk layer whose input is [h, embedding]

    int layer_in(int l) const {
        if (l == 0) return input_dim;
        return l == skip_layer ? width + input_dim : width;
    }

    size_t param_count() const {
        size_t n = 0;
        for (int l = 0; l < depth; ++l) n += affine_param_count(layer_in(l), width);
        n += affine_param_count(width, 1);  // density head
        n += affine_param_count(width, 3);  // color head
        return n;
    }

    size_t layer_offset(int l) const {
        size_t n = 0;
        for (int k = 0; k < l; ++k) n += affine_param_count(layer_in(k), width);
        return n;
    }
    size_t sigma_head_offset() const { return layer_offset(depth); }
    size_t color_head_offset() const { return sigma_head_offset() + affine_param_count(width, 1); }

    void validate() const {
        if (input_dim < 1 || width < 1 || depth < 2 || skip_layer < 1 || skip_layer >= depth)
            throw ConfigError("field config: invalid layer layout");
    }
};

// Plain sample returned by the public query op.
struct FieldSample {
    Vec3d color;   // in [0,1]^3
    double sigma;  // >= 0
};

// Deterministic fan-in-scaled uniform init. The density-head bias is set so
// the initial field has sigma ~= 0.1 everywhere, which keeps the early
// transmittance stable instead of starting opaque or empty.
template <class R>
std::vector<R> init_field(uint64_t seed, const FieldConfig& cfg) {
    cfg.validate();
    std::vector<R> p(cfg.param_count());
    Rng rng(seed);
    for (int l = 0; l < cfg.depth; ++l)
        init_affine(rng, p.data() + cfg.layer_offset(l), cfg.layer_in(l), cfg.width);
    init_affine(rng, p.data() + cfg.sigma_head_offset(), cfg.width, 1);
    init_affine(rng, p.data() + cfg.color_head_offset(), cfg.width, 3);
    R* sigma_bias = p.data() + cfg.sigma_head_offset() + size_t(cfg.width);
    *sigma_bias = softplus_inverse(R(0.1));
    return p;
}

template <class R>
struct FieldActs {
    EMat<R> x0;                  // embedding batch (input_dim x B)
    std::vector<EMat<R>> x;      // input of every trunk layer
    EMat<R> feat;                // post-ReLU output of the last trunk layer
};

// Raw head outputs (pre-activation): row 0 sigma, rows 1..3 color.
template <class R>
void field_forward(const FieldConfig& cfg, const R* params, const EMat<R>& x0, EMat<R>& raw,
                   std::type_identity_t<FieldActs<R>>* acts) {
    if (int(x0.rows()) != cfg.input_dim)
        throw ConfigError("field_forward: embedding width mismatch");
    const int b = int(x0.cols());
    EMat<R> x = x0, y;
    if (acts) { acts->x.clear(); acts->x0 = x0; }
    for (int l = 0; l < cfg.depth; ++l) {
        if (l == cfg.skip_layer) {
            EMat<R> cat(cfg.width + cfg.input_dim, b);
            cat.topRows(cfg.width) = x;
            cat.bottomRows(cfg.input_dim) = x0;
            x = std::move(cat);
        }
        if (acts) acts->x.push_back(x);
        affine_forward(params + cfg.layer_offset(l), cfg.layer_in(l), cfg.width, x, y);
        x = y.cwiseMax(R(0));
    }
    if (acts) acts->feat = x;
    raw.resize(4, b);
    EMat<R> sig, col;
    affine_forward(params + cfg.sigma_head_offset(), cfg.width, 1, x, sig);
    affine_forward(params + cfg.color_head_offset(), cfg.width, 3, x, col);
    raw.row(0) = sig.row(0);
    raw.bottomRows(3) = col;
}

template <class R>
void field_backward(const FieldConfig& cfg, const R* params, const FieldActs<R>& acts,
                    const EMat<R>& draw, EMat<R>* dx0, R* gparams) {
    EMat<R> dsig = draw.topRows(1), dcol = draw.bottomRows(3);
    EMat<R> dfeat_a, dfeat_b;
    affine_backward(params + cfg.sigma_head_offset(), cfg.width, 1, acts.feat, dsig, &dfeat_a,
                    gparams + cfg.sigma_head_offset());
    affine_backward(params + cfg.color_head_offset(), cfg.width, 3, acts.feat, dcol, &dfeat_b,
                    gparams + cfg.color_head_offset());
    EMat<R> dy = dfeat_a + dfeat_b;
    EMat<R> dx0_acc = EMat<R>::Zero(cfg.input_dim, acts.x0.cols());
    EMat<R> dx;
    for (int l = cfg.depth - 1; l >= 0; --l) {
        // dy is the gradient after the layer's ReLU; mask it first. The
        // stored layer OUTPUT is the next layer's input; for the last layer
        // it is `feat`.
        const EMat<R>& post = (l + 1 < cfg.depth) ? acts.x[size_t(l) + 1] : acts.feat;
        // At the skip layer boundary only the top `width` rows of the stored
        // input came from layer l's output.
        if (l + 1 == cfg.skip_layer) {
            EMat<R> mask_in = post.topRows(cfg.width);
            dy = ((mask_in.array() > R(0)).template cast<R>() * dy.array()).matrix();
        } else {
            dy = ((post.array() > R(0)).template cast<R>() * dy.array()).matrix();
        }
        affine_backward(params + cfg.layer_offset(l), cfg.layer_in(l), cfg.width, acts.x[size_t(l)],
                        dy, &dx, gparams + cfg.layer_offset(l));
        if (l == cfg.skip_layer) {
            dx0_acc += dx.bottomRows(cfg.input_dim);
            dy = dx.topRows(cfg.width);
        } else {
            dy = dx;
        }
    }
    dx0_acc += dy;
    if (dx0) *dx0 = dx0_acc;
}

namespace detail {
template <class R>
const R* field_params_checked(const std::vector<R>& params, const FieldConfig& cfg) {
    if (params.size() != cfg.param_count())
        throw ConfigError("field: parameter array size does not match config");
    return params.data();
}
}  // namespace detail

// Public single-query op. sigma = softplus(raw), color = sigmoid(raw).
template <class R>
FieldSample query_field(const std::vector<R>& params, const FieldConfig& cfg,
                        const std::vector<R>& q) {
    if (int(q.size()) != cfg.input_dim)
        throw ConfigError("query_field: embedding width mismatch");
    EMat<R> x0(cfg.input_dim, 1);
    for (int i = 0; i < cfg.input_dim; ++i) x0(i, 0) = q[size_t(i)];
    EMat<R> raw;
    field_forward(cfg, detail::field_params_checked(params, cfg), x0, raw, nullptr);
    FieldSample s;
    s.sigma = double(softplus_value(raw(0, 0)));
    s.color = {double(sigmoid_value(raw(1, 0))), double(sigmoid_value(raw(2, 0))),
               double(sigmoid_value(raw(3, 0)))};
    return s;
}

// Templated sample output used by the renderer.
template <class S>
struct FieldOut {
    S sigma;
    Vec3<S> color;
};

// Fused tape op over a batch of embeddings (sample-major, input_dim each).
// Returns per-sample activated outputs.
template <class R>
std::vector<FieldOut<Var<R>>> field_tape_apply(Tape<R>& tape, const FieldConfig& cfg,
                                               int param_array, const R* params,
                                               const std::vector<Var<R>>& q, int batch) {
    if (int(q.size()) != cfg.input_dim * batch)
        throw ConfigError("field_tape_apply: embedding batch layout mismatch");
    struct State {
        FieldConfig cfg;
        const R* params;
        int param_array, batch;
        FieldActs<R> acts;
        std::vector<int32_t> in_nodes, out_nodes;
    };
    auto st = std::make_shared<State>();
    st->cfg = cfg;
    st->params = params;
    st->param_array = param_array;
    st->batch = batch;

    EMat<R> x0(cfg.input_dim, batch);
    st->in_nodes.resize(q.size());
    for (int s = 0; s < batch; ++s)
        for (int k = 0; k < cfg.input_dim; ++k) {
            const Var<R>& var = q[size_t(s) * cfg.input_dim + k];
            x0(k, s) = var.v;
            st->in_nodes[size_t(s) * cfg.input_dim + k] = var.i;
        }
    EMat<R> raw;
    field_forward(cfg, params, x0, raw, &st->acts);

    // All output slots must be created before push_fused (the closure fires
    // when the sweep reaches the last slot) and before any consumer ops.
    std::vector<Var<R>> slots;
    slots.reserve(size_t(batch) * 4);
    st->out_nodes.resize(size_t(batch) * 4);
    for (int s = 0; s < batch; ++s) {
        auto vars = tape.output_slots(raw.col(s).data(), 4);
        for (int k = 0; k < 4; ++k) {
            st->out_nodes[size_t(s) * 4 + k] = vars[size_t(k)].i;
            slots.push_back(vars[size_t(k)]);
        }
    }

    tape.push_fused([st](Tape<R>& t, GradBuffers<R>& sink) {
        EMat<R> draw(4, st->batch);
        for (int s = 0; s < st->batch; ++s)
            for (int k = 0; k < 4; ++k) draw(k, s) = t.node_grad(st->out_nodes[size_t(s) * 4 + k]);
        EMat<R> dx0;
        field_backward(st->cfg, st->params, st->acts, draw, &dx0, sink.data(st->param_array));
        for (int s = 0; s < st->batch; ++s)
            for (int k = 0; k < st->cfg.input_dim; ++k) {
                int32_t node = st->in_nodes[size_t(s) * st->cfg.input_dim + k];
                if (node >= 0) t.accumulate_grad(node, dx0(k, s));
            }
    });

    std::vector<FieldOut<Var<R>>> out;
    out.reserve(size_t(batch));
    for (int s = 0; s < batch; ++s) {
        FieldOut<Var<R>> fo;
        fo.sigma = softplus(slots[size_t(s) * 4 + 0]);
        fo.color = {sigmoid(slots[size_t(s) * 4 + 1]), sigmoid(slots[size_t(s) * 4 + 2]),
                    sigmoid(slots[size_t(s) * 4 + 3])};
        out.push_back(fo);
    }
    return out;
}

}  // namespace mgnerf
