// Volume rendering along camera rays with coarse-to-fine sampling. One
// templated implementation serves plain inference and tape-recorded training:
// discrete choices (hit triangles, neighbor indices, sampling bins) are made
// on plain values, every continuous quantity is expressed in the scalar type
// S so pose gradients flow through ray bounds, sample depths, the embedding,
// and the compositing weights.
#pragma once

#include <algorithm>
#include <numeric>
#include <thread>
#include <vector>

#include "mgnerf/autodiff.hpp"
#include "mgnerf/embedding.hpp"
#include "mgnerf/errors.hpp"
#include "mgnerf/field.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/rig.hpp"
#include "mgnerf/rng.hpp"
#include "mgnerf/spatial.hpp"

namespace mgnerf {

// Pinhole camera, OpenCV convention: camera space +z looks into the scene,
// pixel (u,v) = (column, row), rays pass through pixel centers.
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3d rotation = Mat3d::identity();  // world -> camera
    Vec3d translation{0, 0, 0};

    void validate() const {
        if (fx <= 0 || fy <= 0 || width <= 0 || height <= 0)
            throw ArgumentError("camera: invalid intrinsics");
        Mat3d should_be_i = rotation * rotation.transposed();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (std::abs(should_be_i(i, j) - (i == j ? 1.0 : 0.0)) > 1e-6)
                    throw ArgumentError("camera: rotation is not orthonormal");
    }

    Vec3d origin() const { return -(rotation.transposed() * translation); }

    // Ray through pixel (u, v); pixel indices map directly to image-plane
    // coordinates, so doubling the resolution (and intrinsics) keeps the ray
    // of the center pixel fixed.
    void pixel_ray(int u, int v, Vec3d& o, Vec3d& d) const {
        Vec3d dir_cam{(double(u) - cx) / fx, (double(v) - cy) / fy, 1.0};
        o = origin();
        d = normalized(rotation.transposed() * dir_cam);
    }

    // Continuous pixel coordinates of a world point, in the same pixel-index
    // convention as pixel_ray. Returns false if behind the camera.
    bool project(const Vec3d& p, double& u, double& v) const {
        Vec3d pc = rotation * p + translation;
        if (pc.z <= 1e-9) return false;
        u = fx * pc.x / pc.z + cx;
        v = fy * pc.y / pc.z + cy;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Depth sampling.

// n stratified depths in [lo, hi]: one uniform draw per stratum when
// jittered, stratum midpoints otherwise.
template <class S>
std::vector<S> stratified_depths(const S& lo, const S& hi, int n, bool jitter, Rng& rng) {
    std::vector<S> t;
    t.reserve(size_t(n));
    S span = hi - lo;
    for (int i = 0; i < n; ++i) {
        double u = jitter ? rng.uniform() : 0.5;
        t.push_back(lo + span * ((double(i) + u) / double(n)));
    }
    return t;
}

// Inverse-CDF draws from the piecewise-constant density with mass weights[i]
// on [depths[i], depths[i] + deltas[i]). Bin choice is by value; the returned
// depth expression stays differentiable in the weights and bin edges for a
// fixed draw. Caller guarantees at least one positive weight.
template <class S>
std::vector<S> importance_depths(const std::vector<S>& depths, const std::vector<S>& deltas,
                                 const std::vector<S>& weights, int n_fine, Rng& rng) {
    const size_t n = weights.size();
    std::vector<double> cum(n + 1, 0.0);
    for (size_t i = 0; i < n; ++i) cum[i + 1] = cum[i] + value_of(weights[i]);
    const double total = cum[n];

    S total_s = weights[0];
    for (size_t i = 1; i < n; ++i) total_s += weights[i];

    std::vector<S> out;
    out.reserve(size_t(n_fine));
    for (int j = 0; j < n_fine; ++j) {
        double u = rng.uniform() * total;
        size_t b = size_t(std::upper_bound(cum.begin(), cum.end() - 1, u) - cum.begin());
        b = b > 0 ? b - 1 : 0;
        // Skip zero bins the search may have landed past due to ties.
        while (b + 1 < n && value_of(weights[b]) <= 0.0) ++b;
        S cum_b = 0.0;
        for (size_t i = 0; i < b; ++i) cum_b += weights[i];
        S frac = (total_s * (u / total) - cum_b) / weights[b];
        out.push_back(depths[b] + deltas[b] * frac);
    }
    return out;
}

// Plain-scalar sampling ops (the public surface; the renderer calls the
// templated pieces directly).
struct RaySamples {
    std::vector<double> depths;  // strictly ascending
    std::vector<double> deltas;  // deltas[i] = depths[i+1]-depths[i]; last = padding constant
};

inline RaySamples sample_stratified(double z_near, double z_far, int n, bool jitter, Rng& rng,
                                    double last_delta = kDefaultRayPad) {
    if (!(z_near < z_far)) throw ArgumentError("sample_stratified: need z_near < z_far");
    if (n < 2) throw ArgumentError("sample_stratified: need n >= 2");
    RaySamples s;
    s.depths = stratified_depths<double>(z_near, z_far, n, jitter, rng);
    s.deltas.resize(size_t(n));
    for (int i = 0; i + 1 < n; ++i) s.deltas[size_t(i)] = s.depths[size_t(i) + 1] - s.depths[size_t(i)];
    s.deltas[size_t(n) - 1] = last_delta;
    return s;
}

inline RaySamples sample_importance(const RaySamples& coarse, const std::vector<double>& weights,
                                    int n_fine, Rng& rng, double last_delta = kDefaultRayPad) {
    if (weights.size() != coarse.depths.size())
        throw ArgumentError("sample_importance: weight count mismatch");
    bool any_positive = false;
    for (double w : weights) {
        if (w < 0.0) throw ArgumentError("sample_importance: negative weight");
        if (w > 0.0) any_positive = true;
    }
    std::vector<double> fine;
    if (!any_positive) {
        fine = stratified_depths<double>(coarse.depths.front(),
                                         coarse.depths.back() + coarse.deltas.back(), n_fine,
                                         /*jitter=*/true, rng);
    } else {
        fine = importance_depths<double>(coarse.depths, coarse.deltas, weights, n_fine, rng);
    }
    RaySamples merged;
    merged.depths = coarse.depths;
    merged.depths.insert(merged.depths.end(), fine.begin(), fine.end());
    std::sort(merged.depths.begin(), merged.depths.end());
    merged.deltas.resize(merged.depths.size());
    for (size_t i = 0; i + 1 < merged.depths.size(); ++i)
        merged.deltas[i] = merged.depths[i + 1] - merged.depths[i];
    merged.deltas.back() = last_delta;
    return merged;
}

// ---------------------------------------------------------------------------
// Compositing (transmittance T_i = exp(-sum_j<i sigma_j delta_j)).

template <class S>
struct CompositeResult {
    Vec3<S> color{S(0.0), S(0.0), S(0.0)};
    S alpha = S(0.0);
    std::vector<S> weights;
};

template <class S>
CompositeResult<S> composite_ray(const std::vector<FieldOut<S>>& samples,
                                 const std::vector<S>& deltas) {
    using std::exp;
    if (samples.size() != deltas.size())
        throw ArgumentError("composite_ray: sample/delta length mismatch");
    CompositeResult<S> r;
    r.weights.reserve(samples.size());
    S transmittance = 1.0;
    for (size_t i = 0; i < samples.size(); ++i) {
        S att = exp(-samples[i].sigma * deltas[i]);
        S w = transmittance * (S(1.0) - att);
        r.weights.push_back(w);
        r.color += samples[i].color * w;
        r.alpha += w;
        transmittance *= att;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation contexts: how the renderer reaches latents and the two networks.

template <class R>
struct PlainCtx {
    using S = R;
    const EmbeddingConfig* ecfg = nullptr;
    const FieldConfig* fcfg = nullptr;
    const R* psi_params = nullptr;
    const R* field_params = nullptr;
    const R* latents = nullptr;

    R latent(int v, int d) const { return latents[size_t(v) * ecfg->latent_dim + d]; }

    std::vector<R> psi(const std::vector<R>& inputs, int batch) const {
        const int n_enc = ecfg->encoded_count(), n_raw = ecfg->latent_count();
        const int per = n_enc + n_raw;
        EMat<R> enc_in(n_enc, batch), raw_in(n_raw, batch);
        for (int s = 0; s < batch; ++s)
            for (int k = 0; k < per; ++k) {
                R v = inputs[size_t(s) * per + k];
                if (k < n_enc) enc_in(k, s) = v;
                else raw_in(k - n_enc, s) = v;
            }
        EMat<R> encoded;
        pe_forward(enc_in, ecfg->pe_frequencies, encoded);
        MlpShape shape = ecfg->psi_shape();
        EMat<R> x0(shape.input_width(), batch);
        x0.topRows(encoded.rows()) = encoded;
        if (n_raw > 0) x0.bottomRows(n_raw) = raw_in;
        EMat<R> out;
        mlp_forward(shape, psi_params, x0, out, nullptr);
        std::vector<R> q(size_t(shape.output_width()) * batch);
        for (int s = 0; s < batch; ++s)
            for (int k = 0; k < shape.output_width(); ++k)
                q[size_t(s) * shape.output_width() + k] = out(k, s);
        return q;
    }

    std::vector<FieldOut<R>> field(const std::vector<R>& q, int batch) const {
        EMat<R> x0(fcfg->input_dim, batch);
        for (int s = 0; s < batch; ++s)
            for (int k = 0; k < fcfg->input_dim; ++k) x0(k, s) = q[size_t(s) * fcfg->input_dim + k];
        EMat<R> raw;
        field_forward(*fcfg, field_params, x0, raw, nullptr);
        std::vector<FieldOut<R>> out(static_cast<size_t>(batch));
        for (int s = 0; s < batch; ++s) {
            out[size_t(s)].sigma = softplus_value(raw(0, s));
            out[size_t(s)].color = {sigmoid_value(raw(1, s)), sigmoid_value(raw(2, s)),
                                    sigmoid_value(raw(3, s))};
        }
        return out;
    }
};

template <class R>
struct TapeCtx {
    using S = Var<R>;
    const EmbeddingConfig* ecfg = nullptr;
    const FieldConfig* fcfg = nullptr;
    Tape<R>* tape = nullptr;
    ParamStore<R>* store = nullptr;
    int psi_array = -1, field_array = -1, latent_array = -1;

    S latent(int v, int d) const {
        int off = v * ecfg->latent_dim + d;
        return tape->leaf(store->arrays[size_t(latent_array)].w[size_t(off)], latent_array, off);
    }

    std::vector<S> psi(const std::vector<S>& inputs, int batch) const {
        return mlp_tape_apply(*tape, ecfg->psi_shape(), ecfg->pe_frequencies,
                              ecfg->encoded_count(), ecfg->latent_count(), psi_array,
                              store->arrays[size_t(psi_array)].w.data(), inputs, batch);
    }

    std::vector<FieldOut<S>> field(const std::vector<S>& q, int batch) const {
        return field_tape_apply(*tape, *fcfg, field_array,
                                store->arrays[size_t(field_array)].w.data(), q, batch);
    }
};

template <class S>
std::vector<Affine3<S>> lift_part_transforms(const PartTransforms& g) {
    std::vector<Affine3<S>> out(g.size());
    for (size_t k = 0; k < g.size(); ++k) {
        for (int i = 0; i < 9; ++i) out[k].A.m[i] = S(g.parts[k].A.m[i]);
        out[k].t = {S(g.parts[k].t.x), S(g.parts[k].t.y), S(g.parts[k].t.z)};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched ray rendering.

struct RenderParams {
    int n_coarse = 64;
    int n_fine = 64;
    double ray_pad = kDefaultRayPad;
    bool jitter = true;
};

struct RaySpec {
    Vec3d origin, dir;
    uint64_t rng_seed = 0;
};

template <class S>
struct RayResult {
    Vec3<S> color{S(0.0), S(0.0), S(0.0)};
    S alpha = S(0.0);
    bool hit = false;
};

// Renders a chunk of rays in two batched network passes (coarse, then the
// importance-sampled refinement). Coarse field samples are reused in the
// merged fine composite instead of being re-queried.
template <class Ctx>
std::vector<RayResult<typename Ctx::S>> render_rays(Ctx& ctx, DiffBody<typename Ctx::S>& body,
                                                    const PosedMesh& mesh, const RenderParams& rp,
                                                    const std::vector<RaySpec>& rays) {
    using S = typename Ctx::S;
    const EmbeddingConfig& ecfg = *ctx.ecfg;
    const int n_coarse = rp.n_coarse, n_fine = rp.n_fine;

    struct RayWork {
        bool hit = false;
        Rng rng{0};
        S lo = 0.0, hi = 0.0;
        std::vector<S> coarse_t, fine_t;
        std::vector<S> merged_t;
        std::vector<int> merged_src;  // index into coarse (i) or fine (n_coarse+i)
        int sample_base = 0;          // into the coarse batch
        int fine_base = 0;            // into the fine batch
    };
    const size_t n_rays = rays.size();
    std::vector<RayWork> work(n_rays);
    std::vector<RayResult<S>> results(n_rays);

    auto make_positions = [&](const Vec3d& o, const Vec3d& d, const std::vector<S>& ts,
                              std::vector<Vec3<S>>& xs, std::vector<Vec3d>& xs_plain) {
        for (const S& t : ts) {
            Vec3<S> x{S(o.x) + t * S(d.x), S(o.y) + t * S(d.y), S(o.z) + t * S(d.z)};
            xs.push_back(x);
            xs_plain.push_back({value_of(x.x), value_of(x.y), value_of(x.z)});
        }
    };

    // Phase A: bounds + coarse sampling + embedding inputs.
    std::vector<S> inputs;
    int batch = 0;
    for (size_t r = 0; r < n_rays; ++r) {
        RayWork& w = work[r];
        w.rng = Rng(rays[r].rng_seed);
        auto bounds = ray_bounds(mesh, rays[r].origin, rays[r].dir, rp.ray_pad);
        if (!bounds) continue;
        w.hit = true;
        results[r].hit = true;

        const auto& tri_min = mesh.rig->triangles[size_t(bounds->tri_min)];
        const auto& tri_max = mesh.rig->triangles[size_t(bounds->tri_max)];
        S t_min = ray_triangle_t<S>(rays[r].origin, rays[r].dir, body.posed(tri_min[0]),
                                    body.posed(tri_min[1]), body.posed(tri_min[2]));
        S t_max = ray_triangle_t<S>(rays[r].origin, rays[r].dir, body.posed(tri_max[0]),
                                    body.posed(tri_max[1]), body.posed(tri_max[2]));
        // Mirror the plain clamp z_near >= 0.
        w.lo = (bounds->t_min - rp.ray_pad < 0.0) ? S(0.0) : t_min - rp.ray_pad;
        w.hi = t_max + rp.ray_pad;
        w.coarse_t = stratified_depths(w.lo, w.hi, n_coarse, rp.jitter, w.rng);
        w.sample_base = batch;

        std::vector<Vec3<S>> xs;
        std::vector<Vec3d> xs_plain;
        make_positions(rays[r].origin, rays[r].dir, w.coarse_t, xs, xs_plain);
        for (int i = 0; i < n_coarse; ++i) {
            std::vector<S> enc, raw;
            embed_point(ctx, body, mesh, ecfg, xs[size_t(i)], xs_plain[size_t(i)], enc, raw);
            inputs.insert(inputs.end(), enc.begin(), enc.end());
            inputs.insert(inputs.end(), raw.begin(), raw.end());
        }
        batch += n_coarse;
    }

    std::vector<FieldOut<S>> coarse_out;
    if (batch > 0) {
        std::vector<S> q = ctx.psi(inputs, batch);
        coarse_out = ctx.field(q, batch);
    }

    // Per-ray coarse composite -> importance weights -> fine depths.
    std::vector<S> fine_inputs;
    int fine_batch = 0;
    for (size_t r = 0; r < n_rays; ++r) {
        RayWork& w = work[r];
        if (!w.hit) continue;
        std::vector<FieldOut<S>> samples(coarse_out.begin() + w.sample_base,
                                         coarse_out.begin() + w.sample_base + n_coarse);
        std::vector<S> deltas(static_cast<size_t>(n_coarse));
        for (int i = 0; i + 1 < n_coarse; ++i) deltas[size_t(i)] = w.coarse_t[size_t(i) + 1] - w.coarse_t[size_t(i)];
        deltas[size_t(n_coarse) - 1] = S(rp.ray_pad);
        CompositeResult<S> coarse = composite_ray(samples, deltas);

        bool any_positive = false;
        for (const S& cw : coarse.weights)
            if (value_of(cw) > 0.0) { any_positive = true; break; }
        if (any_positive) {
            w.fine_t = importance_depths(w.coarse_t, deltas, coarse.weights, n_fine, w.rng);
        } else {
            w.fine_t = stratified_depths(w.coarse_t.front(), w.coarse_t.back() + S(rp.ray_pad),
                                         n_fine, true, w.rng);
        }

        // Merge coarse + fine by current depth value.
        const int total = n_coarse + n_fine;
        w.merged_src.resize(size_t(total));
        std::iota(w.merged_src.begin(), w.merged_src.end(), 0);
        auto depth_of = [&](int i) {
            return i < n_coarse ? value_of(w.coarse_t[size_t(i)]) : value_of(w.fine_t[size_t(i - n_coarse)]);
        };
        std::stable_sort(w.merged_src.begin(), w.merged_src.end(),
                         [&](int a, int b) { return depth_of(a) < depth_of(b); });
        w.merged_t.reserve(size_t(total));
        for (int idx : w.merged_src)
            w.merged_t.push_back(idx < n_coarse ? w.coarse_t[size_t(idx)] : w.fine_t[size_t(idx - n_coarse)]);

        w.fine_base = fine_batch;
        std::vector<Vec3<S>> xs;
        std::vector<Vec3d> xs_plain;
        make_positions(rays[r].origin, rays[r].dir, w.fine_t, xs, xs_plain);
        for (int i = 0; i < n_fine; ++i) {
            std::vector<S> enc, raw;
            embed_point(ctx, body, mesh, ecfg, xs[size_t(i)], xs_plain[size_t(i)], enc, raw);
            fine_inputs.insert(fine_inputs.end(), enc.begin(), enc.end());
            fine_inputs.insert(fine_inputs.end(), raw.begin(), raw.end());
        }
        fine_batch += n_fine;
    }

    std::vector<FieldOut<S>> fine_out;
    if (fine_batch > 0) {
        std::vector<S> q = ctx.psi(fine_inputs, fine_batch);
        fine_out = ctx.field(q, fine_batch);
    }

    // Final composite over the merged samples.
    for (size_t r = 0; r < n_rays; ++r) {
        RayWork& w = work[r];
        if (!w.hit) continue;
        const int total = n_coarse + n_fine;
        std::vector<FieldOut<S>> samples;
        samples.reserve(size_t(total));
        for (int idx : w.merged_src) {
            if (idx < n_coarse) samples.push_back(coarse_out[size_t(w.sample_base + idx)]);
            else samples.push_back(fine_out[size_t(w.fine_base + idx - n_coarse)]);
        }
        std::vector<S> deltas(static_cast<size_t>(total));
        for (int i = 0; i + 1 < total; ++i) deltas[size_t(i)] = w.merged_t[size_t(i) + 1] - w.merged_t[size_t(i)];
        deltas[size_t(total) - 1] = S(rp.ray_pad);
        CompositeResult<S> fine = composite_ray(samples, deltas);
        results[r].color = fine.color;
        results[r].alpha = fine.alpha;
    }
    return results;
}

// Single-pixel render against a black background; the public op.
template <class Ctx>
RayResult<typename Ctx::S> render_pixel(Ctx& ctx, DiffBody<typename Ctx::S>& body,
                                        const PosedMesh& mesh, const Camera& cam, int u, int v,
                                        const RenderParams& rp, uint64_t rng_seed) {
    if (u < 0 || v < 0 || u >= cam.width || v >= cam.height)
        throw ArgumentError("render_pixel: pixel outside image");
    RaySpec ray;
    cam.pixel_ray(u, v, ray.origin, ray.dir);
    ray.rng_seed = rng_seed;
    return render_rays(ctx, body, mesh, rp, {ray})[0];
}

// ---------------------------------------------------------------------------
// Full-frame inference.

// Deterministic regardless of scheduling: rays are chunked by pixel index and
// every chunk derives its own rng streams.
template <class R>
std::vector<double> render_image_rgba(const PlainCtx<R>& ctx, const RiggedMesh& rig_mesh,
                                      const PosedMesh& mesh, const Camera& cam,
                                      const RenderParams& rp, uint64_t stream, int workers,
                                      std::vector<double>* alpha_only = nullptr) {
    const int w = cam.width, h = cam.height;
    std::vector<double> rgba(size_t(w) * h * 4, 0.0);
    constexpr int kChunk = 8;
    const int n_pixels = w * h;
    const int n_chunks = (n_pixels + kChunk - 1) / kChunk;
    workers = std::max(1, workers);

    auto run_chunk = [&](int chunk) {
        PlainCtx<R> local_ctx = ctx;
        DiffBody<R> body(rig_mesh, lift_part_transforms<R>(mesh.part_transforms));
        std::vector<RaySpec> rays;
        const int begin = chunk * kChunk, end = std::min(n_pixels, begin + kChunk);
        for (int p = begin; p < end; ++p) {
            RaySpec ray;
            cam.pixel_ray(p % w, p / w, ray.origin, ray.dir);
            ray.rng_seed = derive_seed(stream, uint64_t(p));
            rays.push_back(ray);
        }
        auto res = render_rays(local_ctx, body, mesh, rp, rays);
        for (int p = begin; p < end; ++p) {
            const auto& rr = res[size_t(p - begin)];
            rgba[size_t(p) * 4 + 0] = value_of(rr.color.x);
            rgba[size_t(p) * 4 + 1] = value_of(rr.color.y);
            rgba[size_t(p) * 4 + 2] = value_of(rr.color.z);
            rgba[size_t(p) * 4 + 3] = value_of(rr.alpha);
        }
    };

    if (workers == 1) {
        for (int c = 0; c < n_chunks; ++c) run_chunk(c);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&, t]() {
                for (int c = t; c < n_chunks; c += workers) run_chunk(c);
            });
        for (auto& th : pool) th.join();
    }
    if (alpha_only) {
        alpha_only->resize(size_t(w) * h);
        for (int p = 0; p < n_pixels; ++p) (*alpha_only)[size_t(p)] = rgba[size_t(p) * 4 + 3];
    }
    return rgba;
}

}  // namespace mgnerf
