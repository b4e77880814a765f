// The query embedding: for a spatial query point, the relationship to a local
// surface patch of the posed mesh. It concatenates
//   - deformation guidance: the inverse-rotated direction to the nearest
//     projected vertex plus the inverse-skinned neighbor positions,
//   - a distance prior: observation-space distances to those neighbors,
//   - per-vertex latent codes,
// positionally encodes everything except the latents, and feeds the result
// through a small embedding network. The ablation modes switch the distance
// space, the direction handling, and the neighborhood rule independently.
#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "mgnerf/autodiff.hpp"
#include "mgnerf/errors.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/nn.hpp"
#include "mgnerf/rig.hpp"
#include "mgnerf/spatial.hpp"

namespace mgnerf {

enum class DistanceMode { off, canonical, observation };
enum class DirectionMode { off, observation, inverse };

struct EmbeddingConfig {
    int k_neighbors = 7;
    int pe_frequencies = 10;
    int latent_dim = 16;
    DistanceMode distance_mode = DistanceMode::observation;
    DirectionMode direction_mode = DirectionMode::inverse;
    NeighborRule neighbor_rule = NeighborRule::geodesic_1hop;
    int psi_width = 128;  // hidden and output width of the embedding network
    int psi_depth = 3;

    void validate() const {
        if (k_neighbors < 1) throw ConfigError("embedding: k_neighbors must be >= 1");
        if (pe_frequencies < 0) throw ConfigError("embedding: pe_frequencies must be >= 0");
        if (latent_dim < 0) throw ConfigError("embedding: latent_dim must be >= 0");
        if (psi_width < 1 || psi_depth < 1) throw ConfigError("embedding: invalid psi layout");
    }

    int guidance_count() const {
        return (direction_mode != DirectionMode::off ? 3 : 0) + 3 * k_neighbors;
    }
    int prior_count() const { return distance_mode != DistanceMode::off ? k_neighbors : 0; }
    int encoded_count() const { return guidance_count() + prior_count(); }
    int latent_count() const { return k_neighbors * latent_dim; }
    int psi_input_width() const {
        return encoded_count() * pe_block_size(pe_frequencies) + latent_count();
    }
    MlpShape psi_shape() const {
        std::vector<int> w{psi_input_width()};
        for (int l = 0; l < psi_depth; ++l) w.push_back(psi_width);
        return {w};
    }
    size_t psi_param_count() const { return psi_shape().param_count(); }
};

inline const char* to_string(DistanceMode m) {
    switch (m) {
        case DistanceMode::off: return "off";
        case DistanceMode::canonical: return "canonical";
        default: return "observation";
    }
}
inline const char* to_string(DirectionMode m) {
    switch (m) {
        case DirectionMode::off: return "off";
        case DirectionMode::observation: return "observation";
        default: return "inverse";
    }
}
inline const char* to_string(NeighborRule r) {
    switch (r) {
        case NeighborRule::euclidean_knn: return "euclidean_knn";
        case NeighborRule::nearest_only: return "nearest_only";
        case NeighborRule::geodesic_2hop: return "geodesic_2hop";
        default: return "geodesic_1hop";
    }
}

inline DistanceMode distance_mode_from_string(const std::string& s) {
    if (s == "off") return DistanceMode::off;
    if (s == "canonical") return DistanceMode::canonical;
    if (s == "observation") return DistanceMode::observation;
    throw DataError("embedding: unknown distance_mode '" + s + "'");
}
inline DirectionMode direction_mode_from_string(const std::string& s) {
    if (s == "off") return DirectionMode::off;
    if (s == "observation") return DirectionMode::observation;
    if (s == "inverse") return DirectionMode::inverse;
    throw DataError("embedding: unknown direction_mode '" + s + "'");
}
inline NeighborRule neighbor_rule_from_string(const std::string& s) {
    if (s == "euclidean_knn") return NeighborRule::euclidean_knn;
    if (s == "geodesic_1hop") return NeighborRule::geodesic_1hop;
    if (s == "nearest_only") return NeighborRule::nearest_only;
    if (s == "geodesic_2hop") return NeighborRule::geodesic_2hop;
    throw DataError("embedding: unknown neighbor_rule '" + s + "'");
}

inline nlohmann::json embedding_config_to_json(const EmbeddingConfig& c) {
    return {{"k_neighbors", c.k_neighbors},
            {"pe_frequencies", c.pe_frequencies},
            {"latent_dim", c.latent_dim},
            {"distance_mode", to_string(c.distance_mode)},
            {"direction_mode", to_string(c.direction_mode)},
            {"neighbor_rule", to_string(c.neighbor_rule)}};
}

inline EmbeddingConfig embedding_config_from_json(const nlohmann::json& j) {
    EmbeddingConfig c;
    if (j.contains("k_neighbors")) c.k_neighbors = j["k_neighbors"].get<int>();
    if (j.contains("pe_frequencies")) c.pe_frequencies = j["pe_frequencies"].get<int>();
    if (j.contains("latent_dim")) c.latent_dim = j["latent_dim"].get<int>();
    if (j.contains("distance_mode"))
        c.distance_mode = distance_mode_from_string(j["distance_mode"].get<std::string>());
    if (j.contains("direction_mode"))
        c.direction_mode = direction_mode_from_string(j["direction_mode"].get<std::string>());
    if (j.contains("neighbor_rule"))
        c.neighbor_rule = neighbor_rule_from_string(j["neighbor_rule"].get<std::string>());
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Public plain-scalar ops (the renderer uses the templated batch path below;
// these are the contract surface and the test oracle targets).

// [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p)]
// per input scalar.
inline std::vector<double> positional_encode(const std::vector<double>& p, int freqs) {
    if (freqs < 0) throw ArgumentError("positional_encode: negative frequency count");
    std::vector<double> out;
    out.reserve(p.size() * size_t(pe_block_size(freqs)));
    const double pi = 3.14159265358979323846;
    for (double x : p) {
        out.push_back(x);
        double f = pi;
        for (int l = 0; l < freqs; ++l) {
            out.push_back(std::sin(f * x));
            out.push_back(std::cos(f * x));
            f *= 2.0;
        }
    }
    return out;
}

struct RawEmbedding {
    Vec3d x_dir{0, 0, 0};
    std::vector<Vec3d> canonical_neighbors;
    std::vector<double> distances;
    std::vector<double> latents;
    std::vector<int> neighbor_indices;
};

constexpr double kOnSurfaceEps = 1e-8;

struct GuidanceEmbedding {
    Vec3d x_dir{0, 0, 0};
    std::vector<Vec3d> canonical_neighbors;
};

// Eq-style guidance: neighbors inverse-skinned with their own weights, plus
// the normalized direction from the query to the nearest projected vertex,
// rotated back to canonical orientation with v0's blend. On-surface queries
// (|v0' - x| < 1e-8) get a zero direction.
inline GuidanceEmbedding guidance_embedding(const Vec3d& x, const PosedMesh& mesh,
                                            const std::vector<std::pair<int, double>>& neighbors,
                                            const EmbeddingConfig& cfg) {
    if (neighbors.empty()) throw ArgumentError("guidance_embedding: empty neighbor list");
    GuidanceEmbedding g;
    const RiggedMesh& rig = *mesh.rig;
    for (const auto& [v, d] : neighbors) {
        Affine3d blend = blended_or_fallback(rig.influences[size_t(v)], mesh.part_transforms.parts);
        g.canonical_neighbors.push_back(blend.inverse().apply(mesh.positions[size_t(v)]));
    }
    if (cfg.direction_mode == DirectionMode::off) return g;
    const int v0 = neighbors[0].first;
    Vec3d diff = mesh.positions[size_t(v0)] - x;
    double len = norm(diff);
    if (len < kOnSurfaceEps) return g;  // x_dir stays zero
    Vec3d dir = diff / len;
    if (cfg.direction_mode == DirectionMode::observation) {
        g.x_dir = dir;
    } else {
        Affine3d blend =
            blended_or_fallback(rig.influences[size_t(v0)], mesh.part_transforms.parts);
        g.x_dir = polar_rotation(blend.inverse().A) * dir;
    }
    return g;
}

// Distance prior. Observation mode measures in posed space; canonical mode
// inverse-skins the query with v0's blend weights and measures against the
// inverse-skinned neighbors.
inline std::vector<double> distance_embedding(const Vec3d& x, const PosedMesh& mesh,
                                              const std::vector<std::pair<int, double>>& neighbors,
                                              DistanceMode mode) {
    std::vector<double> d;
    if (mode == DistanceMode::off) return d;
    d.reserve(neighbors.size());
    if (mode == DistanceMode::observation) {
        for (const auto& [v, dist] : neighbors) d.push_back(norm(mesh.positions[size_t(v)] - x));
        return d;
    }
    const RiggedMesh& rig = *mesh.rig;
    const int v0 = neighbors[0].first;
    Affine3d inv =
        blended_or_fallback(rig.influences[size_t(v0)], mesh.part_transforms.parts).inverse();
    Vec3d x_can = inv.apply(x);
    for (const auto& [v, dist] : neighbors) {
        Affine3d blend = blended_or_fallback(rig.influences[size_t(v)], mesh.part_transforms.parts);
        d.push_back(norm(blend.inverse().apply(mesh.positions[size_t(v)]) - x_can));
    }
    return d;
}

// Full raw embedding of a query point against a posed mesh. `latent_table`
// overrides the rig's stored latents (the trainer passes its parameter
// array); it must be V x latent_dim, row-major.
inline RawEmbedding compute_raw_embedding(const PosedMesh& mesh, const Vec3d& x,
                                          const EmbeddingConfig& cfg,
                                          const double* latent_table = nullptr) {
    SurfaceProjection proj = project_to_mesh(mesh, x);
    auto neighbors = select_neighbors(mesh, proj, x, cfg.k_neighbors, cfg.neighbor_rule);
    RawEmbedding raw;
    GuidanceEmbedding g = guidance_embedding(x, mesh, neighbors, cfg);
    raw.x_dir = g.x_dir;
    raw.canonical_neighbors = std::move(g.canonical_neighbors);
    raw.distances = distance_embedding(x, mesh, neighbors, cfg.distance_mode);
    const RiggedMesh& rig = *mesh.rig;
    const double* lat = latent_table ? latent_table : rig.latents.data();
    raw.latents.reserve(neighbors.size() * size_t(cfg.latent_dim));
    for (const auto& [v, d] : neighbors) {
        raw.neighbor_indices.push_back(v);
        for (int l = 0; l < cfg.latent_dim; ++l)
            raw.latents.push_back(lat[size_t(v) * cfg.latent_dim + l]);
    }
    return raw;
}

// Scalar layout consumed by the embedding network, before positional
// encoding: [x_dir?, canonical neighbors, distances?], then the raw latent
// block. The templated batch path below must mirror this exactly.
inline void flatten_raw_embedding(const RawEmbedding& raw, const EmbeddingConfig& cfg,
                                  std::vector<double>& enc, std::vector<double>& latents) {
    if (cfg.direction_mode != DirectionMode::off) {
        enc.push_back(raw.x_dir.x);
        enc.push_back(raw.x_dir.y);
        enc.push_back(raw.x_dir.z);
    }
    for (const auto& v : raw.canonical_neighbors) {
        enc.push_back(v.x);
        enc.push_back(v.y);
        enc.push_back(v.z);
    }
    if (cfg.distance_mode != DistanceMode::off)
        enc.insert(enc.end(), raw.distances.begin(), raw.distances.end());
    latents.insert(latents.end(), raw.latents.begin(), raw.latents.end());
}

// q = psi(gamma(q_g), gamma(q_p), q_a). Latent codes bypass the positional
// encoding.
inline std::vector<double> assemble_embedding(const RawEmbedding& raw, const EmbeddingConfig& cfg,
                                              const std::vector<double>& psi_params) {
    if (psi_params.size() != cfg.psi_param_count())
        throw ConfigError("assemble_embedding: psi parameter size does not match config");
    std::vector<double> enc, lat;
    flatten_raw_embedding(raw, cfg, enc, lat);
    if (int(enc.size()) != cfg.encoded_count() || int(lat.size()) != cfg.latent_count())
        throw ConfigError("assemble_embedding: raw embedding does not match config widths");
    std::vector<double> encoded = positional_encode(enc, cfg.pe_frequencies);
    encoded.insert(encoded.end(), lat.begin(), lat.end());
    MlpShape shape = cfg.psi_shape();
    EMat<double> x0(shape.input_width(), 1);
    for (int i = 0; i < shape.input_width(); ++i) x0(i, 0) = encoded[size_t(i)];
    EMat<double> out;
    mlp_forward(shape, psi_params.data(), x0, out, nullptr);
    std::vector<double> q(size_t(shape.output_width()));
    for (int i = 0; i < shape.output_width(); ++i) q[size_t(i)] = out(i, 0);
    return q;
}

// ---------------------------------------------------------------------------
// Templated per-point assembly shared by inference and training.

// Differentiable view of the posed body for one tape (or one plain
// evaluation): part transforms in S plus per-vertex caches of posed
// positions, inverse-skinned positions, and inverse blends.
template <class S>
struct DiffBody {
    const RiggedMesh* rig = nullptr;
    std::vector<Affine3<S>> parts;

    struct VertData {
        Vec3<S> posed;
        Vec3<S> canon;
        Affine3<S> inv_blend;
        Mat3<S> inv_rot;
        bool has_posed = false, has_canon = false, has_inv = false, has_rot = false;
    };
    std::vector<VertData> cache;

    DiffBody(const RiggedMesh& r, std::vector<Affine3<S>> part_transforms)
        : rig(&r), parts(std::move(part_transforms)), cache(r.vertices.size()) {}

    const Vec3<S>& posed(int v) {
        VertData& d = cache[size_t(v)];
        if (!d.has_posed) {
            Affine3<S> blend = blended_from_influences(rig->influences[size_t(v)], parts);
            d.posed = blend.apply_point(rig->vertices[size_t(v)]);
            d.has_posed = true;
        }
        return d.posed;
    }
    const Affine3<S>& inv_blend(int v) {
        VertData& d = cache[size_t(v)];
        if (!d.has_inv) {
            d.inv_blend = blended_or_fallback(rig->influences[size_t(v)], parts).inverse();
            d.has_inv = true;
        }
        return d.inv_blend;
    }
    const Vec3<S>& canonical(int v) {
        VertData& d = cache[size_t(v)];
        if (!d.has_canon) {
            d.canon = inv_blend(v).apply(posed(v));
            d.has_canon = true;
        }
        return d.canon;
    }
    const Mat3<S>& inverse_rotation(int v) {
        VertData& d = cache[size_t(v)];
        if (!d.has_rot) {
            d.inv_rot = polar_rotation(inv_blend(v).A);
            d.has_rot = true;
        }
        return d.inv_rot;
    }
};

// Appends one sample's network inputs: encoded scalars to `enc`, latent
// scalars to `raw`. Selection (projection, neighbor choice) runs on the plain
// posed mesh; every continuous quantity is rebuilt from `body` so its pose
// dependence is visible to the tape. Layout matches flatten_raw_embedding.
template <class Ctx>
void embed_point(Ctx& ctx, DiffBody<typename Ctx::S>& body, const PosedMesh& mesh,
                 const EmbeddingConfig& cfg, const Vec3<typename Ctx::S>& x, const Vec3d& x_plain,
                 std::vector<typename Ctx::S>& enc, std::vector<typename Ctx::S>& raw) {
    using S = typename Ctx::S;
    using std::sqrt;
    SurfaceProjection proj = project_to_mesh(mesh, x_plain);
    auto neighbors = select_neighbors(mesh, proj, x_plain, cfg.k_neighbors, cfg.neighbor_rule);
    const int v0 = neighbors[0].first;

    if (cfg.direction_mode != DirectionMode::off) {
        Vec3d diff_plain = mesh.positions[size_t(v0)] - x_plain;
        if (norm(diff_plain) < kOnSurfaceEps) {
            enc.push_back(S(0.0));
            enc.push_back(S(0.0));
            enc.push_back(S(0.0));
        } else {
            Vec3<S> diff = body.posed(v0) - x;
            Vec3<S> dir = diff / sqrt(dot(diff, diff));
            if (cfg.direction_mode == DirectionMode::inverse) dir = body.inverse_rotation(v0) * dir;
            enc.push_back(dir.x);
            enc.push_back(dir.y);
            enc.push_back(dir.z);
        }
    }
    for (const auto& [v, d] : neighbors) {
        const Vec3<S>& c = body.canonical(v);
        enc.push_back(c.x);
        enc.push_back(c.y);
        enc.push_back(c.z);
    }
    if (cfg.distance_mode == DistanceMode::observation) {
        for (const auto& [v, d] : neighbors) {
            Vec3<S> diff = body.posed(v) - x;
            enc.push_back(sqrt(dot(diff, diff)));
        }
    } else if (cfg.distance_mode == DistanceMode::canonical) {
        Vec3<S> x_can = body.inv_blend(v0).apply(x);
        for (const auto& [v, d] : neighbors) {
            Vec3<S> diff = body.canonical(v) - x_can;
            enc.push_back(sqrt(dot(diff, diff)));
        }
    }
    for (const auto& [v, d] : neighbors)
        for (int l = 0; l < cfg.latent_dim; ++l) raw.push_back(ctx.latent(v, l));
}

}  // namespace mgnerf
