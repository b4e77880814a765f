// Articulated skinned mesh: skeleton, forward kinematics, linear blend
// skinning (forward and inverse), geodesic adjacency, and the procedural
// capsule-limb body used to generate synthetic sequences.
//
// All data here is immutable after construction; every operation is a pure
// function and safe to call concurrently.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mgnerf/errors.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/rng.hpp"

namespace mgnerf {

struct Joint {
    int parent = -1;      // index of parent joint, -1 for the root
    Vec3d offset;         // rest-pose offset from the parent (world units)
};

struct Skeleton {
    std::vector<Joint> joints;

    int part_count() const { return int(joints.size()); }

    // Topological order, single root, K >= 1.
    void validate() const {
        if (joints.empty()) throw ArgumentError("skeleton: needs at least one joint");
        int roots = 0;
        for (size_t j = 0; j < joints.size(); ++j) {
            int p = joints[j].parent;
            if (p < 0) {
                ++roots;
            } else if (p >= int(j)) {
                throw ArgumentError("skeleton: parent index must precede joint");
            }
        }
        if (roots != 1) throw ArgumentError("skeleton: exactly one root required");
    }

    // Rest-pose world positions of every joint.
    std::vector<Vec3d> rest_positions() const {
        std::vector<Vec3d> pos(joints.size());
        for (size_t j = 0; j < joints.size(); ++j) {
            int p = joints[j].parent;
            pos[j] = (p < 0) ? joints[j].offset : pos[p] + joints[j].offset;
        }
        return pos;
    }
};

struct Pose {
    std::vector<Vec3d> joint_rotations;  // axis-angle, radians, one per joint
    Vec3d root_translation{0, 0, 0};

    static Pose rest(int joint_count) {
        Pose p;
        p.joint_rotations.assign(size_t(joint_count), Vec3d{0, 0, 0});
        return p;
    }

    size_t size() const { return joint_rotations.size(); }

    bool finite() const {
        auto ok = [](const Vec3d& v) {
            return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
        };
        for (const auto& r : joint_rotations)
            if (!ok(r)) return false;
        return ok(root_translation);
    }

    // Flat layout: [aa_0 ... aa_{J-1}, root_translation], length 3J + 3.
    std::vector<double> to_flat() const {
        std::vector<double> f;
        f.reserve(3 * joint_rotations.size() + 3);
        for (const auto& r : joint_rotations) { f.push_back(r.x); f.push_back(r.y); f.push_back(r.z); }
        f.push_back(root_translation.x);
        f.push_back(root_translation.y);
        f.push_back(root_translation.z);
        return f;
    }

    template <class It>
    static Pose from_flat(It begin, size_t joint_count) {
        Pose p;
        p.joint_rotations.resize(joint_count);
        It it = begin;
        for (size_t j = 0; j < joint_count; ++j) {
            p.joint_rotations[j] = {double(it[0]), double(it[1]), double(it[2])};
            it += 3;
        }
        p.root_translation = {double(it[0]), double(it[1]), double(it[2])};
        return p;
    }

    static size_t flat_size(int joint_count) { return 3 * size_t(joint_count) + 3; }
};

// Per-part rigid transforms G_k mapping canonical space to observation space.
struct PartTransforms {
    std::vector<Affine3d> parts;

    size_t size() const { return parts.size(); }
    const Affine3d& operator[](size_t k) const { return parts[k]; }
};

struct RiggedMesh {
    std::vector<Vec3d> vertices;                    // canonical positions
    std::vector<std::array<int, 3>> triangles;
    std::vector<double> blend_weights;              // dense V x K, row-major
    std::vector<std::vector<int>> adjacency;        // 1-ring, sorted ascending
    std::vector<double> latents;                    // V x latent_dim, row-major
    std::vector<Vec3d> colors;                      // per-vertex albedo
    int part_count = 0;
    int latent_dim = 0;

    // Sparse view of the blend weights; almost every vertex has <= 4 nonzero
    // influences, and the hot skinning paths iterate these.
    std::vector<std::vector<std::pair<int, double>>> influences;

    size_t vertex_count() const { return vertices.size(); }

    const double* weights_of(int v) const { return &blend_weights[size_t(v) * part_count]; }

    void build_adjacency() {
        adjacency.assign(vertices.size(), {});
        std::vector<std::set<int>> adj(vertices.size());
        for (const auto& t : triangles) {
            for (int e = 0; e < 3; ++e) {
                int a = t[e], b = t[(e + 1) % 3];
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for (size_t v = 0; v < vertices.size(); ++v)
            adjacency[v].assign(adj[v].begin(), adj[v].end());
    }

    void build_influences() {
        influences.assign(vertices.size(), {});
        for (size_t v = 0; v < vertices.size(); ++v) {
            const double* w = weights_of(int(v));
            for (int k = 0; k < part_count; ++k)
                if (w[k] > 0.0) influences[v].push_back({k, w[k]});
        }
    }

    void finalize() {
        build_adjacency();
        build_influences();
    }

    void validate() const {
        const size_t v_count = vertices.size();
        if (part_count < 1) throw ArgumentError("mesh: part count must be >= 1");
        if (blend_weights.size() != v_count * size_t(part_count))
            throw ArgumentError("mesh: blend weight array has wrong size");
        if (latent_dim < 0 || latents.size() != v_count * size_t(latent_dim))
            throw ArgumentError("mesh: latent array has wrong size");
        for (size_t v = 0; v < v_count; ++v) {
            double sum = 0.0;
            for (int k = 0; k < part_count; ++k) {
                double w = blend_weights[v * part_count + k];
                if (w < 0.0) throw ArgumentError("mesh: negative blend weight");
                sum += w;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw ArgumentError("mesh: blend weights must sum to 1");
        }
        std::map<std::pair<int, int>, int> edge_count;
        for (const auto& t : triangles) {
            for (int e = 0; e < 3; ++e) {
                int a = t[e], b = t[(e + 1) % 3];
                if (a < 0 || b < 0 || a >= int(v_count) || b >= int(v_count))
                    throw ArgumentError("mesh: triangle index out of range");
                if (a == b) throw ArgumentError("mesh: degenerate triangle");
                ++edge_count[{std::min(a, b), std::max(a, b)}];
            }
        }
        for (const auto& [e, c] : edge_count)
            if (c > 2) throw ArgumentError("mesh: non-manifold edge");
        if (adjacency.size() == v_count) {
            for (size_t v = 0; v < v_count; ++v)
                for (int n : adjacency[v]) {
                    const auto& back = adjacency[n];
                    if (!std::binary_search(back.begin(), back.end(), int(v)))
                        throw ArgumentError("mesh: asymmetric adjacency");
                }
        }
    }
};

// ---------------------------------------------------------------------------
// Forward kinematics and skinning.

// Templated core so poses can be tape-recorded. Joint offsets and rest
// positions stay plain constants; only the pose is S-valued.
template <class S>
std::vector<Affine3<S>> forward_kinematics_t(const Skeleton& skel,
                                             const std::vector<Vec3<S>>& joint_rotations,
                                             const Vec3<S>& root_translation) {
    const size_t n = skel.joints.size();
    if (joint_rotations.size() != n)
        throw ArgumentError("forward_kinematics: pose length does not match skeleton");
    std::vector<Vec3d> rest = skel.rest_positions();
    std::vector<Affine3<S>> world(n);
    std::vector<Affine3<S>> parts(n);
    for (size_t j = 0; j < n; ++j) {
        Mat3<S> r = rotation_from_axis_angle(joint_rotations[j]);
        const Vec3d& off = skel.joints[j].offset;
        Affine3<S> local{r, {S(off.x), S(off.y), S(off.z)}};
        if (skel.joints[j].parent < 0) {
            local.t += root_translation;
            world[j] = local;
        } else {
            world[j] = world[skel.joints[j].parent].compose(local);
        }
        // G_j = W_j * inverse(rest W_j); the rest transform is the pure
        // translation to the joint's rest position.
        parts[j] = {world[j].A, world[j].t - world[j].A * Vec3<S>{S(rest[j].x), S(rest[j].y), S(rest[j].z)}};
    }
    return parts;
}

inline PartTransforms forward_kinematics(const Skeleton& skel, const Pose& pose) {
    if (!pose.finite()) throw ArgumentError("forward_kinematics: non-finite pose");
    PartTransforms g;
    g.parts = forward_kinematics_t<double>(skel, pose.joint_rotations, pose.root_translation);
    return g;
}

// World position of joint j under the given part transforms.
inline Vec3d joint_world_position(const Skeleton& skel, const PartTransforms& g, int j) {
    std::vector<Vec3d> rest = skel.rest_positions();
    return g.parts[j].apply(rest[j]);
}

// Sum_k w_k G_k as an affine transform (the 4x4 blend matrix of LBS; the last
// row is implicit and exact because the weights sum to one).
template <class S, class W>
Affine3<S> blended_transform_t(const W* weights, size_t count, const std::vector<Affine3<S>>& g) {
    Affine3<S> out;
    out.A = Mat3<S>::zero();
    out.t = {S(0), S(0), S(0)};
    for (size_t k = 0; k < count; ++k) {
        for (int i = 0; i < 9; ++i) out.A.m[i] = out.A.m[i] + g[k].A.m[i] * S(weights[k]);
        out.t += g[k].t * S(weights[k]);
    }
    return out;
}

inline Affine3d blended_transform(const std::vector<double>& weights, const PartTransforms& g) {
    if (weights.size() != g.size())
        throw ArgumentError("blended_transform: weight count does not match parts");
    return blended_transform_t<double>(weights.data(), weights.size(), g.parts);
}

// Sparse blend over an influence list.
template <class S>
Affine3<S> blended_from_influences(const std::vector<std::pair<int, double>>& infl,
                                   const std::vector<Affine3<S>>& g) {
    Affine3<S> out;
    out.A = Mat3<S>::zero();
    out.t = {S(0), S(0), S(0)};
    for (const auto& [k, w] : infl) {
        for (int i = 0; i < 9; ++i) out.A.m[i] = out.A.m[i] + g[k].A.m[i] * S(w);
        out.t += g[k].t * S(w);
    }
    return out;
}

inline Vec3d lbs_forward(const Vec3d& v, const std::vector<double>& weights,
                         const PartTransforms& g) {
    return blended_transform(weights, g).apply(v);
}

// Frobenius-based condition estimate of the blend's linear part. This upper
// bounds the 2-norm condition number, which the inverse contract caps at 1e8.
inline double blend_condition(const Affine3d& blend) {
    Mat3d inv = blend.A.inverse();
    double c = std::sqrt(blend.A.frobenius2() * inv.frobenius2());
    return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
}

constexpr double kBlendConditionLimit = 1e8;

inline Vec3d lbs_inverse(const Vec3d& v_obs, const std::vector<double>& weights,
                         const PartTransforms& g) {
    Affine3d blend = blended_transform(weights, g);
    if (blend_condition(blend) > kBlendConditionLimit)
        throw DegenerateBlendError("lbs_inverse: blended matrix is near-singular");
    return blend.inverse().apply(v_obs);
}

// Degenerate-blend policy for query paths: fall back to the single
// highest-weight part transform so the mapping stays bounded.
template <class S>
Affine3<S> blended_or_fallback(const std::vector<std::pair<int, double>>& infl,
                               const std::vector<Affine3<S>>& g, bool* degenerate = nullptr) {
    Affine3<S> blend = blended_from_influences(infl, g);
    Affine3d plain;
    for (int i = 0; i < 9; ++i) plain.A.m[i] = value_of(blend.A.m[i]);
    plain.t = {value_of(blend.t.x), value_of(blend.t.y), value_of(blend.t.z)};
    if (blend_condition(plain) <= kBlendConditionLimit) {
        if (degenerate) *degenerate = false;
        return blend;
    }
    if (degenerate) *degenerate = true;
    int best = infl.empty() ? 0 : infl[0].first;
    double best_w = infl.empty() ? 0.0 : infl[0].second;
    for (const auto& [k, w] : infl)
        if (w > best_w) { best = k; best_w = w; }
    return g[best];
}

inline const std::vector<int>& one_ring(const RiggedMesh& mesh, int vertex) {
    if (vertex < 0 || size_t(vertex) >= mesh.vertices.size())
        throw ArgumentError("one_ring: vertex index out of range");
    return mesh.adjacency[vertex];
}

// Rewrites the pose so that the whole body undergoes the rigid motion
// x -> R x + t on top of its current pose.
inline Pose compose_root_motion(const Skeleton& skel, const Pose& pose, const Mat3d& r,
                                const Vec3d& t) {
    int root = -1;
    for (size_t j = 0; j < skel.joints.size(); ++j)
        if (skel.joints[j].parent < 0) root = int(j);
    Pose out = pose;
    Mat3d r_root = rotation_from_axis_angle(pose.joint_rotations[root]);
    out.joint_rotations[root] = axis_angle_from_rotation(r * r_root);
    const Vec3d& o = skel.joints[root].offset;
    out.root_translation = r * (pose.root_translation + o) + t - o;
    return out;
}

// ---------------------------------------------------------------------------
// Procedural body.

struct BodyConfig {
    double height = 1.8;
    double torso_radius = 0.14;
    double head_radius = 0.10;
    double upper_arm_radius = 0.05;
    double forearm_radius = 0.045;
    double thigh_radius = 0.08;
    double shin_radius = 0.06;
    int limb_segments = 6;   // rings along each capsule body
    int radial_segments = 10;
    int cap_rings = 2;
    int latent_dim = 16;
    double blend_zone = 0.07;  // half-width of the weight falloff at joints

    void validate() const {
        if (height <= 0 || torso_radius <= 0 || head_radius <= 0 || upper_arm_radius <= 0 ||
            forearm_radius <= 0 || thigh_radius <= 0 || shin_radius <= 0 || blend_zone <= 0)
            throw ArgumentError("body config: dimensions must be positive");
        if (limb_segments < 2) throw ArgumentError("body config: limb segments must be >= 2");
        if (radial_segments < 3 || cap_rings < 1)
            throw ArgumentError("body config: tessellation too coarse");
        if (latent_dim < 0) throw ArgumentError("body config: latent_dim must be >= 0");
    }
};

struct Rig {
    RiggedMesh mesh;
    Skeleton skeleton;
};

namespace detail {

// Appends a closed capsule from `a` to `b` with radius r. All its vertices
// get `part` as the dominant blend part; vertices within the blend zone of
// the attachment joint share weight with `parent_part`.
inline void append_capsule(RiggedMesh& mesh, const Vec3d& a, const Vec3d& b, double r, int part,
                           int parent_part, const Vec3d& attach, const Vec3d& color,
                           const BodyConfig& cfg) {
    const int radial = cfg.radial_segments;
    const int caps = cfg.cap_rings;
    const int body = cfg.limb_segments;
    const double pi = 3.14159265358979323846;

    Vec3d axis = b - a;
    double len = norm(axis);
    Vec3d dir = axis / len;
    Vec3d ref = std::abs(dir.y) < 0.9 ? Vec3d{0, 1, 0} : Vec3d{1, 0, 0};
    Vec3d u = normalized(cross(ref, dir));
    Vec3d v = cross(dir, u);

    const int base = int(mesh.vertices.size());
    auto push_vertex = [&](const Vec3d& p) {
        mesh.vertices.push_back(p);
        mesh.colors.push_back(color);
        // Weight split against the parent part near the attachment joint.
        std::vector<double> w(size_t(mesh.part_count), 0.0);
        if (parent_part >= 0) {
            double d = norm(p - attach);
            double tnorm = std::clamp(d / (2.0 * cfg.blend_zone), 0.0, 1.0);
            double s = tnorm * tnorm * (3.0 - 2.0 * tnorm);  // smoothstep
            double wp = 0.5 * (1.0 - s);
            w[size_t(parent_part)] = wp;
            w[size_t(part)] = 1.0 - wp;
        } else {
            w[size_t(part)] = 1.0;
        }
        mesh.blend_weights.insert(mesh.blend_weights.end(), w.begin(), w.end());
    };

    // Ring layout along the axis: bottom pole, bottom cap rings (to the
    // equator at h=0), body rings, top cap rings (equator at h=len first),
    // top pole.
    push_vertex(a - dir * r);
    std::vector<std::pair<double, double>> rings;  // (height, radius)
    for (int i = 1; i <= caps; ++i) {
        double ang = 0.5 * pi * double(i) / caps;
        rings.push_back({-r * std::cos(ang), r * std::sin(ang)});
    }
    for (int j = 1; j < body; ++j) rings.push_back({len * double(j) / body, r});
    for (int i = caps; i >= 1; --i) {
        double ang = 0.5 * pi * double(i) / caps;
        rings.push_back({len + r * std::cos(ang), r * std::sin(ang)});
    }
    for (const auto& [h, rr] : rings)
        for (int s = 0; s < radial; ++s) {
            double phi = 2.0 * pi * double(s) / radial;
            push_vertex(a + dir * h + (u * std::cos(phi) + v * std::sin(phi)) * rr);
        }
    push_vertex(b + dir * r);

    const int n_rings = int(rings.size());
    const int top_pole = base + 1 + n_rings * radial;
    auto ring_vertex = [&](int ring, int s) { return base + 1 + ring * radial + (s % radial); };

    for (int s = 0; s < radial; ++s)
        mesh.triangles.push_back({base, ring_vertex(0, s + 1), ring_vertex(0, s)});
    for (int ringi = 0; ringi + 1 < n_rings; ++ringi)
        for (int s = 0; s < radial; ++s) {
            int a0 = ring_vertex(ringi, s), a1 = ring_vertex(ringi, s + 1);
            int b0 = ring_vertex(ringi + 1, s), b1 = ring_vertex(ringi + 1, s + 1);
            mesh.triangles.push_back({a0, a1, b1});
            mesh.triangles.push_back({a0, b1, b0});
        }
    for (int s = 0; s < radial; ++s)
        mesh.triangles.push_back({top_pole, ring_vertex(n_rings - 1, s), ring_vertex(n_rings - 1, s + 1)});
}

}  // namespace detail

// An 11-part humanoid: pelvis, torso, head, upper arms + forearms (T-pose
// along x), thighs + shins. Deterministic for a given seed; the seed only
// drives the initial per-vertex latent codes.
inline Rig make_procedural_body(uint64_t seed, const BodyConfig& cfg = {}) {
    cfg.validate();
    const double s = cfg.height / 1.8;

    Rig rig;
    auto& skel = rig.skeleton;
    auto J = [&](int parent, Vec3d off) { skel.joints.push_back({parent, off * s}); };
    // 0 pelvis, 1 spine, 2 head, 3 l_upper_arm, 4 l_forearm,
    // 5 r_upper_arm, 6 r_forearm, 7 l_thigh, 8 l_shin, 9 r_thigh, 10 r_shin
    J(-1, {0, 1.00, 0});
    J(0, {0, 0.12, 0});
    J(1, {0, 0.43, 0});
    J(1, {0.17, 0.36, 0});
    J(3, {0.26, 0, 0});
    J(1, {-0.17, 0.36, 0});
    J(5, {-0.26, 0, 0});
    J(0, {0.10, -0.04, 0});
    J(7, {0, -0.46, 0});
    J(0, {-0.10, -0.04, 0});
    J(9, {0, -0.46, 0});
    skel.validate();
    std::vector<Vec3d> jp = skel.rest_positions();

    auto& mesh = rig.mesh;
    mesh.part_count = skel.part_count();
    mesh.latent_dim = cfg.latent_dim;

    const std::array<Vec3d, 11> palette = {{{0.75, 0.35, 0.30},
                                            {0.35, 0.55, 0.80},
                                            {0.85, 0.70, 0.50},
                                            {0.40, 0.75, 0.45},
                                            {0.70, 0.75, 0.35},
                                            {0.45, 0.70, 0.70},
                                            {0.70, 0.45, 0.70},
                                            {0.55, 0.40, 0.75},
                                            {0.80, 0.55, 0.35},
                                            {0.35, 0.65, 0.55},
                                            {0.75, 0.50, 0.55}}};

    struct Part { int id, parent; Vec3d a, b; double r; };
    const double tr = cfg.torso_radius * s, hr = cfg.head_radius * s;
    const double ua = cfg.upper_arm_radius * s, fa = cfg.forearm_radius * s;
    const double th = cfg.thigh_radius * s, sh = cfg.shin_radius * s;
    std::vector<Part> parts = {
        {0, -1, jp[0] - Vec3d{0, 0.06 * s, 0}, jp[1], tr},
        {1, 0, jp[1], jp[1] + Vec3d{0, 0.30 * s, 0}, tr},
        {2, 1, jp[2], jp[2] + Vec3d{0, 0.10 * s, 0}, hr},
        {3, 1, jp[3], jp[4], ua},
        {4, 3, jp[4], jp[4] + Vec3d{0.26 * s, 0, 0}, fa},
        {5, 1, jp[5], jp[6], ua},
        {6, 5, jp[6], jp[6] + Vec3d{-0.26 * s, 0, 0}, fa},
        {7, 0, jp[7], jp[8], th},
        {8, 7, jp[8], jp[8] + Vec3d{0, -0.44 * s, 0}, sh},
        {9, 0, jp[9], jp[10], th},
        {10, 9, jp[10], jp[10] + Vec3d{0, -0.44 * s, 0}, sh},
    };
    for (const auto& p : parts)
        detail::append_capsule(mesh, p.a, p.b, p.r, p.id, p.parent, jp[p.id],
                               palette[size_t(p.id)], cfg);

    Rng rng(seed);
    mesh.latents.resize(mesh.vertices.size() * size_t(cfg.latent_dim));
    for (auto& l : mesh.latents) l = rng.normal(0.0, 0.1);

    mesh.finalize();
    mesh.validate();
    return rig;
}

// ---------------------------------------------------------------------------
// Serialization (rig_v1).

inline nlohmann::json rig_to_json(const Rig& rig) {
    nlohmann::json j;
    j["version"] = "rig_v1";
    std::vector<double> verts;
    verts.reserve(rig.mesh.vertices.size() * 3);
    for (const auto& v : rig.mesh.vertices) { verts.push_back(v.x); verts.push_back(v.y); verts.push_back(v.z); }
    std::vector<int> tris;
    tris.reserve(rig.mesh.triangles.size() * 3);
    for (const auto& t : rig.mesh.triangles) { tris.push_back(t[0]); tris.push_back(t[1]); tris.push_back(t[2]); }
    std::vector<double> colors;
    colors.reserve(rig.mesh.colors.size() * 3);
    for (const auto& c : rig.mesh.colors) { colors.push_back(c.x); colors.push_back(c.y); colors.push_back(c.z); }
    j["vertices"] = verts;
    j["triangles"] = tris;
    j["weights"] = rig.mesh.blend_weights;
    j["latent_dim"] = rig.mesh.latent_dim;
    j["latents"] = rig.mesh.latents;
    j["colors"] = colors;
    nlohmann::json joints = nlohmann::json::array();
    for (const auto& jt : rig.skeleton.joints)
        joints.push_back({{"parent", jt.parent}, {"offset", {jt.offset.x, jt.offset.y, jt.offset.z}}});
    j["skeleton"] = joints;
    return j;
}

inline Rig rig_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || j["version"] != "rig_v1")
        throw DataError("rig: unsupported or missing version (expected rig_v1)");
    for (const char* key : {"vertices", "triangles", "weights", "skeleton", "latent_dim"})
        if (!j.contains(key)) throw DataError(std::string("rig: missing field ") + key);

    Rig rig;
    for (const auto& jt : j["skeleton"]) {
        Joint joint;
        joint.parent = jt.at("parent").get<int>();
        auto off = jt.at("offset");
        joint.offset = {off.at(0).get<double>(), off.at(1).get<double>(), off.at(2).get<double>()};
        rig.skeleton.joints.push_back(joint);
    }
    rig.skeleton.validate();

    auto verts = j["vertices"].get<std::vector<double>>();
    if (verts.size() % 3 != 0) throw DataError("rig: vertex array length not divisible by 3");
    for (size_t i = 0; i < verts.size(); i += 3)
        rig.mesh.vertices.push_back({verts[i], verts[i + 1], verts[i + 2]});
    auto tris = j["triangles"].get<std::vector<int>>();
    if (tris.size() % 3 != 0) throw DataError("rig: triangle array length not divisible by 3");
    for (size_t i = 0; i < tris.size(); i += 3)
        rig.mesh.triangles.push_back({tris[i], tris[i + 1], tris[i + 2]});
    rig.mesh.blend_weights = j["weights"].get<std::vector<double>>();
    rig.mesh.part_count = rig.skeleton.part_count();
    rig.mesh.latent_dim = j["latent_dim"].get<int>();
    if (j.contains("latents")) {
        rig.mesh.latents = j["latents"].get<std::vector<double>>();
    } else {
        rig.mesh.latents.assign(rig.mesh.vertices.size() * size_t(rig.mesh.latent_dim), 0.0);
    }
    if (j.contains("colors")) {
        auto colors = j["colors"].get<std::vector<double>>();
        for (size_t i = 0; i + 2 < colors.size(); i += 3)
            rig.mesh.colors.push_back({colors[i], colors[i + 1], colors[i + 2]});
    } else {
        rig.mesh.colors.assign(rig.mesh.vertices.size(), Vec3d{0.7, 0.7, 0.7});
    }
    rig.mesh.finalize();
    rig.mesh.validate();
    return rig;
}

inline void save_rig(const Rig& rig, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("rig: cannot open for writing: " + path);
    out << rig_to_json(rig).dump();
}

inline Rig load_rig(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("rig: cannot open: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("rig: malformed JSON: ") + e.what());
    }
    return rig_from_json(j);
}

}  // namespace mgnerf
