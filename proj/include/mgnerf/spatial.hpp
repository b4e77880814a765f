// Geometric queries against the posed mesh: closest point on the surface,
// geodesic neighbor selection, and ray depth bounds. A PosedMesh is immutable
// after build; all queries are pure.
#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <vector>

#include "mgnerf/errors.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/rig.hpp"

namespace mgnerf {

// Binary AABB tree over triangles, median split on the longest centroid axis.
// The tree stores only topology and boxes; queries take the vertex/triangle
// arrays they were built from, so the owning struct stays movable.
class AabbTree {
public:
    void build(const std::vector<Vec3d>& positions, const std::vector<std::array<int, 3>>& tris) {
        order_.resize(tris.size());
        for (size_t i = 0; i < tris.size(); ++i) order_[i] = int(i);
        nodes_.clear();
        if (!tris.empty()) build_node(positions, tris, 0, int(tris.size()));
    }

    bool empty() const { return nodes_.empty(); }

    struct Closest {
        double dist2 = std::numeric_limits<double>::infinity();
        int triangle = -1;
        Vec3d point;
        Vec3d bary;
    };

    Closest closest_point(const std::vector<Vec3d>& positions,
                          const std::vector<std::array<int, 3>>& tris, const Vec3d& q) const {
        Closest best;
        if (!nodes_.empty()) closest_rec(positions, tris, 0, q, best);
        return best;
    }

    // Visits every triangle whose box the ray touches; f(tri_index).
    template <class F>
    void for_each_ray_candidate(const Vec3d& o, const Vec3d& d, F&& f) const {
        if (nodes_.empty()) return;
        Vec3d inv{1.0 / d.x, 1.0 / d.y, 1.0 / d.z};
        ray_rec(0, o, inv, f);
    }

private:
    struct Node {
        Vec3d lo, hi;
        int left = -1, right = -1;  // children, or leaf range below
        int start = 0, count = 0;   // into order_ when leaf
        bool leaf() const { return left < 0; }
    };

    static constexpr int kLeafSize = 4;

    std::vector<int> order_;
    std::vector<Node> nodes_;

    static Vec3d centroid(const std::vector<Vec3d>& pos, const std::array<int, 3>& tri) {
        return (pos[tri[0]] + pos[tri[1]] + pos[tri[2]]) / 3.0;
    }

    int build_node(const std::vector<Vec3d>& pos, const std::vector<std::array<int, 3>>& tris,
                   int start, int count) {
        Node node;
        node.lo = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                   std::numeric_limits<double>::infinity()};
        node.hi = -node.lo;
        Vec3d clo = node.lo, chi = node.hi;
        for (int i = start; i < start + count; ++i) {
            const auto& tri = tris[order_[i]];
            for (int e = 0; e < 3; ++e) {
                node.lo = cwise_min(node.lo, pos[tri[e]]);
                node.hi = cwise_max(node.hi, pos[tri[e]]);
            }
            Vec3d c = centroid(pos, tri);
            clo = cwise_min(clo, c);
            chi = cwise_max(chi, c);
        }
        int idx = int(nodes_.size());
        nodes_.push_back(node);
        if (count <= kLeafSize) {
            nodes_[idx].start = start;
            nodes_[idx].count = count;
            // Ascending triangle order inside leaves keeps tie-breaks stable.
            std::sort(order_.begin() + start, order_.begin() + start + count);
            return idx;
        }
        Vec3d ext = chi - clo;
        int axis = (ext.x >= ext.y && ext.x >= ext.z) ? 0 : (ext.y >= ext.z ? 1 : 2);
        int mid = start + count / 2;
        std::nth_element(order_.begin() + start, order_.begin() + mid,
                         order_.begin() + start + count, [&](int a, int b) {
                             double ca = centroid(pos, tris[a])[axis];
                             double cb = centroid(pos, tris[b])[axis];
                             return ca < cb || (ca == cb && a < b);
                         });
        int l = build_node(pos, tris, start, mid - start);
        int r = build_node(pos, tris, mid, start + count - mid);
        nodes_[idx].left = l;
        nodes_[idx].right = r;
        return idx;
    }

    static double box_dist2(const Node& n, const Vec3d& q) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            double v = q[a];
            if (v < n.lo[a]) d2 += sqr(n.lo[a] - v);
            else if (v > n.hi[a]) d2 += sqr(v - n.hi[a]);
        }
        return d2;
    }

    void closest_rec(const std::vector<Vec3d>& pos, const std::vector<std::array<int, 3>>& tris,
                     int ni, const Vec3d& q, Closest& best) const {
        const Node& n = nodes_[ni];
        if (n.leaf()) {
            for (int i = n.start; i < n.start + n.count; ++i) {
                int t = order_[i];
                const auto& tri = tris[t];
                TriangleClosest cp =
                    closest_point_on_triangle(q, pos[tri[0]], pos[tri[1]], pos[tri[2]]);
                double d2 = norm2(cp.point - q);
                if (d2 < best.dist2 || (d2 == best.dist2 && t < best.triangle)) {
                    best.dist2 = d2;
                    best.triangle = t;
                    best.point = cp.point;
                    best.bary = cp.bary;
                }
            }
            return;
        }
        double dl = box_dist2(nodes_[n.left], q);
        double dr = box_dist2(nodes_[n.right], q);
        int first = n.left, second = n.right;
        double dfirst = dl, dsecond = dr;
        if (dr < dl) { first = n.right; second = n.left; std::swap(dfirst, dsecond); }
        if (dfirst <= best.dist2) closest_rec(pos, tris, first, q, best);
        if (dsecond <= best.dist2) closest_rec(pos, tris, second, q, best);
    }

    static bool ray_box(const Node& n, const Vec3d& o, const Vec3d& inv) {
        double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            double ta = (n.lo[a] - o[a]) * inv[a];
            double tb = (n.hi[a] - o[a]) * inv[a];
            if (ta > tb) std::swap(ta, tb);
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
            if (t0 > t1) return false;
        }
        return true;
    }

    template <class F>
    void ray_rec(int ni, const Vec3d& o, const Vec3d& inv, F&& f) const {
        const Node& n = nodes_[ni];
        if (!ray_box(n, o, inv)) return;
        if (n.leaf()) {
            for (int i = n.start; i < n.start + n.count; ++i) f(order_[i]);
            return;
        }
        ray_rec(n.left, o, inv, f);
        ray_rec(n.right, o, inv, f);
    }
};

// The mesh deformed to a pose, with an acceleration structure over its
// triangles. Rebuilding for a new pose produces a fresh value.
struct PosedMesh {
    const RiggedMesh* rig = nullptr;
    std::vector<Vec3d> positions;
    PartTransforms part_transforms;
    AabbTree tree;

    static PosedMesh build(const RiggedMesh& mesh, const Skeleton& skel, const Pose& pose) {
        PosedMesh pm;
        pm.rig = &mesh;
        pm.part_transforms = forward_kinematics(skel, pose);
        pm.positions.resize(mesh.vertices.size());
        for (size_t v = 0; v < mesh.vertices.size(); ++v) {
            Affine3d blend = blended_from_influences(mesh.influences[v], pm.part_transforms.parts);
            pm.positions[v] = blend.apply(mesh.vertices[v]);
        }
        pm.tree.build(pm.positions, mesh.triangles);
        return pm;
    }
};

struct SurfaceProjection {
    Vec3d point;       // closest point on the surface
    int triangle = -1;
    int v0 = -1;       // nearest vertex of that triangle to the projected point
    double distance = 0.0;
};

inline SurfaceProjection project_to_mesh(const PosedMesh& mesh, const Vec3d& x) {
    if (mesh.tree.empty()) throw StructuralError("project_to_mesh: empty mesh");
    AabbTree::Closest c = mesh.tree.closest_point(mesh.positions, mesh.rig->triangles, x);
    SurfaceProjection proj;
    proj.point = c.point;
    proj.triangle = c.triangle;
    proj.distance = std::sqrt(c.dist2);
    const auto& tri = mesh.rig->triangles[c.triangle];
    double best = std::numeric_limits<double>::infinity();
    for (int e = 0; e < 3; ++e) {
        double d2 = norm2(mesh.positions[tri[e]] - c.point);
        if (d2 < best || (d2 == best && tri[e] < proj.v0)) {
            best = d2;
            proj.v0 = tri[e];
        }
    }
    return proj;
}

enum class NeighborRule { euclidean_knn, geodesic_1hop, nearest_only, geodesic_2hop };

// K neighbors for the query embedding. For the geodesic rules the candidate
// set is {v0} plus its ring (plus the 2-hop ring when requested or when the
// 1-ring cannot fill K); v0 is always first and the tail is sorted by
// observation-space distance to x, ties by index. Deficits pad by repeating
// the last entry. The euclidean rule returns the plain K nearest vertices.
inline std::vector<std::pair<int, double>> select_neighbors(
    const PosedMesh& mesh, const SurfaceProjection& proj, const Vec3d& x, int k,
    NeighborRule rule = NeighborRule::geodesic_1hop) {
    if (k < 1) throw ArgumentError("select_neighbors: K must be >= 1");
    const auto dist = [&](int v) { return norm(mesh.positions[v] - x); };
    std::vector<std::pair<int, double>> out;
    out.reserve(size_t(k));

    if (rule == NeighborRule::euclidean_knn) {
        std::vector<std::pair<double, int>> all;
        all.reserve(mesh.positions.size());
        for (size_t v = 0; v < mesh.positions.size(); ++v) all.push_back({dist(int(v)), int(v)});
        int take = std::min<int>(k, int(all.size()));
        std::partial_sort(all.begin(), all.begin() + take, all.end());
        for (int i = 0; i < take; ++i) out.push_back({all[i].second, all[i].first});
        while (int(out.size()) < k && !out.empty()) out.push_back(out.back());
        return out;
    }

    out.push_back({proj.v0, dist(proj.v0)});
    std::vector<int> cands;
    if (rule != NeighborRule::nearest_only) {
        const auto& ring = mesh.rig->adjacency[proj.v0];
        cands.assign(ring.begin(), ring.end());
        bool want_two_hop = rule == NeighborRule::geodesic_2hop || int(cands.size()) + 1 < k;
        if (want_two_hop) {
            std::vector<int> two;
            for (int r : ring)
                for (int n : mesh.rig->adjacency[r]) {
                    if (n == proj.v0) continue;
                    if (std::binary_search(ring.begin(), ring.end(), n)) continue;
                    two.push_back(n);
                }
            std::sort(two.begin(), two.end());
            two.erase(std::unique(two.begin(), two.end()), two.end());
            cands.insert(cands.end(), two.begin(), two.end());
        }
    }
    std::vector<std::pair<double, int>> tail;
    tail.reserve(cands.size());
    for (int c : cands) tail.push_back({dist(c), c});
    std::sort(tail.begin(), tail.end());
    for (const auto& [d, v] : tail) {
        if (int(out.size()) >= k) break;
        out.push_back({v, d});
    }
    while (int(out.size()) < k) out.push_back(out.back());
    return out;
}

struct RayBounds {
    double t_min = 0.0, t_max = 0.0;   // raw nearest/farthest hit parameters
    int tri_min = -1, tri_max = -1;
    double z_near = 0.0, z_far = 0.0;  // padded sampling interval
};

constexpr double kDefaultRayPad = 0.04;

inline std::optional<RayBounds> ray_bounds(const PosedMesh& mesh, const Vec3d& origin,
                                           const Vec3d& dir, double pad = kDefaultRayPad) {
    if (std::abs(norm(dir) - 1.0) > 1e-9)
        throw ArgumentError("ray_bounds: direction must be normalized");
    RayBounds rb;
    rb.t_min = std::numeric_limits<double>::infinity();
    rb.t_max = -std::numeric_limits<double>::infinity();
    mesh.tree.for_each_ray_candidate(origin, dir, [&](int t) {
        const auto& tri = mesh.rig->triangles[t];
        auto hit = ray_triangle(origin, dir, mesh.positions[tri[0]], mesh.positions[tri[1]],
                                mesh.positions[tri[2]]);
        if (!hit) return;
        if (*hit < rb.t_min || (*hit == rb.t_min && t < rb.tri_min)) { rb.t_min = *hit; rb.tri_min = t; }
        if (*hit > rb.t_max || (*hit == rb.t_max && t < rb.tri_max)) { rb.t_max = *hit; rb.tri_max = t; }
    });
    if (rb.tri_min < 0) return std::nullopt;
    rb.z_near = std::max(0.0, rb.t_min - pad);
    rb.z_far = rb.t_max + pad;
    return rb;
}

}  // namespace mgnerf
