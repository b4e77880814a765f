// Shared test scenes.
#pragma once

#include "mgnerf/embedding.hpp"
#include "mgnerf/rig.hpp"
#include "mgnerf/spatial.hpp"

namespace mgnerf::fix {

// Single-part rigged mesh from raw geometry; identity weights.
inline Rig make_rigged(std::vector<Vec3d> vertices, std::vector<std::array<int, 3>> triangles,
                       int latent_dim = 0) {
    Rig rig;
    rig.skeleton.joints.push_back({-1, {0, 0, 0}});
    rig.mesh.vertices = std::move(vertices);
    rig.mesh.triangles = std::move(triangles);
    rig.mesh.part_count = 1;
    rig.mesh.latent_dim = latent_dim;
    rig.mesh.blend_weights.assign(rig.mesh.vertices.size(), 1.0);
    rig.mesh.latents.assign(rig.mesh.vertices.size() * size_t(latent_dim), 0.0);
    rig.mesh.colors.assign(rig.mesh.vertices.size(), Vec3d{0.7, 0.7, 0.7});
    rig.mesh.finalize();
    rig.mesh.validate();
    return rig;
}

inline Rig make_tetrahedron() {
    return make_rigged({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}},
                       {{{0, 1, 2}}, {{0, 1, 3}}, {{0, 2, 3}}, {{1, 2, 3}}});
}

// Axis-aligned cube with side `side` centered at the origin.
inline Rig make_cube(double side = 1.0) {
    double h = side / 2.0;
    std::vector<Vec3d> v = {{-h, -h, -h}, {h, -h, -h}, {h, h, -h}, {-h, h, -h},
                            {-h, -h, h},  {h, -h, h},  {h, h, h},  {-h, h, h}};
    std::vector<std::array<int, 3>> t = {{{0, 2, 1}}, {{0, 3, 2}}, {{4, 5, 6}}, {{4, 6, 7}},
                                         {{0, 1, 5}}, {{0, 5, 4}}, {{2, 3, 7}}, {{2, 7, 6}},
                                         {{1, 2, 6}}, {{1, 6, 5}}, {{3, 0, 4}}, {{3, 4, 7}}};
    return make_rigged(std::move(v), std::move(t));
}

// Open cylinder around the y axis; interior vertices have valence 6.
inline Rig make_cylinder(int rings, int segments, double radius = 0.5, double height = 2.0) {
    std::vector<Vec3d> v;
    std::vector<std::array<int, 3>> t;
    for (int r = 0; r < rings; ++r)
        for (int s = 0; s < segments; ++s) {
            double a = 2.0 * 3.14159265358979323846 * s / segments;
            v.push_back({radius * std::cos(a), height * r / (rings - 1), radius * std::sin(a)});
        }
    auto idx = [&](int r, int s) { return r * segments + (s % segments); };
    for (int r = 0; r + 1 < rings; ++r)
        for (int s = 0; s < segments; ++s) {
            t.push_back({idx(r, s), idx(r, s + 1), idx(r + 1, s + 1)});
            t.push_back({idx(r, s), idx(r + 1, s + 1), idx(r + 1, s)});
        }
    return make_rigged(std::move(v), std::move(t));
}

// Two flat flaps joined along the hinge segment (0,0,0)-(0,0,1). Part 0 owns
// the hinge and the left flap; part 1 owns the right flap and rotates about
// the z axis. A query above the hinge keeps the same nearest vertex (index 0)
// and the same distance to it for any flap angle, while its ring distances
// change: the separation scenario of the distance prior.
struct HingeScene {
    Rig rig;
    Vec3d query{0.0, 0.3, 0.5};

    Pose pose(double flap_angle) const {
        Pose p = Pose::rest(2);
        p.joint_rotations[1] = {0.0, 0.0, flap_angle};
        return p;
    }
};

inline HingeScene make_hinge(int latent_dim = 2) {
    HingeScene scene;
    Rig& rig = scene.rig;
    rig.skeleton.joints.push_back({-1, {0, 0, 0}});
    rig.skeleton.joints.push_back({0, {0, 0, 0}});
    rig.mesh.vertices = {{0, 0, 0}, {0, 0, 1}, {-1, 0, 0}, {-1, 0, 1}, {1, 0, 0}, {1, 0, 1}};
    rig.mesh.triangles = {{{2, 0, 1}}, {{2, 1, 3}}, {{0, 4, 5}}, {{0, 5, 1}}};
    rig.mesh.part_count = 2;
    rig.mesh.latent_dim = latent_dim;
    rig.mesh.blend_weights = {1, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1};
    rig.mesh.latents.assign(rig.mesh.vertices.size() * size_t(latent_dim), 0.0);
    for (size_t i = 0; i < rig.mesh.latents.size(); ++i)
        rig.mesh.latents[i] = 0.01 * double(i % 7);
    rig.mesh.colors.assign(rig.mesh.vertices.size(), Vec3d{0.6, 0.6, 0.6});
    rig.mesh.finalize();
    rig.mesh.validate();
    return scene;
}

inline PosedMesh pose_mesh(const Rig& rig, const Pose& pose) {
    return PosedMesh::build(rig.mesh, rig.skeleton, pose);
}

inline PosedMesh rest_mesh(const Rig& rig) {
    return pose_mesh(rig, Pose::rest(rig.skeleton.part_count()));
}

}  // namespace mgnerf::fix
