// Ground-truth data factory: raytraces the textured, posed procedural body
// into monocular train/eval sequences with known cameras and poses. The
// rasterizer is the appearance oracle the volume renderer is trained against:
// per-pixel nearest ray-triangle hit, barycentric vertex colors, Lambertian
// shading from one fixed directional light.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mgnerf/errors.hpp"
#include "mgnerf/image.hpp"
#include "mgnerf/math.hpp"
#include "mgnerf/render.hpp"
#include "mgnerf/rig.hpp"
#include "mgnerf/rng.hpp"
#include "mgnerf/spatial.hpp"

namespace mgnerf {

inline std::vector<Vec3d> compute_vertex_normals(const std::vector<Vec3d>& positions,
                                                 const std::vector<std::array<int, 3>>& tris) {
    std::vector<Vec3d> normals(positions.size(), {0, 0, 0});
    for (const auto& t : tris) {
        Vec3d n = cross(positions[t[1]] - positions[t[0]], positions[t[2]] - positions[t[0]]);
        for (int e = 0; e < 3; ++e) normals[t[e]] += n;  // area-weighted
    }
    for (auto& n : normals) {
        double len = norm(n);
        if (len > 1e-12) n = n / len;
    }
    return normals;
}

struct SynthLight {
    Vec3d towards_light = normalized(Vec3d{0.25, 0.5, -0.83});  // surface -> light
    double ambient = 0.3;
};

struct GroundTruth {
    Image rgb;   // 3 channels
    Image mask;  // 1 channel, hit indicator
};

// shade = ambient + (1-ambient) * max(0, n . l) with the normal taken from
// the rest pose, i.e. the Lambert term is baked into a per-surface-point
// texture. Appearance is then a pure function of the canonical surface point,
// which is the appearance model a pose-invariant canonical field can actually
// represent; a light fixed in world space while the body turns would tie
// color to the global orientation that the query embedding removes.
inline GroundTruth rasterize_ground_truth(const PosedMesh& mesh, const Camera& camera,
                                          const SynthLight& light = {}) {
    camera.validate();
    GroundTruth out;
    out.rgb = Image(camera.width, camera.height, 3);
    out.mask = Image(camera.width, camera.height, 1);
    if (mesh.positions.empty() || mesh.rig == nullptr || mesh.rig->triangles.empty()) return out;

    std::vector<Vec3d> normals =
        compute_vertex_normals(mesh.rig->vertices, mesh.rig->triangles);
    const auto& tris = mesh.rig->triangles;
    const auto& colors = mesh.rig->colors;

    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            Vec3d o, d;
            camera.pixel_ray(x, y, o, d);
            double best_t = std::numeric_limits<double>::infinity();
            int best_tri = -1;
            double bu = 0, bv = 0;
            mesh.tree.for_each_ray_candidate(o, d, [&](int t) {
                double u, v;
                auto hit = ray_triangle(o, d, mesh.positions[tris[t][0]],
                                        mesh.positions[tris[t][1]], mesh.positions[tris[t][2]],
                                        &u, &v);
                if (!hit) return;
                if (*hit < best_t || (*hit == best_t && t < best_tri)) {
                    best_t = *hit;
                    best_tri = t;
                    bu = u;
                    bv = v;
                }
            });
            if (best_tri < 0) continue;
            const auto& t = tris[best_tri];
            double w0 = 1.0 - bu - bv;
            Vec3d color = colors[t[0]] * w0 + colors[t[1]] * bu + colors[t[2]] * bv;
            Vec3d n = normals[t[0]] * w0 + normals[t[1]] * bu + normals[t[2]] * bv;
            double len = norm(n);
            if (len > 1e-12) n = n / len;
            double shade =
                light.ambient + (1.0 - light.ambient) * std::max(0.0, dot(n, light.towards_light));
            out.rgb.at(x, y, 0) = color.x * shade;
            out.rgb.at(x, y, 1) = color.y * shade;
            out.rgb.at(x, y, 2) = color.z * shade;
            out.mask.at(x, y, 0) = 1.0;
        }
    return out;
}

// Gaussian noise on every joint rotation component; the root translation is
// untouched.
inline Pose perturb_pose(const Pose& pose, double sigma, Rng& rng) {
    if (sigma < 0.0) throw ArgumentError("perturb_pose: sigma must be >= 0");
    Pose out = pose;
    for (auto& r : out.joint_rotations) {
        r.x += sigma * rng.normal();
        r.y += sigma * rng.normal();
        r.z += sigma * rng.normal();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pose trajectory: a full turn about the vertical axis with asymmetric arm
// bends and a light limb swing, so frames cover distinct deformations.

struct TurningTrajectory {
    double yaw_turns = 1.0;
    double arm_bend_left = 1.1;
    double arm_bend_right = 0.15;
    double swing = 0.25;
    double knee_swing = 0.2;
    double sway = 0.06;  // lateral root drift over the turn (world units)

    Pose pose_at(double t01, int joint_count) const {
        const double pi = 3.14159265358979323846;
        Pose p = Pose::rest(joint_count);
        p.joint_rotations[0] = {0.0, 2.0 * pi * yaw_turns * t01, 0.0};  // pelvis yaw
        p.root_translation = {sway * std::sin(2.0 * pi * t01), 0.0, 0.0};
        p.joint_rotations[1] = {0.0, 0.0, 0.08 * std::sin(2.0 * pi * t01)};  // spine sway
        // Elbows bend about z (arms extend along +-x in the rest pose).
        p.joint_rotations[4] = {0.0, 0.0, arm_bend_left + swing * std::sin(4.0 * pi * t01)};
        p.joint_rotations[6] = {0.0, 0.0, -(arm_bend_right + swing * std::cos(4.0 * pi * t01))};
        // Shoulders swing a little, knees about x.
        p.joint_rotations[3] = {0.0, 0.0, 0.6 * swing * std::sin(4.0 * pi * t01 + 0.7)};
        p.joint_rotations[5] = {0.0, 0.0, -0.6 * swing * std::cos(4.0 * pi * t01 + 0.4)};
        p.joint_rotations[8] = {knee_swing * std::max(0.0, std::sin(4.0 * pi * t01)), 0.0, 0.0};
        p.joint_rotations[10] = {knee_swing * std::max(0.0, -std::sin(4.0 * pi * t01)), 0.0, 0.0};
        return p;
    }
};

struct SequenceSpec {
    int frame_count = 8;
    int width = 64, height = 64;
    uint64_t seed = 1;
    double pose_sigma = 0.0;   // stddev of the initial-pose perturbation
    double time_offset = 0.0;  // in frames; 0.5 yields in-between (novel) poses
    double camera_distance = 4.2;
    BodyConfig body;
    TurningTrajectory trajectory;
    SynthLight light;

    void validate() const {
        if (frame_count < 1) throw ArgumentError("sequence: frame_count must be >= 1");
        if (pose_sigma < 0) throw ArgumentError("sequence: pose_sigma must be >= 0");
        if (width < 8 || height < 8) throw ArgumentError("sequence: image too small");
        body.validate();
    }

    Camera make_camera() const {
        Camera cam;
        cam.width = width;
        cam.height = height;
        const double body_span = 1.05 * body.height;
        cam.fx = cam.fy = 0.85 * height * camera_distance / body_span;
        cam.cx = 0.5 * width;
        cam.cy = 0.5 * height;
        // Looks along +z at the body center, world +y up in the image.
        cam.rotation = Mat3d::zero();
        cam.rotation(0, 0) = -1.0;
        cam.rotation(1, 1) = -1.0;
        cam.rotation(2, 2) = 1.0;
        cam.translation = {0.0, 0.53 * body.height, camera_distance};
        return cam;
    }
};

struct SynthSequence {
    Rig rig;
    Camera camera;
    std::vector<Image> images, masks;
    std::vector<Pose> gt_poses, init_poses;
};

inline SynthSequence generate_sequence(const SequenceSpec& spec) {
    spec.validate();
    SynthSequence seq;
    seq.rig = make_procedural_body(spec.seed, spec.body);
    seq.camera = spec.make_camera();
    Rng noise_rng(derive_seed(spec.seed, 0x706f7365));  // pose noise stream
    const int joints = seq.rig.skeleton.part_count();
    for (int i = 0; i < spec.frame_count; ++i) {
        double t01 = (double(i) + spec.time_offset) / double(spec.frame_count);
        Pose gt = spec.trajectory.pose_at(t01, joints);
        PosedMesh pm = PosedMesh::build(seq.rig.mesh, seq.rig.skeleton, gt);
        GroundTruth g = rasterize_ground_truth(pm, seq.camera, spec.light);
        seq.images.push_back(std::move(g.rgb));
        seq.masks.push_back(std::move(g.mask));
        seq.gt_poses.push_back(gt);
        seq.init_poses.push_back(spec.pose_sigma > 0.0 ? perturb_pose(gt, spec.pose_sigma, noise_rng)
                                                       : gt);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// On-disk dataset layout: frame_%04d.png, mask_%04d.png, poses.json,
// camera.json, rig.json.

inline nlohmann::json camera_to_json(const Camera& cam) {
    return {{"version", "camera_v1"},
            {"fx", cam.fx},
            {"fy", cam.fy},
            {"cx", cam.cx},
            {"cy", cam.cy},
            {"width", cam.width},
            {"height", cam.height},
            {"rotation", std::vector<double>(cam.rotation.m.begin(), cam.rotation.m.end())},
            {"translation", {cam.translation.x, cam.translation.y, cam.translation.z}}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || j["version"] != "camera_v1")
        throw DataError("camera: unsupported or missing version (expected camera_v1)");
    Camera cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    auto r = j.at("rotation").get<std::vector<double>>();
    if (r.size() != 9) throw DataError("camera: rotation must have 9 entries");
    std::copy(r.begin(), r.end(), cam.rotation.m.begin());
    auto t = j.at("translation").get<std::vector<double>>();
    if (t.size() != 3) throw DataError("camera: translation must have 3 entries");
    cam.translation = {t[0], t[1], t[2]};
    cam.validate();
    return cam;
}

inline nlohmann::json poses_to_json(const std::vector<Pose>& gt, const std::vector<Pose>& init) {
    nlohmann::json j;
    j["version"] = "poses_v1";
    j["joint_count"] = gt.empty() ? 0 : int(gt[0].size());
    auto dump = [](const std::vector<Pose>& ps) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : ps) arr.push_back(p.to_flat());
        return arr;
    };
    j["gt"] = dump(gt);
    j["init"] = dump(init);
    return j;
}

inline void poses_from_json(const nlohmann::json& j, std::vector<Pose>& gt,
                            std::vector<Pose>& init) {
    if (!j.contains("version") || j["version"] != "poses_v1")
        throw DataError("poses: unsupported or missing version (expected poses_v1)");
    const size_t joints = size_t(j.at("joint_count").get<int>());
    auto parse = [&](const nlohmann::json& arr, std::vector<Pose>& out) {
        for (const auto& f : arr) {
            auto flat = f.get<std::vector<double>>();
            if (flat.size() != Pose::flat_size(int(joints)))
                throw DataError("poses: wrong flat pose length");
            out.push_back(Pose::from_flat(flat.begin(), joints));
        }
    };
    parse(j.at("gt"), gt);
    parse(j.at("init"), init);
}

inline std::string frame_filename(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04d.png", i);
    return buf;
}
inline std::string mask_filename(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "mask_%04d.png", i);
    return buf;
}

inline void save_sequence(const SynthSequence& seq, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (size_t i = 0; i < seq.images.size(); ++i) {
        write_png(dir + "/" + frame_filename(int(i)), seq.images[i]);
        write_png(dir + "/" + mask_filename(int(i)), seq.masks[i]);
    }
    auto write_json = [&](const std::string& name, const nlohmann::json& j) {
        std::string tmp = dir + "/" + name + ".tmp";
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("save_sequence: cannot write " + name);
        out << j.dump(2);
        out.close();
        fs::rename(tmp, dir + "/" + name);
    };
    write_json("poses.json", poses_to_json(seq.gt_poses, seq.init_poses));
    write_json("camera.json", camera_to_json(seq.camera));
    write_json("rig.json", rig_to_json(seq.rig));
}

inline SynthSequence load_sequence(const std::string& dir) {
    namespace fs = std::filesystem;
    auto read_json = [&](const std::string& name) {
        std::ifstream in(dir + "/" + name, std::ios::binary);
        if (!in) throw DataError("load_sequence: missing " + dir + "/" + name);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("load_sequence: malformed " + name + ": " + e.what());
        }
        return j;
    };
    SynthSequence seq;
    seq.rig = rig_from_json(read_json("rig.json"));
    seq.camera = camera_from_json(read_json("camera.json"));
    poses_from_json(read_json("poses.json"), seq.gt_poses, seq.init_poses);
    for (size_t i = 0; i < seq.gt_poses.size(); ++i) {
        seq.images.push_back(read_png(dir + "/" + frame_filename(int(i)), 3));
        seq.masks.push_back(read_png(dir + "/" + mask_filename(int(i)), 1));
    }
    return seq;
}

}  // namespace mgnerf
