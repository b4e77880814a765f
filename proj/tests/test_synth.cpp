#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "fixtures.hpp"
#include "mgnerf/synth.hpp"

using namespace mgnerf;

TEST_CASE("rasterizer: empty mesh gives black image and empty mask", "[synth]") {
    PosedMesh pm;
    RiggedMesh empty;
    pm.rig = &empty;
    Camera cam;
    cam.fx = cam.fy = 50;
    cam.cx = cam.cy = 16;
    cam.width = cam.height = 32;
    cam.rotation = Mat3d::identity();
    GroundTruth g = rasterize_ground_truth(pm, cam);
    for (double v : g.rgb.data) CHECK(v == 0.0);
    for (double v : g.mask.data) CHECK(v == 0.0);
}

TEST_CASE("rasterizer: full-screen triangle with light along the normal", "[synth]") {
    // Triangle at z=2 spanning far beyond the frustum, red, normal (0,0,-1)
    // toward the camera at the origin. With towards_light = normal the
    // Lambert term is 1, so every covered pixel is exactly color * 1.
    Rig tri = fix::make_rigged({{-50, -50, 2}, {50, -50, 2}, {0, 90, 2}}, {{{0, 2, 1}}});
    tri.mesh.colors.assign(3, Vec3d{1, 0, 0});
    PosedMesh pm = fix::rest_mesh(tri);
    Camera cam;
    cam.fx = cam.fy = 30;
    cam.cx = cam.cy = 16;
    cam.width = cam.height = 32;
    cam.rotation = Mat3d::identity();
    SynthLight light;
    light.towards_light = {0, 0, -1};
    light.ambient = 0.3;
    GroundTruth g = rasterize_ground_truth(pm, cam, light);
    for (size_t p = 0; p < g.mask.pixel_count(); ++p) {
        REQUIRE(g.mask.data[p] == 1.0);
        CHECK(g.rgb.data[p * 3 + 0] == Catch::Approx(1.0));
        CHECK(g.rgb.data[p * 3 + 1] == 0.0);
        CHECK(g.rgb.data[p * 3 + 2] == 0.0);
    }

    // light orthogonal to the normal leaves only the ambient term
    light.towards_light = {1, 0, 0};
    GroundTruth amb = rasterize_ground_truth(pm, cam, light);
    CHECK(amb.rgb.data[0] == Catch::Approx(0.3));
}

TEST_CASE("rasterizer: mask grows as the camera approaches a convex body", "[synth]") {
    Rig cube = fix::make_cube(0.8);
    PosedMesh pm = fix::rest_mesh(cube);
    auto coverage = [&](double dist) {
        Camera cam;
        cam.fx = cam.fy = 40;
        cam.cx = cam.cy = 24;
        cam.width = cam.height = 48;
        cam.rotation = Mat3d::identity();
        cam.translation = {0, 0, dist};
        GroundTruth g = rasterize_ground_truth(pm, cam);
        double s = 0;
        for (double v : g.mask.data) s += v;
        return s;
    };
    double far = coverage(4.0), mid = coverage(3.0), near = coverage(2.0);
    CHECK(far < mid);
    CHECK(mid < near);
}

TEST_CASE("perturb_pose: sigma 0 is identity, variance matches sigma^2", "[synth]") {
    Pose pose = Pose::rest(11);
    pose.joint_rotations[3] = {0.2, -0.1, 0.4};
    pose.root_translation = {1, 2, 3};
    Rng rng(5);
    Pose same = perturb_pose(pose, 0.0, rng);
    for (size_t j = 0; j < pose.size(); ++j)
        CHECK(norm(same.joint_rotations[j] - pose.joint_rotations[j]) == 0.0);

    // sample variance over ~1e5 draws within 2%
    const double sigma = 0.08;
    double sum = 0, sum2 = 0;
    int n = 0;
    Rng rng2(7);
    for (int trial = 0; trial < 3100; ++trial) {
        Pose p = perturb_pose(pose, sigma, rng2);
        CHECK(norm(p.root_translation - pose.root_translation) == 0.0);  // untouched
        for (size_t j = 0; j < p.size(); ++j) {
            Vec3d d = p.joint_rotations[j] - pose.joint_rotations[j];
            for (double v : {d.x, d.y, d.z}) { sum += v; sum2 += v * v; ++n; }
        }
    }
    double var = sum2 / n - sqr(sum / n);
    CHECK(var == Catch::Approx(sigma * sigma).epsilon(0.02));
    CHECK_THROWS_AS(perturb_pose(pose, -0.1, rng), ArgumentError);

    // fixed seed reproducibility
    Rng a(9), b(9);
    Pose pa = perturb_pose(pose, 0.05, a), pb = perturb_pose(pose, 0.05, b);
    for (size_t j = 0; j < pa.size(); ++j)
        CHECK(norm(pa.joint_rotations[j] - pb.joint_rotations[j]) == 0.0);
}

TEST_CASE("generate_sequence: exact initialization at sigma 0, deterministic bytes", "[synth]") {
    SequenceSpec spec;
    spec.frame_count = 3;
    spec.width = spec.height = 24;
    spec.seed = 11;
    SynthSequence a = generate_sequence(spec);
    REQUIRE(a.images.size() == 3);
    for (size_t f = 0; f < 3; ++f)
        for (size_t j = 0; j < a.gt_poses[f].size(); ++j)
            CHECK(norm(a.gt_poses[f].joint_rotations[j] - a.init_poses[f].joint_rotations[j]) ==
                  0.0);

    SynthSequence b = generate_sequence(spec);
    for (size_t f = 0; f < 3; ++f) CHECK(a.images[f].data == b.images[f].data);

    spec.pose_sigma = 0.1;
    SynthSequence c = generate_sequence(spec);
    bool any_moved = false;
    for (size_t f = 0; f < 3; ++f)
        for (size_t j = 0; j < c.gt_poses[f].size(); ++j)
            if (norm(c.gt_poses[f].joint_rotations[j] - c.init_poses[f].joint_rotations[j]) > 0)
                any_moved = true;
    CHECK(any_moved);
}

TEST_CASE("turning trajectory oscillates the silhouette centroid", "[synth]") {
    // pure turn: constant asymmetric arm bends, no limb swing, so the
    // centroid trace is a clean single cycle
    SequenceSpec spec;
    spec.frame_count = 16;
    spec.width = spec.height = 48;
    spec.seed = 3;
    spec.trajectory.swing = 0.0;
    spec.trajectory.knee_swing = 0.0;
    SynthSequence seq = generate_sequence(spec);
    std::vector<double> cx;
    for (const Image& m : seq.masks) {
        double sx = 0, sm = 0;
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x) {
                sx += m.at(x, y, 0) * x;
                sm += m.at(x, y, 0);
            }
        cx.push_back(sx / sm);
    }
    double mean = 0;
    for (double v : cx) mean += v;
    mean /= double(cx.size());
    double amp = 0;
    for (double v : cx) amp = std::max(amp, std::abs(v - mean));
    REQUIRE(amp > 0.1);  // pixels of asymmetry swing
    // one oscillation over the turn: the first Fourier harmonic of the
    // mean-centered signal dominates all higher harmonics combined
    const double pi = 3.14159265358979323846;
    const int n = int(cx.size());
    auto harmonic = [&](int k) {
        double re = 0, im = 0;
        for (int i = 0; i < n; ++i) {
            re += (cx[size_t(i)] - mean) * std::cos(2 * pi * k * i / n);
            im += (cx[size_t(i)] - mean) * std::sin(2 * pi * k * i / n);
        }
        return std::sqrt(re * re + im * im);
    };
    double first = harmonic(1), rest = 0;
    for (int k = 2; k <= n / 2; ++k) rest += harmonic(k);
    CHECK(first > rest);
}

TEST_CASE("generated keypoints fall inside the image", "[synth]") {
    SequenceSpec spec;
    spec.frame_count = 6;
    spec.width = spec.height = 40;
    SynthSequence seq = generate_sequence(spec);
    PartTransforms g;
    for (size_t f = 0; f < seq.gt_poses.size(); ++f) {
        g = forward_kinematics(seq.rig.skeleton, seq.gt_poses[f]);
        for (int j = 0; j < seq.rig.skeleton.part_count(); ++j) {
            double u, v;
            REQUIRE(seq.camera.project(joint_world_position(seq.rig.skeleton, g, j), u, v));
            CHECK(u >= 0);
            CHECK(u <= 40);
            CHECK(v >= 0);
            CHECK(v <= 40);
        }
    }
}

TEST_CASE("dataset round trip through the directory layout", "[synth]") {
    SequenceSpec spec;
    spec.frame_count = 2;
    spec.width = spec.height = 16;
    spec.seed = 13;
    spec.pose_sigma = 0.03;
    SynthSequence seq = generate_sequence(spec);
    std::string dir =
        (std::filesystem::temp_directory_path() / "mgnerf_test_dataset").string();
    std::filesystem::remove_all(dir);
    save_sequence(seq, dir);
    for (const char* name : {"frame_0000.png", "mask_0000.png", "frame_0001.png",
                             "mask_0001.png", "poses.json", "camera.json", "rig.json"})
        CHECK(std::filesystem::exists(dir + "/" + name));

    SynthSequence back = load_sequence(dir);
    REQUIRE(back.images.size() == 2);
    CHECK(back.camera.fx == seq.camera.fx);
    for (size_t f = 0; f < 2; ++f) {
        for (size_t j = 0; j < seq.gt_poses[f].size(); ++j) {
            CHECK(norm(back.gt_poses[f].joint_rotations[j] -
                       seq.gt_poses[f].joint_rotations[j]) < 1e-15);
            CHECK(norm(back.init_poses[f].joint_rotations[j] -
                       seq.init_poses[f].joint_rotations[j]) < 1e-15);
        }
        // images round-trip through 8-bit quantization
        for (size_t i = 0; i < back.images[f].data.size(); ++i)
            CHECK(std::abs(back.images[f].data[i] - seq.images[f].data[i]) <= 0.5 / 255.0 + 1e-9);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("png round trip is byte exact after quantization", "[synth][image]") {
    Image img(9, 7, 4);
    Rng rng(17);
    for (auto& v : img.data) v = rng.uniform();
    std::string path = (std::filesystem::temp_directory_path() / "mgnerf_test_rt.png").string();
    write_png(path, img);
    Image back = read_png(path, 4);
    REQUIRE(back.width == 9);
    REQUIRE(back.height == 7);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(to_byte(img.data[i]) == to_byte(back.data[i]));
    CHECK_THROWS_AS(read_png("/nonexistent/nope.png", 3), DataError);
    std::filesystem::remove(path);
}
